mod common;

use aef_core::aef::{PartitionKind, PartitionScheme};
use aef_core::config::{Activation, Variant};
use aef_core::data::{split_indices, DataShape};
use aef_core::flow::{AutoregressiveFlow, Bijection, BlockSplit, MadeLayer};
use aef_core::model::Model;
use aef_core::params::ParamStore;
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn shapes() -> impl Strategy<Value = DataShape> {
    prop_oneof![
        (2usize..40).prop_map(DataShape::vector),
        (1usize..4, 2usize..7, 2usize..7).prop_map(|(c, h, w)| DataShape::image(c, h, w)),
    ]
}

fn kinds() -> impl Strategy<Value = PartitionKind> {
    prop_oneof![
        Just(PartitionKind::Center),
        Just(PartitionKind::Corner),
        Just(PartitionKind::Random),
    ]
}

/// Center and corner blocks need a core size divisible by the channel count, and the
/// square block per channel must fit the image.
fn core_size(shape: DataShape, kind: PartitionKind, raw: usize) -> usize {
    let n = shape.numel();
    let raw = raw.clamp(1, n - 1);
    if kind == PartitionKind::Random || !shape.is_image() {
        return raw;
    }
    let c = shape.channels;
    let side = shape.height.min(shape.width);
    (raw / c).clamp(1, (side * side).min(shape.height * shape.width - 1)) * c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partitions_are_disjoint_and_cover(shape in shapes(), kind in kinds(), frac in 0.01f64..0.99, seed in 0u64..1000) {
        let n = shape.numel();
        let d = core_size(shape, kind, (n as f64 * frac) as usize);
        let p = PartitionScheme::new(kind, shape, d, seed).unwrap();
        let mut all: Vec<usize> = p.core().iter().copied().chain(p.shell()).collect();
        prop_assert_eq!(p.core().len(), d);
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&PartitionScheme::new(kind, shape, d, seed).unwrap(), &p);
    }

    #[test]
    fn block_split_merges_back(n in 2usize..30, seed in 0u64..1000, rows in 1usize..6) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng(seed));
        let k = 1 + (seed as usize % (n - 1));
        let split = BlockSplit::new(n, &idx[..k]).unwrap();
        let x = randn(rows, n, 1.0, seed);
        let (a, b) = split.split(&x).unwrap();
        prop_assert_eq!(a.dims(), &[rows, k]);
        prop_assert_eq!(to_rows(&split.merge(&a, &b).unwrap()), to_rows(&x));
    }

    #[test]
    fn validation_split_is_a_partition(n in 2usize..500, frac in 0.0f64..0.9, seed in 0u64..100) {
        let v = (n as f64 * frac) as usize;
        let (train, val) = split_indices(n, v, seed);
        prop_assert_eq!(val.len(), v);
        let mut all: Vec<usize> = train.into_iter().chain(val).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn made_layers_invert(dim in 1usize..12, hidden in 4usize..24, blocks in 0usize..3, seed in 0u64..500) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let mut ordering: Vec<usize> = (0..dim).collect();
        ordering.shuffle(&mut r);
        let made = MadeLayer::new(&mut store.builder(&mut r).pp("m"), dim, hidden.max(dim), blocks, Activation::Relu, ordering).unwrap();
        store.perturb("", 0.2, &mut r).unwrap();
        let x = randn(16, dim, 2.0, seed + 1);
        let (y, ld) = made.forward(&x).unwrap();
        let (back, ild) = made.inverse(&y).unwrap();
        let err = to_vec(&(back - &x).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err < 1e-9, "round trip error {}", err);
        let cancel = to_vec(&(ld + ild).unwrap()).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(cancel < 1e-9);
    }

    #[test]
    fn aef_round_trips_any_shape(shape in shapes(), kind in kinds(), seed in 0u64..200) {
        let n = shape.numel();
        let d = core_size(shape, kind, (n / 3).clamp(1, 4));
        let variant = match kind {
            PartitionKind::Center => Variant::AefCenter,
            PartitionKind::Corner => Variant::AefCorner,
            PartitionKind::Random => Variant::AefRandom,
        };
        let m = random_aef(&model_config(variant, d, &[8]), shape, seed, 0.1);
        let x = randn(8, n, 1.0, seed);
        let enc = m.encode_partitioned(&x).unwrap();
        let back = m.decode_partitioned(&enc.z, &enc.delta).unwrap();
        let err = to_vec(&(back - &x).unwrap()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(err < 1e-8, "round trip error {}", err);
    }
}

/// Finite-difference check that output `i` of every MADE conditioner depends only on
/// inputs that precede `i` in the layer's ordering.
#[test]
fn made_conditioner_is_autoregressive() {
    let dim = 6;
    let mut store = ParamStore::new();
    let mut r = rng(3);
    let ordering = vec![4, 1, 5, 0, 3, 2];
    let made = MadeLayer::new(&mut store.builder(&mut r).pp("m"), dim, 24, 2, Activation::Tanh, ordering.clone()).unwrap();
    store.perturb("", 0.3, &mut r).unwrap();
    let rank: Vec<usize> = (0..dim).map(|i| ordering.iter().position(|&o| o == i).unwrap()).collect();
    let x = randn(1, dim, 1.0, 4);
    let base = to_vec(&x);
    let h = 1e-4;
    for j in 0..dim {
        let mut plus = base.clone();
        plus[j] += h;
        let xp = from_rows(&[plus]);
        let (m0, s0) = made.conditioner_outputs(&x).unwrap();
        let (m1, s1) = made.conditioner_outputs(&xp).unwrap();
        let dm: Vec<f64> = to_vec(&(m1 - m0).unwrap());
        let ds: Vec<f64> = to_vec(&(s1 - s0).unwrap());
        for i in 0..dim {
            let depends = dm[i].abs() > 1e-14 || ds[i].abs() > 1e-14;
            if rank[j] >= rank[i] {
                assert!(!depends, "output {i} depends on input {j}");
            }
        }
    }
    // The last variable in the ordering must see the others, or the masks are degenerate.
    let last = ordering[dim - 1];
    let mut any = false;
    for j in 0..dim {
        if j == last {
            continue;
        }
        let mut plus = base.clone();
        plus[j] += h;
        let (m0, _) = made.conditioner_outputs(&x).unwrap();
        let (m1, _) = made.conditioner_outputs(&from_rows(&[plus])).unwrap();
        any |= (to_vec(&m1)[last] - to_vec(&m0)[last]).abs() > 1e-12;
    }
    assert!(any);
}

#[test]
fn autoregressive_flow_log_det_is_triangular_sum() {
    let mut store = ParamStore::new();
    let mut r = rng(9);
    let flow = AutoregressiveFlow::new(&mut store.builder(&mut r).pp("f"), 3, &small_flow()).unwrap();
    store.perturb("", 0.3, &mut r).unwrap();
    let x = randn(1, 3, 1.0, 10);
    let (_, ld) = flow.forward(&x).unwrap();
    let h = 1e-6;
    let base = to_vec(&x);
    let mut jac = nalgebra::DMatrix::zeros(3, 3);
    for j in 0..3 {
        let (mut p, mut m) = (base.clone(), base.clone());
        p[j] += h;
        m[j] -= h;
        let yp = to_vec(&flow.forward(&from_rows(&[p])).unwrap().0);
        let ym = to_vec(&flow.forward(&from_rows(&[m])).unwrap().0);
        for i in 0..3 {
            jac[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
        }
    }
    assert!((jac.determinant().abs().ln() - to_vec(&ld)[0]).abs() < 1e-6);
}

/// The AEF and VAE built from one config have comparable trainable parameter counts.
#[test]
fn aef_and_vae_have_parameter_parity() {
    let count = |variant: Variant, shape: DataShape, hidden: &[usize]| -> usize {
        let m = Model::new(&model_config(variant, 4, hidden), shape, &mut rng(0)).unwrap();
        m.params().trainable().map(|(_, v)| v.elem_count()).sum()
    };
    for (shape, hidden) in [
        (DataShape::vector(20), vec![64, 64]),
        (DataShape::image(1, 8, 8), vec![128]),
        (DataShape::vector(50), vec![256, 128]),
    ] {
        let vae = count(Variant::Vae, shape, &hidden) as f64;
        for variant in [Variant::AefLinear, Variant::AefCenter, Variant::AefCorner] {
            let aef = count(variant, shape, &hidden) as f64;
            let ratio = aef / vae;
            assert!((0.9..=1.1).contains(&ratio), "{} vs VAE parameter ratio {ratio:.3}", variant.as_str());
        }
    }
}
