use std::path::Path;

use aef_core::data::DataShape;
use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};

/// 8-bit value of an intensity in `[0, 1]`.
pub fn quantize(x: f64) -> u8 {
    let v = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0 - 1e-6) };
    (v * 256.0).floor() as u8
}

/// Cells per side of a square grid holding `count` items.
pub fn grid_side(count: usize) -> usize {
    (count as f64).sqrt().ceil() as usize
}

/// Pixel size of one cell: images keep their layout, vectors become a `1 x n` strip.
fn cell_size(shape: DataShape) -> (usize, usize) {
    (shape.width, shape.height)
}

/// Renders rows of samples into a canvas of `cols x rows` cells, row-major.
/// Cells without a sample stay black.
pub fn render(samples: &[Vec<f64>], shape: DataShape, cols: usize, rows: usize) -> Result<Canvas> {
    if samples.len() > cols * rows {
        bail!("{} samples do not fit a {cols}x{rows} grid", samples.len());
    }
    let (cw, ch) = cell_size(shape);
    let (w, h) = ((cols * cw) as u32, (rows * ch) as u32);
    let plane = shape.height * shape.width;
    let mut canvas = match shape.channels {
        1 => Canvas::Gray(GrayImage::new(w, h)),
        3 => Canvas::Rgb(RgbImage::new(w, h)),
        c => bail!("cannot render images with {c} channels"),
    };
    for (i, s) in samples.iter().enumerate() {
        if s.len() != shape.numel() {
            bail!("sample has {} values, expected {}", s.len(), shape.numel());
        }
        let (ox, oy) = ((i % cols) * cw, (i / cols) * ch);
        for y in 0..shape.height {
            for x in 0..shape.width {
                let at = (ox + x) as u32;
                let row = (oy + y) as u32;
                let p = y * shape.width + x;
                match &mut canvas {
                    Canvas::Gray(img) => img.put_pixel(at, row, Luma([quantize(s[p])])),
                    Canvas::Rgb(img) => img.put_pixel(
                        at,
                        row,
                        Rgb([quantize(s[p]), quantize(s[plane + p]), quantize(s[2 * plane + p])]),
                    ),
                }
            }
        }
    }
    Ok(canvas)
}

pub enum Canvas {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Canvas {
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Canvas::Gray(img) => img.save(path),
            Canvas::Rgb(img) => img.save(path),
        }
        .with_context(|| format!("writing {}", path.display()))
    }
}

/// Square grid of `samples` with `⌈√count⌉` cells per side.
pub fn write_grid(path: &Path, samples: &[Vec<f64>], shape: DataShape) -> Result<()> {
    let side = grid_side(samples.len()).max(1);
    render(samples, shape, side, side)?.save(path)
}

/// One band of cells per entry of `bands`, stacked top to bottom.
pub fn write_bands(path: &Path, bands: &[&[Vec<f64>]], shape: DataShape) -> Result<()> {
    let cols = bands.iter().map(|b| b.len()).max().unwrap_or(0).max(1);
    let mut all = Vec::with_capacity(cols * bands.len());
    for band in bands {
        all.extend(band.iter().cloned());
        // Pad short bands so the next one starts on a fresh row.
        all.extend(std::iter::repeat_n(Vec::new(), cols - band.len()));
    }
    let blank = vec![0.0; shape.numel()];
    let filled: Vec<Vec<f64>> = all
        .into_iter()
        .map(|v| if v.is_empty() { blank.clone() } else { v })
        .collect();
    render(&filled, shape, cols, bands.len())?.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_edges() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn grid_side_is_ceil_sqrt() {
        assert_eq!(grid_side(1), 1);
        assert_eq!(grid_side(4), 2);
        assert_eq!(grid_side(5), 3);
        assert_eq!(grid_side(16), 4);
        assert_eq!(grid_side(17), 5);
    }

    #[test]
    fn grid_layout() {
        let shape = DataShape::image(1, 2, 3);
        let samples: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 / 10.0; 6]).collect();
        let Canvas::Gray(img) = render(&samples, shape, 3, 3).unwrap() else {
            panic!("expected grayscale");
        };
        assert_eq!(img.dimensions(), (9, 6));
        assert_eq!(img.get_pixel(3, 0).0[0], quantize(0.1));
        assert_eq!(img.get_pixel(4, 3).0[0], quantize(0.4));
        assert_eq!(img.get_pixel(8, 5).0[0], 0);
    }
}
