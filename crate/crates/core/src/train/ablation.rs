use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};

/// Which of the two latent flows are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSetting {
    NoFlows,
    /// Core encoder flow (AEF) or posterior flow (VAE) only.
    LatentOnly,
    PriorOnly,
    Both,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 4] = [
        AblationSetting::NoFlows,
        AblationSetting::LatentOnly,
        AblationSetting::PriorOnly,
        AblationSetting::Both,
    ];

    pub fn flags(self) -> (bool, bool) {
        match self {
            AblationSetting::NoFlows => (false, false),
            AblationSetting::LatentOnly => (true, false),
            AblationSetting::PriorOnly => (false, true),
            AblationSetting::Both => (true, true),
        }
    }

    pub fn label(self, variant: Variant) -> &'static str {
        match (self, variant) {
            (AblationSetting::NoFlows, _) => "no-flows",
            (AblationSetting::LatentOnly, Variant::Vae) => "posterior-only",
            (AblationSetting::LatentOnly, _) => "core-only",
            (AblationSetting::PriorOnly, _) => "prior-only",
            (AblationSetting::Both, _) => "both",
        }
    }
}

/// The four flow settings for the model family of `base`.
pub fn ablation_matrix(base: &RunConfig) -> Vec<(AblationSetting, RunConfig)> {
    AblationSetting::ALL
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            let (latent, prior) = s.flags();
            cfg.model.latent_flow = latent;
            cfg.model.prior_flow = prior;
            cfg.name = format!("{}-{}-{}", base.name, base.model.variant.as_str(), s.label(base.model.variant));
            (s, cfg)
        })
        .collect()
}

/// Ablation matrices for an AEF family and the VAE built from the same base config.
///
/// An AEF base keeps its variant; a VAE (or deterministic AE) base is paired with `aef-linear`.
pub fn ablation_suite(base: &RunConfig) -> Vec<(AblationSetting, RunConfig)> {
    let mut aef = base.clone();
    if !aef.model.variant.is_aef() {
        aef.model.variant = Variant::AefLinear;
    }
    let mut vae = base.clone();
    vae.model.variant = Variant::Vae;
    let mut out = ablation_matrix(&aef);
    out.extend(ablation_matrix(&vae));
    out
}
