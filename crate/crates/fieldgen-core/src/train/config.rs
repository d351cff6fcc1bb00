//! Run configuration: JSON files with two built-in profiles.
//!
//! `desk` is the trainable CPU-scale profile (64x64 fields, d = 128, 4
//! layers); `paper` mirrors the published dimensions (256x256, d = 1024, 12
//! layers, 16 heads) for shape and audit work. Unknown keys anywhere in the
//! file are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::SourceGeometrySpec;
use crate::diffusion::{LossWeights, SamplerConfig};
use crate::dit::DitConfig;
use crate::error::FieldgenError;
use crate::prior::BlendSchedule;
use crate::vae::VaeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

/// Model dimensions implied by a profile.
#[derive(Clone, Debug, Serialize)]
pub struct ModelSpec {
    pub image_size: usize,
    pub vae: VaeConfig,
    pub dit: DitConfig,
    pub prior_base_width: usize,
    pub diffusion_steps: usize,
}

impl ModelSpec {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                image_size: 64,
                vae: VaeConfig::desk(),
                dit: DitConfig::desk(),
                prior_base_width: 32,
                diffusion_steps: 1000,
            },
            Profile::Paper => Self {
                image_size: 256,
                vae: VaeConfig::paper(),
                dit: DitConfig::paper(),
                prior_base_width: 128,
                diffusion_steps: 1000,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    pub samples: usize,
    pub seed: u64,
    pub fdtd_steps: usize,
    pub heldout_fraction: f64,
    /// Hz value mapped to image intensity 1.0.
    pub clip_amplitude: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub vae_epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub vae_lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub blend: BlendSchedule,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub cfg_drop_prob: f64,
}

#[derive(Clone, Debug)]
pub struct SampleCommand {
    pub checkpoint: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub source: Option<SourceGeometrySpec>,
    pub sample_file: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct EvalCommand {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub seed: u64,
}

/// Fully resolved configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelSpec,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub sample: SampleCommand,
    pub eval: EvalCommand,
}

// ── file schema ──────────────────────────────────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetOverrides {
    dir: Option<PathBuf>,
    samples: Option<usize>,
    seed: Option<u64>,
    fdtd_steps: Option<usize>,
    heldout_fraction: Option<f64>,
    clip_amplitude: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverrides {
    epochs: Option<u64>,
    vae_epochs: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    vae_lr: Option<f64>,
    weight_decay: Option<f64>,
    weights: Option<LossWeights>,
    blend_horizon: Option<u64>,
    seed: Option<u64>,
    checkpoint_every: Option<u64>,
    eval_every: Option<u64>,
    eval_samples: Option<usize>,
    cfg_drop_prob: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleOverrides {
    checkpoint: Option<PathBuf>,
    steps: Option<usize>,
    guidance: Option<f64>,
    eta: Option<f64>,
    seed: Option<u64>,
    source: Option<SourceGeometrySpec>,
    sample_file: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOverrides {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    profile: Profile,
    #[serde(default)]
    dataset: DatasetOverrides,
    #[serde(default)]
    train: TrainOverrides,
    #[serde(default)]
    sample: SampleOverrides,
    #[serde(default)]
    eval: EvalOverrides,
}

impl RunConfig {
    /// Profile defaults with no file overrides.
    pub fn for_profile(profile: Profile) -> Self {
        resolve(RunConfigFile {
            profile,
            dataset: Default::default(),
            train: Default::default(),
            sample: Default::default(),
            eval: Default::default(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self, FieldgenError> {
        let file: RunConfigFile = serde_json::from_str(text)
            .map_err(|e| FieldgenError::Config(format!("config parse: {e}")))?;
        let cfg = resolve(file);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, FieldgenError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            FieldgenError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), FieldgenError> {
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(FieldgenError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.cfg_drop_prob) {
            return Err(FieldgenError::Config("cfg_drop_prob outside [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dataset.heldout_fraction) {
            return Err(FieldgenError::Config("heldout_fraction outside [0, 1)".into()));
        }
        if self.dataset.clip_amplitude <= 0.0 {
            return Err(FieldgenError::Config("clip_amplitude must be positive".into()));
        }
        if t.blend.horizon == 0 {
            return Err(FieldgenError::Config("blend horizon must be positive".into()));
        }
        for (name, w) in [
            ("diff", t.weights.diff),
            ("recon", t.weights.recon),
            ("edge", t.weights.edge),
            ("perc", t.weights.perc),
            ("prior", t.weights.prior),
        ] {
            if w < 0.0 {
                return Err(FieldgenError::Config(format!("loss weight {name} negative")));
            }
        }
        self.model.vae.validate().map_err(|e| FieldgenError::Config(e.to_string()))?;
        self.model.dit.validate().map_err(|e| FieldgenError::Config(e.to_string()))?;
        self.sample
            .sampler
            .validate(self.model.diffusion_steps)
            .map_err(|e| FieldgenError::Config(e.to_string()))?;
        Ok(())
    }

    /// Digest over the reproducibility-relevant sections (profile, model,
    /// dataset, train). Sample/eval knobs do not affect checkpoint
    /// compatibility.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Digestable<'a> {
            profile: Profile,
            model: &'a ModelSpec,
            dataset: &'a DatasetConfig,
            train: &'a TrainConfig,
        }
        let json = serde_json::to_vec(&Digestable {
            profile: self.profile,
            model: &self.model,
            dataset: &self.dataset,
            train: &self.train,
        })
        .expect("config digest serialization");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn resolve(file: RunConfigFile) -> RunConfig {
    let profile = file.profile;
    let model = ModelSpec::for_profile(profile);
    let (def_samples, def_fdtd_steps) = match profile {
        Profile::Desk => (200usize, 2_000usize),
        Profile::Paper => (100_000, 12_000),
    };
    let d = file.dataset;
    let dataset = DatasetConfig {
        dir: d.dir.unwrap_or_else(|| PathBuf::from("data")),
        samples: d.samples.unwrap_or(def_samples),
        seed: d.seed.unwrap_or(0),
        fdtd_steps: d.fdtd_steps.unwrap_or(def_fdtd_steps),
        heldout_fraction: d.heldout_fraction.unwrap_or(0.1),
        clip_amplitude: d.clip_amplitude.unwrap_or(1.0),
    };
    let (def_epochs, def_vae_epochs, def_lr, def_vae_lr) = match profile {
        Profile::Desk => (30u64, 15u64, 3e-4, 1e-3),
        Profile::Paper => (1_820, 50, 1e-5, 1e-5),
    };
    let t = file.train;
    let train = TrainConfig {
        epochs: t.epochs.unwrap_or(def_epochs),
        vae_epochs: t.vae_epochs.unwrap_or(def_vae_epochs),
        batch_size: t.batch_size.unwrap_or(4),
        lr: t.lr.unwrap_or(def_lr),
        vae_lr: t.vae_lr.unwrap_or(def_vae_lr),
        weight_decay: t.weight_decay.unwrap_or(0.01),
        weights: t.weights.unwrap_or_default(),
        blend: BlendSchedule {
            horizon: t.blend_horizon.unwrap_or(1000),
            ..BlendSchedule::default()
        },
        seed: t.seed.unwrap_or(0),
        checkpoint_every: t.checkpoint_every.unwrap_or(10),
        eval_every: t.eval_every.unwrap_or(10),
        eval_samples: t.eval_samples.unwrap_or(16),
        cfg_drop_prob: t.cfg_drop_prob.unwrap_or(0.1),
    };
    let s = file.sample;
    let sample = SampleCommand {
        checkpoint: s.checkpoint,
        sampler: SamplerConfig {
            steps: s.steps.unwrap_or(25),
            guidance: s.guidance.unwrap_or(2.5),
            eta: s.eta.unwrap_or(0.0),
            seed: s.seed.unwrap_or(0),
        },
        source: s.source,
        sample_file: s.sample_file,
    };
    let e = file.eval;
    let eval = EvalCommand {
        checkpoint: e.checkpoint,
        dataset: e.dataset,
        seed: e.seed.unwrap_or(0),
    };
    RunConfig { profile, model, dataset, train, sample, eval }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_defaults() {
        let cfg = RunConfig::for_profile(Profile::Desk);
        assert_eq!(cfg.model.image_size, 64);
        assert_eq!(cfg.model.dit.dim, 128);
        assert_eq!(cfg.model.dit.depth, 4);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.dataset.samples, 200);
        assert_eq!(cfg.sample.sampler.steps, 25);
        assert_eq!(cfg.sample.sampler.guidance, 2.5);
        cfg.validate().unwrap();
    }

    #[test]
    fn paper_profile_mirrors_published_dimensions() {
        let cfg = RunConfig::for_profile(Profile::Paper);
        assert_eq!(cfg.model.image_size, 256);
        assert_eq!(cfg.model.dit.dim, 1024);
        assert_eq!(cfg.model.dit.depth, 12);
        assert_eq!(cfg.model.dit.heads, 16);
        assert_eq!(cfg.model.vae.latent_channels, 1024);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.lr, 1e-5);
        assert_eq!(cfg.train.epochs, 1820);
        assert_eq!(cfg.dataset.samples, 100_000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"profile":"desk","bogus":1}"#).unwrap_err();
        assert!(matches!(err, FieldgenError::Config(_)));
        let err =
            RunConfig::from_json(r#"{"profile":"desk","train":{"lr":0.001,"nope":2}}"#).unwrap_err();
        assert!(matches!(err, FieldgenError::Config(_)));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_json(
            r#"{"profile":"desk","train":{"epochs":5,"lr":0.01},"dataset":{"samples":12}}"#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.dataset.samples, 12);
        // Untouched defaults survive.
        assert_eq!(cfg.train.vae_epochs, 15);
    }

    #[test]
    fn digest_tracks_training_but_not_sampling_knobs() {
        let a = RunConfig::from_json(r#"{"profile":"desk"}"#).unwrap();
        let b = RunConfig::from_json(r#"{"profile":"desk","sample":{"seed":99}}"#).unwrap();
        let c = RunConfig::from_json(r#"{"profile":"desk","train":{"lr":0.5}}"#).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_json(r#"{"profile":"desk","train":{"batch_size":0}}"#).is_err());
        assert!(
            RunConfig::from_json(r#"{"profile":"desk","dataset":{"heldout_fraction":1.5}}"#)
                .is_err()
        );
        assert!(RunConfig::from_json(r#"{"profile":"desk","sample":{"eta":0.3}}"#).is_err());
    }
}
