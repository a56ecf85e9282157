//! Declarative experiment configuration: one TOML file with flat sections,
//! every field defaulted to the standard training recipe (100/200 epochs at
//! constant 5e-4, batch 64, nz 100, nf 32/64, regret steps 100/300 at 1e-4,
//! 5000 evaluation samples). Command-line flags override file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lrvae::data::{
    gen_constant, gen_noise, load_cifar10_binary, load_idx, load_raw_tensor, ImageBatch,
};
use lrvae::scores::{LrSettings, LrTarget};
use lrvae::vae::{TrainOptions, VaeConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(skip)]
    pub digest: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_nz")]
    pub nz: usize,
    /// Defaults to 32 for 1-channel models, 64 for 3-channel.
    pub nf: Option<usize>,
    #[serde(default = "d_nc")]
    pub nc: usize,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_cap")]
    pub capacity_multiplier: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Defaults to 100 epochs for 1-channel models, 200 for 3-channel.
    pub epochs: Option<usize>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Pixel perturbation probability (background models; `train-background`
    /// defaults it to 0.3/0.2 by channel count when unset).
    pub perturb_mu: Option<f64>,
    /// L2 weight decay (`train-background` defaults to 10 when unset).
    pub weight_decay: Option<f64>,
    /// Name of the training dataset in `[data.sets]`.
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub sets: BTreeMap<String, DatasetSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    IdxPair {
        images: PathBuf,
        labels: Option<PathBuf>,
        limit: Option<usize>,
        split: Option<String>,
    },
    Cifar10Binary {
        paths: Vec<PathBuf>,
        limit: Option<usize>,
        split: Option<String>,
    },
    RawTensor {
        path: PathBuf,
        limit: Option<usize>,
    },
    SyntheticNoise {
        count: usize,
        seed: Option<u64>,
        channels: Option<usize>,
    },
    SyntheticConstant {
        count: usize,
        seed: Option<u64>,
        channels: Option<usize>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    #[serde(default = "d_scorers")]
    pub scorers: Vec<String>,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_steps_enc")]
    pub lr_steps_encoder: usize,
    #[serde(default = "d_steps_tau")]
    pub lr_steps_tau: usize,
    #[serde(default = "d_steps_enc")]
    pub lr_steps_decoder: usize,
    #[serde(default = "d_steps_enc")]
    pub lr_steps_encoder_decoder: usize,
    #[serde(default = "d_gamma")]
    pub lr_gamma: f64,
    #[serde(default = "d_true")]
    pub shared_rng: bool,
    pub in_dataset: Option<String>,
    #[serde(default)]
    pub ood_datasets: Vec<String>,
    /// Samples drawn from each dataset for scoring.
    #[serde(default = "d_samples")]
    pub samples: usize,
    /// Dataset used to fit the Mahalanobis calibration (defaults to the
    /// training dataset).
    pub lmd_fit: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_tpr")]
    pub tpr_target: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub capacity_multiplier: Vec<f64>,
}

fn d_nz() -> usize {
    100
}
fn d_nc() -> usize {
    1
}
fn d_beta() -> f64 {
    1.0
}
fn d_cap() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    5e-4
}
fn d_batch() -> usize {
    64
}
fn d_scorers() -> Vec<String> {
    vec!["likelihood".into(), "lr_e".into(), "lr_z".into()]
}
fn d_k() -> usize {
    100
}
fn d_steps_enc() -> usize {
    100
}
fn d_steps_tau() -> usize {
    300
}
fn d_gamma() -> f64 {
    1e-4
}
fn d_true() -> bool {
    true
}
fn d_samples() -> usize {
    5000
}
fn d_bins() -> usize {
    50
}
fn d_tpr() -> f64 {
    0.8
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all model fields have defaults")
    }
}
impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all train fields have defaults")
    }
}
impl Default for ScoreSection {
    fn default() -> Self {
        toml::from_str("").expect("all score fields have defaults")
    }
}
impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("all eval fields have defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.digest = digest_str(&text);
        Ok(cfg)
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            nz: self.model.nz,
            nf: self
                .model
                .nf
                .unwrap_or(if self.model.nc == 1 { 32 } else { 64 }),
            nc: self.model.nc,
            beta: self.model.beta,
            capacity_multiplier: self.model.capacity_multiplier,
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self
                .train
                .epochs
                .unwrap_or(if self.model.nc == 1 { 100 } else { 200 }),
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed,
            weight_decay: self.train.weight_decay.unwrap_or(0.0),
            perturb_mu: self.train.perturb_mu.unwrap_or(0.0),
            bn_momentum: 0.1,
            verbose: true,
        }
    }

    /// Regret settings for one target, with the section's step counts,
    /// learning rate, K, and rng-sharing applied.
    pub fn lr_settings(&self, target: LrTarget) -> LrSettings {
        let mut s = LrSettings::for_target(target);
        s.steps = match target {
            LrTarget::Encoder => self.score.lr_steps_encoder,
            LrTarget::Tau => self.score.lr_steps_tau,
            LrTarget::Decoder => self.score.lr_steps_decoder,
            LrTarget::EncoderDecoder => self.score.lr_steps_encoder_decoder,
        };
        s.lr = self.score.lr_gamma;
        s.k = self.score.k;
        s.shared_rng = self.score.shared_rng;
        s
    }

    /// Load a named dataset. Synthetic sources default their channel count
    /// to the model's and their seed to the global seed; file sources apply
    /// their `limit` by taking the leading images.
    pub fn load_dataset(&self, name: &str, seed: u64) -> lrvae::Result<ImageBatch> {
        let spec = self.data.sets.get(name).ok_or_else(|| {
            lrvae::Error::Ingest(format!("config has no [data.sets.{name}] entry"))
        })?;
        let apply_limit = |b: ImageBatch, limit: Option<usize>| match limit {
            Some(l) if l < b.len() => b.slice(0..l),
            _ => b,
        };
        match spec {
            DatasetSpec::IdxPair {
                images,
                labels,
                limit,
                split: _,
            } => {
                let b = load_idx(images, labels.as_deref(), name)?;
                Ok(apply_limit(b, *limit))
            }
            DatasetSpec::Cifar10Binary {
                paths,
                limit,
                split: _,
            } => {
                let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
                let b = load_cifar10_binary(&refs, name)?;
                Ok(apply_limit(b, *limit))
            }
            DatasetSpec::RawTensor { path, limit } => {
                let b = load_raw_tensor(path)?;
                Ok(apply_limit(b, *limit))
            }
            DatasetSpec::SyntheticNoise {
                count,
                seed: s,
                channels,
            } => gen_noise(*count, channels.unwrap_or(self.model.nc), s.unwrap_or(seed)),
            DatasetSpec::SyntheticConstant {
                count,
                seed: s,
                channels,
            } => gen_constant(*count, channels.unwrap_or(self.model.nc), s.unwrap_or(seed)),
        }
    }
}

pub fn digest_str(text: &str) -> String {
    // FNV-1a, matching the settings hashes used across the score CSVs
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_standard_recipe() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.model.nz, 100);
        assert_eq!(cfg.model.nc, 1);
        assert_eq!(cfg.vae_config().nf, 32);
        let opts = cfg.train_options(0);
        assert_eq!(opts.epochs, 100);
        assert_eq!(opts.lr, 5e-4);
        assert_eq!(opts.batch_size, 64);
        assert_eq!(cfg.score.k, 100);
        assert_eq!(cfg.score.lr_steps_encoder, 100);
        assert_eq!(cfg.score.lr_steps_tau, 300);
        assert_eq!(cfg.score.lr_gamma, 1e-4);
        assert_eq!(cfg.score.samples, 5000);
        assert_eq!(cfg.eval.bins, 50);
        assert_eq!(cfg.eval.tpr_target, 0.8);
    }

    #[test]
    fn three_channel_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[model]\nnc = 3\n").unwrap();
        assert_eq!(cfg.vae_config().nf, 64);
        assert_eq!(cfg.train_options(0).epochs, 200);
    }

    #[test]
    fn dataset_specs_parse() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
seed = 9
[data.sets.fmnist]
source = "idx_pair"
images = "a/images"
limit = 20000
[data.sets.noise]
source = "synthetic_noise"
count = 100
[data.sets.cifar]
source = "cifar10_binary"
paths = ["b1.bin", "b2.bin"]
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.sets.len(), 3);
        let b = cfg.load_dataset("noise", 4).unwrap();
        assert_eq!(b.len(), 100);
        assert_eq!(b.channels(), 1);
        assert!(cfg.load_dataset("missing", 4).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[model]\nnzz = 3\n").is_err());
    }
}
