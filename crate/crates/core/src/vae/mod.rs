//! The DCGAN-style convolutional VAE: a 4-layer strided conv encoder from
//! `nc x 32 x 32` down to a diagonal-Gaussian posterior over `nz` latents,
//! and a mirrored 4-layer transposed-conv decoder emitting 256-way categorical
//! logits per pixel. Spatial chain 32 -> 16 -> 8 -> 4 -> 1 and back.

mod checkpoint;
mod likelihood;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, model_digest, save_checkpoint};
pub use likelihood::{elbo, iwae_core, iwae_estimate, DEFAULT_IWAE_K};
pub use network::{decode_logits, encode, reconstruct, sample};
pub use train::{train, EpochStats, TrainOptions};

/// Taped graph builders for the per-sample scorers (eval-mode batch norm).
pub(crate) mod graph {
    use rand::Rng;

    use super::network::{batch_to_unit_tensor, encoder_taped, StatsUse};
    use super::{BnStats, VaeConfig, SET_ENC};
    use crate::data::ImageBatch;
    use crate::tensor::{Params, Tape, Tensor, ValueId};
    use crate::Result;

    pub(crate) fn unit_input(x: &ImageBatch) -> Tensor {
        batch_to_unit_tensor(x)
    }

    pub(crate) fn encoder_nodes(
        tape: &mut Tape,
        cfg: &VaeConfig,
        params: &Params,
        stats: &[BnStats],
        trainable: bool,
        x01: ValueId,
    ) -> Result<(ValueId, ValueId)> {
        encoder_taped(tape, cfg, params, StatsUse::Eval(stats), trainable, SET_ENC, x01)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn elbo_from_posterior_nodes<R: Rng>(
        tape: &mut Tape,
        cfg: &VaeConfig,
        dec_params: &Params,
        dec_stats: &[BnStats],
        dec_trainable: bool,
        mu: ValueId,
        log_sigma: ValueId,
        targets: &[u8],
        beta: f64,
        rng: &mut R,
    ) -> Result<ValueId> {
        super::likelihood::elbo_nodes(
            tape,
            cfg,
            dec_params,
            StatsUse::Eval(dec_stats),
            dec_trainable,
            mu,
            log_sigma,
            targets,
            beta,
            rng,
        )
    }
}

use crate::data::IMG_SIDE;
use crate::tensor::{Params, Tensor};
use crate::{Error, Result};
use rand::Rng;

pub const KERNEL: usize = 4;

/// Parameter-set tags used on the tape.
pub(crate) const SET_ENC: u32 = 0;
pub(crate) const SET_DEC: u32 = 1;
pub(crate) const SET_TAU: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeConfig {
    /// Latent dimension.
    pub nz: usize,
    /// Base channel count; doubled/quadrupled down the encoder.
    pub nf: usize,
    /// Image channels (1 or 3).
    pub nc: usize,
    /// KL coefficient in the training objective.
    pub beta: f64,
    /// Scales `nf` for capacity sweeps.
    pub capacity_multiplier: f64,
}

impl VaeConfig {
    /// Defaults per channel count: nf 32 for grayscale, 64 for color.
    pub fn for_channels(nc: usize) -> Self {
        VaeConfig {
            nz: 100,
            nf: if nc == 1 { 32 } else { 64 },
            nc,
            beta: 1.0,
            capacity_multiplier: 1.0,
        }
    }

    /// Base channel count after the capacity multiplier.
    pub fn effective_nf(&self) -> usize {
        (self.nf as f64 * self.capacity_multiplier).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz < 1 {
            return Err(Error::Value("nz must be >= 1".into()));
        }
        if self.nc != 1 && self.nc != 3 {
            return Err(Error::Value(format!("nc must be 1 or 3, got {}", self.nc)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Value(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.capacity_multiplier <= 0.0 || self.effective_nf() < 1 {
            return Err(Error::Value(format!(
                "capacity multiplier {} leaves no channels",
                self.capacity_multiplier
            )));
        }
        Ok(())
    }

    /// Pixels per image.
    pub fn dim(&self) -> usize {
        self.nc * IMG_SIDE * IMG_SIDE
    }
}

/// One convolution layer of either stack.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    /// Index into the side's running-stat list; None on the final layer.
    pub bn: Option<usize>,
}

/// Encoder: nc -> f -> 2f -> 4f (stride 2, pad 1 each) -> 2nz (stride 1, pad 0).
pub(crate) fn encoder_plan(cfg: &VaeConfig) -> [LayerSpec; 4] {
    let f = cfg.effective_nf();
    [
        LayerSpec { c_in: cfg.nc, c_out: f, stride: 2, pad: 1, bn: Some(0) },
        LayerSpec { c_in: f, c_out: 2 * f, stride: 2, pad: 1, bn: Some(1) },
        LayerSpec { c_in: 2 * f, c_out: 4 * f, stride: 2, pad: 1, bn: Some(2) },
        LayerSpec { c_in: 4 * f, c_out: 2 * cfg.nz, stride: 1, pad: 0, bn: None },
    ]
}

/// Decoder: nz -> 4f (stride 1, pad 0) -> 2f -> f -> 256*nc (stride 2, pad 1 each).
pub(crate) fn decoder_plan(cfg: &VaeConfig) -> [LayerSpec; 4] {
    let f = cfg.effective_nf();
    [
        LayerSpec { c_in: cfg.nz, c_out: 4 * f, stride: 1, pad: 0, bn: Some(0) },
        LayerSpec { c_in: 4 * f, c_out: 2 * f, stride: 2, pad: 1, bn: Some(1) },
        LayerSpec { c_in: 2 * f, c_out: f, stride: 2, pad: 1, bn: Some(2) },
        LayerSpec { c_in: f, c_out: 256 * cfg.nc, stride: 2, pad: 1, bn: None },
    ]
}

/// Per-layer batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    fn fresh(c: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[c]),
            var: Tensor::full(&[c], 1.0),
        }
    }
}

/// Variational posterior sufficient statistics for a batch: `mu` and
/// `log_sigma`, each `n x nz`, with `log_sigma` inside the clamp range.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl Posterior {
    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Posterior of a single sample as a 1 x nz batch.
    pub fn row(&self, i: usize) -> Posterior {
        let nz = self.mu.shape()[1];
        let take = |t: &Tensor| {
            Tensor::new(vec![1, nz], t.data()[i * nz..(i + 1) * nz].to_vec())
                .expect("row slice has nz elements")
        };
        Posterior {
            mu: take(&self.mu),
            log_sigma: take(&self.log_sigma),
        }
    }
}

/// Encoder + decoder parameters with their running statistics.
///
/// The model is immutable during scoring; per-sample optimization clones the
/// parameter subset it touches and never writes back.
#[derive(Clone, Debug)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub encoder: Params,
    pub decoder: Params,
    pub enc_stats: Vec<BnStats>,
    pub dec_stats: Vec<BnStats>,
}

impl VaeModel {
    /// DCGAN initialization: conv weights ~ N(0, 0.02^2), batch-norm scale
    /// ~ N(1, 0.02^2), shift 0, running stats (0, 1).
    pub fn init<R: Rng>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let build = |plan: &[LayerSpec], prefix: &str, transposed: bool, rng: &mut R| {
            let mut params = Params::new();
            let mut stats = Vec::new();
            for (li, l) in plan.iter().enumerate() {
                let shape = if transposed {
                    [l.c_in, l.c_out, KERNEL, KERNEL]
                } else {
                    [l.c_out, l.c_in, KERNEL, KERNEL]
                };
                params.push(
                    format!("{prefix}.conv{}.weight", li + 1),
                    Tensor::randn(&shape, 0.0, 0.02, rng),
                );
                if l.bn.is_some() {
                    params.push(
                        format!("{prefix}.bn{}.scale", li + 1),
                        Tensor::randn(&[l.c_out], 1.0, 0.02, rng),
                    );
                    params.push(
                        format!("{prefix}.bn{}.shift", li + 1),
                        Tensor::zeros(&[l.c_out]),
                    );
                    stats.push(BnStats::fresh(l.c_out));
                }
            }
            (params, stats)
        };
        let (encoder, enc_stats) = build(&encoder_plan(&config), "enc", false, rng);
        let (decoder, dec_stats) = build(&decoder_plan(&config), "dec", true, rng);
        Ok(VaeModel {
            config,
            encoder,
            decoder,
            enc_stats,
            dec_stats,
        })
    }

    /// Same model with a different encoder parameter set (used by scorer
    /// diagnostics and tests; stats are kept).
    pub fn with_encoder(&self, encoder: Params) -> VaeModel {
        VaeModel {
            encoder,
            ..self.clone()
        }
    }

    pub fn with_decoder(&self, decoder: Params) -> VaeModel {
        VaeModel {
            decoder,
            ..self.clone()
        }
    }
}
