//! Batch scoring: fan a dataset out over a worker pool, one deterministic
//! RNG stream per (seed, scorer, sample id).

use rayon::prelude::*;

use super::{
    rng_for_sample, score_ic, score_likelihood, score_llr_background, score_lmd, score_lr,
    LmdCalibration, LrSettings, LrTarget, ScoreRecord,
};
use crate::data::ImageBatch;
use crate::vae::VaeModel;
use crate::{Error, Result};

/// One of the five scorers, in canonical emission order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScorerKind {
    Likelihood,
    Lr(LrTarget),
    IcPng,
    LlrBackground,
    Lmd,
}

impl ScorerKind {
    pub const ALL: [ScorerKind; 8] = [
        ScorerKind::Likelihood,
        ScorerKind::Lr(LrTarget::Encoder),
        ScorerKind::Lr(LrTarget::Tau),
        ScorerKind::Lr(LrTarget::Decoder),
        ScorerKind::Lr(LrTarget::EncoderDecoder),
        ScorerKind::IcPng,
        ScorerKind::LlrBackground,
        ScorerKind::Lmd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScorerKind::Likelihood => "likelihood",
            ScorerKind::Lr(t) => t.score_name(),
            ScorerKind::IcPng => "ic_png",
            ScorerKind::LlrBackground => "llr_bg",
            ScorerKind::Lmd => "lmd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Value(format!(
                    "unknown scorer `{s}` (expected one of {})",
                    Self::ALL.map(|k| k.name()).join(", ")
                ))
            })
    }
}

/// Everything a scoring run needs besides the data.
pub struct ScoreContext<'a> {
    pub model: &'a VaeModel,
    /// Background model, required by the likelihood-ratio scorer.
    pub background: Option<&'a VaeModel>,
    /// Calibration, required by the Mahalanobis scorer.
    pub lmd: Option<&'a LmdCalibration>,
    /// Global seed; per-sample streams derive from it.
    pub seed: u64,
    /// Importance samples per likelihood estimate.
    pub k: usize,
    /// Optimization settings per regret target.
    pub lr_settings: [LrSettings; 4],
}

impl<'a> ScoreContext<'a> {
    pub fn new(model: &'a VaeModel, seed: u64, k: usize) -> Self {
        let mk = |t| {
            let mut s = LrSettings::for_target(t);
            s.k = k;
            s
        };
        ScoreContext {
            model,
            background: None,
            lmd: None,
            seed,
            k,
            lr_settings: [
                mk(LrTarget::Encoder),
                mk(LrTarget::Tau),
                mk(LrTarget::Decoder),
                mk(LrTarget::EncoderDecoder),
            ],
        }
    }

    fn lr_for(&self, target: LrTarget) -> &LrSettings {
        self.lr_settings
            .iter()
            .find(|s| s.target == target)
            .expect("all four targets populated")
    }

    /// Hash of the settings that determine a scorer's values (minus the seed,
    /// which gets its own CSV column).
    pub fn settings_digest(&self, scorer: ScorerKind) -> String {
        match scorer {
            ScorerKind::Lr(t) => self.lr_for(t).settings_digest(),
            other => {
                let mut h = crate::data::Fnv1a::new();
                h.update(other.name().as_bytes());
                h.update(&(self.k as u64).to_le_bytes());
                format!("{:016x}", h.0)
            }
        }
    }
}

/// Score every sample of a batch with one scorer. Parallel across samples;
/// output order matches batch order and is independent of the worker count.
pub fn score_batch(
    cx: &ScoreContext<'_>,
    batch: &ImageBatch,
    scorer: ScorerKind,
) -> Result<Vec<ScoreRecord>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let salt = scorer.name();
    match scorer {
        ScorerKind::Likelihood => (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let one = batch.single(i);
                let mut rng = rng_for_sample(cx.seed, salt, &one.sample_ids[0]);
                Ok(score_likelihood(cx.model, &one, cx.k, &mut rng)?.remove(0))
            })
            .collect(),
        ScorerKind::Lr(target) => {
            let settings = *cx.lr_for(target);
            (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let one = batch.single(i);
                    let mut rng = rng_for_sample(cx.seed, salt, &one.sample_ids[0]);
                    Ok(score_lr(cx.model, &one, &settings, &mut rng)?.record)
                })
                .collect()
        }
        ScorerKind::IcPng => (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let one = batch.single(i);
                let mut rng = rng_for_sample(cx.seed, salt, &one.sample_ids[0]);
                Ok(score_ic(cx.model, &one, cx.k, &mut rng)?.remove(0).record)
            })
            .collect(),
        ScorerKind::LlrBackground => {
            let bg = cx.background.ok_or_else(|| {
                Error::Score("likelihood-ratio scoring needs a background model".into())
            })?;
            (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let one = batch.single(i);
                    let mut rng = rng_for_sample(cx.seed, salt, &one.sample_ids[0]);
                    Ok(score_llr_background(cx.model, bg, &one, cx.k, &mut rng)?.remove(0))
                })
                .collect()
        }
        ScorerKind::Lmd => {
            let calib = cx.lmd.ok_or_else(|| {
                Error::Score("Mahalanobis scoring needs a fitted calibration".into())
            })?;
            score_lmd(cx.model, calib, batch)
        }
    }
}
