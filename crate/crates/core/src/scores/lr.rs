//! Likelihood regret: how much a sample's estimated log-likelihood improves
//! when a cloned parameter subset is re-optimized for that sample alone.
//!
//! The optimization objective is the single-draw ELBO with a fresh latent
//! draw per step (batch norm in eval mode throughout); the likelihood is
//! estimated before and after with the importance-weighted bound. The shared
//! model is never written to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ScoreRecord;
use crate::data::ImageBatch;
use crate::tensor::{Adam, AdamConfig, Params, Tape};
use crate::vae::{encode, iwae_estimate, Posterior, VaeModel, DEFAULT_IWAE_K};
use crate::{Error, Result};

/// Which parameter subset the per-sample optimization touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrTarget {
    /// Whole encoder stack.
    Encoder,
    /// Just the posterior sufficient statistics (mu, log sigma).
    Tau,
    /// Whole decoder stack (ablation).
    Decoder,
    /// Both stacks (ablation).
    EncoderDecoder,
}

impl LrTarget {
    pub fn score_name(&self) -> &'static str {
        match self {
            LrTarget::Encoder => "lr_e",
            LrTarget::Tau => "lr_z",
            LrTarget::Decoder => "lr_d",
            LrTarget::EncoderDecoder => "lr_ed",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LrSettings {
    pub target: LrTarget,
    /// Adam steps on the cloned subset.
    pub steps: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Importance samples per likelihood estimate.
    pub k: usize,
    /// Reuse one sampling stream for both likelihood estimates.
    pub shared_rng: bool,
}

impl LrSettings {
    /// Per-target defaults: 100 steps at 1e-4 on the encoder (and on the
    /// decoder-involving ablations), 300 steps at 1e-4 on tau.
    pub fn for_target(target: LrTarget) -> Self {
        let steps = match target {
            LrTarget::Tau => 300,
            _ => 100,
        };
        LrSettings {
            target,
            steps,
            lr: 1e-4,
            k: DEFAULT_IWAE_K,
            shared_rng: true,
        }
    }

    pub fn score_name(&self) -> &'static str {
        self.target.score_name()
    }

    pub fn settings_digest(&self) -> String {
        let mut h = crate::data::Fnv1a::new();
        h.update(self.score_name().as_bytes());
        h.update(&(self.steps as u64).to_le_bytes());
        h.update(&self.lr.to_le_bytes());
        h.update(&(self.k as u64).to_le_bytes());
        h.update(&[self.shared_rng as u8]);
        format!("{:016x}", h.0)
    }
}

/// The optimized clone, so callers can inspect it or re-score from it.
#[derive(Clone, Debug)]
pub enum LrOptimized {
    Encoder(Params),
    Tau(Posterior),
    Decoder(Params),
    EncoderDecoder { encoder: Params, decoder: Params },
}

#[derive(Clone, Debug)]
pub struct LrOutcome {
    pub record: ScoreRecord,
    /// Likelihood estimate under the trained model.
    pub l_vae: f64,
    /// Likelihood estimate after per-sample optimization.
    pub l_opt: f64,
    /// Per-step objective values (negative single-sample ELBO).
    pub trace: Vec<f64>,
    pub optimized: LrOptimized,
}

struct StepOutcome {
    objective: f64,
}

/// One Adam step on the chosen subset. Builds the single-sample ELBO graph in
/// eval-mode batch norm, backpropagates, applies gradients to the clones.
#[allow(clippy::too_many_arguments)]
fn optimization_step<R: Rng>(
    model: &VaeModel,
    x: &ImageBatch,
    target: LrTarget,
    enc_clone: Option<&mut Params>,
    dec_clone: Option<&mut Params>,
    tau_vars: Option<&mut Params>,
    tau_fixed: Option<&Posterior>,
    opts: (&mut Option<Adam>, &mut Option<Adam>, &mut Option<Adam>),
    rng: &mut R,
) -> Result<StepOutcome> {
    use crate::vae::graph;

    let cfg = model.config;
    let mut tape = Tape::new();
    let x01 = tape.constant(graph::unit_input(x));

    let (mu, ls) = match target {
        LrTarget::Encoder | LrTarget::EncoderDecoder => {
            let params = enc_clone.as_deref().expect("encoder clone present");
            graph::encoder_nodes(&mut tape, &cfg, params, &model.enc_stats, true, x01)?
        }
        LrTarget::Tau => {
            let vars = tau_vars.as_deref().expect("tau variables present");
            let mu = tape.param(crate::vae::SET_TAU, 0, vars);
            let ls_raw = tape.param(crate::vae::SET_TAU, 1, vars);
            let clamp = crate::tensor::LOG_SIGMA_CLAMP as f32;
            let ls = tape.clamp(ls_raw, -clamp, clamp);
            (mu, ls)
        }
        LrTarget::Decoder => {
            let tau = tau_fixed.expect("fixed posterior present");
            let mu = tape.constant(tau.mu.clone());
            let ls = tape.constant(tau.log_sigma.clone());
            (mu, ls)
        }
    };

    let dec_trainable = matches!(target, LrTarget::Decoder | LrTarget::EncoderDecoder);
    let dec_params: &Params = if dec_trainable {
        dec_clone.as_deref().expect("decoder clone present")
    } else {
        &model.decoder
    };
    let elbo = graph::elbo_from_posterior_nodes(
        &mut tape,
        &cfg,
        dec_params,
        &model.dec_stats,
        dec_trainable,
        mu,
        ls,
        x.pixels(),
        cfg.beta,
        rng,
    )?;
    let neg = tape.neg(elbo);
    let loss = tape.mean_batch(neg)?;
    let objective = tape.value(loss).item()? as f64;
    if !objective.is_finite() {
        return Err(Error::Score("non-finite objective".into()));
    }
    let grads = tape.backward(loss)?;

    let (opt_enc, opt_dec, opt_tau) = opts;
    match target {
        LrTarget::Encoder | LrTarget::EncoderDecoder => {
            let params = enc_clone.expect("encoder clone present");
            params.zero_grads();
            grads.apply_to_set(crate::vae::SET_ENC, params);
            opt_enc.as_mut().expect("encoder optimizer").step(params)?;
        }
        LrTarget::Tau => {
            let vars = tau_vars.expect("tau variables present");
            vars.zero_grads();
            grads.apply_to_set(crate::vae::SET_TAU, vars);
            opt_tau.as_mut().expect("tau optimizer").step(vars)?;
        }
        LrTarget::Decoder => {}
    }
    if dec_trainable {
        let params = dec_clone.expect("decoder clone present");
        params.zero_grads();
        grads.apply_to_set(crate::vae::SET_DEC, params);
        opt_dec.as_mut().expect("decoder optimizer").step(params)?;
    }
    Ok(StepOutcome { objective })
}

/// Likelihood regret of one sample. The model is read-only; all optimization
/// happens on clones of the targeted parameter subset.
pub fn score_lr<R: Rng>(
    model: &VaeModel,
    x: &ImageBatch,
    settings: &LrSettings,
    rng: &mut R,
) -> Result<LrOutcome> {
    if x.len() != 1 {
        return Err(Error::Score(format!(
            "likelihood regret scores one sample at a time, got a batch of {}",
            x.len()
        )));
    }
    let seed_est = rng.gen::<u64>();
    let seed_opt = rng.gen::<u64>();
    let seed_second = if settings.shared_rng {
        seed_est
    } else {
        rng.gen::<u64>()
    };

    let tau_init = encode(model, x)?;
    let l_vae = iwae_estimate(
        model,
        x,
        &tau_init,
        settings.k,
        &mut ChaCha8Rng::seed_from_u64(seed_est),
    )?[0];

    // clones of whatever the target optimizes
    let mut enc_clone = match settings.target {
        LrTarget::Encoder | LrTarget::EncoderDecoder => Some(model.encoder.clone()),
        _ => None,
    };
    let mut dec_clone = match settings.target {
        LrTarget::Decoder | LrTarget::EncoderDecoder => Some(model.decoder.clone()),
        _ => None,
    };
    let mut tau_vars = match settings.target {
        LrTarget::Tau => {
            let mut vars = Params::new();
            vars.push("tau.mu", tau_init.mu.clone());
            vars.push("tau.log_sigma", tau_init.log_sigma.clone());
            Some(vars)
        }
        _ => None,
    };

    let adam_cfg = AdamConfig::with_lr(settings.lr);
    let mut opt_enc = enc_clone.as_ref().map(|p| Adam::new(adam_cfg, p));
    let mut opt_dec = dec_clone.as_ref().map(|p| Adam::new(adam_cfg, p));
    let mut opt_tau = tau_vars.as_ref().map(|p| Adam::new(adam_cfg, p));

    let mut opt_rng = ChaCha8Rng::seed_from_u64(seed_opt);
    let mut trace = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let out = optimization_step(
            model,
            x,
            settings.target,
            enc_clone.as_mut(),
            dec_clone.as_mut(),
            tau_vars.as_mut(),
            Some(&tau_init),
            (&mut opt_enc, &mut opt_dec, &mut opt_tau),
            &mut opt_rng,
        )
        .map_err(|e| Error::Score(format!("optimization step {step}: {e}")))?;
        trace.push(out.objective);
    }

    // likelihood under the optimized configuration
    let mut est_rng = ChaCha8Rng::seed_from_u64(seed_second);
    let (l_opt, optimized) = match settings.target {
        LrTarget::Encoder => {
            let enc = enc_clone.expect("encoder clone present");
            let opt_model = model.with_encoder(enc.clone());
            let tau = encode(&opt_model, x)?;
            let l = iwae_estimate(model, x, &tau, settings.k, &mut est_rng)?[0];
            (l, LrOptimized::Encoder(enc))
        }
        LrTarget::Tau => {
            let vars = tau_vars.expect("tau variables present");
            let clamp = crate::tensor::LOG_SIGMA_CLAMP as f32;
            let mut ls = vars.get(1).value.clone();
            ls.data_mut().iter_mut().for_each(|v| *v = v.clamp(-clamp, clamp));
            let tau = Posterior {
                mu: vars.get(0).value.clone(),
                log_sigma: ls,
            };
            let l = iwae_estimate(model, x, &tau, settings.k, &mut est_rng)?[0];
            (l, LrOptimized::Tau(tau))
        }
        LrTarget::Decoder => {
            let dec = dec_clone.expect("decoder clone present");
            let opt_model = model.with_decoder(dec.clone());
            let l = iwae_estimate(&opt_model, x, &tau_init, settings.k, &mut est_rng)?[0];
            (l, LrOptimized::Decoder(dec))
        }
        LrTarget::EncoderDecoder => {
            let enc = enc_clone.expect("encoder clone present");
            let dec = dec_clone.expect("decoder clone present");
            let opt_model = model.with_encoder(enc.clone()).with_decoder(dec.clone());
            let tau = encode(&opt_model, x)?;
            let l = iwae_estimate(&opt_model, x, &tau, settings.k, &mut est_rng)?[0];
            (l, LrOptimized::EncoderDecoder { encoder: enc, decoder: dec })
        }
    };

    let value = l_opt - l_vae;
    Ok(LrOutcome {
        record: ScoreRecord::new(x.sample_ids[0].clone(), settings.score_name(), value)?,
        l_vae,
        l_opt,
        trace,
        optimized,
    })
}
