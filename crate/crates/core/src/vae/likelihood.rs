//! ELBO and importance-weighted likelihood estimation.
//!
//! The ELBO here is the usual single-draw Monte Carlo reconstruction term
//! plus the closed-form Gaussian KL; it is what training and per-sample
//! optimization differentiate. The importance-weighted estimator is forward
//! only and always uses the unweighted densities, regardless of the beta the
//! model was trained with.

use rand::Rng;

use super::network::{batch_to_unit_tensor, check_channels, decode_logits_flat, encoder_taped};
use super::{Posterior, VaeModel, SET_ENC};
use crate::data::ImageBatch;
use crate::tensor::{kernels, Scalar, Tape, Tensor, ValueId, LOG_SIGMA_CLAMP};
use crate::vae::network::StatsUse;
use crate::{Error, Result};

pub const DEFAULT_IWAE_K: usize = 100;

/// Draws decoded per chunk inside the importance-sampling loop; bounds peak
/// logits memory without changing the draw sequence.
const IWAE_CHUNK: usize = 32;

/// Assemble the per-sample ELBO on a tape from already-recorded posterior
/// node ids: `-nll(decode(z)) - beta * KL`. Returns the `[n]` ELBO node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn elbo_nodes<R: Rng>(
    tape: &mut Tape,
    model_cfg: &super::VaeConfig,
    dec_params: &crate::tensor::Params,
    dec_stats: StatsUse<'_>,
    dec_trainable: bool,
    mu: ValueId,
    log_sigma: ValueId,
    targets: &[u8],
    beta: f64,
    rng: &mut R,
) -> Result<ValueId> {
    let z = tape.gaussian_sample(mu, log_sigma, rng)?;
    let logits = super::network::decoder_taped(
        tape,
        model_cfg,
        dec_params,
        dec_stats,
        dec_trainable,
        super::SET_DEC,
        z,
    )?;
    let nll = tape.categorical_nll(logits, 256, targets)?;
    let kl = tape.gaussian_kl(mu, log_sigma)?;
    let bkl = tape.scale(kl, beta as f32);
    let recon = tape.neg(nll);
    tape.sub(recon, bkl)
}

/// Single-draw ELBO of a batch under the trained model (eval-mode batch
/// norm), in nats per sample.
pub fn elbo<R: Rng>(
    model: &VaeModel,
    x: &ImageBatch,
    tau: &Posterior,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_channels(&model.config, x)?;
    if tau.len() != x.len() || tau.mu.shape()[1] != model.config.nz {
        return Err(Error::Shape(format!(
            "posterior shape {:?} does not fit batch of {} with nz {}",
            tau.mu.shape(),
            x.len(),
            model.config.nz
        )));
    }
    let mut tape = Tape::new();
    let mu = tape.constant(tau.mu.clone());
    let ls = tape.constant(tau.log_sigma.clone());
    let node = elbo_nodes(
        &mut tape,
        &model.config,
        &model.decoder,
        StatsUse::Eval(&model.dec_stats),
        false,
        mu,
        ls,
        x.pixels(),
        model.config.beta,
        rng,
    )?;
    Ok(tape.value(node).data().iter().map(|v| *v as f64).collect())
}

/// Importance-weighted log-likelihood core over an arbitrary decoder.
///
/// `decode_nll(z, count)` receives `count` stacked latents (`count * nz`
/// values) and returns each draw's reconstruction negative log-likelihood in
/// nats. Constant terms of the Gaussian densities cancel between prior and
/// posterior, leaving `log w = -nll - 0.5|z|^2 + 0.5|eps|^2 + sum(log sigma)`.
pub fn iwae_core<R: Rng>(
    mu: &[f32],
    log_sigma: &[f32],
    k: usize,
    rng: &mut R,
    mut decode_nll: impl FnMut(&[f32], usize) -> Result<Vec<f32>>,
) -> Result<f64> {
    if k < 1 {
        return Err(Error::Value("iwae needs K >= 1".into()));
    }
    let nz = mu.len();
    let clamp = LOG_SIGMA_CLAMP as f32;
    let sigma: Vec<f32> = log_sigma.iter().map(|l| l.clamp(-clamp, clamp).exp()).collect();
    let sum_log_sigma: f64 = log_sigma
        .iter()
        .map(|l| l.clamp(-clamp, clamp) as f64)
        .sum();

    let mut log_weights = Vec::with_capacity(k);
    let mut z_buf = vec![0.0f32; IWAE_CHUNK * nz];
    let mut half_eps_sq = Vec::with_capacity(IWAE_CHUNK);
    let mut half_z_sq = Vec::with_capacity(IWAE_CHUNK);
    let mut done = 0;
    while done < k {
        let count = IWAE_CHUNK.min(k - done);
        half_eps_sq.clear();
        half_z_sq.clear();
        for d in 0..count {
            let mut se = 0.0f64;
            let mut sz = 0.0f64;
            for j in 0..nz {
                let e = f32::standard_normal(rng);
                let z = mu[j] + sigma[j] * e;
                z_buf[d * nz + j] = z;
                se += (e as f64) * (e as f64);
                sz += (z as f64) * (z as f64);
            }
            half_eps_sq.push(0.5 * se);
            half_z_sq.push(0.5 * sz);
        }
        let nll = decode_nll(&z_buf[..count * nz], count)?;
        if nll.len() != count {
            return Err(Error::Shape(format!(
                "decode_nll returned {} values for {count} draws",
                nll.len()
            )));
        }
        for d in 0..count {
            log_weights.push(-(nll[d] as f64) - half_z_sq[d] + half_eps_sq[d] + sum_log_sigma);
        }
        done += count;
    }

    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite importance weight".into()));
    }
    let sum: f64 = log_weights.iter().map(|w| (w - max).exp()).sum();
    Ok(max + (sum / k as f64).ln())
}

/// K-sample importance-weighted log-likelihood estimate per sample, in nats
/// (eval-mode batch norm throughout).
pub fn iwae_estimate<R: Rng>(
    model: &VaeModel,
    x: &ImageBatch,
    tau: &Posterior,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_channels(&model.config, x)?;
    if tau.len() != x.len() {
        return Err(Error::Shape(format!(
            "posterior holds {} rows for a batch of {}",
            tau.len(),
            x.len()
        )));
    }
    let nz = model.config.nz;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let targets = x.image(i);
        let mu = &tau.mu.data()[i * nz..(i + 1) * nz];
        let ls = &tau.log_sigma.data()[i * nz..(i + 1) * nz];
        let est = iwae_core(mu, ls, k, rng, |z, count| {
            let zt = Tensor::new(vec![count, nz], z.to_vec())?;
            let logits = decode_logits_flat(model, &zt)?;
            let p = model.config.dim();
            let lse = kernels::row_logsumexp(logits.data(), count, 256, p);
            let reps: Vec<u8> = (0..count).flat_map(|_| targets.iter().copied()).collect();
            Ok(kernels::categorical_nll_fwd(
                logits.data(),
                count,
                256,
                p,
                &reps,
                &lse,
            ))
        })?;
        out.push(est);
    }
    Ok(out)
}

/// Taped batch graph used by the trainer: encoder and decoder both
/// trainable, train-mode batch norm. Returns the scalar mean negative ELBO.
pub(crate) fn train_step_graph<R: Rng>(
    tape: &mut Tape,
    model: &mut VaeModel,
    x: &ImageBatch,
    momentum: f32,
    rng: &mut R,
) -> Result<ValueId> {
    let cfg = model.config;
    let x01 = tape.constant(batch_to_unit_tensor(x));
    let (mu, ls) = encoder_taped(
        tape,
        &cfg,
        &model.encoder,
        StatsUse::Train {
            stats: &mut model.enc_stats,
            momentum,
        },
        true,
        SET_ENC,
        x01,
    )?;
    let elbo = elbo_nodes(
        tape,
        &cfg,
        &model.decoder,
        StatsUse::Train {
            stats: &mut model.dec_stats,
            momentum,
        },
        true,
        mu,
        ls,
        x.pixels(),
        cfg.beta,
        rng,
    )?;
    let neg = tape.neg(elbo);
    tape.mean_batch(neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_noise;
    use crate::vae::{VaeConfig, VaeModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> VaeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        VaeModel::init(
            VaeConfig {
                nz: 6,
                nf: 4,
                nc: 1,
                beta: 1.0,
                capacity_multiplier: 1.0,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn elbo_of_uniform_decoder_is_dim_log256() {
        // beta -> 0 and a fresh decoder whose logits are ~uniform: the ELBO
        // is dominated by the uniform categorical term -d ln 256.
        let mut m = tiny_model();
        m.config.beta = 1e-9;
        // zero out decoder weights: logits exactly uniform (all zero)
        for i in 0..m.decoder.len() {
            let p = m.decoder.get_mut(i);
            let keep_scale = p.name.contains("scale");
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = if keep_scale { 1.0 } else { 0.0 });
        }
        // with zero conv weights every logit is zero regardless of bn params
        for i in 0..m.decoder.len() {
            if m.decoder.get(i).name.contains("conv") {
                m.decoder
                    .get_mut(i)
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let x = gen_noise(2, 1, 3).unwrap();
        let tau = crate::vae::encode(&m, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = elbo(&m, &x, &tau, &mut rng).unwrap();
        let want = -(m.config.dim() as f64) * (256f64).ln();
        for v in e {
            assert!((v - want).abs() < 1.0, "elbo {v} vs uniform bound {want}");
        }
    }

    #[test]
    fn iwae_k1_matches_elbo_in_expectation() {
        // The K=1 importance weight and the closed-form-KL ELBO agree in
        // expectation; check the running means against each other.
        let m = tiny_model();
        let x = gen_noise(1, 1, 6).unwrap();
        let tau = crate::vae::encode(&m, &x).unwrap();
        let trials = 600;
        let mut rng_a = ChaCha8Rng::seed_from_u64(100);
        let mut rng_b = ChaCha8Rng::seed_from_u64(100);
        let mut mean_elbo = 0.0;
        let mut mean_iwae = 0.0;
        for _ in 0..trials {
            mean_elbo += elbo(&m, &x, &tau, &mut rng_a).unwrap()[0] / trials as f64;
            mean_iwae += iwae_estimate(&m, &x, &tau, 1, &mut rng_b).unwrap()[0] / trials as f64;
        }
        // same expectation; generous tolerance for 600 draws of a tiny model
        assert!(
            (mean_elbo - mean_iwae).abs() < 3.0,
            "E[elbo] {mean_elbo} vs E[iwae K=1] {mean_iwae}"
        );
    }

    #[test]
    fn iwae_rejects_k0() {
        let m = tiny_model();
        let x = gen_noise(1, 1, 6).unwrap();
        let tau = crate::vae::encode(&m, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(iwae_estimate(&m, &x, &tau, 0, &mut rng).is_err());
    }

    #[test]
    fn iwae_monotone_in_k_on_average() {
        let m = tiny_model();
        let x = gen_noise(1, 1, 7).unwrap();
        let tau = crate::vae::encode(&m, &x).unwrap();
        let trials = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut mean1 = 0.0;
        let mut mean64 = 0.0;
        for _ in 0..trials {
            mean1 += iwae_estimate(&m, &x, &tau, 1, &mut rng).unwrap()[0] / trials as f64;
            mean64 += iwae_estimate(&m, &x, &tau, 64, &mut rng).unwrap()[0] / trials as f64;
        }
        assert!(
            mean64 >= mean1 - 0.01,
            "bound should tighten with K: K=1 {mean1}, K=64 {mean64}"
        );
    }

    /// 1-d latent, 4-pixel toy decoder: IWAE at K = 2048 vs direct quadrature
    /// of log p(x) = log int p(x|z) N(z; 0,1) dz, within 0.05 nats.
    #[test]
    fn iwae_matches_quadrature_on_toy_model() {
        // decoder: logits[bin][px] = -((bin/256 - s_px * tanh(z))^2) * 40
        let toy_logits = |z: f32| -> Vec<f64> {
            let scales = [0.2f64, 0.4, 0.6, 0.8];
            let mut l = Vec::with_capacity(4 * 256);
            for px in 0..4 {
                let center = 128.0 + 100.0 * (z as f64).tanh() * scales[px];
                for bin in 0..256 {
                    l.push(-((bin as f64 - center) / 256.0).powi(2) * 40.0);
                }
            }
            l
        };
        let targets = [140usize, 155, 170, 190];
        let nll_of = |z: f32| -> f64 {
            let l = toy_logits(z);
            let mut nll = 0.0;
            for px in 0..4 {
                let row = &l[px * 256..(px + 1) * 256];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                nll += lse - row[targets[px]];
            }
            nll
        };

        // quadrature truth over z in [-10, 10]
        let steps = 40_000;
        let (lo, hi) = (-10.0f64, 10.0f64);
        let dz = (hi - lo) / steps as f64;
        let mut terms: Vec<f64> = Vec::with_capacity(steps);
        for i in 0..steps {
            let z = lo + (i as f64 + 0.5) * dz;
            let log_prior = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
            terms.push(-nll_of(z as f32) + log_prior + dz.ln());
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let truth = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();

        // a proposal roughly covering the posterior
        let mu = [0.4f32];
        let log_sigma = [(0.6f32).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let est = iwae_core(&mu, &log_sigma, 2048, &mut rng, |z, count| {
            Ok((0..count).map(|d| nll_of(z[d]) as f32).collect())
        })
        .unwrap();
        assert!(
            (est - truth).abs() < 0.05,
            "iwae {est} vs quadrature {truth}"
        );
    }

    /// Mean single-draw ELBO over many draws never exceeds the quadrature
    /// log-likelihood (up to Monte Carlo noise).
    #[test]
    fn elbo_lower_bounds_quadrature_log_likelihood() {
        let center_of = |z: f64| 128.0 + 60.0 * z.tanh();
        let nll_of = |z: f64| -> f64 {
            // single pixel, sharper decoder
            let row: Vec<f64> = (0..256)
                .map(|bin| -((bin as f64 - center_of(z)) / 64.0).powi(2))
                .collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[150]
        };
        let steps = 40_000;
        let (lo, hi) = (-12.0f64, 12.0f64);
        let dz = (hi - lo) / steps as f64;
        let mut terms = Vec::with_capacity(steps);
        for i in 0..steps {
            let z = lo + (i as f64 + 0.5) * dz;
            let log_prior = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
            terms.push(-nll_of(z) + log_prior + dz.ln());
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let truth = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();

        // ELBO via K=1 weights: mean over draws estimates the bound
        let mu = [0.3f32];
        let log_sigma = [(0.7f32).ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut mean = 0.0;
        for _ in 0..draws {
            mean += iwae_core(&mu, &log_sigma, 1, &mut rng, |z, count| {
                Ok((0..count).map(|d| nll_of(z[d] as f64) as f32).collect())
            })
            .unwrap()
                / draws as f64;
        }
        assert!(
            mean <= truth + 0.01,
            "mean single-draw bound {mean} exceeds quadrature {truth}"
        );
    }
}
