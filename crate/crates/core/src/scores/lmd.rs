//! Latent Mahalanobis distance baseline: distance of the encoded sample from
//! the training encodings' mean, combined with the reconstruction error at
//! the posterior mean, each weighted by the reciprocal of its validation
//! standard deviation.

use super::ScoreRecord;
use crate::data::ImageBatch;
use crate::tensor::kernels;
use crate::vae::{encode, VaeModel};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LmdCalibration {
    pub latent_mean: Vec<f64>,
    /// Inverse of the regularized covariance, row-major nz x nz.
    pub cov_inv: Vec<f64>,
    pub alpha: f64,
    pub beta_coef: f64,
}

/// Ridge added to the covariance diagonal before inversion, as a fraction of
/// the mean diagonal entry. Posterior means can be low-rank.
const COV_RIDGE: f64 = 1e-4;

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Invert an SPD matrix via its Cholesky factor.
fn spd_inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    // solve L y = e_i, then L^T x = y, column by column
    let mut inv = vec![0.0f64; n * n];
    let mut y = vec![0.0f64; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * inv[k * n + col];
            }
            inv[i * n + col] = s / l[i * n + i];
        }
    }
    Some(inv)
}

/// Mahalanobis distance of a latent vector from the calibration mean.
pub fn mahalanobis(calib: &LmdCalibration, e: &[f64]) -> f64 {
    let n = calib.latent_mean.len();
    debug_assert_eq!(e.len(), n);
    let d: Vec<f64> = e
        .iter()
        .zip(calib.latent_mean.iter())
        .map(|(a, b)| a - b)
        .collect();
    let mut q = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += calib.cov_inv[i * n + j] * d[j];
        }
        q += d[i] * row;
    }
    q.max(0.0).sqrt()
}

/// Reconstruction NLL at the posterior mean, in nats, one value per sample.
fn reconstruction_nll(model: &VaeModel, x: &ImageBatch) -> Result<Vec<f64>> {
    let tau = encode(model, x)?;
    let logits = crate::vae::decode_logits(model, &tau.mu)?;
    let n = x.len();
    let p = model.config.dim();
    let lse = kernels::row_logsumexp(logits.data(), n, 256, p);
    let nll = kernels::categorical_nll_fwd(logits.data(), n, 256, p, x.pixels(), &lse);
    Ok(nll.iter().map(|v| *v as f64).collect())
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Fit the calibration: latent mean/covariance on the training encodings,
/// then `alpha = 1/std(D_M)` and `beta = 1/std(reconstruction NLL)` on the
/// validation set. The validation set must be disjoint from training.
pub fn fit_lmd(
    model: &VaeModel,
    train_set: &ImageBatch,
    validation_set: &ImageBatch,
) -> Result<LmdCalibration> {
    let nz = model.config.nz;
    if train_set.len() < nz + 1 {
        return Err(Error::Fit(format!(
            "need at least nz+1 = {} training images for an invertible covariance, got {}",
            nz + 1,
            train_set.len()
        )));
    }
    if validation_set.len() < 2 {
        return Err(Error::Fit("validation set needs at least 2 images".into()));
    }
    let train_ids: std::collections::HashSet<&str> =
        train_set.sample_ids.iter().map(|s| s.as_str()).collect();
    if validation_set
        .sample_ids
        .iter()
        .any(|id| train_ids.contains(id.as_str()))
    {
        return Err(Error::Fit(
            "validation set overlaps the training set".into(),
        ));
    }

    let tau = encode(model, train_set)?;
    let n = train_set.len();
    let mu = tau.mu.data();
    let mut mean = vec![0.0f64; nz];
    for i in 0..n {
        for j in 0..nz {
            mean[j] += mu[i * nz + j] as f64 / n as f64;
        }
    }
    let mut cov = vec![0.0f64; nz * nz];
    for i in 0..n {
        for a in 0..nz {
            let da = mu[i * nz + a] as f64 - mean[a];
            for b in a..nz {
                let db = mu[i * nz + b] as f64 - mean[b];
                cov[a * nz + b] += da * db / (n - 1) as f64;
            }
        }
    }
    for a in 0..nz {
        for b in 0..a {
            cov[a * nz + b] = cov[b * nz + a];
        }
    }
    let trace: f64 = (0..nz).map(|j| cov[j * nz + j]).sum();
    let ridge = COV_RIDGE * trace / nz as f64;
    for j in 0..nz {
        cov[j * nz + j] += ridge;
    }
    let cov_inv = spd_inverse(&cov, nz).ok_or_else(|| {
        Error::Fit("latent covariance is singular even after regularization".into())
    })?;

    let mut calib = LmdCalibration {
        latent_mean: mean,
        cov_inv,
        alpha: 1.0,
        beta_coef: 1.0,
    };

    let val_tau = encode(model, validation_set)?;
    let dm: Vec<f64> = (0..validation_set.len())
        .map(|i| {
            let e: Vec<f64> = val_tau.mu.data()[i * nz..(i + 1) * nz]
                .iter()
                .map(|v| *v as f64)
                .collect();
            mahalanobis(&calib, &e)
        })
        .collect();
    let recon = reconstruction_nll(model, validation_set)?;
    let (sd_dm, sd_recon) = (std_dev(&dm), std_dev(&recon));
    if sd_dm <= 0.0 || sd_recon <= 0.0 {
        return Err(Error::Fit(
            "validation statistics are degenerate (zero variance)".into(),
        ));
    }
    calib.alpha = 1.0 / sd_dm;
    calib.beta_coef = 1.0 / sd_recon;
    Ok(calib)
}

/// `alpha * D_M(E(x)) + beta * nll(x, D(E(x)))`, one record per sample.
pub fn score_lmd(
    model: &VaeModel,
    calib: &LmdCalibration,
    x: &ImageBatch,
) -> Result<Vec<ScoreRecord>> {
    let nz = model.config.nz;
    if calib.latent_mean.len() != nz {
        return Err(Error::Score(format!(
            "calibration is for nz {}, model has {nz}",
            calib.latent_mean.len()
        )));
    }
    let tau = encode(model, x)?;
    let recon = reconstruction_nll(model, x)?;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let e: Vec<f64> = tau.mu.data()[i * nz..(i + 1) * nz]
            .iter()
            .map(|v| *v as f64)
            .collect();
        let value = calib.alpha * mahalanobis(calib, &e) + calib.beta_coef * recon[i];
        out.push(ScoreRecord::new(
            x.sample_ids[i].clone(),
            "lmd",
            value,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_noise, subsample};
    use crate::scores::tests::energetic_tiny_model;

    #[test]
    fn mahalanobis_at_the_mean_is_zero() {
        let calib = LmdCalibration {
            latent_mean: vec![1.0, -2.0, 0.5],
            cov_inv: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            alpha: 1.0,
            beta_coef: 1.0,
        };
        assert_eq!(mahalanobis(&calib, &[1.0, -2.0, 0.5]), 0.0);
    }

    #[test]
    fn identity_covariance_gives_euclidean_distance() {
        let calib = LmdCalibration {
            latent_mean: vec![0.0, 0.0],
            cov_inv: vec![1.0, 0.0, 0.0, 1.0],
            alpha: 1.0,
            beta_coef: 1.0,
        };
        let d = mahalanobis(&calib, &[3.0, 4.0]);
        assert!((d - 5.0).abs() < 1e-12);
    }

    #[test]
    fn spd_inverse_matches_identity_product() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * inv[k * 3 + j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s - want).abs() < 1e-10, "({i},{j}) = {s}");
            }
        }
        // non-PD input fails
        let bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(spd_inverse(&bad, 2).is_none());
    }

    #[test]
    fn fit_validates_sizes_and_disjointness() {
        let m = energetic_tiny_model(40);
        let pool = gen_noise(40, 1, 3).unwrap();
        let train = pool.slice(0..30);
        let val = pool.slice(30..40);
        let calib = fit_lmd(&m, &train, &val).unwrap();
        assert!(calib.alpha > 0.0 && calib.beta_coef > 0.0);
        // too few training points for nz=6
        assert!(fit_lmd(&m, &pool.slice(0..5), &val).is_err());
        // overlapping ids
        assert!(fit_lmd(&m, &train, &pool.slice(29..35)).is_err());
        // scoring produces finite larger-is-odder values
        let recs = score_lmd(&m, &calib, &val).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().all(|r| r.value.is_finite()));
    }

    #[test]
    fn fit_is_deterministic() {
        let m = energetic_tiny_model(41);
        let pool = gen_noise(60, 1, 9).unwrap();
        let train = subsample(&pool.slice(0..50), 40, 1).unwrap();
        let val = pool.slice(50..60);
        let a = fit_lmd(&m, &train, &val).unwrap();
        let b = fit_lmd(&m, &train, &val).unwrap();
        assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
        assert_eq!(a.latent_mean, b.latent_mean);
    }
}
