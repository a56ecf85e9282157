//! `verify`: self-contained checks of the numeric stack — finite-difference
//! gradients of every differentiable op at both precisions, metric oracles,
//! importance-sampling against quadrature, checkpoint round trips, and the
//! zero-step regret identity. One PASS/FAIL line per check.

use lrvae::data::gen_noise;
use lrvae::eval::{auprc, auroc, auroc_pairwise_oracle, bpd, fpr_at_tpr, LabeledScores};
use lrvae::scores::{score_lr, LrSettings, LrTarget};
use lrvae::tensor::{check_gradients, BnMode, Scalar, Tape, Tensor, ValueId};
use lrvae::vae::{
    encode, iwae_core, load_checkpoint, model_digest, save_checkpoint, VaeConfig, VaeModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{CmdError, CmdResult};

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        if pass {
            println!("[PASS] {name}: {detail}");
        } else {
            println!("[FAIL] {name}: {detail}");
            self.failures += 1;
        }
    }
}

fn gradient_checks<S: Scalar>(report: &mut Report, label: &str, h: f64, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    let mut run = |name: &str,
                   f: &dyn Fn(&mut Tape<S>, ValueId) -> lrvae::Result<ValueId>,
                   point: &Tensor<S>| {
        match check_gradients(f, point, h) {
            Ok(err) => report.check(
                &format!("gradients[{label}] {name}"),
                err < tol,
                format!("max rel err {err:.3e} (tol {tol:.0e})"),
            ),
            Err(e) => report.check(&format!("gradients[{label}] {name}"), false, e.to_string()),
        }
    };

    let w = Tensor::randn(&[3, 2, 3, 3], S::ZERO, S::from_f64(0.5), &mut rng);
    let x = Tensor::randn(&[2, 2, 6, 6], S::ZERO, S::ONE, &mut rng);
    {
        let w = w.clone();
        run(
            "conv2d/input",
            &move |t, xid| {
                let wid = t.constant(w.clone());
                let y = t.conv2d(xid, wid, 2, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
        );
    }
    {
        let x = x.clone();
        run(
            "conv2d/weight",
            &move |t, wid| {
                let xid = t.constant(x.clone());
                let y = t.conv2d(xid, wid, 1, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &w,
        );
    }
    let wt = Tensor::randn(&[2, 3, 4, 4], S::ZERO, S::from_f64(0.5), &mut rng);
    let xt = Tensor::randn(&[1, 2, 4, 4], S::ZERO, S::ONE, &mut rng);
    {
        let wt = wt.clone();
        run(
            "conv_transpose2d/input",
            &move |t, xid| {
                let wid = t.constant(wt.clone());
                let y = t.conv_transpose2d(xid, wid, 2, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &xt,
        );
    }
    {
        let xt = xt.clone();
        run(
            "conv_transpose2d/weight",
            &move |t, wid| {
                let xid = t.constant(xt.clone());
                let y = t.conv_transpose2d(xid, wid, 2, 1)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &wt,
        );
    }
    let xb = Tensor::randn(&[2, 3, 4, 4], S::from_f64(0.2), S::ONE, &mut rng);
    run(
        "batch_norm[train]/input",
        &|t, xid| {
            let scale = t.constant(Tensor::full(&[3], S::ONE));
            let shift = t.constant(Tensor::full(&[3], S::from_f64(0.1)));
            let mut rm = Tensor::zeros(&[3]);
            let mut rv = Tensor::full(&[3], S::ONE);
            let y = t.batch_norm(
                xid,
                scale,
                shift,
                BnMode::Train {
                    running_mean: &mut rm,
                    running_var: &mut rv,
                    momentum: S::from_f64(0.1),
                },
            )?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &xb,
    );
    let mu = Tensor::randn(&[2, 4], S::ZERO, S::ONE, &mut rng);
    run(
        "gaussian_sample/mu",
        &|t, m| {
            let ls = t.constant(Tensor::full(&[2, 4], S::from_f64(-0.4)));
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let z = t.gaussian_sample(m, ls, &mut r)?;
            let sq = t.mul(z, z)?;
            Ok(t.sum_all(sq))
        },
        &mu,
    );
    let logits = Tensor::randn(&[2, 16, 1, 2, 2], S::ZERO, S::ONE, &mut rng);
    run(
        "categorical_nll/logits",
        &|t, l| {
            let targets: Vec<u8> = (0..8).map(|i| (i * 3 % 16) as u8).collect();
            let nll = t.categorical_nll(l, 16, &targets)?;
            t.mean_batch(nll)
        },
        &logits,
    );
    let ls = Tensor::randn(&[2, 5], S::ZERO, S::from_f64(0.4), &mut rng);
    run(
        "gaussian_kl/log_sigma",
        &|t, l| {
            let m = t.constant(Tensor::full(&[2, 5], S::from_f64(0.3)));
            let kl = t.gaussian_kl(m, l)?;
            t.mean_batch(kl)
        },
        &ls,
    );
}

fn metric_oracles(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(9001);
    let mut exact = true;
    let mut worst = (0usize, 0usize);
    for _ in 0..500 {
        let n = rng.gen_range(1..=200);
        let m = rng.gen_range(1..=200);
        let gen = |rng: &mut ChaCha8Rng, k: usize| -> Vec<f64> {
            (0..k).map(|_| (rng.gen_range(-10..=10) as f64) * 0.5).collect()
        };
        let s = LabeledScores::new(gen(&mut rng, n), gen(&mut rng, m), "v").unwrap();
        if auroc(&s).unwrap() != auroc_pairwise_oracle(&s) {
            exact = false;
            worst = (n, m);
        }
    }
    report.check(
        "auroc rank == pairwise brute force",
        exact,
        if exact {
            "500/500 random tied instances identical".into()
        } else {
            format!("mismatch at n={} m={}", worst.0, worst.1)
        },
    );

    let s = LabeledScores::new(vec![1.0, 2.0], vec![1.5, 3.0], "v").unwrap();
    let a = auroc(&s).unwrap();
    report.check("auroc hand case", a == 0.75, format!("got {a}"));
    let s = LabeledScores::new((1..=9).map(f64::from).collect(), vec![0.5], "v").unwrap();
    let p = auprc(&s).unwrap();
    report.check("auprc single-late-ood case", p == 0.1, format!("got {p}"));
    let s = LabeledScores::new(vec![0.0, 0.1], vec![1.0, 2.0], "v").unwrap();
    let f = fpr_at_tpr(&s, 0.8).unwrap();
    report.check("fpr80 perfect separation", f == 0.0, format!("got {f}"));
    let b = bpd(1024.0 * (256f64).ln(), 1024).unwrap();
    report.check(
        "bpd uniform pixels",
        (b - 8.0).abs() < 1e-12,
        format!("got {b}"),
    );
}

fn iwae_quadrature(report: &mut Report) {
    // 1-d latent toy decoder vs direct quadrature, K = 2048
    let toy_nll = |z: f32| -> f64 {
        let center = 128.0 + 90.0 * (z as f64).tanh();
        let row: Vec<f64> = (0..256)
            .map(|bin| -((bin as f64 - center) / 96.0).powi(2))
            .collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        4.0 * (lse - row[165])
    };
    let steps = 20_000;
    let (lo, hi) = (-10.0f64, 10.0f64);
    let dz = (hi - lo) / steps as f64;
    let mut terms = Vec::with_capacity(steps);
    for i in 0..steps {
        let z = lo + (i as f64 + 0.5) * dz;
        let log_prior = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
        terms.push(-toy_nll(z as f32) + log_prior + dz.ln());
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let truth = m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let est = iwae_core(&[0.3], &[(0.7f32).ln()], 2048, &mut rng, |z, count| {
        Ok((0..count).map(|d| toy_nll(z[d]) as f32).collect())
    })
    .unwrap();
    report.check(
        "iwae vs 1-d quadrature (K=2048)",
        (est - truth).abs() < 0.05,
        format!("estimate {est:.4} vs truth {truth:.4}"),
    );
}

fn model_checks(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = VaeConfig {
        nz: 6,
        nf: 4,
        nc: 1,
        beta: 1.0,
        capacity_multiplier: 1.0,
    };
    let model = VaeModel::init(cfg, &mut rng).unwrap();
    let dir = std::env::temp_dir().join(format!("lrvae-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir).ok();
    let path = dir.join("verify.ckpt");
    let round_trip = save_checkpoint(&model, &[("seed".into(), "31".into())], &path)
        .and_then(|_| load_checkpoint(&path))
        .map(|(loaded, _)| model_digest(&loaded) == model_digest(&model));
    report.check(
        "checkpoint round trip bit-exact",
        matches!(round_trip, Ok(true)),
        format!("{round_trip:?}"),
    );
    std::fs::remove_dir_all(&dir).ok();

    let x = gen_noise(1, 1, 5).unwrap();
    let mut settings = LrSettings::for_target(LrTarget::Encoder);
    settings.steps = 0;
    settings.k = 16;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let out = score_lr(&model, &x, &settings, &mut r).unwrap();
    report.check(
        "regret S=0 with shared rng is exactly 0",
        out.record.value == 0.0,
        format!("got {}", out.record.value),
    );

    let tau = encode(&model, &x).unwrap();
    report.check(
        "encoded log-sigma inside the clamp",
        tau.log_sigma.data().iter().all(|v| v.abs() <= 7.0),
        "range check".into(),
    );
}

pub fn run() -> CmdResult {
    let mut report = Report { failures: 0 };
    gradient_checks::<f32>(&mut report, "f32", 1e-3, 1e-2);
    gradient_checks::<f64>(&mut report, "f64", 1e-4, 1e-5);
    metric_oracles(&mut report);
    iwae_quadrature(&mut report);
    model_checks(&mut report);
    if report.failures == 0 {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CmdError::VerifyFailed(report.failures))
    }
}
