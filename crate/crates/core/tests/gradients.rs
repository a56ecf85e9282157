//! Finite-difference checks for every differentiable tape operation, run in
//! both precisions: f32 at the production tolerance (1e-2) and f64 at the
//! tight test-mode tolerance (1e-5).

use lrvae::tensor::{check_gradients, BnMode, Scalar, Tape, Tensor, ValueId};
use lrvae::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Mode {
    h: f64,
    tol: f64,
}

fn run_all<S: Scalar>(mode: Mode) {
    let Mode { h, tol } = mode;
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_517);
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str,
                     f: &dyn Fn(&mut Tape<S>, ValueId) -> Result<ValueId>,
                     point: &Tensor<S>| {
        let err = check_gradients(f, point, h).unwrap();
        if err >= tol {
            failures.push(format!("{name}: {err:.3e}"));
        }
    };

    // conv2d wrt input and weight (squared so grads depend on values)
    let w_conv = Tensor::randn(&[3, 2, 3, 3], S::ZERO, S::from_f64(0.5), &mut rng);
    let x_conv = Tensor::randn(&[2, 2, 5, 5], S::ZERO, S::ONE, &mut rng);
    {
        let w = w_conv.clone();
        check(
            "conv2d/input",
            &move |tape, x| {
                let wid = tape.constant(w.clone());
                let y = tape.conv2d(x, wid, 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x_conv,
        );
    }
    {
        let x = x_conv.clone();
        check(
            "conv2d/weight",
            &move |tape, wid| {
                let xid = tape.constant(x.clone());
                let y = tape.conv2d(xid, wid, 1, 0)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &w_conv,
        );
    }

    // conv_transpose2d wrt input and weight
    let w_deconv = Tensor::randn(&[2, 3, 4, 4], S::ZERO, S::from_f64(0.5), &mut rng);
    let x_deconv = Tensor::randn(&[2, 2, 3, 3], S::ZERO, S::ONE, &mut rng);
    {
        let w = w_deconv.clone();
        check(
            "conv_transpose2d/input",
            &move |tape, x| {
                let wid = tape.constant(w.clone());
                let y = tape.conv_transpose2d(x, wid, 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x_deconv,
        );
    }
    {
        let x = x_deconv.clone();
        check(
            "conv_transpose2d/weight",
            &move |tape, wid| {
                let xid = tape.constant(x.clone());
                let y = tape.conv_transpose2d(xid, wid, 1, 0)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &w_deconv,
        );
    }

    // batch norm, train and eval, wrt input / scale / shift
    let x_bn = Tensor::randn(&[2, 3, 4, 4], S::from_f64(0.3), S::ONE, &mut rng);
    let scale_bn = Tensor::randn(&[3], S::ONE, S::from_f64(0.1), &mut rng);
    let shift_bn = Tensor::randn(&[3], S::ZERO, S::from_f64(0.1), &mut rng);
    for train in [true, false] {
        let tag = if train { "train" } else { "eval" };
        let (sc, sh) = (scale_bn.clone(), shift_bn.clone());
        check(
            &format!("batch_norm[{tag}]/input"),
            &move |tape, x| {
                let scale = tape.constant(sc.clone());
                let shift = tape.constant(sh.clone());
                let mut rm = Tensor::full(&[3], S::from_f64(0.2));
                let mut rv = Tensor::full(&[3], S::from_f64(1.5));
                let mode = if train {
                    BnMode::Train {
                        running_mean: &mut rm,
                        running_var: &mut rv,
                        momentum: S::from_f64(0.1),
                    }
                } else {
                    BnMode::Eval {
                        running_mean: &rm,
                        running_var: &rv,
                    }
                };
                let y = tape.batch_norm(x, scale, shift, mode)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &x_bn,
        );
        let (xb, sh) = (x_bn.clone(), shift_bn.clone());
        check(
            &format!("batch_norm[{tag}]/scale"),
            &move |tape, scale| {
                let x = tape.constant(xb.clone());
                let shift = tape.constant(sh.clone());
                let mut rm = Tensor::full(&[3], S::from_f64(0.2));
                let mut rv = Tensor::full(&[3], S::from_f64(1.5));
                let mode = if train {
                    BnMode::Train {
                        running_mean: &mut rm,
                        running_var: &mut rv,
                        momentum: S::from_f64(0.1),
                    }
                } else {
                    BnMode::Eval {
                        running_mean: &rm,
                        running_var: &rv,
                    }
                };
                let y = tape.batch_norm(x, scale, shift, mode)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &scale_bn,
        );
        let (xb, sc) = (x_bn.clone(), scale_bn.clone());
        check(
            &format!("batch_norm[{tag}]/shift"),
            &move |tape, shift| {
                let x = tape.constant(xb.clone());
                let scale = tape.constant(sc.clone());
                let mut rm = Tensor::full(&[3], S::from_f64(0.2));
                let mut rv = Tensor::full(&[3], S::from_f64(1.5));
                let mode = if train {
                    BnMode::Train {
                        running_mean: &mut rm,
                        running_var: &mut rv,
                        momentum: S::from_f64(0.1),
                    }
                } else {
                    BnMode::Eval {
                        running_mean: &rm,
                        running_var: &rv,
                    }
                };
                let y = tape.batch_norm(x, scale, shift, mode)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &shift_bn,
        );
    }

    // relu away from the kink
    let x_relu = Tensor::from_fn(&[6], |i| S::from_f64(0.4 * (i as f64) - 1.1));
    check(
        "relu",
        &|tape, x| {
            let y = tape.relu(x);
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
        &x_relu,
    );

    // clamp away from its boundaries
    let x_clamp = Tensor::from_fn(&[5], |i| S::from_f64(1.3 * (i as f64) - 3.1));
    check(
        "clamp",
        &|tape, x| {
            let y = tape.clamp(x, S::from_f64(-2.0), S::from_f64(2.0));
            let sq = tape.mul(y, y)?;
            Ok(tape.sum_all(sq))
        },
        &x_clamp,
    );

    // reparameterized sample wrt mu and log_sigma (fixed draw per eval)
    let mu0 = Tensor::randn(&[2, 4], S::ZERO, S::ONE, &mut rng);
    let ls0 = Tensor::randn(&[2, 4], S::ZERO, S::from_f64(0.3), &mut rng);
    {
        let ls = ls0.clone();
        check(
            "gaussian_sample/mu",
            &move |tape, mu| {
                let lsid = tape.constant(ls.clone());
                let mut r = ChaCha8Rng::seed_from_u64(7);
                let z = tape.gaussian_sample(mu, lsid, &mut r)?;
                let sq = tape.mul(z, z)?;
                Ok(tape.sum_all(sq))
            },
            &mu0,
        );
    }
    {
        let mu = mu0.clone();
        check(
            "gaussian_sample/log_sigma",
            &move |tape, ls| {
                let muid = tape.constant(mu.clone());
                let mut r = ChaCha8Rng::seed_from_u64(7);
                let z = tape.gaussian_sample(muid, ls, &mut r)?;
                let sq = tape.mul(z, z)?;
                Ok(tape.sum_all(sq))
            },
            &ls0,
        );
    }

    // categorical NLL wrt logits
    let logits0 = Tensor::randn(&[2, 16, 1, 2, 2], S::ZERO, S::ONE, &mut rng);
    let targets: Vec<u8> = (0..8).map(|i| (i * 5 % 16) as u8).collect();
    {
        let t = targets.clone();
        check(
            "categorical_nll",
            &move |tape, logits| {
                let nll = tape.categorical_nll(logits, 16, &t)?;
                Ok(tape.mean_batch(nll)?)
            },
            &logits0,
        );
    }

    // KL wrt mu and log_sigma
    let muk = Tensor::randn(&[2, 5], S::ZERO, S::ONE, &mut rng);
    let lsk = Tensor::randn(&[2, 5], S::ZERO, S::from_f64(0.4), &mut rng);
    {
        let ls = lsk.clone();
        check(
            "gaussian_kl/mu",
            &move |tape, mu| {
                let lsid = tape.constant(ls.clone());
                let kl = tape.gaussian_kl(mu, lsid)?;
                Ok(tape.mean_batch(kl)?)
            },
            &muk,
        );
    }
    {
        let mu = muk.clone();
        check(
            "gaussian_kl/log_sigma",
            &move |tape, ls| {
                let muid = tape.constant(mu.clone());
                let kl = tape.gaussian_kl(muid, ls)?;
                Ok(tape.mean_batch(kl)?)
            },
            &lsk,
        );
    }

    // slice + reshape + arithmetic chain
    let x_chain = Tensor::randn(&[3, 6], S::ZERO, S::ONE, &mut rng);
    check(
        "slice/reshape/arith chain",
        &|tape, x| {
            let a = tape.slice_cols(x, 0, 3)?;
            let b = tape.slice_cols(x, 3, 3)?;
            let s = tape.sub(a, b)?;
            let r = tape.reshape(s, vec![9])?;
            let n = tape.neg(r);
            let sc = tape.scale(n, S::from_f64(1.7));
            let sq = tape.mul(sc, sc)?;
            Ok(tape.sum_all(sq))
        },
        &x_chain,
    );

    assert!(
        failures.is_empty(),
        "gradient checks above tolerance {tol}: {failures:?}"
    );
}

#[test]
fn op_gradients_f32() {
    run_all::<f32>(Mode { h: 1e-3, tol: 1e-2 });
}

#[test]
fn op_gradients_f64() {
    run_all::<f64>(Mode { h: 1e-4, tol: 1e-5 });
}

/// The spec's toy "encoder ELBO" in miniature: a conv encoder over a 4x4
/// image into a 2-d latent, reparameterized draw, deconv decoder to 16-bin
/// logits, NLL plus KL. Checked end to end with the first conv weight as the
/// differentiated leaf.
fn toy_elbo<S: Scalar>(h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x_img = Tensor::randn(&[2, 1, 4, 4], S::from_f64(0.5), S::from_f64(0.2), &mut rng);
    let targets: Vec<u8> = (0..32).map(|i| (i * 3 % 16) as u8).collect();
    let w_enc2 = Tensor::randn(&[4, 2, 2, 2], S::ZERO, S::from_f64(0.4), &mut rng);
    let w_dec = Tensor::randn(&[2, 16, 4, 4], S::ZERO, S::from_f64(0.4), &mut rng);
    let scale = Tensor::randn(&[2], S::ONE, S::from_f64(0.05), &mut rng);
    let shift = Tensor::randn(&[2], S::ZERO, S::from_f64(0.05), &mut rng);
    let w_enc1 = Tensor::randn(&[2, 1, 2, 2], S::ZERO, S::from_f64(0.4), &mut rng);

    let f = move |tape: &mut Tape<S>, w1: ValueId| -> Result<ValueId> {
        let x = tape.constant(x_img.clone());
        let h1 = tape.conv2d(x, w1, 2, 0)?; // 2x1x4x4 -> 2x2x2x2
        let sc = tape.constant(scale.clone());
        let sh = tape.constant(shift.clone());
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], S::ONE);
        let hbn = tape.batch_norm(
            h1,
            sc,
            sh,
            BnMode::Train {
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: S::from_f64(0.1),
            },
        )?;
        let hr = tape.relu(hbn);
        let w2 = tape.constant(w_enc2.clone());
        let henc = tape.conv2d(hr, w2, 1, 0)?; // -> 2x4x1x1
        let flat = tape.reshape(henc, vec![2, 4])?;
        let mu = tape.slice_cols(flat, 0, 2)?;
        let ls_raw = tape.slice_cols(flat, 2, 2)?;
        let ls = tape.clamp(ls_raw, S::from_f64(-7.0), S::from_f64(7.0));
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let z = tape.gaussian_sample(mu, ls, &mut r)?;
        let z4 = tape.reshape(z, vec![2, 2, 1, 1])?;
        let wd = tape.constant(w_dec.clone());
        let logits = tape.conv_transpose2d(z4, wd, 1, 0)?; // -> 2x16x4x4
        let nll = tape.categorical_nll(logits, 16, &targets)?;
        let kl = tape.gaussian_kl(mu, ls)?;
        let neg_elbo = tape.add(nll, kl)?;
        Ok(tape.mean_batch(neg_elbo)?)
    };
    check_gradients(f, &w_enc1, h).unwrap()
}

#[test]
fn toy_elbo_gradient_f32() {
    let err = toy_elbo::<f32>(1e-3);
    assert!(err < 1e-2, "toy ELBO f32 gradient error {err}");
}

#[test]
fn toy_elbo_gradient_f64() {
    let err = toy_elbo::<f64>(1e-4);
    assert!(err < 1e-5, "toy ELBO f64 gradient error {err}");
}

/// Same graph, same seed, two runs: outputs and gradients must match bit for
/// bit on the same platform.
#[test]
fn taped_pipeline_is_deterministic() {
    let run = || -> (Vec<u32>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::randn(&[2, 2, 6, 6], 0.0, 1.0, &mut rng));
        let w = tape.constant(Tensor::randn(&[3, 2, 4, 4], 0.0, 0.3, &mut rng));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        let r = tape.relu(y);
        let flat = tape.reshape(r, vec![2, 27]).unwrap();
        let mu = tape.slice_cols(flat, 0, 13).unwrap();
        let ls = tape.slice_cols(flat, 13, 13).unwrap();
        let z = tape.gaussian_sample(mu, ls, &mut rng).unwrap();
        let sq = tape.mul(z, z).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        (
            tape.value(loss).data().iter().map(|v| v.to_bits()).collect(),
            grads
                .wrt(x)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect(),
        )
    };
    assert_eq!(run(), run());
}
