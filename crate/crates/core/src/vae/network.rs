//! Forward passes through the conv stacks: a plain evaluation path over raw
//! kernels (likelihood estimation, reconstruction, sampling) and a taped path
//! (training and per-sample optimization). Both iterate the same layer plan,
//! so the two paths cannot drift apart structurally.

use rand::Rng;

use super::{
    decoder_plan, encoder_plan, BnStats, LayerSpec, Posterior, VaeConfig, VaeModel, KERNEL,
};
use crate::data::{ImageBatch, IMG_SIDE};
use crate::tensor::{kernels, BnMode, Params, Tape, Tensor, ValueId, LOG_SIGMA_CLAMP};
use crate::{Error, Result};

/// Image bytes scaled to [0,1] as an `n x c x 32 x 32` tensor.
pub(crate) fn batch_to_unit_tensor(x: &ImageBatch) -> Tensor {
    let scale = 1.0f32 / 255.0;
    let data: Vec<f32> = x.pixels().iter().map(|&b| b as f32 * scale).collect();
    Tensor::new(vec![x.len(), x.channels(), IMG_SIDE, IMG_SIDE], data)
        .expect("pixel buffer length validated by ImageBatch")
}

pub(crate) fn check_channels(cfg: &VaeConfig, x: &ImageBatch) -> Result<()> {
    if x.channels() != cfg.nc {
        return Err(Error::Shape(format!(
            "model expects {} channel(s), batch has {}",
            cfg.nc,
            x.channels()
        )));
    }
    Ok(())
}

/// Run one conv stack in eval mode (running statistics, no recording).
fn run_stack_eval(
    plan: &[LayerSpec],
    params: &Params,
    stats: &[BnStats],
    transposed: bool,
    input: Tensor,
) -> Result<Tensor> {
    let mut h = input;
    let mut pi = 0; // parameter cursor
    for l in plan {
        let w = &params.get(pi).value;
        pi += 1;
        let (n, _, hin, win) = h.dims4()?;
        let mut y;
        if transposed {
            let g = kernels::ConvGeom::conv_transpose(hin, win, KERNEL, l.stride, l.pad)?;
            y = Tensor::zeros(&[n, l.c_out, g.h_in, g.w_in]);
            kernels::convt_fwd(h.data(), n, l.c_in, w.data(), l.c_out, &g, y.data_mut());
        } else {
            let g = kernels::ConvGeom::conv(hin, win, KERNEL, l.stride, l.pad)?;
            y = Tensor::zeros(&[n, l.c_out, g.h_out, g.w_out]);
            kernels::conv2d_fwd(h.data(), n, l.c_in, w.data(), l.c_out, &g, y.data_mut());
        }
        if let Some(si) = l.bn {
            let scale = &params.get(pi).value;
            let shift = &params.get(pi + 1).value;
            pi += 2;
            let (n, c, hh, ww) = y.dims4()?;
            let mut out = Tensor::zeros(&[n, c, hh, ww]);
            kernels::bn_eval_fwd(
                y.data(),
                n,
                c,
                hh * ww,
                scale.data(),
                shift.data(),
                stats[si].mean.data(),
                stats[si].var.data(),
                out.data_mut(),
            );
            out.data_mut().iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0;
                }
            });
            y = out;
        }
        h = y;
    }
    Ok(h)
}

/// Posterior parameters for a batch, eval-mode batch norm. Inputs are scaled
/// to [0,1] before the first convolution; the first `nz` output channels are
/// the mean, the second `nz` the (clamped) log standard deviation.
pub fn encode(model: &VaeModel, x: &ImageBatch) -> Result<Posterior> {
    check_channels(&model.config, x)?;
    if x.is_empty() {
        return Err(Error::Value("cannot encode an empty batch".into()));
    }
    let h = run_stack_eval(
        &encoder_plan(&model.config),
        &model.encoder,
        &model.enc_stats,
        false,
        batch_to_unit_tensor(x),
    )?;
    split_posterior(&h, model.config.nz)
}

pub(crate) fn split_posterior(h: &Tensor, nz: usize) -> Result<Posterior> {
    let n = h.shape()[0];
    if h.numel() != n * 2 * nz {
        return Err(Error::Shape(format!(
            "encoder output {:?} does not hold 2 x {nz} per sample",
            h.shape()
        )));
    }
    let clamp = LOG_SIGMA_CLAMP as f32;
    let mut mu = Tensor::zeros(&[n, nz]);
    let mut ls = Tensor::zeros(&[n, nz]);
    for i in 0..n {
        let row = &h.data()[i * 2 * nz..(i + 1) * 2 * nz];
        mu.data_mut()[i * nz..(i + 1) * nz].copy_from_slice(&row[..nz]);
        for (o, v) in ls.data_mut()[i * nz..(i + 1) * nz]
            .iter_mut()
            .zip(row[nz..].iter())
        {
            *o = v.clamp(-clamp, clamp);
        }
    }
    Ok(Posterior { mu, log_sigma: ls })
}

/// Per-pixel categorical logits for a latent batch, `n x 256 x nc x 32 x 32`,
/// eval-mode batch norm.
pub fn decode_logits(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    let logits = decode_logits_flat(model, z)?;
    let n = logits.shape()[0];
    logits.reshaped(vec![n, 256, model.config.nc, IMG_SIDE, IMG_SIDE])
}

/// Same as [`decode_logits`] but keeps the conv layout
/// `n x (256*nc) x 32 x 32` (bin-major channel blocks).
pub(crate) fn decode_logits_flat(model: &VaeModel, z: &Tensor) -> Result<Tensor> {
    let (n, width) = z.dims2()?;
    if width != model.config.nz {
        return Err(Error::Shape(format!(
            "latent width {width}, model expects {}",
            model.config.nz
        )));
    }
    run_stack_eval(
        &decoder_plan(&model.config),
        &model.decoder,
        &model.dec_stats,
        true,
        z.reshaped(vec![n, width, 1, 1])?,
    )
}

/// How a taped stack sources its batch-norm statistics.
pub(crate) enum StatsUse<'a> {
    Train {
        stats: &'a mut [BnStats],
        momentum: f32,
    },
    Eval(&'a [BnStats]),
}

/// Record one conv stack on the tape. `trainable` decides whether parameters
/// enter as differentiable leaves (tagged `set`) or frozen constants.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_stack_taped(
    tape: &mut Tape,
    plan: &[LayerSpec],
    params: &Params,
    mut stats: StatsUse<'_>,
    transposed: bool,
    trainable: bool,
    set: u32,
    input: ValueId,
) -> Result<ValueId> {
    let mut h = input;
    let mut pi = 0;
    for l in plan {
        let w = if trainable {
            tape.param(set, pi, params)
        } else {
            tape.frozen_param(pi, params)
        };
        pi += 1;
        h = if transposed {
            tape.conv_transpose2d(h, w, l.stride, l.pad)?
        } else {
            tape.conv2d(h, w, l.stride, l.pad)?
        };
        if let Some(si) = l.bn {
            let (scale, shift) = if trainable {
                (tape.param(set, pi, params), tape.param(set, pi + 1, params))
            } else {
                (tape.frozen_param(pi, params), tape.frozen_param(pi + 1, params))
            };
            pi += 2;
            h = match &mut stats {
                StatsUse::Train { stats, momentum } => {
                    let s = &mut stats[si];
                    tape.batch_norm(
                        h,
                        scale,
                        shift,
                        BnMode::Train {
                            running_mean: &mut s.mean,
                            running_var: &mut s.var,
                            momentum: *momentum,
                        },
                    )?
                }
                StatsUse::Eval(stats) => tape.batch_norm(
                    h,
                    scale,
                    shift,
                    BnMode::Eval {
                        running_mean: &stats[si].mean,
                        running_var: &stats[si].var,
                    },
                )?,
            };
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Taped encoder pass ending in the clamped posterior split.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encoder_taped(
    tape: &mut Tape,
    cfg: &VaeConfig,
    params: &Params,
    stats: StatsUse<'_>,
    trainable: bool,
    set: u32,
    x01: ValueId,
) -> Result<(ValueId, ValueId)> {
    let h = run_stack_taped(
        tape,
        &encoder_plan(cfg),
        params,
        stats,
        false,
        trainable,
        set,
        x01,
    )?;
    let n = tape.value(h).shape()[0];
    let flat = tape.reshape(h, vec![n, 2 * cfg.nz])?;
    let mu = tape.slice_cols(flat, 0, cfg.nz)?;
    let ls_raw = tape.slice_cols(flat, cfg.nz, cfg.nz)?;
    let clamp = LOG_SIGMA_CLAMP as f32;
    let ls = tape.clamp(ls_raw, -clamp, clamp);
    Ok((mu, ls))
}

/// Taped decoder pass from an `n x nz` latent to flat logits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_taped(
    tape: &mut Tape,
    cfg: &VaeConfig,
    params: &Params,
    stats: StatsUse<'_>,
    trainable: bool,
    set: u32,
    z: ValueId,
) -> Result<ValueId> {
    let (n, width) = tape.value(z).dims2()?;
    if width != cfg.nz {
        return Err(Error::Shape(format!(
            "latent width {width}, model expects {}",
            cfg.nz
        )));
    }
    let z4 = tape.reshape(z, vec![n, width, 1, 1])?;
    run_stack_taped(
        tape,
        &decoder_plan(cfg),
        params,
        stats,
        true,
        trainable,
        set,
        z4,
    )
}

fn argmax_to_batch(logits_flat: &Tensor, nc: usize, tag: &str, ids: Vec<String>) -> Result<ImageBatch> {
    let (n, cw, h, w) = logits_flat.dims4()?;
    debug_assert_eq!(cw, 256 * nc);
    let hw = h * w;
    let mut pixels = vec![0u8; n * nc * hw];
    let data = logits_flat.data();
    for i in 0..n {
        let base = i * cw * hw;
        for c in 0..nc {
            for p in 0..hw {
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0u8;
                for bin in 0..256 {
                    let v = data[base + (bin * nc + c) * hw + p];
                    if v > best {
                        best = v;
                        arg = bin as u8;
                    }
                }
                pixels[(i * nc + c) * hw + p] = arg;
            }
        }
    }
    ImageBatch::new(pixels, nc, tag, ids)
}

/// Most likely reconstruction: decode the posterior mean and take the argmax
/// intensity bin of every pixel.
pub fn reconstruct(model: &VaeModel, x: &ImageBatch) -> Result<ImageBatch> {
    let post = encode(model, x)?;
    let logits = decode_logits_flat(model, &post.mu)?;
    argmax_to_batch(
        &logits,
        model.config.nc,
        &x.dataset_tag,
        x.sample_ids.clone(),
    )
}

/// Draw `n` latents from the prior and decode their argmax images.
pub fn sample<R: Rng>(model: &VaeModel, n: usize, rng: &mut R) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::Value("sample needs n >= 1".into()));
    }
    let z = Tensor::randn(&[n, model.config.nz], 0.0, 1.0, rng);
    let logits = decode_logits_flat(model, &z)?;
    let ids = (0..n).map(|i| format!("sample/{i}")).collect();
    argmax_to_batch(&logits, model.config.nc, "sample", ids)
}
