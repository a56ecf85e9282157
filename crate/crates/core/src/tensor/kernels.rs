//! Raw array math behind the tape operations.
//!
//! Everything here is a pure function over flat row-major slices; the tape
//! records which kernel produced which node and replays the matching backward
//! kernel. Convolutions are im2col + gemm. The same three primitives cover
//! forward and backward of both convolution directions:
//!
//!   conv2d forward      = gather(gemm)          [`conv2d_fwd`]
//!   conv2d grad-input   = [`convt_fwd`] with the same weight
//!   conv2d grad-weight  = [`conv2d_grad_w`]
//!   convT forward       = gemm + scatter        [`convt_fwd`]
//!   convT grad-input    = [`conv2d_fwd`] with the same weight
//!   convT grad-weight   = [`conv2d_grad_w`] with input/grad roles swapped

use super::Scalar;
use crate::{Error, Result};

/// Spatial geometry of one convolution: `out = (in + 2*pad - k) / stride + 1`.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub h_in: usize,
    pub w_in: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn conv(h_in: usize, w_in: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Shape("stride and kernel size must be >= 1".into()));
        }
        if h_in + 2 * pad < k || w_in + 2 * pad < k {
            return Err(Error::Shape(format!(
                "padded input {}x{} smaller than {k}x{k} kernel",
                h_in + 2 * pad,
                w_in + 2 * pad
            )));
        }
        Ok(ConvGeom {
            h_in,
            w_in,
            k,
            stride,
            pad,
            h_out: (h_in + 2 * pad - k) / stride + 1,
            w_out: (w_in + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the transposed convolution producing
    /// `out = (in - 1) * stride - 2*pad + k`; stored so that the *conv*
    /// direction of the same geometry maps `h_out -> h_in`.
    pub fn conv_transpose(
        h_in: usize,
        w_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Shape("stride and kernel size must be >= 1".into()));
        }
        let h_out = ((h_in - 1) * stride + k).checked_sub(2 * pad);
        let w_out = ((w_in - 1) * stride + k).checked_sub(2 * pad);
        match (h_out, w_out) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok(ConvGeom {
                h_in: h,
                w_in: w,
                k,
                stride,
                pad,
                h_out: h_in,
                w_out: w_in,
            }),
            _ => Err(Error::Shape(
                "transposed convolution output would be empty".into(),
            )),
        }
    }
}

/// Gather one sample into column form: `cols[(c*k+i)*k+j][oy*w_out+ox] =
/// x[c][oy*s+i-p][ox*s+j-p]` (zero outside).
fn im2col<S: Scalar>(x: &[S], c_in: usize, g: &ConvGeom, cols: &mut [S]) {
    let (h, w, k, s, p) = (g.h_in, g.w_in, g.k, g.stride, g.pad);
    let (ho, wo) = (g.h_out, g.w_out);
    debug_assert_eq!(x.len(), c_in * h * w);
    debug_assert_eq!(cols.len(), c_in * k * k * ho * wo);
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.iter_mut().for_each(|v| *v = S::ZERO);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *o = if ix >= 0 && ix < w as isize {
                            xrow[ix as usize]
                        } else {
                            S::ZERO
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add column form back to one sample (`+=` adjoint of [`im2col`]).
fn col2im_add<S: Scalar>(cols: &[S], c_in: usize, g: &ConvGeom, x: &mut [S]) {
    let (h, w, k, s, p) = (g.h_in, g.w_in, g.k, g.stride, g.pad);
    let (ho, wo) = (g.h_out, g.w_out);
    for c in 0..c_in {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// y[n][co][oy][ox] = sum_{ci,ki,kj} x[n][ci][..][..] * w[co][ci][ki][kj]
///
/// `w` is row-major `c_out x (c_in*k*k)`.
pub fn conv2d_fwd<S: Scalar>(
    x: &[S],
    n: usize,
    c_in: usize,
    w: &[S],
    c_out: usize,
    g: &ConvGeom,
    y: &mut [S],
) {
    let ckk = c_in * g.k * g.k;
    let hw_out = g.h_out * g.w_out;
    debug_assert_eq!(w.len(), c_out * ckk);
    debug_assert_eq!(y.len(), n * c_out * hw_out);
    let mut cols = vec![S::ZERO; ckk * hw_out];
    let hw_in = g.h_in * g.w_in;
    for i in 0..n {
        im2col(&x[i * c_in * hw_in..(i + 1) * c_in * hw_in], c_in, g, &mut cols);
        unsafe {
            S::gemm(
                c_out,
                ckk,
                hw_out,
                S::ONE,
                w.as_ptr(),
                ckk as isize,
                1,
                cols.as_ptr(),
                hw_out as isize,
                1,
                S::ZERO,
                y[i * c_out * hw_out..].as_mut_ptr(),
                hw_out as isize,
                1,
            );
        }
    }
}

/// gw[co][ci][ki][kj] += sum_{n,oy,ox} gy[n][co][oy][ox] * x[n][ci][..][..]
///
/// Accumulates over the batch in index order, so results are deterministic.
pub fn conv2d_grad_w<S: Scalar>(
    x: &[S],
    n: usize,
    c_in: usize,
    gy: &[S],
    c_out: usize,
    g: &ConvGeom,
    gw: &mut [S],
) {
    let ckk = c_in * g.k * g.k;
    let hw_out = g.h_out * g.w_out;
    let hw_in = g.h_in * g.w_in;
    debug_assert_eq!(gw.len(), c_out * ckk);
    let mut cols = vec![S::ZERO; ckk * hw_out];
    for i in 0..n {
        im2col(&x[i * c_in * hw_in..(i + 1) * c_in * hw_in], c_in, g, &mut cols);
        unsafe {
            // gw += gy_i (c_out x hw_out) * cols^T (hw_out x ckk)
            S::gemm(
                c_out,
                hw_out,
                ckk,
                S::ONE,
                gy[i * c_out * hw_out..].as_ptr(),
                hw_out as isize,
                1,
                cols.as_ptr(),
                1,
                hw_out as isize,
                S::ONE,
                gw.as_mut_ptr(),
                ckk as isize,
                1,
            );
        }
    }
}

/// Transposed convolution: the adjoint of [`conv2d_fwd`] under the same
/// geometry. Input spatial size is `g.h_out x g.w_out` (the conv-direction
/// output grid); result spatial size is `g.h_in x g.w_in`.
///
/// `w` is `c_in_t x (c_out_t*k*k)` row-major, i.e. indexed `w[ci][co][ki][kj]`
/// where `ci` counts channels of `x`.
pub fn convt_fwd<S: Scalar>(
    x: &[S],
    n: usize,
    c_in_t: usize,
    w: &[S],
    c_out_t: usize,
    g: &ConvGeom,
    y: &mut [S],
) {
    let okk = c_out_t * g.k * g.k;
    let hw_src = g.h_out * g.w_out;
    let hw_dst = g.h_in * g.w_in;
    debug_assert_eq!(x.len(), n * c_in_t * hw_src);
    debug_assert_eq!(w.len(), c_in_t * okk);
    debug_assert_eq!(y.len(), n * c_out_t * hw_dst);
    y.iter_mut().for_each(|v| *v = S::ZERO);
    let mut cols = vec![S::ZERO; okk * hw_src];
    for i in 0..n {
        unsafe {
            // cols (okk x hw_src) = w^T (okk x c_in_t) * x_i (c_in_t x hw_src)
            S::gemm(
                okk,
                c_in_t,
                hw_src,
                S::ONE,
                w.as_ptr(),
                1,
                okk as isize,
                x[i * c_in_t * hw_src..].as_ptr(),
                hw_src as isize,
                1,
                S::ZERO,
                cols.as_mut_ptr(),
                hw_src as isize,
                1,
            );
        }
        col2im_add(&cols, c_out_t, g, &mut y[i * c_out_t * hw_dst..(i + 1) * c_out_t * hw_dst]);
    }
}

/// Per-channel statistics saved by the batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

pub const BN_EPS: f64 = 1e-5;

/// Train-mode batch norm over N x C x H x W: normalize by batch statistics,
/// update running stats by EMA with the given momentum (weight of the new
/// observation; running variance uses the unbiased estimate).
#[allow(clippy::too_many_arguments)]
pub fn bn_train_fwd<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    scale: &[S],
    shift: &[S],
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: S,
    y: &mut [S],
) -> Result<BnSaved<S>> {
    let m = n * hw;
    if m < 2 {
        return Err(Error::Numeric(
            "batch norm in train mode needs at least 2 elements per channel".into(),
        ));
    }
    let inv_m = S::ONE / S::from_f64(m as f64);
    let eps = S::from_f64(BN_EPS);
    let mut saved = BnSaved {
        mean: vec![S::ZERO; c],
        inv_std: vec![S::ZERO; c],
    };
    for ch in 0..c {
        let mut sum = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for v in &x[base..base + hw] {
                sum += *v;
            }
        }
        let mean = sum * inv_m;
        let mut var_sum = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for v in &x[base..base + hw] {
                let d = *v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum * inv_m;
        let inv_std = S::ONE / (var + eps).sqrt();
        let (a, b) = (scale[ch] * inv_std, shift[ch]);
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for (xo, yo) in x[base..base + hw].iter().zip(y[base..base + hw].iter_mut()) {
                *yo = a * (*xo - mean) + b;
            }
        }
        let unbiased = var_sum / S::from_f64((m - 1) as f64);
        running_mean[ch] = (S::ONE - momentum) * running_mean[ch] + momentum * mean;
        running_var[ch] = (S::ONE - momentum) * running_var[ch] + momentum * unbiased;
        saved.mean[ch] = mean;
        saved.inv_std[ch] = inv_std;
    }
    Ok(saved)
}

/// Eval-mode batch norm: normalize by the provided running statistics.
pub fn bn_eval_fwd<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    scale: &[S],
    shift: &[S],
    running_mean: &[S],
    running_var: &[S],
    y: &mut [S],
) -> BnSaved<S> {
    let eps = S::from_f64(BN_EPS);
    let mut saved = BnSaved {
        mean: running_mean.to_vec(),
        inv_std: vec![S::ZERO; c],
    };
    for ch in 0..c {
        let inv_std = S::ONE / (running_var[ch] + eps).sqrt();
        saved.inv_std[ch] = inv_std;
        let (a, b) = (scale[ch] * inv_std, shift[ch] - scale[ch] * inv_std * running_mean[ch]);
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for (xo, yo) in x[base..base + hw].iter().zip(y[base..base + hw].iter_mut()) {
                *yo = a * *xo + b;
            }
        }
    }
    saved
}

/// Batch-norm backward. In train mode the batch statistics are themselves a
/// function of the input, which yields the usual centering corrections; in
/// eval mode the stats are constants and the op is a per-channel affine map.
#[allow(clippy::too_many_arguments)]
pub fn bn_bwd<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    hw: usize,
    scale: &[S],
    saved: &BnSaved<S>,
    train: bool,
    gy: &[S],
    gx: &mut [S],
    gscale: &mut [S],
    gshift: &mut [S],
) {
    let m = n * hw;
    let inv_m = S::ONE / S::from_f64(m as f64);
    for ch in 0..c {
        let (mean, inv_std) = (saved.mean[ch], saved.inv_std[ch]);
        let mut sum_gy = S::ZERO;
        let mut sum_gy_xhat = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for (xv, gv) in x[base..base + hw].iter().zip(gy[base..base + hw].iter()) {
                sum_gy += *gv;
                sum_gy_xhat += *gv * (*xv - mean) * inv_std;
            }
        }
        gscale[ch] += sum_gy_xhat;
        gshift[ch] += sum_gy;
        let a = scale[ch] * inv_std;
        if train {
            let mean_gy = sum_gy * inv_m;
            let mean_gy_xhat = sum_gy_xhat * inv_m;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in 0..hw {
                    let xhat = (x[base + j] - mean) * inv_std;
                    gx[base + j] += a * (gy[base + j] - mean_gy - xhat * mean_gy_xhat);
                }
            }
        } else {
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in 0..hw {
                    gx[base + j] += a * gy[base + j];
                }
            }
        }
    }
}

/// Per-pixel log-sum-exp over the 256 intensity bins.
///
/// `logits` is `n x bins x p` row-major; returns `lse` of length `n*p`.
pub fn row_logsumexp<S: Scalar>(logits: &[S], n: usize, bins: usize, p: usize) -> Vec<S> {
    let mut lse = vec![S::ZERO; n * p];
    let mut maxes = vec![S::ZERO; p];
    let mut sums = vec![S::ZERO; p];
    for i in 0..n {
        let base = i * bins * p;
        maxes.copy_from_slice(&logits[base..base + p]);
        for k in 1..bins {
            let row = &logits[base + k * p..base + (k + 1) * p];
            for (mx, v) in maxes.iter_mut().zip(row.iter()) {
                if *v > *mx {
                    *mx = *v;
                }
            }
        }
        sums.iter_mut().for_each(|s| *s = S::ZERO);
        for k in 0..bins {
            let row = &logits[base + k * p..base + (k + 1) * p];
            for ((s, v), mx) in sums.iter_mut().zip(row.iter()).zip(maxes.iter()) {
                *s += (*v - *mx).exp_approx();
            }
        }
        for ((o, s), mx) in lse[i * p..(i + 1) * p].iter_mut().zip(sums.iter()).zip(maxes.iter()) {
            *o = *mx + s.ln();
        }
    }
    lse
}

/// Per-sample categorical negative log-likelihood in nats:
/// `nll[i] = sum_p (lse[i][p] - logits[i][t_p][p])`.
pub fn categorical_nll_fwd<S: Scalar>(
    logits: &[S],
    n: usize,
    bins: usize,
    p: usize,
    targets: &[u8],
    lse: &[S],
) -> Vec<S> {
    debug_assert_eq!(targets.len(), n * p);
    let mut nll = vec![S::ZERO; n];
    for i in 0..n {
        let base = i * bins * p;
        let mut acc = S::ZERO;
        for j in 0..p {
            let t = targets[i * p + j] as usize;
            acc += lse[i * p + j] - logits[base + t * p + j];
        }
        nll[i] = acc;
    }
    nll
}

/// d nll / d logits = (softmax - one_hot(target)) * upstream, per sample.
pub fn categorical_nll_bwd<S: Scalar>(
    logits: &[S],
    n: usize,
    bins: usize,
    p: usize,
    targets: &[u8],
    lse: &[S],
    g_nll: &[S],
    g_logits: &mut [S],
) {
    for i in 0..n {
        let base = i * bins * p;
        let g = g_nll[i];
        for k in 0..bins {
            let row = base + k * p;
            for j in 0..p {
                g_logits[row + j] += (logits[row + j] - lse[i * p + j]).exp_approx() * g;
            }
        }
        for j in 0..p {
            let t = targets[i * p + j] as usize;
            g_logits[base + t * p + j] = g_logits[base + t * p + j] - g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_ref(
        x: &[f64],
        (n, ci, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        co: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let mut y = vec![0.0; n * co * ho * wo];
        for i in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[((i * ci + c) * h + iy as usize) * w + ix as usize]
                                            * wt[((o * ci + c) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        y[((i * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for &(n, ci, h, w, co, k, s, p) in &[
            (1usize, 1usize, 3usize, 3usize, 1usize, 1usize, 1usize, 0usize),
            (2, 2, 5, 5, 3, 3, 1, 1),
            (1, 3, 6, 6, 2, 4, 2, 1),
            (2, 1, 4, 4, 2, 4, 2, 1),
        ] {
            let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wt: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = ConvGeom::conv(h, w, k, s, p).unwrap();
            let mut y = vec![0.0; n * co * g.h_out * g.w_out];
            conv2d_fwd(&x, n, ci, &wt, co, &g, &mut y);
            let want = conv_ref(&x, (n, ci, h, w), &wt, co, k, s, p);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let x: Vec<f32> = (0..2 * 3 * 4).map(|i| (i as f32) * 0.37 - 2.0).collect();
        let scale = vec![1.0f32; 3];
        let shift = vec![0.0f32; 3];
        let mut rm = vec![0.0f32; 3];
        let mut rv = vec![1.0f32; 3];
        let mut y = vec![0.0f32; x.len()];
        bn_train_fwd(&x, 2, 3, 4, &scale, &shift, &mut rm, &mut rv, 0.1, &mut y).unwrap();
        for ch in 0..3 {
            let vals: Vec<f32> = (0..2)
                .flat_map(|i| y[(i * 3 + ch) * 4..(i * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-4, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_train_rejects_singleton() {
        let x = vec![1.0f32];
        let mut rm = vec![0.0f32];
        let mut rv = vec![1.0f32];
        let mut y = vec![0.0f32];
        let r = bn_train_fwd(&x, 1, 1, 1, &[1.0], &[0.0], &mut rm, &mut rv, 0.1, &mut y);
        assert!(r.is_err());
    }
}
