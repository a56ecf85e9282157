//! Wengert tape: operations append nodes during the forward pass; the
//! backward pass walks the node list in reverse and accumulates gradients.
//!
//! Nodes that no gradient can reach (`needs_grad == false`, e.g. everything
//! downstream of constants only) are skipped entirely during backward, so
//! frozen submodels cost no backward work beyond what the chain rule needs
//! to pass through them.

use rand::Rng;

use super::kernels::{self, BnSaved, ConvGeom};
use super::{ParamRef, Params, Scalar, Tensor, LOG_SIGMA_CLAMP};
use crate::{Error, Result};

/// Handle to a node (an intermediate value) on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

enum Record<S: Scalar> {
    Leaf {
        param: Option<ParamRef>,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        geom: ConvGeom,
        c_in: usize,
        c_out: usize,
    },
    ConvT2d {
        x: ValueId,
        w: ValueId,
        geom: ConvGeom,
        c_in: usize,
        c_out: usize,
    },
    BatchNorm {
        x: ValueId,
        scale: ValueId,
        shift: ValueId,
        saved: BnSaved<S>,
        train: bool,
    },
    Relu {
        x: ValueId,
    },
    Clamp {
        x: ValueId,
        lo: S,
        hi: S,
    },
    Reshape {
        x: ValueId,
    },
    SliceCols {
        x: ValueId,
        start: usize,
    },
    GaussianSample {
        mu: ValueId,
        log_sigma: ValueId,
        eps: Vec<S>,
    },
    CategoricalNll {
        logits: ValueId,
        bins: usize,
        targets: Vec<u8>,
        lse: Vec<S>,
    },
    GaussianKl {
        mu: ValueId,
        log_sigma: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Neg {
        x: ValueId,
    },
    Scale {
        x: ValueId,
        c: S,
    },
    SumAll {
        x: ValueId,
    },
    MeanBatch {
        x: ValueId,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    rec: Record<S>,
    needs_grad: bool,
}

/// Batch-norm statistics source for a taped forward.
pub enum BnMode<'a, S: Scalar> {
    /// Normalize by batch statistics and update the running stats in place.
    Train {
        running_mean: &'a mut Tensor<S>,
        running_var: &'a mut Tensor<S>,
        momentum: S,
    },
    /// Normalize by the provided running statistics only.
    Eval {
        running_mean: &'a Tensor<S>,
        running_var: &'a Tensor<S>,
    },
}

#[derive(Default)]
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, rec: Record<S>, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            rec,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A value gradients never flow into.
    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Record::Leaf { param: None }, false)
    }

    /// A differentiable input; its gradient is retrievable from
    /// [`Gradients::wrt`] after backward.
    pub fn leaf(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Record::Leaf { param: None }, true)
    }

    /// Record parameter `index` of `params` as a differentiable leaf tagged
    /// with `set` so its gradient can be routed back after backward.
    pub fn param(&mut self, set: u32, index: usize, params: &Params<S>) -> ValueId {
        let value = params.get(index).value.clone();
        self.push(
            value,
            Record::Leaf {
                param: Some(ParamRef { set, index }),
            },
            true,
        )
    }

    /// Parameter recorded as a frozen constant (no gradient computed).
    pub fn frozen_param(&mut self, index: usize, params: &Params<S>) -> ValueId {
        self.constant(params.get(index).value.clone())
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv2d weight must be Cout x Cin x k x k, got {ws:?}"
            )));
        }
        if ws[1] != c_in {
            return Err(Error::Shape(format!(
                "conv2d input has {c_in} channels, weight expects {}",
                ws[1]
            )));
        }
        let (c_out, k) = (ws[0], ws[2]);
        let geom = ConvGeom::conv(h, wd, k, stride, pad)?;
        let mut y = Tensor::zeros(&[n, c_out, geom.h_out, geom.w_out]);
        kernels::conv2d_fwd(
            self.value(x).data(),
            n,
            c_in,
            self.value(w).data(),
            c_out,
            &geom,
            y.data_mut(),
        );
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            y,
            Record::Conv2d {
                x,
                w,
                geom,
                c_in,
                c_out,
            },
            ng,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Shape(format!(
                "conv_transpose2d weight must be Cin x Cout x k x k, got {ws:?}"
            )));
        }
        if ws[0] != c_in {
            return Err(Error::Shape(format!(
                "conv_transpose2d input has {c_in} channels, weight expects {}",
                ws[0]
            )));
        }
        let (c_out, k) = (ws[1], ws[2]);
        let geom = ConvGeom::conv_transpose(h, wd, k, stride, pad)?;
        let mut y = Tensor::zeros(&[n, c_out, geom.h_in, geom.w_in]);
        kernels::convt_fwd(
            self.value(x).data(),
            n,
            c_in,
            self.value(w).data(),
            c_out,
            &geom,
            y.data_mut(),
        );
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            y,
            Record::ConvT2d {
                x,
                w,
                geom,
                c_in,
                c_out,
            },
            ng,
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: ValueId,
        scale: ValueId,
        shift: ValueId,
        mode: BnMode<'_, S>,
    ) -> Result<ValueId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (id, what) in [(scale, "scale"), (shift, "shift")] {
            if self.value(id).shape() != [c] {
                return Err(Error::Shape(format!(
                    "batch_norm {what} must have shape [{c}], got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        let hw = h * w;
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let (saved, train) = match mode {
            BnMode::Train {
                running_mean,
                running_var,
                momentum,
            } => {
                let saved = kernels::bn_train_fwd(
                    self.value(x).data(),
                    n,
                    c,
                    hw,
                    self.value(scale).data(),
                    self.value(shift).data(),
                    running_mean.data_mut(),
                    running_var.data_mut(),
                    momentum,
                    y.data_mut(),
                )?;
                (saved, true)
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                let saved = kernels::bn_eval_fwd(
                    self.value(x).data(),
                    n,
                    c,
                    hw,
                    self.value(scale).data(),
                    self.value(shift).data(),
                    running_mean.data(),
                    running_var.data(),
                    y.data_mut(),
                );
                (saved, false)
            }
        };
        let ng = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            y,
            Record::BatchNorm {
                x,
                scale,
                shift,
                saved,
                train,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| {
            if *v < S::ZERO {
                *v = S::ZERO;
            }
        });
        let ng = self.needs(x);
        self.push(y, Record::Relu { x }, ng)
    }

    pub fn clamp(&mut self, x: ValueId, lo: S, hi: S) -> ValueId {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = (*v).max(lo).min(hi));
        let ng = self.needs(x);
        self.push(y, Record::Clamp { x, lo, hi }, ng)
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let y = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(y, Record::Reshape { x }, ng))
    }

    /// Columns `start..start+width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, width: usize) -> Result<ValueId> {
        let (n, w) = self.value(x).dims2()?;
        if start + width > w {
            return Err(Error::Shape(format!(
                "slice {start}..{} out of bounds for width {w}",
                start + width
            )));
        }
        let src = self.value(x).data();
        let mut y = Tensor::zeros(&[n, width]);
        for i in 0..n {
            y.data_mut()[i * width..(i + 1) * width]
                .copy_from_slice(&src[i * w + start..i * w + start + width]);
        }
        let ng = self.needs(x);
        Ok(self.push(y, Record::SliceCols { x, start }, ng))
    }

    /// Reparameterized Gaussian draw: `mu + exp(clamp(log_sigma)) * eps`,
    /// `eps ~ N(0, I)` drawn once at record time.
    pub fn gaussian_sample<R: Rng>(
        &mut self,
        mu: ValueId,
        log_sigma: ValueId,
        rng: &mut R,
    ) -> Result<ValueId> {
        if self.value(mu).shape() != self.value(log_sigma).shape() {
            return Err(Error::Shape(format!(
                "gaussian_sample shape mismatch: {:?} vs {:?}",
                self.value(mu).shape(),
                self.value(log_sigma).shape()
            )));
        }
        let clamp = S::from_f64(LOG_SIGMA_CLAMP);
        let eps: Vec<S> = (0..self.value(mu).numel())
            .map(|_| S::standard_normal(rng))
            .collect();
        let mut y = self.value(mu).clone();
        let ls = self.value(log_sigma).data();
        for ((yo, e), l) in y.data_mut().iter_mut().zip(eps.iter()).zip(ls.iter()) {
            *yo = *yo + (*l).max(-clamp).min(clamp).exp() * *e;
        }
        let ng = self.needs(mu) || self.needs(log_sigma);
        Ok(self.push(y, Record::GaussianSample { mu, log_sigma, eps }, ng))
    }

    /// Per-sample negative log-likelihood of 8-bit targets under per-pixel
    /// categorical logits. `logits` is `[n, bins * c, h, w]` (bin-major
    /// channel blocks) or `[n, bins, ...]`; `targets` is the flattened
    /// `[n, c, h, w]` intensity field.
    pub fn categorical_nll(
        &mut self,
        logits: ValueId,
        bins: usize,
        targets: &[u8],
    ) -> Result<ValueId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() < 2 || bins < 2 {
            return Err(Error::Shape(
                "categorical_nll wants [n, bins, ...] logits and bins >= 2".into(),
            ));
        }
        let n = shape[0];
        let per_sample: usize = shape[1..].iter().product();
        if per_sample % bins != 0 {
            return Err(Error::Shape(format!(
                "logits sample size {per_sample} not divisible by {bins} bins"
            )));
        }
        let p = per_sample / bins;
        if targets.len() != n * p {
            return Err(Error::Shape(format!(
                "expected {} target values, got {}",
                n * p,
                targets.len()
            )));
        }
        if bins < 256 {
            if let Some(bad) = targets.iter().find(|&&t| t as usize >= bins) {
                return Err(Error::Value(format!(
                    "target intensity {bad} out of range for {bins} bins"
                )));
            }
        }
        let lse = kernels::row_logsumexp(self.value(logits).data(), n, bins, p);
        let nll = kernels::categorical_nll_fwd(
            self.value(logits).data(),
            n,
            bins,
            p,
            targets,
            &lse,
        );
        let y = Tensor::new(vec![n], nll)?;
        let ng = self.needs(logits);
        Ok(self.push(
            y,
            Record::CategoricalNll {
                logits,
                bins,
                targets: targets.to_vec(),
                lse,
            },
            ng,
        ))
    }

    /// Per-sample KL divergence from `N(mu, exp(log_sigma)^2)` to `N(0, I)`:
    /// `0.5 * sum_j (mu^2 + exp(2 ls) - 1 - 2 ls)` with `ls` clamped.
    pub fn gaussian_kl(&mut self, mu: ValueId, log_sigma: ValueId) -> Result<ValueId> {
        let (n, d) = self.value(mu).dims2()?;
        if self.value(log_sigma).shape() != [n, d] {
            return Err(Error::Shape(format!(
                "gaussian_kl shape mismatch: {:?} vs {:?}",
                self.value(mu).shape(),
                self.value(log_sigma).shape()
            )));
        }
        let clamp = S::from_f64(LOG_SIGMA_CLAMP);
        let half = S::from_f64(0.5);
        let two = S::from_f64(2.0);
        let mus = self.value(mu).data();
        let lss = self.value(log_sigma).data();
        let mut kl = vec![S::ZERO; n];
        for i in 0..n {
            let mut acc = S::ZERO;
            for j in 0..d {
                let m = mus[i * d + j];
                let l = lss[i * d + j].max(-clamp).min(clamp);
                acc += m * m + (two * l).exp() - S::ONE - two * l;
            }
            kl[i] = half * acc;
        }
        let y = Tensor::new(vec![n], kl)?;
        let ng = self.needs(mu) || self.needs(log_sigma);
        Ok(self.push(y, Record::GaussianKl { mu, log_sigma }, ng))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, |x, y| x + y, |a, b| Record::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, |x, y| x - y, |a, b| Record::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape(a, b, |x, y| x * y, |a, b| Record::Mul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: impl Fn(S, S) -> S,
        rec: impl Fn(ValueId, ValueId) -> Record<S>,
    ) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "elementwise op shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        let bd = self.value(b).data();
        for (yo, bv) in y.data_mut().iter_mut().zip(bd.iter()) {
            *yo = f(*yo, *bv);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(y, rec(a, b), ng))
    }

    pub fn neg(&mut self, x: ValueId) -> ValueId {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = -*v);
        let ng = self.needs(x);
        self.push(y, Record::Neg { x }, ng)
    }

    pub fn scale(&mut self, x: ValueId, c: S) -> ValueId {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = c * *v);
        let ng = self.needs(x);
        self.push(y, Record::Scale { x, c }, ng)
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let mut acc = S::ZERO;
        for v in self.value(x).data() {
            acc += *v;
        }
        let ng = self.needs(x);
        self.push(Tensor::scalar(acc), Record::SumAll { x }, ng)
    }

    /// Mean over a rank-1 tensor, producing a scalar.
    pub fn mean_batch(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.value(x).shape();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "mean_batch wants a non-empty rank-1 tensor, got {shape:?}"
            )));
        }
        let n = shape[0];
        let mut acc = S::ZERO;
        for v in self.value(x).data() {
            acc += *v;
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Record::MeanBatch { x },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss. Returns per-leaf gradients; parameter
    /// leaves keep their `ParamRef` tag so they can be routed back into the
    /// right parameter set.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::ONE));
        for id in (0..=loss.0).rev() {
            if matches!(self.nodes[id].rec, Record::Leaf { .. }) {
                continue; // leaf grads stay in place for the caller
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_step(id, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.rec {
                Record::Leaf { param: Some(p) } => Some((p, ValueId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc_into(&self, grads: &mut [Option<Tensor<S>>], id: ValueId, delta: Tensor<S>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_step(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[id].rec {
            Record::Leaf { .. } => {}
            Record::Conv2d {
                x,
                w,
                geom,
                c_in,
                c_out,
            } => {
                let n = self.value(*x).shape()[0];
                if self.needs(*x) {
                    // grad wrt input is the transposed convolution of the
                    // upstream gradient with the same weight.
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    kernels::convt_fwd(
                        g.data(),
                        n,
                        *c_out,
                        self.value(*w).data(),
                        *c_in,
                        geom,
                        gx.data_mut(),
                    );
                    self.acc_into(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    kernels::conv2d_grad_w(
                        self.value(*x).data(),
                        n,
                        *c_in,
                        g.data(),
                        *c_out,
                        geom,
                        gw.data_mut(),
                    );
                    self.acc_into(grads, *w, gw);
                }
            }
            Record::ConvT2d {
                x,
                w,
                geom,
                c_in,
                c_out,
            } => {
                let n = self.value(*x).shape()[0];
                if self.needs(*x) {
                    // grad wrt input gathers from the output grid: a plain
                    // convolution of the upstream gradient.
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    kernels::conv2d_fwd(
                        g.data(),
                        n,
                        *c_out,
                        self.value(*w).data(),
                        *c_in,
                        geom,
                        gx.data_mut(),
                    );
                    self.acc_into(grads, *x, gx);
                }
                if self.needs(*w) {
                    // Same contraction as conv grad-weight with the roles of
                    // input and output gradient swapped.
                    let mut gw = Tensor::zeros(self.value(*w).shape());
                    kernels::conv2d_grad_w(
                        g.data(),
                        n,
                        *c_out,
                        self.value(*x).data(),
                        *c_in,
                        geom,
                        gw.data_mut(),
                    );
                    self.acc_into(grads, *w, gw);
                }
            }
            Record::BatchNorm {
                x,
                scale,
                shift,
                saved,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("validated at record time");
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let mut gscale = Tensor::zeros(&[c]);
                let mut gshift = Tensor::zeros(&[c]);
                kernels::bn_bwd(
                    self.value(*x).data(),
                    n,
                    c,
                    h * w,
                    self.value(*scale).data(),
                    saved,
                    *train,
                    g.data(),
                    gx.data_mut(),
                    gscale.data_mut(),
                    gshift.data_mut(),
                );
                self.acc_into(grads, *x, gx);
                self.acc_into(grads, *scale, gscale);
                self.acc_into(grads, *shift, gshift);
            }
            Record::Relu { x } => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data().iter()) {
                    if *xv <= S::ZERO {
                        *gv = S::ZERO;
                    }
                }
                self.acc_into(grads, *x, gx);
            }
            Record::Clamp { x, lo, hi } => {
                let mut gx = g.clone();
                for (gv, xv) in gx.data_mut().iter_mut().zip(self.value(*x).data().iter()) {
                    if *xv < *lo || *xv > *hi {
                        *gv = S::ZERO;
                    }
                }
                self.acc_into(grads, *x, gx);
            }
            Record::Reshape { x } => {
                let gx = g
                    .reshaped(self.value(*x).shape().to_vec())
                    .expect("reshape grad has same numel");
                self.acc_into(grads, *x, gx);
            }
            Record::SliceCols { x, start } => {
                let (n, w) = self.value(*x).dims2().expect("validated at record time");
                let width = self.value(ValueId(id)).shape()[1];
                let mut gx = Tensor::zeros(&[n, w]);
                for i in 0..n {
                    gx.data_mut()[i * w + start..i * w + start + width]
                        .copy_from_slice(&g.data()[i * width..(i + 1) * width]);
                }
                self.acc_into(grads, *x, gx);
            }
            Record::GaussianSample {
                mu,
                log_sigma,
                eps,
            } => {
                if self.needs(*mu) {
                    self.acc_into(grads, *mu, g.clone());
                }
                if self.needs(*log_sigma) {
                    let clamp = S::from_f64(LOG_SIGMA_CLAMP);
                    let ls = self.value(*log_sigma).data();
                    let mut gl = Tensor::zeros(self.value(*log_sigma).shape());
                    for (i, gv) in gl.data_mut().iter_mut().enumerate() {
                        let l = ls[i];
                        if l >= -clamp && l <= clamp {
                            *gv = g.data()[i] * eps[i] * l.exp();
                        }
                    }
                    self.acc_into(grads, *log_sigma, gl);
                }
            }
            Record::CategoricalNll {
                logits,
                bins,
                targets,
                lse,
            } => {
                let shape = self.value(*logits).shape();
                let n = shape[0];
                let p = self.value(*logits).numel() / n / bins;
                let mut gl = Tensor::zeros(shape);
                kernels::categorical_nll_bwd(
                    self.value(*logits).data(),
                    n,
                    *bins,
                    p,
                    targets,
                    lse,
                    g.data(),
                    gl.data_mut(),
                );
                self.acc_into(grads, *logits, gl);
            }
            Record::GaussianKl { mu, log_sigma } => {
                let (n, d) = self.value(*mu).dims2().expect("validated at record time");
                let clamp = S::from_f64(LOG_SIGMA_CLAMP);
                let two = S::from_f64(2.0);
                if self.needs(*mu) {
                    let mut gm = Tensor::zeros(&[n, d]);
                    let mus = self.value(*mu).data();
                    for i in 0..n {
                        for j in 0..d {
                            gm.data_mut()[i * d + j] = g.data()[i] * mus[i * d + j];
                        }
                    }
                    self.acc_into(grads, *mu, gm);
                }
                if self.needs(*log_sigma) {
                    let mut gl = Tensor::zeros(&[n, d]);
                    let lss = self.value(*log_sigma).data();
                    for i in 0..n {
                        for j in 0..d {
                            let l = lss[i * d + j];
                            if l >= -clamp && l <= clamp {
                                gl.data_mut()[i * d + j] = g.data()[i] * ((two * l).exp() - S::ONE);
                            }
                        }
                    }
                    self.acc_into(grads, *log_sigma, gl);
                }
            }
            Record::Add { a, b } => {
                self.acc_into(grads, *a, g.clone());
                self.acc_into(grads, *b, g.clone());
            }
            Record::Sub { a, b } => {
                self.acc_into(grads, *a, g.clone());
                let mut gb = g.clone();
                gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.acc_into(grads, *b, gb);
            }
            Record::Mul { a, b } => {
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (gv, bv) in ga.data_mut().iter_mut().zip(self.value(*b).data().iter()) {
                        *gv = *gv * *bv;
                    }
                    self.acc_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = g.clone();
                    for (gv, av) in gb.data_mut().iter_mut().zip(self.value(*a).data().iter()) {
                        *gv = *gv * *av;
                    }
                    self.acc_into(grads, *b, gb);
                }
            }
            Record::Neg { x } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v = -*v);
                self.acc_into(grads, *x, gx);
            }
            Record::Scale { x, c } => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v = *c * *v);
                self.acc_into(grads, *x, gx);
            }
            Record::SumAll { x } => {
                let gv = g.data()[0];
                self.acc_into(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Record::MeanBatch { x } => {
                let n = self.value(*x).numel();
                let gv = g.data()[0] / S::from_f64(n as f64);
                self.acc_into(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamRef, ValueId)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a leaf, if any reached it.
    pub fn wrt(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Accumulate (sum) all gradients tagged with `set` into the matching
    /// parameters' grad buffers.
    pub fn apply_to_set(&self, set: u32, params: &mut Params<S>) {
        for (pref, node) in &self.params {
            if pref.set == set {
                if let Some(g) = self.grads[node.0].as_ref() {
                    params.get_mut(pref.index).grad.add_in_place(g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_box_kernel_sums_window() {
        // 3x3 ones, 2x2 ones kernel, stride 1, no padding -> 2x2 of fours.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_output_size_formula() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_transpose_broadcasts_single_input() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let y = tape.conv_transpose2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_output_size_formula() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 16, 16]));
        let w = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
        let y = tape.conv_transpose2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 32, 32]);
    }

    /// conv2d and conv_transpose2d are adjoint: <conv(a, w), b> == <a, convT(b, w)>.
    #[test]
    fn conv_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c_in, c_out, h, k, s, p) in &[
            (2usize, 3usize, 5usize, 3usize, 1usize, 0usize),
            (1, 2, 8, 4, 2, 1),
            (3, 1, 6, 4, 2, 1),
            (2, 2, 7, 3, 2, 1),
        ] {
            let mut tape: Tape<f32> = Tape::new();
            let a = tape.constant(Tensor::randn(&[1, c_in, h, h], 0.0, 1.0, &mut rng));
            let w = tape.constant(Tensor::randn(&[c_out, c_in, k, k], 0.0, 1.0, &mut rng));
            let ca = tape.conv2d(a, w, s, p).unwrap();
            let b = tape.constant(Tensor::randn(tape.value(ca).shape(), 0.0, 1.0, &mut rng));
            let tb = tape.conv_transpose2d(b, w, s, p).unwrap();
            assert_eq!(tape.value(tb).shape(), tape.value(a).shape());
            let lhs: f64 = tape
                .value(ca)
                .data()
                .iter()
                .zip(tape.value(b).data())
                .map(|(x, y)| (*x as f64) * (*y as f64))
                .sum();
            let rhs: f64 = tape
                .value(a)
                .data()
                .iter()
                .zip(tape.value(tb).data())
                .map(|(x, y)| (*x as f64) * (*y as f64))
                .sum();
            assert!(
                (lhs - rhs).abs() < 1e-4 * (1.0 + lhs.abs()),
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f32 * 0.5 - 2.0));
        let scale = tape.constant(Tensor::full(&[2], 1.0));
        let shift = tape.constant(Tensor::zeros(&[2]));
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::full(&[2], 1.0);
        let y = tape
            .batch_norm(
                x,
                scale,
                shift,
                BnMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                },
            )
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data().iter()) {
            // eps in the denominator keeps this from being exactly 1:1
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn gaussian_sample_zero_variance_returns_mean() {
        let mut tape: Tape<f32> = Tape::new();
        let mu = tape.constant(Tensor::full(&[1, 4], 3.25));
        let ls = tape.constant(Tensor::full(&[1, 4], -1e9));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = tape.gaussian_sample(mu, ls, &mut rng).unwrap();
        for v in tape.value(z).data() {
            assert!((v - 3.25).abs() < 1e-2, "sigma floor exp(-7) leaves {v}");
        }
    }

    #[test]
    fn gaussian_sample_deterministic_per_seed() {
        let draw = || {
            let mut tape: Tape<f32> = Tape::new();
            let mu = tape.constant(Tensor::zeros(&[2, 8]));
            let ls = tape.constant(Tensor::zeros(&[2, 8]));
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let z = tape.gaussian_sample(mu, ls, &mut rng).unwrap();
            tape.value(z).data().to_vec()
        };
        let a = draw();
        let b = draw();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gaussian_sample_moments() {
        // mu = 1, sigma = 2: empirical mean/std over 1e5 draws.
        let mut tape: Tape<f32> = Tape::new();
        let n = 100_000;
        let mu = tape.constant(Tensor::full(&[1, n], 1.0));
        let ls = tape.constant(Tensor::full(&[1, n], (2.0f32).ln()));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = tape.gaussian_sample(mu, ls, &mut rng).unwrap();
        let data = tape.value(z).data();
        let mean: f64 = data.iter().map(|v| *v as f64).sum::<f64>() / n as f64;
        let var: f64 =
            data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 2.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn nll_uniform_logits_is_log_256() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.constant(Tensor::full(&[1, 256, 1, 1, 1], 0.7));
        let y = tape.categorical_nll(logits, 256, &[123]).unwrap();
        let v = tape.value(y).data()[0];
        assert!((v - (256f32).ln()).abs() < 1e-4, "nll {v}");
    }

    #[test]
    fn nll_peaked_logit_is_near_zero() {
        let mut tape: Tape<f32> = Tape::new();
        let mut t = Tensor::zeros(&[1, 256, 1, 1, 1]);
        t.data_mut()[42] = 1e6;
        let logits = tape.constant(t);
        let y = tape.categorical_nll(logits, 256, &[42]).unwrap();
        assert!(tape.value(y).data()[0].abs() < 1e-4);
    }

    #[test]
    fn nll_matches_explicit_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape: Tape<f32> = Tape::new();
        let t = Tensor::randn(&[2, 256, 1, 2, 2], 0.0, 2.0, &mut rng);
        let targets: Vec<u8> = (0..8).map(|i| (i * 31 % 256) as u8).collect();
        let logits = tape.constant(t.clone());
        let y = tape.categorical_nll(logits, 256, &targets).unwrap();
        // oracle: direct softmax-and-log in f64
        for i in 0..2 {
            let mut want = 0.0f64;
            for px in 0..4 {
                let logit = |k: usize| t.data()[i * 1024 + k * 4 + px] as f64;
                let denom: f64 = (0..256).map(|k| logit(k).exp()).sum();
                let t_bin = targets[i * 4 + px] as usize;
                want += denom.ln() - logit(t_bin);
            }
            let got = tape.value(y).data()[i] as f64;
            assert!((got - want).abs() < 1e-4, "sample {i}: {got} vs {want}");
        }
    }

    #[test]
    fn nll_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor::randn(&[1, 256, 1, 2, 2], 0.0, 1.0, &mut rng);
        let targets = [9u8, 200, 3, 77];
        let mut shifted = t.clone();
        // add a per-pixel constant across all bins
        for k in 0..256 {
            for px in 0..4 {
                shifted.data_mut()[k * 4 + px] += (px as f32) * 3.5 - 1.0;
            }
        }
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(t);
        let b = tape.constant(shifted);
        let ya = tape.categorical_nll(a, 256, &targets).unwrap();
        let yb = tape.categorical_nll(b, 256, &targets).unwrap();
        let (va, vb) = (tape.value(ya).data()[0], tape.value(yb).data()[0]);
        assert!((va - vb).abs() < 1e-4, "{va} vs {vb}");
    }

    #[test]
    fn nll_rejects_out_of_range_target() {
        let mut tape: Tape<f32> = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 8, 1, 1, 1]));
        assert!(matches!(
            tape.categorical_nll(logits, 8, &[8]),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn kl_zero_when_posterior_is_prior() {
        let mut tape: Tape<f32> = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[1, 5]));
        let ls = tape.constant(Tensor::zeros(&[1, 5]));
        let y = tape.gaussian_kl(mu, ls).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn kl_unit_mean_case() {
        let mut tape: Tape<f32> = Tape::new();
        let mu = tape.constant(Tensor::full(&[1, 1], 1.0));
        let ls = tape.constant(Tensor::zeros(&[1, 1]));
        let y = tape.gaussian_kl(mu, ls).unwrap();
        assert!((tape.value(y).data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_matches_quadrature() {
        // KL(q || p) = int q(z) ln(q(z)/p(z)) dz, factorized over dims.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = Tensor::randn(&[1, 10], 0.0, 1.5, &mut rng);
        let ls = Tensor::randn(&[1, 10], 0.0, 0.5, &mut rng);
        let mut want = 0.0f64;
        for j in 0..10 {
            let (m, s) = (mu.data()[j] as f64, (ls.data()[j] as f64).exp());
            let steps = 200_000;
            let (lo, hi) = (m - 12.0 * s - 12.0, m + 12.0 * s + 12.0);
            let dz = (hi - lo) / steps as f64;
            let mut acc = 0.0;
            for i in 0..steps {
                let z = lo + (i as f64 + 0.5) * dz;
                let lq = -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                let lp = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln();
                acc += lq.exp() * (lq - lp) * dz;
            }
            want += acc;
        }
        let mut tape: Tape<f32> = Tape::new();
        let a = tape.constant(mu);
        let b = tape.constant(ls);
        let y = tape.gaussian_kl(a, b).unwrap();
        let got = tape.value(y).data()[0] as f64;
        assert!((got - want).abs() < 1e-3, "{got} vs quadrature {want}");
    }

    #[test]
    fn backward_accumulates_shared_leaf() {
        // y = x*x + x used twice: dy/dx = 2x + 1
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        for v in grads.wrt(x).unwrap().data() {
            assert!((v - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }
}
