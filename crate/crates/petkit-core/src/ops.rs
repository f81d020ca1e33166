//! Differentiable primitives.
//!
//! Every operation validates extents, computes its forward value with 64-bit
//! accumulators, stores the result at tape precision and records itself for
//! the reverse pass. Convolution follows cross-correlation semantics (no
//! kernel flip); "same" padding is `floor(K/2)` and only defined for odd K.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{grad_buf, Op, Tape, Var};
use crate::tensor::{Elem, TensorOf};

/// Padding that preserves spatial extents at stride 1. Even kernels are
/// rejected: they cannot be centered.
pub fn same_padding(kernel: usize) -> Result<usize> {
    if kernel % 2 == 0 {
        return Err(Error::Config(alloc::format!(
            "same padding requires an odd kernel size, got {kernel}"
        )));
    }
    Ok(kernel / 2)
}

/// Resolved convolution geometry.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cpg_in: usize,
    cpg_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(
    xshape: &[usize],
    wshape: &[usize],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvDims> {
    if xshape.len() != 4 || wshape.len() != 4 {
        return Err(Error::Shape {
            op: "conv2d",
            detail: alloc::format!(
                "expected rank-4 input and weight, got {xshape:?} and {wshape:?}"
            ),
        });
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if groups == 0 {
        return Err(Error::Config("conv2d groups must be >= 1".into()));
    }
    let (n, c_in, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (c_out, w_cin, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(alloc::format!(
            "groups {groups} does not divide channels (C_in={c_in}, C_out={c_out})"
        )));
    }
    if w_cin != c_in / groups {
        return Err(Error::Shape {
            op: "conv2d",
            detail: alloc::format!(
                "weight axis 1 is {w_cin} but C_in/groups = {}/{groups} = {}",
                c_in,
                c_in / groups
            ),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape {
            op: "conv2d",
            detail: alloc::format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        });
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        cpg_in: c_in / groups,
        cpg_out: c_out / groups,
        kh,
        kw,
        stride,
        padding,
        groups,
        h_out,
        w_out,
    })
}

/// Output index range along one axis for kernel offset `k`, such that the
/// input index `o*stride + k - padding` stays inside `[0, extent)`.
#[inline]
fn out_range(extent: usize, out_extent: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k + stride - 1) / stride
    };
    if k + 1 > extent + padding {
        return (0, 0);
    }
    let hi = ((extent + padding - 1 - k) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

impl<E: Elem> Tape<E> {
    /// Grouped 2-D cross-correlation.
    ///
    /// `groups == 1` with a 1×1 kernel is the point-wise convolution; grouped
    /// K×K realizes the depth-wise family.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(w), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.c_out] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: alloc::format!(
                        "bias shape {:?} does not match C_out={}",
                        self.shape(b),
                        d.c_out
                    ),
                });
            }
        }
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let shape = vec![d.n, d.c_out, d.h_out, d.w_out];
        let requires = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        let out_var = self.push(TensorOf::new(shape, out)?, requires);
        if requires {
            self.record(Op::Conv2d {
                x,
                w,
                bias,
                out: out_var,
                stride,
                padding,
                groups,
            });
        }
        Ok(out_var)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                if v.to_f64() > 0.0 {
                    v
                } else {
                    E::from_f64(0.0)
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let out = self.push(TensorOf::new(shape, data)?, requires);
        if requires {
            self.record(Op::Relu { x, out });
        }
        Ok(out)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let z = v.to_f64();
                E::from_f64(0.5 * z * (1.0 + libm::erf(z * core::f64::consts::FRAC_1_SQRT_2)))
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires_grad(x);
        let out = self.push(TensorOf::new(shape, data)?, requires);
        if requires {
            self.record(Op::Gelu { x, out });
        }
        Ok(out)
    }

    /// Batch normalization in frozen inference mode: running statistics are
    /// fixed inputs and never receive gradients; the affine terms do.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Var,
        var: Var,
        eps: f64,
    ) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        if xshape.len() != 4 {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: alloc::format!("expected NCHW input, got {xshape:?}"),
            });
        }
        let c = xshape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape {
                    op: "batch_norm",
                    detail: alloc::format!(
                        "{name} shape {:?} does not match C={c}",
                        self.shape(v)
                    ),
                });
            }
        }
        let (n, hw) = (xshape[0], xshape[2] * xshape[3]);
        // Per-channel affine from frozen statistics: y = scale*x + shift.
        let mut scale = vec![0.0f64; c];
        let mut shift = vec![0.0f64; c];
        for ci in 0..c {
            let g = self.value(gamma).data()[ci].to_f64();
            let b = self.value(beta).data()[ci].to_f64();
            let m = self.value(mean).data()[ci].to_f64();
            let v = self.value(var).data()[ci].to_f64();
            let inv_std = 1.0 / libm::sqrt(v + eps);
            scale[ci] = g * inv_std;
            shift[ci] = b - m * g * inv_std;
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(xd.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for s in 0..hw {
                    data.push(E::from_f64(xd[base + s].to_f64() * scale[ci] + shift[ci]));
                }
            }
        }
        let requires =
            self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let out = self.push(TensorOf::new(xshape, data)?, requires);
        if requires {
            self.record(Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                out,
                eps,
            });
        }
        Ok(out)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        if xshape.len() != 4 {
            return Err(Error::Shape {
                op: "global_avg_pool",
                detail: alloc::format!("expected NCHW input, got {xshape:?}"),
            });
        }
        let (n, c, hw) = (xshape[0], xshape[1], xshape[2] * xshape[3]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let mut acc = 0.0f64;
            for s in 0..hw {
                acc += xd[plane * hw + s].to_f64();
            }
            data.push(E::from_f64(acc / hw as f64));
        }
        let requires = self.requires_grad(x);
        let out = self.push(TensorOf::new(vec![n, c], data)?, requires);
        if requires {
            self.record(Op::GlobalAvgPool { x, out });
        }
        Ok(out)
    }

    /// Fully connected layer: `x [N,D] @ w [K,D]^T + b [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        if xshape.len() != 2 || wshape.len() != 2 || xshape[1] != wshape[1] {
            return Err(Error::Shape {
                op: "linear",
                detail: alloc::format!(
                    "input {xshape:?} and weight {wshape:?} disagree on the feature axis"
                ),
            });
        }
        let (n, dim, k) = (xshape[0], xshape[1], wshape[0]);
        if self.shape(b) != [k] {
            return Err(Error::Shape {
                op: "linear",
                detail: alloc::format!("bias shape {:?} does not match K={k}", self.shape(b)),
            });
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = Vec::with_capacity(n * k);
        for ni in 0..n {
            for ki in 0..k {
                let mut acc = bd[ki].to_f64();
                for di in 0..dim {
                    acc += xd[ni * dim + di].to_f64() * wd[ki * dim + di].to_f64();
                }
                data.push(E::from_f64(acc));
            }
        }
        let requires =
            self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let out = self.push(TensorOf::new(vec![n, k], data)?, requires);
        if requires {
            self.record(Op::Linear { x, w, b, out });
        }
        Ok(out)
    }

    /// Mean softmax cross-entropy over the batch, returned as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: alloc::format!("expected [N,K] logits, got {shape:?}"),
            });
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: alloc::format!("{} labels for batch of {n}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for ni in 0..n {
            let row = &ld[ni * k..(ni + 1) * k];
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum_exp = 0.0f64;
            for v in row {
                sum_exp += libm::exp(v.to_f64() - max);
            }
            let lse = max + libm::log(sum_exp);
            total += lse - row[labels[ni] as usize].to_f64();
        }
        let loss = total / n as f64;
        let requires = self.requires_grad(logits);
        let out = self.push(TensorOf::scalar(E::from_f64(loss)), requires);
        self.set_refined(out, loss);
        if requires {
            self.record(Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    /// Element-wise addition of same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary_values(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let requires = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push(TensorOf::new(shape, data)?, requires);
        if requires {
            self.record(Op::Add { a, b, out });
        }
        Ok(out)
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary_values(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let requires = self.requires_grad(a) || self.requires_grad(b);
        let out = self.push(TensorOf::new(shape, data)?, requires);
        if requires {
            self.record(Op::Mul { a, b, out });
        }
        Ok(out)
    }

    fn binary_values(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Vec<E>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                detail: alloc::format!(
                    "operand shapes {:?} and {:?} differ",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| E::from_f64(f(x.to_f64(), y.to_f64())))
            .collect())
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += v.to_f64();
        }
        let requires = self.requires_grad(x);
        let out = self.push(TensorOf::scalar(E::from_f64(acc)), requires);
        self.set_refined(out, acc);
        if requires {
            self.record(Op::Sum { x, out });
        }
        Ok(out)
    }

    /// Feature modulation `base + alpha ⊙ delta`, with the per-channel scale
    /// `alpha` broadcast over batch and spatial axes.
    pub fn modulate(&mut self, base: Var, delta: Var, alpha: Var) -> Result<Var> {
        let shape = self.shape(base).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape {
                op: "modulate",
                detail: alloc::format!("expected NCHW base, got {shape:?}"),
            });
        }
        if self.shape(delta) != shape.as_slice() {
            return Err(Error::Shape {
                op: "modulate",
                detail: alloc::format!(
                    "delta shape {:?} does not match base {:?}",
                    self.shape(delta),
                    shape
                ),
            });
        }
        let c = shape[1];
        if self.shape(alpha) != [c] {
            return Err(Error::Shape {
                op: "modulate",
                detail: alloc::format!(
                    "alpha shape {:?} does not match C={c}",
                    self.shape(alpha)
                ),
            });
        }
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let bd = self.value(base).data();
        let dd = self.value(delta).data();
        let ad = self.value(alpha).data();
        let mut data = Vec::with_capacity(bd.len());
        for ni in 0..n {
            for ci in 0..c {
                let a = ad[ci].to_f64();
                let base_idx = (ni * c + ci) * hw;
                for s in 0..hw {
                    data.push(E::from_f64(
                        bd[base_idx + s].to_f64() + a * dd[base_idx + s].to_f64(),
                    ));
                }
            }
        }
        let requires = self.requires_grad(base)
            || self.requires_grad(delta)
            || self.requires_grad(alpha);
        let out = self.push(TensorOf::new(shape, data)?, requires);
        if requires {
            self.record(Op::Modulate {
                base,
                delta,
                alpha,
                out,
            });
        }
        Ok(out)
    }
}

fn conv2d_forward<E: Elem>(x: &[E], w: &[E], bias: Option<&[E]>, d: &ConvDims) -> Vec<E> {
    let plane_out = d.h_out * d.w_out;
    let mut out = Vec::with_capacity(d.n * d.c_out * plane_out);
    let mut acc = vec![0.0f64; plane_out];
    for ni in 0..d.n {
        for g in 0..d.groups {
            for co_l in 0..d.cpg_out {
                let co = g * d.cpg_out + co_l;
                let b = bias.map(|b| b[co].to_f64()).unwrap_or(0.0);
                acc.iter_mut().for_each(|v| *v = b);
                for ci_l in 0..d.cpg_in {
                    let ci = g * d.cpg_in + ci_l;
                    let xplane = &x[(ni * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
                    let wbase = (co * d.cpg_in + ci_l) * d.kh * d.kw;
                    for kh_i in 0..d.kh {
                        let (oh0, oh1) = out_range(d.h, d.h_out, d.stride, d.padding, kh_i);
                        for kw_i in 0..d.kw {
                            let wv = w[wbase + kh_i * d.kw + kw_i].to_f64();
                            let (ow0, ow1) = out_range(d.w, d.w_out, d.stride, d.padding, kw_i);
                            if ow0 >= ow1 {
                                continue;
                            }
                            for oh in oh0..oh1 {
                                let ih = oh * d.stride + kh_i - d.padding;
                                let xrow = &xplane[ih * d.w..][..d.w];
                                let arow = &mut acc[oh * d.w_out..][..d.w_out];
                                if d.stride == 1 {
                                    let start = ow0 + kw_i - d.padding;
                                    let xs = &xrow[start..start + (ow1 - ow0)];
                                    for (a, &xv) in arow[ow0..ow1].iter_mut().zip(xs) {
                                        *a += xv.to_f64() * wv;
                                    }
                                } else {
                                    for ow in ow0..ow1 {
                                        let iw = ow * d.stride + kw_i - d.padding;
                                        arow[ow] += xrow[iw].to_f64() * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                out.extend(acc.iter().map(|&v| E::from_f64(v)));
            }
        }
    }
    out
}

/// Reverse rule dispatch; called by `Tape::backward` in reverse record order.
pub(crate) fn backward_op<E: Elem>(
    nodes: &[TensorOf<E>],
    requires: &[bool],
    grads: &mut [Option<Vec<f64>>],
    op: &Op,
) {
    match *op {
        Op::Conv2d {
            x,
            w,
            bias,
            out,
            stride,
            padding,
            groups,
        } => {
            let Some(gout) = grads[out.0].take() else { return };
            let d = conv_dims(nodes[x.0].shape(), nodes[w.0].shape(), stride, padding, groups)
                .expect("recorded conv revalidates");
            if requires[x.0] {
                let buf = grad_buf(grads, x, nodes[x.0].numel());
                conv2d_backward_input(&gout, nodes[w.0].data(), buf, &d);
            }
            if requires[w.0] {
                let buf = grad_buf(grads, w, nodes[w.0].numel());
                conv2d_backward_weight(&gout, nodes[x.0].data(), buf, &d);
            }
            if let Some(b) = bias {
                if requires[b.0] {
                    let buf = grad_buf(grads, b, d.c_out);
                    let plane = d.h_out * d.w_out;
                    for ni in 0..d.n {
                        for co in 0..d.c_out {
                            let g = &gout[(ni * d.c_out + co) * plane..][..plane];
                            buf[co] += g.iter().sum::<f64>();
                        }
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Relu { x, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[x.0] {
                let xd = nodes[x.0].data();
                let buf = grad_buf(grads, x, xd.len());
                for i in 0..xd.len() {
                    if xd[i].to_f64() > 0.0 {
                        buf[i] += gout[i];
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Gelu { x, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[x.0] {
                let xd = nodes[x.0].data();
                let buf = grad_buf(grads, x, xd.len());
                let inv_sqrt_2pi = 1.0 / libm::sqrt(2.0 * core::f64::consts::PI);
                for i in 0..xd.len() {
                    let z = xd[i].to_f64();
                    let cdf = 0.5 * (1.0 + libm::erf(z * core::f64::consts::FRAC_1_SQRT_2));
                    let pdf = inv_sqrt_2pi * libm::exp(-0.5 * z * z);
                    buf[i] += gout[i] * (cdf + z * pdf);
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            var,
            out,
            eps,
        } => {
            let Some(gout) = grads[out.0].take() else { return };
            let shape = nodes[x.0].shape();
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let gd = nodes[gamma.0].data();
            let md = nodes[mean.0].data();
            let vd = nodes[var.0].data();
            if requires[x.0] {
                let buf = grad_buf(grads, x, nodes[x.0].numel());
                for ni in 0..n {
                    for ci in 0..c {
                        let scale = gd[ci].to_f64() / libm::sqrt(vd[ci].to_f64() + eps);
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            buf[base + s] += gout[base + s] * scale;
                        }
                    }
                }
            }
            if requires[gamma.0] {
                let xd = nodes[x.0].data();
                let buf = grad_buf(grads, gamma, c);
                for ci in 0..c {
                    let inv_std = 1.0 / libm::sqrt(vd[ci].to_f64() + eps);
                    let m = md[ci].to_f64();
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            acc += gout[base + s] * (xd[base + s].to_f64() - m) * inv_std;
                        }
                    }
                    buf[ci] += acc;
                }
            }
            if requires[beta.0] {
                let buf = grad_buf(grads, beta, c);
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for s in 0..hw {
                            acc += gout[base + s];
                        }
                    }
                    buf[ci] += acc;
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::GlobalAvgPool { x, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[x.0] {
                let shape = nodes[x.0].shape();
                let hw = shape[2] * shape[3];
                let buf = grad_buf(grads, x, nodes[x.0].numel());
                for plane in 0..shape[0] * shape[1] {
                    let g = gout[plane] / hw as f64;
                    for s in 0..hw {
                        buf[plane * hw + s] += g;
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Linear { x, w, b, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            let (n, dim) = (nodes[x.0].shape()[0], nodes[x.0].shape()[1]);
            let k = nodes[w.0].shape()[0];
            if requires[x.0] {
                let wd = nodes[w.0].data();
                let buf = grad_buf(grads, x, n * dim);
                for ni in 0..n {
                    for ki in 0..k {
                        let g = gout[ni * k + ki];
                        for di in 0..dim {
                            buf[ni * dim + di] += g * wd[ki * dim + di].to_f64();
                        }
                    }
                }
            }
            if requires[w.0] {
                let xd = nodes[x.0].data();
                let buf = grad_buf(grads, w, k * dim);
                for ni in 0..n {
                    for ki in 0..k {
                        let g = gout[ni * k + ki];
                        for di in 0..dim {
                            buf[ki * dim + di] += g * xd[ni * dim + di].to_f64();
                        }
                    }
                }
            }
            if requires[b.0] {
                let buf = grad_buf(grads, b, k);
                for ni in 0..n {
                    for ki in 0..k {
                        buf[ki] += gout[ni * k + ki];
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            ref labels,
            out,
        } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[logits.0] {
                let (n, k) = (nodes[logits.0].shape()[0], nodes[logits.0].shape()[1]);
                let ld = nodes[logits.0].data();
                let g = gout[0] / n as f64;
                let buf = grad_buf(grads, logits, n * k);
                for ni in 0..n {
                    let row = &ld[ni * k..(ni + 1) * k];
                    let max = row
                        .iter()
                        .map(|v| v.to_f64())
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut sum_exp = 0.0f64;
                    for v in row {
                        sum_exp += libm::exp(v.to_f64() - max);
                    }
                    for ki in 0..k {
                        let p = libm::exp(row[ki].to_f64() - max) / sum_exp;
                        let indicator = if labels[ni] as usize == ki { 1.0 } else { 0.0 };
                        buf[ni * k + ki] += g * (p - indicator);
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Add { a, b, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            for v in [a, b] {
                if requires[v.0] {
                    let buf = grad_buf(grads, v, gout.len());
                    for i in 0..gout.len() {
                        buf[i] += gout[i];
                    }
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Mul { a, b, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[a.0] {
                let bd = nodes[b.0].data();
                let buf = grad_buf(grads, a, gout.len());
                for i in 0..gout.len() {
                    buf[i] += gout[i] * bd[i].to_f64();
                }
            }
            if requires[b.0] {
                let ad = nodes[a.0].data();
                let buf = grad_buf(grads, b, gout.len());
                for i in 0..gout.len() {
                    buf[i] += gout[i] * ad[i].to_f64();
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Sum { x, out } => {
            let Some(gout) = grads[out.0].take() else { return };
            if requires[x.0] {
                let buf = grad_buf(grads, x, nodes[x.0].numel());
                for v in buf.iter_mut() {
                    *v += gout[0];
                }
            }
            grads[out.0] = Some(gout);
        }
        Op::Modulate {
            base,
            delta,
            alpha,
            out,
        } => {
            let Some(gout) = grads[out.0].take() else { return };
            let shape = nodes[base.0].shape();
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            if requires[base.0] {
                let buf = grad_buf(grads, base, gout.len());
                for i in 0..gout.len() {
                    buf[i] += gout[i];
                }
            }
            if requires[delta.0] {
                let ad = nodes[alpha.0].data();
                let buf = grad_buf(grads, delta, gout.len());
                for ni in 0..n {
                    for ci in 0..c {
                        let a = ad[ci].to_f64();
                        let idx = (ni * c + ci) * hw;
                        for s in 0..hw {
                            buf[idx + s] += gout[idx + s] * a;
                        }
                    }
                }
            }
            if requires[alpha.0] {
                let dd = nodes[delta.0].data();
                let buf = grad_buf(grads, alpha, c);
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        let idx = (ni * c + ci) * hw;
                        for s in 0..hw {
                            acc += gout[idx + s] * dd[idx + s].to_f64();
                        }
                    }
                    buf[ci] += acc;
                }
            }
            grads[out.0] = Some(gout);
        }
    }
}

fn conv2d_backward_input<E: Elem>(gout: &[f64], w: &[E], dx: &mut [f64], d: &ConvDims) {
    let plane_out = d.h_out * d.w_out;
    for ni in 0..d.n {
        for g in 0..d.groups {
            for co_l in 0..d.cpg_out {
                let co = g * d.cpg_out + co_l;
                let gplane = &gout[(ni * d.c_out + co) * plane_out..][..plane_out];
                for ci_l in 0..d.cpg_in {
                    let ci = g * d.cpg_in + ci_l;
                    let dxplane = &mut dx[(ni * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
                    let wbase = (co * d.cpg_in + ci_l) * d.kh * d.kw;
                    for kh_i in 0..d.kh {
                        let (oh0, oh1) = out_range(d.h, d.h_out, d.stride, d.padding, kh_i);
                        for kw_i in 0..d.kw {
                            let wv = w[wbase + kh_i * d.kw + kw_i].to_f64();
                            let (ow0, ow1) = out_range(d.w, d.w_out, d.stride, d.padding, kw_i);
                            if ow0 >= ow1 {
                                continue;
                            }
                            for oh in oh0..oh1 {
                                let ih = oh * d.stride + kh_i - d.padding;
                                let grow = &gplane[oh * d.w_out..][..d.w_out];
                                let drow = &mut dxplane[ih * d.w..][..d.w];
                                if d.stride == 1 {
                                    let start = ow0 + kw_i - d.padding;
                                    let ds = &mut drow[start..start + (ow1 - ow0)];
                                    for (dv, &gv) in ds.iter_mut().zip(&grow[ow0..ow1]) {
                                        *dv += gv * wv;
                                    }
                                } else {
                                    for ow in ow0..ow1 {
                                        let iw = ow * d.stride + kw_i - d.padding;
                                        drow[iw] += grow[ow] * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight<E: Elem>(gout: &[f64], x: &[E], dw: &mut [f64], d: &ConvDims) {
    let plane_out = d.h_out * d.w_out;
    for ni in 0..d.n {
        for g in 0..d.groups {
            for co_l in 0..d.cpg_out {
                let co = g * d.cpg_out + co_l;
                let gplane = &gout[(ni * d.c_out + co) * plane_out..][..plane_out];
                for ci_l in 0..d.cpg_in {
                    let ci = g * d.cpg_in + ci_l;
                    let xplane = &x[(ni * d.c_in + ci) * d.h * d.w..][..d.h * d.w];
                    let wbase = (co * d.cpg_in + ci_l) * d.kh * d.kw;
                    for kh_i in 0..d.kh {
                        let (oh0, oh1) = out_range(d.h, d.h_out, d.stride, d.padding, kh_i);
                        for kw_i in 0..d.kw {
                            let (ow0, ow1) = out_range(d.w, d.w_out, d.stride, d.padding, kw_i);
                            if ow0 >= ow1 {
                                continue;
                            }
                            let mut acc = 0.0f64;
                            for oh in oh0..oh1 {
                                let ih = oh * d.stride + kh_i - d.padding;
                                let grow = &gplane[oh * d.w_out..][..d.w_out];
                                let xrow = &xplane[ih * d.w..][..d.w];
                                if d.stride == 1 {
                                    let start = ow0 + kw_i - d.padding;
                                    let xs = &xrow[start..start + (ow1 - ow0)];
                                    for (&gv, &xv) in grow[ow0..ow1].iter().zip(xs) {
                                        acc += gv * xv.to_f64();
                                    }
                                } else {
                                    for ow in ow0..ow1 {
                                        let iw = ow * d.stride + kw_i - d.padding;
                                        acc += grow[ow] * xrow[iw].to_f64();
                                    }
                                }
                            }
                            dw[wbase + kh_i * d.kw + kw_i] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tape() -> Tape<f32> {
        Tape::new()
    }

    #[test]
    fn conv_identity_kernel_scales_input() {
        // 1x1x3x3 ones through a 1x1 kernel holding 2.0.
        let mut t = tape();
        let x = t.leaf(&Tensor::filled(vec![1, 1, 3, 3], 1.0), false);
        let w = t.leaf(&Tensor::filled(vec![1, 1, 1, 1], 2.0), false);
        let y = t.conv2d(x, w, None, 1, 0, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 3, 3]);
        assert!(t.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut t = tape();
        let x = t.leaf(&Tensor::zeros(vec![2, 3, 4, 4]), false);
        let w = t.leaf(&Tensor::filled(vec![5, 3, 3, 3], 0.7), false);
        let b = t.leaf(
            &Tensor::new(vec![5], vec![1.0, -2.0, 0.5, 3.0, 0.0]).unwrap(),
            false,
        );
        let y = t.conv2d(x, w, Some(b), 1, 1, 1).unwrap();
        let yd = t.value(y).data();
        for ni in 0..2 {
            for co in 0..5 {
                let expect = [1.0, -2.0, 0.5, 3.0, 0.0][co];
                for s in 0..16 {
                    assert_eq!(yd[(ni * 5 + co) * 16 + s], expect);
                }
            }
        }
    }

    #[test]
    fn depthwise_all_ones_1x1_is_identity() {
        let mut t = tape();
        let x = t.leaf(
            &Tensor::new(vec![1, 4, 2, 2], (0..16).map(|i| i as f32 * 0.5 - 3.0).collect())
                .unwrap(),
            false,
        );
        let w = t.leaf(&Tensor::filled(vec![4, 1, 1, 1], 1.0), false);
        let y = t.conv2d(x, w, None, 1, 0, 4).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv_rejects_bad_groups_and_axes() {
        let mut t = tape();
        let x = t.leaf(&Tensor::zeros(vec![1, 6, 4, 4]), false);
        let w = t.leaf(&Tensor::zeros(vec![4, 2, 3, 3]), false);
        // groups=4 does not divide C_in=6
        assert!(matches!(
            t.conv2d(x, w, None, 1, 1, 4),
            Err(Error::Config(_))
        ));
        // groups=2 divides but weight axis 1 should be 3, not 2
        assert!(matches!(
            t.conv2d(x, w, None, 1, 1, 2),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn strided_output_extents() {
        let mut t = tape();
        let x = t.leaf(&Tensor::zeros(vec![1, 2, 16, 16]), false);
        let w = t.leaf(&Tensor::zeros(vec![4, 2, 3, 3]), false);
        let y = t.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 4, 8, 8]);
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        let mut t = tape();
        let w = t.leaf(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let y = t.relu(w).unwrap();
        let loss = t.sum(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn modulate_broadcast_hand_example() {
        // alpha=[2,0], h=1-filled 1x2x1x1, delta=3-filled -> channels [7, 1].
        let mut t = tape();
        let h = t.leaf(&Tensor::filled(vec![1, 2, 1, 1], 1.0), false);
        let dlt = t.leaf(&Tensor::filled(vec![1, 2, 1, 1], 3.0), false);
        let a = t.leaf(&Tensor::new(vec![2], vec![2.0, 0.0]).unwrap(), false);
        let y = t.modulate(h, dlt, a).unwrap();
        assert_eq!(t.value(y).data(), &[7.0, 1.0]);
    }

    #[test]
    fn modulate_alpha_zero_is_identity() {
        let mut t = tape();
        let h = t.leaf(
            &Tensor::new(vec![1, 2, 2, 1], vec![0.3, -1.25, 7.5, 0.0]).unwrap(),
            false,
        );
        let dlt = t.leaf(&Tensor::filled(vec![1, 2, 2, 1], 123.0), false);
        let a = t.leaf(&Tensor::zeros(vec![2]), false);
        let y = t.modulate(h, dlt, a).unwrap();
        assert_eq!(t.value(y).data(), t.value(h).data());
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut t = tape();
        let logits = t.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let loss = t.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = t.scalar(loss).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = tape();
        let logits = t.leaf(&Tensor::zeros(vec![2, 3]), false);
        assert!(t.softmax_cross_entropy(logits, &[0, 3]).is_err());
        assert!(t.softmax_cross_entropy(logits, &[0]).is_err());
    }

    #[test]
    fn gradient_accumulates_over_consumers() {
        // loss = sum(x*x_const) + sum(x) -> grad = x_const + 1
        let mut t = tape();
        let x = t.leaf(&Tensor::new(vec![2], vec![3.0, -2.0]).unwrap(), true);
        let c = t.leaf(&Tensor::new(vec![2], vec![5.0, 4.0]).unwrap(), false);
        let prod = t.mul(x, c).unwrap();
        let s1 = t.sum(prod).unwrap();
        let s2 = t.sum(x).unwrap();
        let total = t.add(s1, s2).unwrap();
        t.backward(total).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0, 5.0]);
    }

    #[test]
    fn same_padding_rejects_even_kernels() {
        assert_eq!(same_padding(3).unwrap(), 1);
        assert_eq!(same_padding(7).unwrap(), 3);
        assert!(same_padding(4).is_err());
    }
}
