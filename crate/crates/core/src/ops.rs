//! Differentiable operations on [`Var`]s.
//!
//! Layout is NCHW throughout. Convolution lowers to im2col plus one matrix
//! product per call; its backward pass uses the same lowering (col2im for the
//! input gradient).

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn cols(&self) -> usize {
        self.n * self.positions()
    }
}

/// Output extent of a convolution along one axis, `None` if the kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    let np = g.cols();
    let zero = T::zero();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * np..(r + 1) * np];
                for b in 0..g.n {
                    let plane = &x[(b * g.c + ci) * g.h * g.w..(b * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let dst = &mut row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(zero);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                zero
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let np = g.cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * np..(r + 1) * np];
                for b in 0..g.n {
                    let base = (b * g.c + ci) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        let dst = &mut dx[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` → `[C, N·P]`.
fn batch_to_channel_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
fn channel_to_batch_major<T: Element>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

/// Per-axis bilinear sampling table (half-pixel centers, no corner alignment).
#[derive(Clone, Debug)]
struct AxisInterp<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<T>,
    w_hi: Vec<T>,
}

impl<T: Element> AxisInterp<T> {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut t = AxisInterp {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            w_lo: Vec::with_capacity(output),
            w_hi: Vec::with_capacity(output),
        };
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            let frac = src - lo as f64;
            t.lo.push(lo);
            t.hi.push(hi);
            t.w_lo.push(T::of(1.0 - frac));
            t.w_hi.push(T::of(frac));
        }
        t
    }
}

/// Bilinear resampling of a single `h×w` plane.
fn resize_plane<T: Element>(src: &[T], w: usize, ty: &AxisInterp<T>, tx: &AxisInterp<T>, dst: &mut [T]) {
    let ow = tx.lo.len();
    for (oy, row) in dst.chunks_mut(ow).enumerate() {
        let r0 = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
        let r1 = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
        let (a, b) = (ty.w_lo[oy], ty.w_hi[oy]);
        for (ox, d) in row.iter_mut().enumerate() {
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let top = r0[x0] * tx.w_lo[ox] + r0[x1] * tx.w_hi[ox];
            let bot = r1[x0] * tx.w_lo[ox] + r1[x1] * tx.w_hi[ox];
            *d = top * a + bot * b;
        }
    }
}

fn resize_plane_backward<T: Element>(
    dy: &[T],
    w: usize,
    ty: &AxisInterp<T>,
    tx: &AxisInterp<T>,
    dx: &mut [T],
) {
    let ow = tx.lo.len();
    for (oy, row) in dy.chunks(ow).enumerate() {
        let (a, b) = (ty.w_lo[oy], ty.w_hi[oy]);
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        for (ox, &g) in row.iter().enumerate() {
            let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
            let (c0, c1) = (tx.w_lo[ox], tx.w_hi[ox]);
            dx[y0 * w + x0] = dx[y0 * w + x0] + g * a * c0;
            dx[y0 * w + x1] = dx[y0 * w + x1] + g * a * c1;
            dx[y1 * w + x0] = dx[y1 * w + x0] + g * b * c0;
            dx[y1 * w + x1] = dx[y1 * w + x1] + g * b * c1;
        }
    }
}

/// Plain-tensor bilinear resize, for code paths that never need gradients.
pub fn resize_bilinear_tensor<T: Element>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(shape_err!("resize to empty extent {}x{}", oh, ow));
    }
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let ty = AxisInterp::<T>::new(h, oh);
    let tx = AxisInterp::<T>::new(w, ow);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        resize_plane(src, w, &ty, &tx, dst);
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Stable log-sum-exp softmax over a strided set of logits.
fn softmax_into<T: Element>(logits: impl Iterator<Item = T> + Clone, out: &mut [T]) {
    let max = logits.clone().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn check_same_shape<T: Element>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(shape_err!("{}: {:?} vs {:?}", what, sa, sb));
    }
    Ok(())
}

/// Batch statistics produced by a training-mode batch norm, for running-average tracking.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

impl<'t, T: Element> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        check_same_shape(self, other, "add")?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.tape().op(value, &[*self, *other], |needs| {
            Box::new(move |g: &Tensor<T>| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            })
        }))
    }

    pub fn mul_scalar(&self, k: f64) -> Var<'t, T> {
        let kt = T::of(k);
        let value = self.value().scale(kt);
        self.tape()
            .op(value, &[*self], |_| Box::new(move |g: &Tensor<T>| vec![Some(g.scale(kt))]))
    }

    /// Add a constant tensor of the same shape.
    pub fn add_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != c.shape() {
            return Err(shape_err!("add_const: {:?} vs {:?}", x.shape(), c.shape()));
        }
        let value = x.zip_map(c, |a, b| a + b);
        Ok(self
            .tape()
            .op(value, &[*self], |_| Box::new(|g: &Tensor<T>| vec![Some(g.clone())])))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { v * s });
        self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| {
                let dx = g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * s });
                vec![Some(dx)]
            })
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(sigmoid));
        let value = (*y).clone();
        self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| {
                vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (T::one() - yv)))]
            })
        })
    }

    /// 2-D convolution. `weight` is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let (n, c, h, wd) = x.dims4()?;
        let (co, ci, kh, kw) = w.dims4()?;
        if ci != c {
            return Err(shape_err!(
                "conv2d: input has {} channels, weight expects {}",
                c,
                ci
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(shape_err!("conv2d: bias shape {:?}, expected [{}]", b.shape(), co));
            }
        }
        let (oh, ow) = match (conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err!(
                    "conv2d: kernel {}x{} (stride {}, pad {}) does not fit {}x{}",
                    kh,
                    kw,
                    stride,
                    pad,
                    h,
                    wd
                ))
            }
        };
        let g = ConvGeom {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let k = g.rows();
        let np = g.cols();
        let p = g.positions();
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let cols = if pointwise {
            batch_to_channel_major(x.data(), n, c, p)
        } else {
            let mut cols = vec![T::zero(); k * np];
            im2col(x.data(), &g, &mut cols);
            cols
        };
        let mut out = vec![T::zero(); co * np];
        gemm(false, false, co, np, k, w.data(), &cols, T::zero(), &mut out);
        drop(cols);
        if let Some(b) = bias {
            let bv = b.value();
            for (ch, row) in out.chunks_mut(np).enumerate() {
                let bias = bv.data()[ch];
                for v in row {
                    *v = *v + bias;
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, oh, ow], channel_to_batch_major(&out, n, co, p))?;
        let mut parents = vec![*self, *weight];
        if let Some(b) = bias {
            parents.push(*b);
        }
        Ok(self.tape().op(value, &parents, move |needs| {
            Box::new(move |dy: &Tensor<T>| {
                let dy_mat = batch_to_channel_major(dy.data(), n, co, p);
                let mut grads: Vec<Option<Tensor<T>>> = vec![None; needs.len()];
                if needs[1] {
                    let cols = if pointwise {
                        batch_to_channel_major(x.data(), n, c, p)
                    } else {
                        let mut cols = vec![T::zero(); k * np];
                        im2col(x.data(), &g, &mut cols);
                        cols
                    };
                    let mut dw = vec![T::zero(); co * k];
                    gemm(false, true, co, k, np, &dy_mat, &cols, T::zero(), &mut dw);
                    grads[1] = Some(Tensor::from_vec(w.shape(), dw).expect("weight shape"));
                }
                if needs.len() > 2 && needs[2] {
                    let db: Vec<T> = dy_mat.chunks(np).map(|r| r.iter().copied().sum()).collect();
                    grads[2] = Some(Tensor::from_vec(&[co], db).expect("bias shape"));
                }
                if needs[0] {
                    let mut dcols = vec![T::zero(); k * np];
                    gemm(true, false, k, np, co, w.data(), &dy_mat, T::zero(), &mut dcols);
                    let dx = if pointwise {
                        channel_to_batch_major(&dcols, n, c, p)
                    } else {
                        let mut dx = vec![T::zero(); n * c * h * wd];
                        col2im(&dcols, &g, &mut dx);
                        dx
                    };
                    grads[0] = Some(Tensor::from_vec(x.shape(), dx).expect("input shape"));
                }
                grads
            })
        }))
    }

    /// Batch normalization with batch statistics over `(N, H, W)` per channel.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        check_channel_vec(gamma, c, "batch_norm gamma")?;
        check_channel_vec(beta, c, "batch_norm beta")?;
        let m = n * h * w;
        let hw = h * w;
        let gv = gamma.value();
        let bv = beta.value();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        for mu in &mut mean {
            *mu /= m as f64;
        }
        for b in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += plane
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in range {
                    let xh = (x.data()[i] - mean_t[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    y[i] = xh * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let unbiased = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean: mean_t,
            var: var.iter().map(|&v| T::of(v * unbiased)).collect(),
        };
        let xhat = Rc::new(xhat);
        let value = Tensor::from_vec(x.shape(), y)?;
        let out = self.tape().op(value, &[*self, *gamma, *beta], move |needs| {
            Box::new(move |dy: &Tensor<T>| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dbeta[ch] = dbeta[ch] + dy.data()[i];
                            dgamma[ch] = dgamma[ch] + dy.data()[i] * xhat[i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mf = T::of(m as f64);
                    let mut dx = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gv.data()[ch] * inv_std[ch];
                            let mean_dy = dbeta[ch] / mf;
                            let mean_dyx = dgamma[ch] / mf;
                            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                dx[i] = k * (dy.data()[i] - mean_dy - xhat[i] * mean_dyx);
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx).expect("bn dx")
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma.clone()).expect("bn dgamma")),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta.clone()).expect("bn dbeta")),
                ]
            })
        });
        Ok((out, stats))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        check_channel_vec(gamma, c, "batch_norm gamma")?;
        check_channel_vec(beta, c, "batch_norm beta")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!("batch_norm running stats do not have {} channels", c));
        }
        let hw = h * w;
        let gv = gamma.value();
        let bv = beta.value();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::of(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let mean = running_mean.data().to_vec();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    y[i] = xhat[i] * gv.data()[ch] + bv.data()[ch];
                }
            }
        }
        let value = Tensor::from_vec(x.shape(), y)?;
        Ok(self.tape().op(value, &[*self, *gamma, *beta], move |needs| {
            Box::new(move |dy: &Tensor<T>| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for ch in 0..c {
                        let k = gv.data()[ch] * inv_std[ch];
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            dbeta[ch] = dbeta[ch] + dy.data()[i];
                            dgamma[ch] = dgamma[ch] + dy.data()[i] * xhat[i];
                            dx[i] = dy.data()[i] * k;
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_vec(&[n, c, h, w], dx.clone()).expect("bn dx")),
                    needs[1].then(|| Tensor::from_vec(&[c], dgamma.clone()).expect("bn dgamma")),
                    needs[2].then(|| Tensor::from_vec(&[c], dbeta.clone()).expect("bn dbeta")),
                ]
            })
        }))
    }

    /// Non-overlapping `k×k` average pooling; extents must divide evenly.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("avg_pool({}) needs extents divisible by {}, got {}x{}", k, k, h, w));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::of(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..h {
                for xx in 0..w {
                    let o = (y / k) * ow + xx / k;
                    dst[o] = dst[o] + plane[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v = *v * inv;
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |dy: &Tensor<T>| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (g, dst) in dy.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = g[(y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).expect("pool dx"))]
            })
        }))
    }

    /// Bilinear resampling to `oh×ow` (half-pixel centers, no corner alignment).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if (oh, ow) == (h, w) {
            return Ok(*self);
        }
        let value = resize_bilinear_tensor(&x, oh, ow)?;
        let ty = AxisInterp::<T>::new(h, oh);
        let tx = AxisInterp::<T>::new(w, ow);
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |dy: &Tensor<T>| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (g, dst) in dy.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
                    resize_plane_backward(g, w, &ty, &tx, dst);
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).expect("resize dx"))]
            })
        }))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let (n, _, h, w) = first.value().dims4()?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = p.value().dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!("concat: {:?} vs {:?}", first.shape(), p.shape()));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = vec![T::zero(); n * total * hw];
        let mut offset = 0;
        for (p, &pc) in parts.iter().zip(&channels) {
            let v = p.value();
            for b in 0..n {
                out[(b * total + offset) * hw..(b * total + offset + pc) * hw]
                    .copy_from_slice(&v.data()[b * pc * hw..(b + 1) * pc * hw]);
            }
            offset += pc;
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        Ok(first.tape().op(value, parts, move |needs| {
            Box::new(move |dy: &Tensor<T>| {
                let mut grads = Vec::with_capacity(channels.len());
                let mut offset = 0;
                for (i, &pc) in channels.iter().enumerate() {
                    if needs[i] {
                        let mut g = vec![T::zero(); n * pc * hw];
                        for b in 0..n {
                            g[b * pc * hw..(b + 1) * pc * hw].copy_from_slice(
                                &dy.data()[(b * total + offset) * hw..(b * total + offset + pc) * hw],
                            );
                        }
                        grads.push(Some(Tensor::from_vec(&[n, pc, h, w], g).expect("concat grad")));
                    } else {
                        grads.push(None);
                    }
                    offset += pc;
                }
                grads
            })
        }))
    }

    /// Softmax across the channel axis of a rank-4 tensor.
    pub fn softmax_channels(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let y = Rc::new(softmax_channels_tensor(&x)?);
        let value = (*y).clone();
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |dy: &Tensor<T>| {
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let idx = |ch: usize| (b * c + ch) * hw + p;
                        let dot: T = (0..c).map(|ch| dy.data()[idx(ch)] * y.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = y.data()[idx(ch)] * (dy.data()[idx(ch)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).expect("softmax dx"))]
            })
        }))
    }

    /// `s[n, c] = Σ_{h,w} x[n, c, h, w] · m[n, 0, h, w]`.
    pub fn spatial_weighted_sum(&self, map: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let m = map.value();
        let (n, c, h, w) = x.dims4()?;
        let (mn, mc, mh, mw) = m.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(shape_err!(
                "guidance map {:?} does not match features {:?}",
                m.shape(),
                x.shape()
            ));
        }
        let hw = h * w;
        let mut s = vec![T::zero(); n * c];
        for b in 0..n {
            let mp = &m.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let xp = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                s[b * c + ch] = xp.iter().zip(mp).map(|(&a, &bv)| a * bv).sum();
            }
        }
        let value = Tensor::from_vec(&[n, c], s)?;
        Ok(self.tape().op(value, &[*self, *map], move |needs| {
            Box::new(move |ds: &Tensor<T>| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        let mp = &m.data()[b * hw..(b + 1) * hw];
                        for ch in 0..c {
                            let g = ds.data()[b * c + ch];
                            for (d, &mv) in dx[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().zip(mp) {
                                *d = g * mv;
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx).expect("wsum dx")
                });
                let dm = needs[1].then(|| {
                    let mut dm = vec![T::zero(); n * hw];
                    for b in 0..n {
                        for ch in 0..c {
                            let g = ds.data()[b * c + ch];
                            let xp = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (d, &xv) in dm[b * hw..(b + 1) * hw].iter_mut().zip(xp) {
                                *d = *d + g * xv;
                            }
                        }
                    }
                    Tensor::from_vec(&[n, 1, h, w], dm).expect("wsum dm")
                });
                vec![dx, dm]
            })
        }))
    }

    /// Row-wise softmax of a `[N, C]` tensor, computed as `softmax(s / temperature)`.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t, T>> {
        let s = self.value();
        let (n, c) = s.dims2()?;
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {}",
                temperature
            )));
        }
        let inv_t = T::of(1.0 / temperature);
        let mut v = vec![T::zero(); n * c];
        for (row, out) in s.data().chunks(c).zip(v.chunks_mut(c)) {
            softmax_into(row.iter().map(|&x| x * inv_t), out);
        }
        let v = Rc::new(Tensor::from_vec(&[n, c], v)?);
        let value = (*v).clone();
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |dv: &Tensor<T>| {
                let mut ds = vec![T::zero(); n * c];
                for b in 0..n {
                    let vr = &v.data()[b * c..(b + 1) * c];
                    let gr = &dv.data()[b * c..(b + 1) * c];
                    let dot: T = vr.iter().zip(gr).map(|(&a, &g)| a * g).sum();
                    for j in 0..c {
                        ds[b * c + j] = vr[j] * (gr[j] - dot) * inv_t;
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c], ds).expect("softmax rows ds"))]
            })
        }))
    }

    /// `y[n, c, h, w] = x[n, c, h, w] · v[n, c]`.
    pub fn scale_channels(&self, weights: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let v = weights.value();
        let (n, c, h, w) = x.dims4()?;
        if v.shape() != [n, c] {
            return Err(shape_err!(
                "channel weights {:?} do not match features {:?}",
                v.shape(),
                x.shape()
            ));
        }
        let hw = h * w;
        let mut y = vec![T::zero(); x.len()];
        for (i, (dst, src)) in y.chunks_mut(hw).zip(x.data().chunks(hw)).enumerate() {
            let k = v.data()[i];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * k;
            }
        }
        let value = Tensor::from_vec(x.shape(), y)?;
        Ok(self.tape().op(value, &[*self, *weights], move |needs| {
            Box::new(move |dy: &Tensor<T>| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * c * hw];
                    for (i, (dst, g)) in dx.chunks_mut(hw).zip(dy.data().chunks(hw)).enumerate() {
                        let k = v.data()[i];
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = gv * k;
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], dx).expect("scale dx")
                });
                let dv = needs[1].then(|| {
                    let dv: Vec<T> = dy
                        .data()
                        .chunks(hw)
                        .zip(x.data().chunks(hw))
                        .map(|(g, xs)| g.iter().zip(xs).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(&[n, c], dv).expect("scale dv")
                });
                vec![dx, dv]
            })
        }))
    }

    /// Mean per-pixel cross-entropy of channel-softmaxed logits against class indices.
    pub fn cross_entropy(&self, labels: &[u8]) -> Result<Var<'t, T>> {
        self.cross_entropy_weighted(labels, None)
    }

    /// Cross-entropy with an optional per-pixel weight, averaged over all pixels.
    pub fn cross_entropy_weighted(&self, labels: &[u8], weights: Option<&[f64]>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(shape_err!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                x.shape()
            ));
        }
        if let Some(wts) = weights {
            if wts.len() != labels.len() {
                return Err(shape_err!("cross_entropy: {} weights for {} pixels", wts.len(), labels.len()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let probs = Rc::new(softmax_channels_tensor(&x)?);
        let m = (n * hw) as f64;
        let weights: Rc<Vec<f64>> = Rc::new(weights.map_or_else(|| vec![1.0; n * hw], |w| w.to_vec()));
        let mut total = 0.0f64;
        for b in 0..n {
            for p in 0..hw {
                let wt = weights[b * hw + p];
                if wt == 0.0 {
                    continue;
                }
                let l = labels[b * hw + p] as usize;
                let idx = (b * c + l) * hw + p;
                // log-softmax via the max-shifted logits for accuracy
                let max = (0..c)
                    .map(|ch| x.data()[(b * c + ch) * hw + p].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..c)
                    .map(|ch| (x.data()[(b * c + ch) * hw + p].as_f64() - max).exp())
                    .sum::<f64>()
                    .ln()
                    + max;
                total += wt * (lse - x.data()[idx].as_f64());
            }
        }
        let value = Tensor::scalar(T::of(total / m));
        let labels = labels.to_vec();
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| {
                let k = g.data()[0] / T::of(m);
                let mut dx: Vec<T> = probs.data().to_vec();
                for b in 0..n {
                    for p in 0..hw {
                        let kw = k * T::of(weights[b * hw + p]);
                        for ch in 0..c {
                            let idx = (b * c + ch) * hw + p;
                            dx[idx] = dx[idx] * kw;
                        }
                        let idx = (b * c + labels[b * hw + p] as usize) * hw + p;
                        dx[idx] = dx[idx] - kw;
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], dx).expect("ce dx"))]
            })
        }))
    }

    /// Mean over positions of `-log σ(x)` (`target_real`) or `-log(1 - σ(x))`,
    /// with σ clamped to `[eps, 1 - eps]`.
    pub fn bce_with_logits(&self, target_real: bool, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let m = x.len() as f64;
        let mut total = 0.0;
        let mut slopes = Vec::with_capacity(x.len());
        for &v in x.data() {
            let s = sigmoid(v.as_f64());
            let clamped = s.clamp(eps, 1.0 - eps);
            let inside = s > eps && s < 1.0 - eps;
            if target_real {
                total -= clamped.ln();
                slopes.push(if inside { -(1.0 - s) } else { 0.0 });
            } else {
                total -= (1.0 - clamped).ln();
                slopes.push(if inside { s } else { 0.0 });
            }
        }
        let value = Tensor::scalar(T::of(total / m));
        let shape = x.shape().to_vec();
        self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| {
                let k = g.data()[0].as_f64() / m;
                let dx = slopes.iter().map(|&s| T::of(s * k)).collect();
                vec![Some(Tensor::from_vec(&shape, dx).expect("bce dx"))]
            })
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let x = self.value();
        let len = x.len();
        let value = Tensor::scalar(x.mean());
        let shape = x.shape().to_vec();
        self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| {
                let k = g.data()[0] / T::of(len as f64);
                vec![Some(Tensor::full(&shape, k))]
            })
        })
    }

    /// `Σ x ⊙ c` for a constant `c`; used for directional derivative checks.
    pub fn dot_const(&self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape() != c.shape() {
            return Err(shape_err!("dot_const: {:?} vs {:?}", x.shape(), c.shape()));
        }
        let value = Tensor::scalar(x.data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum());
        let c = c.clone();
        Ok(self.tape().op(value, &[*self], move |_| {
            Box::new(move |g: &Tensor<T>| vec![Some(c.scale(g.data()[0]))])
        }))
    }

    /// `Σ wᵢ · termᵢ` over scalar terms.
    pub fn weighted_sum(terms: &[(Var<'t, T>, f64)]) -> Result<Var<'t, T>> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidArgument("weighted sum of zero terms".into()))?;
        for (t, _) in terms {
            if t.value().len() != 1 {
                return Err(shape_err!("weighted_sum expects scalars, got {:?}", t.shape()));
            }
        }
        let total: T = terms.iter().map(|(t, w)| t.item() * T::of(*w)).sum();
        let weights: Vec<T> = terms.iter().map(|(_, w)| T::of(*w)).collect();
        let vars: Vec<Var<'t, T>> = terms.iter().map(|(t, _)| *t).collect();
        Ok(first.0.tape().op(Tensor::scalar(total), &vars, move |needs| {
            Box::new(move |g: &Tensor<T>| {
                weights
                    .iter()
                    .zip(&needs)
                    .map(|(&w, &need)| need.then(|| Tensor::scalar(g.data()[0] * w)))
                    .collect()
            })
        }))
    }
}

fn check_channel_vec<T: Element>(v: &Var<'_, T>, c: usize, what: &str) -> Result<()> {
    if v.shape() != [c] {
        return Err(shape_err!("{} has shape {:?}, expected [{}]", what, v.shape(), c));
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_channels_tensor<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut buf = vec![T::zero(); c];
    for b in 0..n {
        for p in 0..hw {
            softmax_into((0..c).map(|ch| x.data()[(b * c + ch) * hw + p]), &mut buf);
            for (ch, &v) in buf.iter().enumerate() {
                y[(b * c + ch) * hw + p] = v;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], y)
}
