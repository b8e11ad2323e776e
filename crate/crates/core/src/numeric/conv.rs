//! Spatial kernels over `[B, C, T, F]` tensors.

use super::scalar::{gemm, Mat};
use super::{Float, Tape, Tensor, Var};
use crate::error::{Result, SeldError};

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T: Float = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Float> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    match shape {
        &[b, c, t, f] => Ok([b, c, t, f]),
        _ => Err(SeldError::dim(op, shape, &[0, 0, 0, 0])),
    }
}

struct ConvGeom {
    cin: usize,
    t: usize,
    f: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.t * self.f
    }

    /// Unfolds one `[Cin, T, F]` item into `[Cin·kh·kw, T·F]` with zero padding.
    fn im2col<T: Float>(&self, x: &[T], col: &mut [T]) {
        let (t_len, f_len) = (self.t, self.f);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * t_len * f_len..(c + 1) * t_len * f_len];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut col[row * t_len * f_len..(row + 1) * t_len * f_len];
                    let f_lo = pw.saturating_sub(j);
                    let f_hi = (f_len + pw).saturating_sub(j).min(f_len);
                    for t in 0..t_len {
                        let line = &mut dst[t * f_len..(t + 1) * f_len];
                        let src_t = t + i;
                        if src_t < ph || src_t - ph >= t_len || f_lo >= f_hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(src_t - ph) * f_len..(src_t - ph + 1) * f_len];
                        line[..f_lo].fill(T::zero());
                        line[f_hi..].fill(T::zero());
                        line[f_lo..f_hi].copy_from_slice(&src[f_lo + j - pw..f_hi + j - pw]);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `dx`.
    fn col2im<T: Float>(&self, col: &[T], dx: &mut [T]) {
        let (t_len, f_len) = (self.t, self.f);
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut dx[c * t_len * f_len..(c + 1) * t_len * f_len];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &col[row * t_len * f_len..(row + 1) * t_len * f_len];
                    let f_lo = pw.saturating_sub(j);
                    let f_hi = (f_len + pw).saturating_sub(j).min(f_len);
                    for t in 0..t_len {
                        let src_t = t + i;
                        if src_t < ph || src_t - ph >= t_len || f_lo >= f_hi {
                            continue;
                        }
                        let dst = &mut plane[(src_t - ph) * f_len..(src_t - ph + 1) * f_len];
                        let line = &src[t * f_len..(t + 1) * f_len];
                        for f in f_lo..f_hi {
                            dst[f + j - pw] += line[f];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Float> Tape<T> {
    /// Stride-1 cross-correlation with "same" zero padding and a bias per
    /// output channel. `w` is `[Cout, Cin, kh, kw]` with odd kernel extents.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let [b, cin, t, f] = dims4(self.shape(x), "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if wcin != cin {
            return Err(SeldError::dim("conv2d", self.shape(x), self.shape(w)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(SeldError::Config(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if self.shape(bias) != [cout] {
            return Err(SeldError::dim("conv2d bias", self.shape(w), self.shape(bias)));
        }
        let geom = ConvGeom { cin, t, f, kh, kw };
        let (rows, cols) = (geom.rows(), geom.cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); b * cout * cols];
        {
            let (xv, wv, bv) = (
                self.value(x).data(),
                self.value(w).data(),
                self.value(bias).data(),
            );
            for n in 0..b {
                geom.im2col(&xv[n * cin * cols..(n + 1) * cin * cols], &mut col);
                let dst = &mut out[n * cout * cols..(n + 1) * cout * cols];
                for (c, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                    chunk.fill(bv[c]);
                }
                gemm(Mat::new(wv, cout, rows), Mat::new(&col, rows, cols), T::one(), dst);
            }
        }
        let value = Tensor::from_vec(vec![b, cout, t, f], out);
        Ok(self.record(
            value,
            &[x, w, bias],
            Box::new(move |a| {
                let (xv, wv) = (a.inputs[0].data(), a.inputs[1].data());
                let mut gx = a.needs[0].then(|| vec![T::zero(); xv.len()]);
                let mut gw = a.needs[1].then(|| vec![T::zero(); wv.len()]);
                let gb = a.needs[2].then(|| {
                    let mut g = vec![T::zero(); cout];
                    for (i, chunk) in a.grad.chunks_exact(cols).enumerate() {
                        g[i % cout] += chunk.iter().copied().sum::<T>();
                    }
                    g
                });
                let mut col = vec![T::zero(); rows * cols];
                let mut dcol = vec![T::zero(); if gx.is_some() { rows * cols } else { 0 }];
                for n in 0..b {
                    let dy = Mat::new(&a.grad[n * cout * cols..(n + 1) * cout * cols], cout, cols);
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&xv[n * cin * cols..(n + 1) * cin * cols], &mut col);
                        gemm(dy, Mat::new(&col, rows, cols).t(), T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(Mat::new(wv, cout, rows).t(), dy, T::zero(), &mut dcol);
                        geom.col2im(&dcol, &mut gx[n * cin * cols..(n + 1) * cin * cols]);
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Non-overlapping max pooling with window `kt × kf`. Extents must be
    /// divisible by the window; ties route the gradient to the first maximum
    /// in row-major order.
    pub fn max_pool2d(&mut self, x: Var, kt: usize, kf: usize) -> Result<Var> {
        let [b, c, t, f] = dims4(self.shape(x), "max_pool2d")?;
        if kt == 0 || kf == 0 || t % kt != 0 || f % kf != 0 {
            return Err(SeldError::Config(format!(
                "max_pool2d window {kt}x{kf} does not divide extents {t}x{f}"
            )));
        }
        if kt == 1 && kf == 1 {
            return Ok(x);
        }
        let (to, fo) = (t / kt, f / kf);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * to * fo);
        let mut argmax = Vec::with_capacity(b * c * to * fo);
        for plane in 0..b * c {
            let base = plane * t * f;
            for i in 0..to {
                for j in 0..fo {
                    let mut best = base + i * kt * f + j * kf;
                    for di in 0..kt {
                        for dj in 0..kf {
                            let idx = base + (i * kt + di) * f + j * kf + dj;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let n_in = src.len();
        Ok(self.record(
            Tensor::from_vec(vec![b, c, to, fo], out),
            &[x],
            Box::new(move |a| {
                let mut g = vec![T::zero(); n_in];
                for (&idx, &d) in argmax.iter().zip(a.grad) {
                    g[idx] += d;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Per-channel normalization of `[B, C, T, F]`. In training mode the batch
    /// statistics normalize the input and update `stats`; otherwise the
    /// running statistics are used.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        training: bool,
    ) -> Result<Var> {
        let [b, c, t, f] = dims4(self.shape(x), "batch_norm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(SeldError::dim("batch_norm2d", self.shape(x), self.shape(gamma)));
        }
        let plane = t * f;
        let count = b * plane;
        let eps = T::of(stats.eps);
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        if training {
            let cn = T::of(count as f64);
            let mom = T::of(stats.momentum);
            for ch in 0..c {
                let mut s = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * plane;
                    s += src[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = s / cn;
                let mut v = T::zero();
                for n in 0..b {
                    let off = (n * c + ch) * plane;
                    v += src[off..off + plane]
                        .iter()
                        .map(|&x| (x - mu) * (x - mu))
                        .sum::<T>();
                }
                let var = v / cn;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps).sqrt();
                let unbiased = if count > 1 { v / T::of((count - 1) as f64) } else { var };
                stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mu;
                stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * unbiased;
            }
        } else {
            for ch in 0..c {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
            }
        }
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let h = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * gm[ch] + bt[ch];
                }
            }
        }
        Ok(self.record(
            Tensor::from_vec(vec![b, c, t, f], out),
            &[x, gamma, beta],
            Box::new(move |a| {
                let gm = a.inputs[1].data();
                let dy = a.grad;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                let gx = a.needs[0].then(|| {
                    let mut g = vec![T::zero(); dy.len()];
                    let cn = T::of(count as f64);
                    for n in 0..b {
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            let k = gm[ch] * inv_std[ch];
                            for i in off..off + plane {
                                g[i] = if training {
                                    k / cn * (cn * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    g
                });
                vec![gx, a.needs[1].then_some(sum_dy_xhat), a.needs[2].then_some(sum_dy)]
            }),
        ))
    }
}
