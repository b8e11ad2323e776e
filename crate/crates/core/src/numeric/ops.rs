//! Differentiable operations recorded on a [`Tape`].

use rand::Rng;

use super::scalar::{gemm, Mat};
use super::tensor::{inverse_perm, numel, strides};
use super::{Float, SeldRng, Tape, Tensor, Var};
use crate::error::{Result, SeldError};

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.record(
            value,
            &[x],
            Box::new(move |a| {
                let g = a
                    .grad
                    .iter()
                    .zip(a.inputs[0].data())
                    .zip(a.output.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| T::one() / (T::one() + (-v).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    /// `a + b`, where `b` may also be a trailing-suffix shape of `a`
    /// (broadcast over the leading axes, as for biases).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_signed(a, b, -T::one())
    }

    fn add_signed(&mut self, a: Var, b: Var, sign: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(SeldError::dim("add", &sa, &sb));
        }
        let inner = numel(&sb);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = va
            .iter()
            .enumerate()
            .map(|(i, &x)| x + sign * vb[i % inner])
            .collect();
        Ok(self.record(
            Tensor::from_vec(sa, data),
            &[a, b],
            Box::new(move |args| {
                let ga = args.needs[0].then(|| args.grad.to_vec());
                let gb = args.needs[1].then(|| {
                    let mut g = vec![T::zero(); inner];
                    for (i, &d) in args.grad.iter().enumerate() {
                        g[i % inner] += sign * d;
                    }
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SeldError::dim("mul", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data);
        Ok(self.record(
            value,
            &[a, b],
            Box::new(|args| {
                let prod = |other: &Tensor<T>| {
                    args.grad
                        .iter()
                        .zip(other.data())
                        .map(|(&g, &o)| g * o)
                        .collect::<Vec<T>>()
                };
                vec![
                    args.needs[0].then(|| prod(args.inputs[1])),
                    args.needs[1].then(|| prod(args.inputs[0])),
                ]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.record(value, &[x], Box::new(|a| vec![Some(a.grad.to_vec())])))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let inv = inverse_perm(perm);
        Ok(self.record(
            value,
            &[x],
            Box::new(move |a| {
                let g = Tensor::from_vec(a.output.shape().to_vec(), a.grad.to_vec());
                vec![Some(g.permute(&inv).expect("inverse is valid").into_data())]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let n = self.value(x).numel();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |a| vec![Some(vec![a.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(SeldError::dim("mse_loss", self.shape(pred), self.shape(target)));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = T::of(p.len() as f64);
        let loss = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.record(
            Tensor::scalar(loss),
            &[pred, target],
            Box::new(move |a| {
                let scale = T::of(2.0) * a.grad[0] / n;
                let diff: Vec<T> = a.inputs[0]
                    .data()
                    .iter()
                    .zip(a.inputs[1].data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                let gt = a.needs[1].then(|| diff.iter().map(|&d| -d).collect());
                vec![a.needs[0].then_some(diff), gt]
            }),
        ))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(SeldError::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(
            Tensor::from_vec(out_shape, data),
            &[x],
            Box::new(move |a| {
                let mut g = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    g[base..base + len * inner]
                        .copy_from_slice(&a.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| SeldError::Usage("concat of nothing".into()))?)
            .to_vec();
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(SeldError::dim("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &l) in xs.iter().zip(&lens) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.record(
            Tensor::from_vec(shape, data),
            xs,
            Box::new(move |a| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &l) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&a.grad[pos..pos + l * inner]);
                        pos += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcasting
    /// over the leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut out = vec![T::zero(); plan.out_len()];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            for (i, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                gemm(
                    Mat::new(&va[oa..], plan.m, plan.k),
                    Mat::new(&vb[ob..], plan.k, plan.n),
                    T::zero(),
                    &mut out[i * plan.m * plan.n..],
                );
            }
        }
        let value = Tensor::from_vec(plan.out_shape.clone(), out);
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |args| {
                let (va, vb) = (args.inputs[0].data(), args.inputs[1].data());
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let mut ga = args.needs[0].then(|| vec![T::zero(); va.len()]);
                let mut gb = args.needs[1].then(|| vec![T::zero(); vb.len()]);
                for (i, (&oa, &ob)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                    let dc = Mat::new(&args.grad[i * m * n..], m, n);
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC · Bᵀ
                        gemm(dc, Mat::new(&vb[ob..], k, n).t(), T::one(), &mut ga[oa..]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB = Aᵀ · dC
                        gemm(Mat::new(&va[oa..], m, k).t(), dc, T::one(), &mut gb[ob..]);
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(SeldError::dim("linear", &sx, &sw));
        }
        if sb != [sw[1]] {
            return Err(SeldError::dim("linear bias", &sw, &sb));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = numel(&sx) / k;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            Mat::new(self.value(x).data(), rows, k),
            Mat::new(self.value(w).data(), k, n),
            T::one(),
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self.record(
            Tensor::from_vec(shape, out),
            &[x, w, b],
            Box::new(move |a| {
                let dy = Mat::new(a.grad, rows, n);
                let gx = a.needs[0].then(|| {
                    let mut g = vec![T::zero(); rows * k];
                    gemm(dy, Mat::new(a.inputs[1].data(), k, n).t(), T::zero(), &mut g);
                    g
                });
                let gw = a.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    gemm(Mat::new(a.inputs[0].data(), rows, k).t(), dy, T::zero(), &mut g);
                    g
                });
                let gb = a.needs[2].then(|| {
                    let mut g = vec![T::zero(); n];
                    for row in a.grad.chunks_exact(n) {
                        g.iter_mut().zip(row).for_each(|(s, &d)| *s += d);
                    }
                    g
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(SeldError::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.record(
            Tensor::from_vec(shape, out),
            &[x],
            Box::new(move |a| {
                let y = a.output.data();
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| a.grad[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            g[at(j)] = y[at(j)] * (a.grad[at(j)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Standardizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| SeldError::dim("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(SeldError::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::of(eps);
        let src = self.value(x).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        Ok(self.record(
            Tensor::from_vec(shape, out),
            &[x, gamma, beta],
            Box::new(move |a| {
                let gm = a.inputs[1].data();
                let mut gx = a.needs[0].then(|| vec![T::zero(); rows * d]);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let dy = &a.grad[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        gg[j] += dy[j] * xh[j];
                        gb[j] += dy[j];
                        dxhat[j] = dy[j] * gm[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] / dn * (dn * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
                vec![gx, a.needs[1].then_some(gg), a.needs[2].then_some(gb)]
            }),
        ))
    }

    /// Inverted dropout. Identity when `!training` or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut SeldRng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(SeldError::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_vec(v.shape().to_vec(), data);
        Ok(self.record(
            value,
            &[x],
            Box::new(move |a| vec![Some(a.grad.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }
}

/// Precomputed batch offsets for a broadcasting batched matmul.
#[derive(Clone)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(SeldError::dim("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(SeldError::dim("matmul", sa, sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(SeldError::dim("matmul batch", sa, sb));
            }
            batch.push(x.max(y));
        }
        let (sta, stb) = (strides(&pa), strides(&pb));
        let count = numel(&batch);
        let mut a_off = Vec::with_capacity(count);
        let mut b_off = Vec::with_capacity(count);
        let bst = strides(&batch);
        for flat in 0..count {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..rank {
                let i = (flat / bst[d]) % batch[d];
                if pa[d] != 1 {
                    oa += i * sta[d];
                }
                if pb[d] != 1 {
                    ob += i * stb[d];
                }
            }
            a_off.push(oa * m * k);
            b_off.push(ob * k * n);
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            a_off,
            b_off,
        })
    }

    fn out_len(&self) -> usize {
        numel(&self.out_shape)
    }
}
