//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass walks it once in reverse.
//! The op set is exactly what the projector, the recognizer and their
//! losses need.

use crate::numeric::linalg::{cholesky_batch, solve_with_factors};
use crate::numeric::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial geometry shared by every convolution: zero padding of
/// `max(k - s, 0)` split floor/ceil, output extent `ceil(n / s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Self { kernel, stride }
    }

    pub fn pad_before(&self) -> usize {
        self.kernel.saturating_sub(self.stride) / 2
    }

    pub fn out_extent(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the current batch; gradients flow through them.
    Batch,
    /// Normalize with fixed running statistics.
    Running,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sum(Var),
    SumSquares(Var),
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_a: bool,
    },
    SpdSolve {
        mats: Var,
        rhs: Var,
        factors: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    PairwiseGram(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    Standardize {
        input: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample(Var),
    Consensus(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a [`Graph::batch_norm`] call in batch mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, keyed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Order-independent sum: sort, then pairwise reduction.
fn sorted_pairwise_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    fn pairwise(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
        }
    }
    pairwise(values)
}

/// Corner-aligned source coordinate and blend weight for output index `o`.
fn bilinear_source(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let data = x.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= n as f64;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(
            Tensor::new(&out_shape, out).unwrap(),
            Op::MeanAxis { input: a, axis },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let v = self.value(a).permute(perm);
        let rg = self.rg(a);
        self.push(
            v,
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// `[N, in] x [in, out] (+ bias[out])`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        assert_eq!(w.shape()[0], fin, "linear: input features mismatch");
        let fout = w.shape()[1];
        let mut out = vec![0.0; n * fout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let (xd, wd) = (x.data(), w.data());
        for r in 0..n {
            let orow = &mut out[r * fout..(r + 1) * fout];
            for i in 0..fin {
                let xv = xd[r * fin + i];
                let wrow = &wd[i * fout..(i + 1) * fout];
                for (o, wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, fout], out).unwrap(),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// Batched matrix product: `a[b] · b[b]`, or `a[b]ᵀ · b[b]` with `trans_a`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_a: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k) = if trans_a {
            (av.shape()[0], av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[0], av.shape()[1], av.shape()[2])
        };
        assert_eq!(bv.shape()[0], batch);
        assert_eq!(bv.shape()[1], k, "batch_matmul inner dimension");
        let n = bv.shape()[2];
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for p in 0..batch {
            let ab = &ad[p * m * k..(p + 1) * m * k];
            let bb = &bd[p * k * n..(p + 1) * k * n];
            let ob = &mut out[p * m * n..(p + 1) * m * n];
            for i in 0..m {
                for kk in 0..k {
                    let aik = if trans_a {
                        ab[kk * m + i]
                    } else {
                        ab[i * k + kk]
                    };
                    for j in 0..n {
                        ob[i * n + j] += aik * bb[kk * n + j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[batch, m, n], out).unwrap(),
            Op::BatchMatMul { a, b, trans_a },
            rg,
        )
    }

    /// Batched SPD solve `(M + ridge I) z = rhs` by Cholesky.
    pub fn spd_solve(&mut self, mats: Var, rhs: Var, ridge: f64) -> crate::Result<Var> {
        let factors = cholesky_batch(self.value(mats), ridge)?;
        let d = self.shape(mats)[1];
        let z = solve_with_factors(&factors, d, self.value(rhs))?;
        let rg = self.rg(mats) || self.rg(rhs);
        Ok(self.push(z, Op::SpdSolve { mats, rhs, factors }, rg))
    }

    /// NHWC convolution: input `[N, H, W, Ci]`, weight `[k, k, Ci, Co]`, bias `[Co]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, h, wd, ci] = *x.shape() else {
            panic!("conv2d expects NHWC input, got {:?}", x.shape())
        };
        let k = geom.kernel;
        assert_eq!(w.shape(), &[k, k, ci, w.shape()[3]], "conv2d weight shape");
        let co = w.shape()[3];
        let (ho, wo) = (geom.out_extent(h), geom.out_extent(wd));
        let pad = geom.pad_before() as isize;
        let s = geom.stride as isize;
        let mut out = vec![0.0; n * ho * wo * co];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for px in out.chunks_mut(co) {
                px.copy_from_slice(bv);
            }
        }
        let (xd, wdat) = (x.data(), w.data());
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((b * ho + oy) * wo + ox) * co;
                    let orow = &mut out[obase..obase + co];
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * wd + ix as usize) * ci;
                            let wbase = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let xv = xd[xbase + c];
                                let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                                for (o, wv) in orow.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, ho, wo, co], out).unwrap(),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Scaled pairwise frame inner products: `[G, T, P, C] -> [G, P, T(T-1)/2]`,
    /// pairs `(t1, t2)`, `t1 < t2`, in ascending order.
    pub fn pairwise_gram(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [g, t, p, c] = *x.shape() else {
            panic!("pairwise_gram expects [G, T, P, C], got {:?}", x.shape())
        };
        let pairs = t * (t - 1) / 2;
        let xd = x.data();
        let inv_c = 1.0 / c as f64;
        let mut out = vec![0.0; g * p * pairs];
        for gi in 0..g {
            for pi in 0..p {
                let mut idx = 0;
                for t1 in 0..t {
                    let a = &xd[((gi * t + t1) * p + pi) * c..][..c];
                    for t2 in t1 + 1..t {
                        let b = &xd[((gi * t + t2) * p + pi) * c..][..c];
                        let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                        out[(gi * p + pi) * pairs + idx] = dot * inv_c;
                        idx += 1;
                    }
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            Tensor::new(&[g, p, pairs], out).unwrap(),
            Op::PairwiseGram(input),
            rg,
        )
    }

    /// Per-feature normalization of `[N, F]` rows followed by `gamma * x + beta`.
    ///
    /// In [`NormMode::Batch`] the statistics come from the rows themselves and are
    /// returned for running-average bookkeeping; in [`NormMode::Running`] the given
    /// `running` statistics are used.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: &NormStats,
    ) -> (Var, Option<NormStats>) {
        let x = self.value(input);
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let xd = x.data();
        let (mean, var) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; f];
                for row in xd.chunks(f) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for row in xd.chunks(f) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            NormMode::Running => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = vec![0.0; n * f];
        for (r, row) in xd.chunks(f).enumerate() {
            for j in 0..f {
                normalized[r * f + j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = normalized
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i % f] + bd[i % f])
            .collect();
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let stats = (mode == NormMode::Batch).then_some(NormStats { mean, var });
        let v = self.push(
            Tensor::new(&[n, f], out).unwrap(),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            },
            rg,
        );
        (v, stats)
    }

    /// Row-wise standardization of `[N, F]`: `(x - mean) / sqrt(var + eps)` with
    /// the mean and biased variance taken over each row.
    pub fn standardize(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let (n, f) = (x.shape()[0], x.shape()[1]);
        let mut normalized = vec![0.0; n * f];
        let mut inv_std = vec![0.0; n];
        for (r, row) in x.data().chunks(f).enumerate() {
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            inv_std[r] = 1.0 / (var + eps).sqrt();
            for (o, v) in normalized[r * f..(r + 1) * f].iter_mut().zip(row) {
                *o = (v - mean) * inv_std[r];
            }
        }
        let rg = self.rg(input);
        self.push(
            Tensor::new(&[n, f], normalized.clone()).unwrap(),
            Op::Standardize {
                input,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Corner-aligned bilinear resize `[G, h, w, F] -> [G, out_h, out_w, F]`.
    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Var {
        let x = self.value(input);
        let [g, h, w, f] = *x.shape() else {
            panic!("upsample expects [G, h, w, F], got {:?}", x.shape())
        };
        let xd = x.data();
        let mut out = vec![0.0; g * out_h * out_w * f];
        for gi in 0..g {
            for oy in 0..out_h {
                let (y0, y1, fy) = bilinear_source(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, fx) = bilinear_source(ox, w, out_w);
                    let taps = [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1, (1.0 - fy) * fx),
                        (y1, x0, fy * (1.0 - fx)),
                        (y1, x1, fy * fx),
                    ];
                    let obase = ((gi * out_h + oy) * out_w + ox) * f;
                    for (yy, xx, wt) in taps {
                        if wt == 0.0 {
                            continue;
                        }
                        let ibase = ((gi * h + yy) * w + xx) * f;
                        for j in 0..f {
                            out[obase + j] += wt * xd[ibase + j];
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        self.push(
            Tensor::new(&[g, out_h, out_w, f], out).unwrap(),
            Op::Upsample(input),
            rg,
        )
    }

    /// Segment consensus `[B, S, K] -> [B, K]`: the mean over segments, summed in
    /// sorted order so the result is bitwise invariant to segment permutation.
    pub fn consensus(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [b, s, k] = *x.shape() else {
            panic!("consensus expects [B, S, K], got {:?}", x.shape())
        };
        let xd = x.data();
        let mut out = vec![0.0; b * k];
        let mut buf = vec![0.0; s];
        for bi in 0..b {
            for ki in 0..k {
                for (si, slot) in buf.iter_mut().enumerate() {
                    *slot = xd[(bi * s + si) * k + ki];
                }
                out[bi * k + ki] = sorted_pairwise_sum(&mut buf) / s as f64;
            }
        }
        let rg = self.rg(input);
        self.push(Tensor::new(&[b, k], out).unwrap(), Op::Consensus(input), rg)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against soft targets `[B, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let x = self.value(logits);
        let (b, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), b * k);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (r, row) in x.data().chunks(k).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = z.ln() + m;
            for j in 0..k {
                probs[r * k + j] = (row[j] - log_z).exp();
                let t = targets[r * k + j];
                if t != 0.0 {
                    loss -= t * (row[j] - log_z);
                }
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from the scalar `output`. Returns gradients of every
    /// parameter leaf that the output depends on.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = self.value(*b).data();
                    let out = Tensor::from_fn(g.shape(), |j| g.data()[j] * d[j]);
                    self.accumulate(grads, *a, out);
                }
                if self.rg(*b) {
                    let d = self.value(*a).data();
                    let out = Tensor::from_fn(g.shape(), |j| g.data()[j] * d[j]);
                    self.accumulate(grads, *b, out);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let out = Tensor::from_fn(g.shape(), |j| g.data()[j] * gelu_grad(x[j]));
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                self.accumulate(grads, *a, self.value(*a).map(|v| s * v));
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let gd = g.data();
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut out[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(&gd[o * inner..(o + 1) * inner]) {
                            *d = s / n as f64;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, out).unwrap());
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape).unwrap());
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *input, g.permute(&inverse));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => self.linear_backward(g, *input, *weight, *bias, grads),
            Op::BatchMatMul { a, b, trans_a } => self.bmm_backward(g, *a, *b, *trans_a, grads),
            Op::SpdSolve { mats, rhs, factors } => {
                let d = self.shape(*mats)[1];
                let grhs = solve_with_factors(factors, d, g).expect("factor shapes");
                if self.rg(*mats) {
                    // dM = -grhs · zᵀ per batch item
                    let z = &node.value;
                    let c = z.shape()[2];
                    let batch = z.shape()[0];
                    let mut gm = vec![0.0; batch * d * d];
                    let (gr, zd) = (grhs.data(), z.data());
                    for p in 0..batch {
                        for i in 0..d {
                            for j in 0..d {
                                let mut s = 0.0;
                                for k in 0..c {
                                    s += gr[(p * d + i) * c + k] * zd[(p * d + j) * c + k];
                                }
                                gm[(p * d + i) * d + j] = -s;
                            }
                        }
                    }
                    self.accumulate(grads, *mats, Tensor::new(&[batch, d, d], gm).unwrap());
                }
                self.accumulate(grads, *rhs, grhs);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv_backward(g, *input, *weight, *bias, *geom, grads),
            Op::PairwiseGram(input) => {
                let x = self.value(*input);
                let [gn, t, p, c] = *x.shape() else {
                    unreachable!()
                };
                let pairs = t * (t - 1) / 2;
                let (xd, gd) = (x.data(), g.data());
                let inv_c = 1.0 / c as f64;
                let mut out = vec![0.0; xd.len()];
                for gi in 0..gn {
                    for pi in 0..p {
                        let mut idx = 0;
                        for t1 in 0..t {
                            for t2 in t1 + 1..t {
                                let gu = gd[(gi * p + pi) * pairs + idx] * inv_c;
                                idx += 1;
                                let o1 = ((gi * t + t1) * p + pi) * c;
                                let o2 = ((gi * t + t2) * p + pi) * c;
                                for ch in 0..c {
                                    out[o1 + ch] += gu * xd[o2 + ch];
                                    out[o2 + ch] += gu * xd[o1 + ch];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape(), out).unwrap());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                mode,
            } => {
                let (n, f) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut g_gamma = vec![0.0; f];
                let mut g_beta = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        g_gamma[j] += gd[r * f + j] * normalized[r * f + j];
                        g_beta[j] += gd[r * f + j];
                    }
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; n * f];
                    match mode {
                        NormMode::Batch => {
                            // dx = inv/N (N dxh - sum dxh - xh sum(dxh xh)), dxh = dy gamma
                            for j in 0..f {
                                let sum_dxh = g_beta[j] * gam[j];
                                let sum_dxh_xh = g_gamma[j] * gam[j];
                                for r in 0..n {
                                    let dxh = gd[r * f + j] * gam[j];
                                    gx[r * f + j] = inv_std[j] / n as f64
                                        * (n as f64 * dxh
                                            - sum_dxh
                                            - normalized[r * f + j] * sum_dxh_xh);
                                }
                            }
                        }
                        NormMode::Running => {
                            for r in 0..n {
                                for j in 0..f {
                                    gx[r * f + j] = gd[r * f + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(&[n, f], gx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(&[f], g_gamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[f], g_beta).unwrap());
            }
            Op::Upsample(input) => {
                let shape = self.shape(*input).to_vec();
                let [gn, h, w, f] = shape[..] else {
                    unreachable!()
                };
                let (out_h, out_w) = (g.shape()[1], g.shape()[2]);
                let gd = g.data();
                let mut out = vec![0.0; gn * h * w * f];
                for gi in 0..gn {
                    for oy in 0..out_h {
                        let (y0, y1, fy) = bilinear_source(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1, fx) = bilinear_source(ox, w, out_w);
                            let taps = [
                                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                                (y0, x1, (1.0 - fy) * fx),
                                (y1, x0, fy * (1.0 - fx)),
                                (y1, x1, fy * fx),
                            ];
                            let obase = ((gi * out_h + oy) * out_w + ox) * f;
                            for (yy, xx, wt) in taps {
                                if wt == 0.0 {
                                    continue;
                                }
                                let ibase = ((gi * h + yy) * w + xx) * f;
                                for j in 0..f {
                                    out[ibase + j] += wt * gd[obase + j];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&shape, out).unwrap());
            }
            Op::Standardize {
                input,
                normalized,
                inv_std,
            } => {
                let (n, f) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                let mut gx = vec![0.0; n * f];
                for (r, &is) in inv_std.iter().enumerate().take(n) {
                    let row = r * f..(r + 1) * f;
                    let sum_g: f64 = gd[row.clone()].iter().sum();
                    let sum_gx: f64 = gd[row.clone()]
                        .iter()
                        .zip(&normalized[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in row {
                        gx[j] = is / f as f64 * (f as f64 * gd[j] - sum_g - normalized[j] * sum_gx);
                    }
                }
                self.accumulate(grads, *input, Tensor::new(&[n, f], gx).unwrap());
            }
            Op::Consensus(input) => {
                let shape = self.shape(*input).to_vec();
                let [b, s, k] = shape[..] else { unreachable!() };
                let gd = g.data();
                let out = Tensor::from_fn(&shape, |idx| {
                    let (bi, ki) = (idx / (s * k), idx % k);
                    gd[bi * k + ki] / s as f64
                });
                debug_assert_eq!(out.len(), b * s * k);
                self.accumulate(grads, *input, out);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let b = shape[0] as f64;
                let s = g.item() / b;
                let out = Tensor::from_fn(&shape, |j| s * (probs[j] - targets[j]));
                self.accumulate(grads, *logits, out);
            }
        }
    }

    fn linear_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, fin) = (x.shape()[0], x.shape()[1]);
        let fout = w.shape()[1];
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        if self.rg(input) {
            let mut gx = vec![0.0; n * fin];
            for r in 0..n {
                let grow = &gd[r * fout..(r + 1) * fout];
                for i in 0..fin {
                    let wrow = &wd[i * fout..(i + 1) * fout];
                    gx[r * fin + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                }
            }
            self.accumulate(grads, input, Tensor::new(&[n, fin], gx).unwrap());
        }
        if self.rg(weight) {
            let mut gw = vec![0.0; fin * fout];
            for r in 0..n {
                let grow = &gd[r * fout..(r + 1) * fout];
                for i in 0..fin {
                    let xv = xd[r * fin + i];
                    for (o, gv) in gw[i * fout..(i + 1) * fout].iter_mut().zip(grow) {
                        *o += xv * gv;
                    }
                }
            }
            self.accumulate(grads, weight, Tensor::new(&[fin, fout], gw).unwrap());
        }
        if let Some(b) = bias {
            if self.rg(b) {
                let mut gb = vec![0.0; fout];
                for row in gd.chunks(fout) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[fout], gb).unwrap());
            }
        }
    }

    fn bmm_backward(
        &self,
        g: &Tensor,
        a: Var,
        b: Var,
        trans_a: bool,
        grads: &mut [Option<Tensor>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let batch = av.shape()[0];
        let (m, k) = if trans_a {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let n = bv.shape()[2];
        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
        if self.rg(a) {
            let mut ga = vec![0.0; batch * m * k];
            for p in 0..batch {
                let bb = &bd[p * k * n..(p + 1) * k * n];
                let gb = &gd[p * m * n..(p + 1) * m * n];
                let out = &mut ga[p * m * k..(p + 1) * m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let s: f64 = (0..n).map(|j| gb[i * n + j] * bb[kk * n + j]).sum();
                        if trans_a {
                            out[kk * m + i] += s;
                        } else {
                            out[i * k + kk] += s;
                        }
                    }
                }
            }
            self.accumulate(grads, a, Tensor::new(av.shape(), ga).unwrap());
        }
        if self.rg(b) {
            let mut gbm = vec![0.0; batch * k * n];
            for p in 0..batch {
                let ab = &ad[p * m * k..(p + 1) * m * k];
                let gb = &gd[p * m * n..(p + 1) * m * n];
                let out = &mut gbm[p * k * n..(p + 1) * k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = if trans_a {
                            ab[kk * m + i]
                        } else {
                            ab[i * k + kk]
                        };
                        for j in 0..n {
                            out[kk * n + j] += aik * gb[i * n + j];
                        }
                    }
                }
            }
            self.accumulate(grads, b, Tensor::new(bv.shape(), gbm).unwrap());
        }
    }

    fn conv_backward(
        &self,
        g: &Tensor,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, h, wd, ci] = *x.shape() else {
            unreachable!()
        };
        let co = w.shape()[3];
        let k = geom.kernel;
        let (ho, wo) = (geom.out_extent(h), geom.out_extent(wd));
        let pad = geom.pad_before() as isize;
        let s = geom.stride as isize;
        let (xd, wdat, gd) = (x.data(), w.data(), g.data());
        let need_x = self.rg(input);
        let need_w = self.rg(weight);
        let mut gx = if need_x {
            vec![0.0; xd.len()]
        } else {
            Vec::new()
        };
        let mut gw = if need_w {
            vec![0.0; wdat.len()]
        } else {
            Vec::new()
        };
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gbase = ((b * ho + oy) * wo + ox) * co;
                    let grow = &gd[gbase..gbase + co];
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((b * h + iy as usize) * wd + ix as usize) * ci;
                            let wbase = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let wr = wbase + c * co..wbase + (c + 1) * co;
                                if need_x {
                                    gx[xbase + c] += wdat[wr.clone()]
                                        .iter()
                                        .zip(grow)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if need_w {
                                    let xv = xd[xbase + c];
                                    for (o, gv) in gw[wr].iter_mut().zip(grow) {
                                        *o += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, input, Tensor::new(x.shape(), gx).unwrap());
        }
        if need_w {
            self.accumulate(grads, weight, Tensor::new(w.shape(), gw).unwrap());
        }
        if let Some(bv) = bias {
            if self.rg(bv) {
                let mut gb = vec![0.0; co];
                for px in gd.chunks(co) {
                    for (o, v) in gb.iter_mut().zip(px) {
                        *o += v;
                    }
                }
                self.accumulate(grads, bv, Tensor::new(&[co], gb).unwrap());
            }
        }
    }
}
