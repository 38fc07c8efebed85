//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in evaluation order. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! (transitively) depends on a parameter.
//!
//! Shape errors inside the graph are programming errors and panic; public
//! model entry points validate user-provided shapes before building graphs.

use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv3x3(Var, Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SqDists(Var, Var),
    PickMean {
        x: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the output.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected matrix, got shape {s:?}");
        (s[0], s[1])
    }

    fn dims4(&self, v: Var) -> (usize, usize, usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 4, "expected [B,H,W,C], got shape {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    /// `a[m,k] @ b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a[m,k] @ b[n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let out = transpose(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Adds `bias` (shape `[n]`) along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.shape(a).last().expect("add_bias on scalar");
        assert_eq!(self.shape(bias), [n], "bias shape");
        let b = self.value(bias).data().to_vec();
        let ta = self.value(a);
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, bias]);
        self.push(t, Op::AddBias(a, bias), rg)
    }

    /// Sums a list of same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = *vars.first().expect("add_all of nothing");
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.max(0.0)).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, n], out), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = crate::tensor::logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, n], out), Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer norm with learned gain and bias (both `[n]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.shape(gain), [n]);
        assert_eq!(self.shape(bias), [n]);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Per-channel normalization over every leading axis using the statistics
    /// of this batch, followed by a learned scale and offset.
    pub fn batch_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("batch_norm on scalar");
        assert_eq!(self.shape(scale), [c]);
        assert_eq!(self.shape(offset), [c]);
        let xv = self.value(x).data();
        let n = xv.len() / c;
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + eps).sqrt()).collect();
        let s = self.value(scale).data();
        let o = self.value(offset).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (idx, v) in xv.iter().enumerate() {
            let j = idx % c;
            let h = (v - mean[j]) * rstd[j];
            xhat[idx] = h;
            out[idx] = h * s[j] + o[j];
        }
        let rg = self.rg(&[x, scale, offset]);
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// 3x3 convolution, stride 1, zero "same" padding, no bias.
    /// `x: [B,H,W,Ci]`, `kernel: [3,3,Ci,Co]`.
    pub fn conv3x3(&mut self, x: Var, kernel: Var) -> Var {
        let (b, h, w, ci) = self.dims4(x);
        let ks = self.shape(kernel).to_vec();
        assert_eq!(ks.len(), 4, "kernel rank");
        assert_eq!((ks[0], ks[1], ks[2]), (3, 3, ci), "kernel shape {ks:?} for {ci} inputs");
        let co = ks[3];
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; b * h * w * co];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let obase = ((bi * h + y) * w + xx) * co;
                    for dy in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let ibase = ((bi * h + sy as usize) * w + sx as usize) * ci;
                            let kbase = (dy * 3 + dx) * ci * co;
                            for i in 0..ci {
                                let iv = xv[ibase + i];
                                if iv == 0.0 {
                                    continue;
                                }
                                let krow = &kv[kbase + i * co..kbase + (i + 1) * co];
                                let orow = &mut out[obase..obase + co];
                                for (o, k) in orow.iter_mut().zip(krow) {
                                    *o += iv * k;
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, kernel]);
        self.push(Tensor::new(vec![b, h, w, co], out), Op::Conv3x3(x, kernel), rg)
    }

    /// 2x2 max pooling, stride 2, flooring odd sizes.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (b, h, w, c) = self.dims4(x);
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho >= 1 && wo >= 1, "max_pool2 on {h}x{w}");
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for y in 0..ho {
                for xx in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                        let o = ((bi * ho + y) * wo + xx) * c + ch;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, ho, wo, c], out), Op::MaxPool2 { x, argmax }, rg)
    }

    /// Mean over the spatial axes: `[B,H,W,C] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, h, w, c) = self.dims4(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b * c];
        let hw = h * w;
        for bi in 0..b {
            for p in 0..hw {
                let base = (bi * hw + p) * c;
                for ch in 0..c {
                    out[bi * c + ch] += xv[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![b, c], out), Op::GlobalAvgPool(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims2(x);
        assert!(start + len <= n, "slice_cols out of range");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![m, len], out), Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims2(p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * wd..(i + 1) * wd]);
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p);
            assert_eq!(pn, n, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(vec![m, n], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (m, n) = self.dims2(x);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather_rows index {r} >= {m}");
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows.len(), n], out),
            Op::GatherRows { x, rows: rows.to_vec() },
            rg,
        )
    }

    /// Pairwise squared Euclidean distances: `a[m,d], b[n,d] -> [m,n]`.
    pub fn sq_dists(&mut self, a: Var, b: Var) -> Var {
        let (m, d) = self.dims2(a);
        let (n, d2) = self.dims2(b);
        assert_eq!(d, d2, "sq_dists dims");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..n {
                let br = &bv[j * d..(j + 1) * d];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::SqDists(a, b), rg)
    }

    /// Mean of `x[i, targets[i]]` over rows.
    pub fn pick_mean(&mut self, x: Var, targets: &[usize]) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(targets.len(), m, "one target per row");
        let xv = self.value(x).data();
        let s: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                assert!(t < n, "target {t} out of {n} columns");
                xv[i * n + t]
            })
            .sum();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(s / m as f64),
            Op::PickMean {
                x,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).0;
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let t = transpose(g, n, m);
                    add_into(ga, &t);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.acc(grads, *a).unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.acc(grads, *b).unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(val.data()) {
                        if *o > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let x = av[i];
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let n = self.dims2(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((yr, gr), gar) in val.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = self.dims2(*a).1;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((yr, gr), gar) in val.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            gar[j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if self.requires_grad(*x) {
                    let gain_v = self.value(*gain).data().to_vec();
                    let gx = self.acc(grads, *x).unwrap();
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(&gain_v).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                scale,
                offset,
                xhat,
                rstd,
            } => {
                let c = self.value(*scale).len();
                let rows = g.len() / c;
                if let Some(gs) = self.acc(grads, *scale) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gs[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(go) = self.acc(grads, *offset) {
                    for gr in g.chunks(c) {
                        add_into(go, gr);
                    }
                }
                if self.requires_grad(*x) {
                    let s = self.value(*scale).data().to_vec();
                    let mut m1 = vec![0.0; c];
                    let mut m2 = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = gr[j] * s[j];
                            m1[j] += dh;
                            m2[j] += dh * hr[j];
                        }
                    }
                    m1.iter_mut().for_each(|v| *v /= rows as f64);
                    m2.iter_mut().for_each(|v| *v /= rows as f64);
                    let gx = self.acc(grads, *x).unwrap();
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += rstd[j] * (gr[j] * s[j] - m1[j] - hr[j] * m2[j]);
                        }
                    }
                }
            }
            Op::Conv3x3(x, kernel) => {
                let (b, h, w, ci) = self.dims4(*x);
                let co = self.shape(*kernel)[3];
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let want_x = self.requires_grad(*x);
                let want_k = self.requires_grad(*kernel);
                let mut gx = if want_x { Some(vec![0.0; xv.len()]) } else { None };
                let mut gk = if want_k { Some(vec![0.0; kv.len()]) } else { None };
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let obase = ((bi * h + y) * w + xx) * co;
                            let grow = &g[obase..obase + co];
                            for dy in 0..3 {
                                let sy = y as isize + dy as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let sx = xx as isize + dx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let ibase = ((bi * h + sy as usize) * w + sx as usize) * ci;
                                    let kbase = (dy * 3 + dx) * ci * co;
                                    for i in 0..ci {
                                        let krange = kbase + i * co..kbase + (i + 1) * co;
                                        if let Some(gx) = gx.as_mut() {
                                            let krow = &kv[krange.clone()];
                                            let s: f64 = krow.iter().zip(grow).map(|(k, gg)| k * gg).sum();
                                            gx[ibase + i] += s;
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            let iv = xv[ibase + i];
                                            if iv != 0.0 {
                                                for (gkv, gg) in gk[krange].iter_mut().zip(grow) {
                                                    *gkv += iv * gg;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    add_into(self.acc(grads, *x).unwrap(), &gx);
                }
                if let Some(gk) = gk {
                    add_into(self.acc(grads, *kernel).unwrap(), &gk);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (b, h, w, c) = self.dims4(*x);
                let hw = h * w;
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        for p in 0..hw {
                            let base = (bi * hw + p) * c;
                            for ch in 0..c {
                                gx[base + ch] += g[bi * c + ch] / hw as f64;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x);
                let len = val.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (val.rows(), val.cols());
                let mut off = 0;
                for &p in parts {
                    let wd = self.dims2(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..wd {
                                gp[i * wd + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += wd;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.dims2(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SqDists(a, b) => {
                let (m, d) = self.dims2(*a);
                let n = self.dims2(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let want_a = self.requires_grad(*a);
                let want_b = self.requires_grad(*b);
                let mut ga = vec![0.0; if want_a { m * d } else { 0 }];
                let mut gb = vec![0.0; if want_b { n * d } else { 0 }];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..d {
                            let diff = gij * (av[i * d + p] - bv[j * d + p]);
                            if want_a {
                                ga[i * d + p] += diff;
                            }
                            if want_b {
                                gb[j * d + p] -= diff;
                            }
                        }
                    }
                }
                if want_a {
                    add_into(self.acc(grads, *a).unwrap(), &ga);
                }
                if want_b {
                    add_into(self.acc(grads, *b).unwrap(), &gb);
                }
            }
            Op::PickMean { x, targets } => {
                let n = self.dims2(*x).1;
                let m = targets.len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &t) in targets.iter().enumerate() {
                        gx[i * n + t] += g[0] / m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
