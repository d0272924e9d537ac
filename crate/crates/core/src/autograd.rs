//! A small tape-based reverse-mode differentiator over [`Mat`] values.
//!
//! The tape records exactly the operations the encoder, decoders and loss
//! use. Nodes that cannot reach a gradient-requiring leaf are never
//! differentiated, so frozen sub-networks cost only their forward pass.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::loss::{bce_dice_forward, BceDiceParts, LossWeights};
use crate::resample::ResizePlan;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Mat};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Conv3x3 {
        x: Var,
        weight: Var,
        bias: Var,
        height: usize,
        width: usize,
        cols: Mat,
    },
    DepthToSpace {
        x: Var,
        height: usize,
        width: usize,
        factor: usize,
    },
    Resize {
        x: Var,
        plan: Arc<ResizePlan>,
    },
    BceDice {
        logits: Var,
        target: Arc<Vec<f64>>,
        weights: LossWeights,
        parts: BceDiceParts,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    record: bool,
}

/// Gradients indexed by node.
pub struct Gradients(Vec<Option<Mat>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }
}

impl Graph {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A forward-only graph; no node requires gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: false,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Mat {
        std::mem::replace(&mut self.nodes[v.0].value, Mat::zeros(0, 0))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|&v| self.needs(v));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.record && requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Returns the node for a named parameter, creating it on first use.
    pub fn param(&mut self, name: &str, init: impl FnOnce() -> (Mat, bool)) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let (value, requires_grad) = init();
        let v = self.leaf(value, requires_grad);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`; with `b` a weight of shape `out × in` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nt(self.value(a), self.value(b));
        self.push(value, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 × cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        let bias = self.value(b);
        assert_eq!((1, value.cols), bias.shape(), "add_row shape mismatch");
        for row in value.data.chunks_mut(bias.cols) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x *= factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| {
            let t = (GELU_C * (*x + 0.044715 * *x * *x * *x)).tanh();
            *x = 0.5 * *x * (1.0 + t);
        });
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = vec![0.0; rows];
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (row[c] - mean) * s;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention over already-projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let dim = qm.cols;
        assert!(dim % heads == 0 && km.cols == dim && vm.cols == dim && km.rows == vm.rows);
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Mat::zeros(qm.rows, dim);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = qm.cols_slice(h * hd, hd);
            let kh = km.cols_slice(h * hd, hd);
            let vh = vm.cols_slice(h * hd, hd);
            let mut s = matmul_nt(&qh, &kh);
            for row in s.data.chunks_mut(kh.rows) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            out.set_cols(h * hd, &matmul(&s, &vh));
            probs.push(s);
        }
        if !self.record {
            probs.clear();
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.rows);
        let value = Mat::from_vec(
            len,
            m.cols,
            m.data[start * m.cols..(start + len) * m.cols].to_vec(),
        );
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    /// 3×3 convolution with zero padding on a `height·width × cin` grid;
    /// `weight` is `cout × 9·cin` with taps ordered `(ky, kx, cin)`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var, height: usize, width: usize) -> Var {
        let input = self.value(x);
        assert_eq!(input.rows, height * width, "conv3x3 grid mismatch");
        let cin = input.cols;
        let mut cols = Mat::zeros(height * width, 9 * cin);
        for y in 0..height {
            for xx in 0..width {
                let dst = (y * width + xx) * 9 * cin;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = (sy as usize * width + sx as usize) * cin;
                        let off = dst + (ky * 3 + kx) * cin;
                        cols.data[off..off + cin].copy_from_slice(&input.data[src..src + cin]);
                    }
                }
            }
        }
        let mut out = matmul_nt(&cols, self.value(weight));
        let b = &self.value(bias).data;
        for row in out.data.chunks_mut(b.len()) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        let cols = if self.record { cols } else { Mat::zeros(0, 0) };
        self.push(
            out,
            Op::Conv3x3 {
                x,
                weight,
                bias,
                height,
                width,
                cols,
            },
            &[x, weight, bias],
        )
    }

    /// Rearranges an `h·w × f²·c` grid into an `(h·f)·(w·f) × c` grid.
    pub fn depth_to_space(&mut self, x: Var, height: usize, width: usize, factor: usize) -> Var {
        let input = self.value(x);
        assert_eq!(input.rows, height * width);
        assert_eq!(input.cols % (factor * factor), 0);
        let c = input.cols / (factor * factor);
        let ow = width * factor;
        let mut out = Mat::zeros(height * width * factor * factor, c);
        for y in 0..height {
            for xx in 0..width {
                let src = input.row(y * width + xx);
                for dy in 0..factor {
                    for dx in 0..factor {
                        let o = ((y * factor + dy) * ow + xx * factor + dx) * c;
                        let s = (dy * factor + dx) * c;
                        out.data[o..o + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push(
            out,
            Op::DepthToSpace {
                x,
                height,
                width,
                factor,
            },
            &[x],
        )
    }

    /// Resamples a `in_h·in_w × c` grid according to `plan`.
    pub fn resize(&mut self, x: Var, plan: Arc<ResizePlan>) -> Var {
        let input = self.value(x);
        assert_eq!(input.rows, plan.in_h * plan.in_w);
        let c = input.cols;
        let data = plan.apply(&input.data, c);
        let value = Mat::from_vec(plan.out_h * plan.out_w, c, data);
        self.push(value, Op::Resize { x, plan }, &[x])
    }

    /// Weighted BCE + Dice loss of a logit column against a binary target.
    pub fn bce_dice(&mut self, logits: Var, target: Arc<Vec<f64>>, weights: LossWeights) -> Var {
        let parts = bce_dice_forward(&self.value(logits).data, &target, weights);
        let value = Mat::filled(1, 1, parts.total);
        self.push(
            value,
            Op::BceDice {
                logits,
                target,
                weights,
                parts,
            },
            &[logits],
        )
    }

    /// Loss components recorded by a [`Graph::bce_dice`] node.
    pub fn loss_parts(&self, v: Var) -> Option<BceDiceParts> {
        match &self.nodes[v.0].op {
            Op::BceDice { parts, .. } => Some(parts.clone()),
            _ => {
                let value = self.value(v);
                (value.shape() == (1, 1)).then(|| BceDiceParts::from_total(value.data[0]))
            }
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    /// Gradients of every named parameter that required one.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter(|(_, v)| self.needs(**v))
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.value(v).rows, self.value(v).cols));
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    acc(*a, matmul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.needs(*b) {
                    let mut gb = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        gb.data.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    acc(*b, gb);
                }
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= f);
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (di, &xi) in d.data.iter_mut().zip(&x.data) {
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    *di *= 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du;
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols;
                let gam = &self.value(*gamma).data;
                if self.needs(*x) {
                    let mut dx = Mat::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            dx.data[r * cols + c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..g.rows {
                        for c in 0..cols {
                            dg.data[c] += g.at(r, c) * xhat.at(r, c);
                            db.data[c] += g.at(r, c);
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qm.cols;
                let hd = dim / heads;
                let scale = 1.0 / (hd as f64).sqrt();
                let mut dq = Mat::zeros(qm.rows, dim);
                let mut dk = Mat::zeros(km.rows, dim);
                let mut dv = Mat::zeros(vm.rows, dim);
                for h in 0..*heads {
                    let p = &probs[h];
                    let go = g.cols_slice(h * hd, hd);
                    let vh = vm.cols_slice(h * hd, hd);
                    dv.set_cols(h * hd, &matmul_tn(p, &go));
                    let mut ds = matmul_nt(&go, &vh);
                    for (drow, prow) in ds.data.chunks_mut(p.cols).zip(p.data.chunks(p.cols)) {
                        let dotp: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (d, &pp) in drow.iter_mut().zip(prow) {
                            *d = pp * (*d - dotp) * scale;
                        }
                    }
                    let kh = km.cols_slice(h * hd, hd);
                    let qh = qm.cols_slice(h * hd, hd);
                    dq.set_cols(h * hd, &matmul(&ds, &kh));
                    dk.set_cols(h * hd, &matmul_tn(&ds, &qh));
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let slice = g.data[start * g.cols..(start + rows) * g.cols].to_vec();
                    acc(p, Mat::from_vec(rows, g.cols, slice));
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows, src.cols);
                d.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                acc(*x, d);
            }
            Op::Conv3x3 {
                x,
                weight,
                bias,
                height,
                width,
                cols,
            } => {
                if self.needs(*weight) {
                    acc(*weight, matmul_tn(g, cols));
                }
                if self.needs(*bias) {
                    let mut db = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        db.data.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    acc(*bias, db);
                }
                if self.needs(*x) {
                    let dcols = matmul(g, self.value(*weight));
                    let cin = self.value(*x).cols;
                    let (height, width) = (*height, *width);
                    let mut dx = Mat::zeros(height * width, cin);
                    for y in 0..height {
                        for xx in 0..width {
                            let src = (y * width + xx) * 9 * cin;
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= height as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= width as isize {
                                        continue;
                                    }
                                    let dst = (sy as usize * width + sx as usize) * cin;
                                    let off = src + (ky * 3 + kx) * cin;
                                    for c in 0..cin {
                                        dx.data[dst + c] += dcols.data[off + c];
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::DepthToSpace {
                x,
                height,
                width,
                factor,
            } => {
                let (height, width, factor) = (*height, *width, *factor);
                let src = self.value(*x);
                let c = src.cols / (factor * factor);
                let ow = width * factor;
                let mut d = Mat::zeros(src.rows, src.cols);
                for y in 0..height {
                    for xx in 0..width {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let o = ((y * factor + dy) * ow + xx * factor + dx) * c;
                                let s = (y * width + xx) * src.cols + (dy * factor + dx) * c;
                                d.data[s..s + c].copy_from_slice(&g.data[o..o + c]);
                            }
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Resize { x, plan } => {
                let data = plan.apply_transpose(&g.data, g.cols);
                acc(*x, Mat::from_vec(plan.in_h * plan.in_w, g.cols, data));
            }
            Op::BceDice {
                logits,
                target,
                weights,
                parts,
            } => {
                let z = &self.value(*logits);
                let mut d = parts.gradient(&z.data, target, *weights);
                d.iter_mut().for_each(|x| *x *= g.data[0]);
                acc(*logits, Mat::from_vec(z.rows, z.cols, d));
            }
        }
    }
}
