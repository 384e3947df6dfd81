//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Only the operations the forecaster needs are provided. Fused ops
//! (layer norm, multi-head attention) keep their intermediates on the node
//! so the backward pass does not recompute them.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out = a · b` where `a` is `m×k` and `b` is `k×n`, each given with row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize) -> Mat {
    let mut out = Mat::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: the strides describe views lying entirely inside `a`, `b` and `out`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a (n×k) · b (k×m)`.
fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shapes");
    gemm(a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1)
}

/// `a · bᵀ`.
fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt shapes");
    gemm(a.rows, a.cols, b.rows, &a.data, a.cols as isize, 1, &b.data, 1, b.cols as isize)
}

/// `aᵀ · b`.
fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at shapes");
    gemm(a.cols, a.rows, b.cols, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// Elementwise `x * scale + shift` with constant matrices.
    Affine(Var, Vec<f64>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
        probs: Vec<f64>,
    },
    /// Adds a `block×cols` matrix to every block of rows.
    AddBlock(Var, Var),
    Reshape(Var),
    /// Rows flagged true are replaced by the (1×cols) token.
    MaskRows {
        x: Var,
        token: Var,
        rows: Vec<bool>,
    },
    QuatNormalize {
        x: Var,
        from: usize,
        norms: Vec<f64>,
    },
    SliceCols(Var, usize),
    SumSquares(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a computation; call [`Tape::backward`] on a scalar output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, m: &Mat) -> Var {
        self.push(m.clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a 1×cols bias to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias).data.clone();
        let mut v = self.value(x).clone();
        assert_eq!(b.len(), v.cols, "bias width");
        for row in v.data.chunks_mut(b.len()) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.data.len(), self.value(b).data.len(), "add shapes");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        for (o, bv) in v.data.iter_mut().zip(&self.value(b).data) {
            *o -= bv;
        }
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| *o *= c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn affine(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Var {
        let mut v = self.value(x).clone();
        assert!(scale.len() == v.data.len() && shift.len() == v.data.len(), "affine shapes");
        for ((o, s), b) in v.data.iter_mut().zip(&scale).zip(shift) {
            *o = *o * s + b;
        }
        self.push(v, Op::Affine(x, scale))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|o| *o = gelu(*o));
        self.push(v, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut out = Mat::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = g[c] * h + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product attention within consecutive blocks of
    /// `block` rows. Heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, block: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qm.rows, qm.cols);
        assert!(d % heads == 0 && n % block == 0, "attention shapes");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let nblocks = n / block;
        let mut out = Mat::zeros(n, d);
        let mut probs = vec![0.0; nblocks * heads * block * block];
        let mut scores = vec![0.0; block];
        for bi in 0..nblocks {
            let base = bi * block;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..block {
                    let qi = &qm.data[(base + i) * d + c0..(base + i) * d + c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &km.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_off = ((bi * heads + h) * block + i) * block;
                    let orow = &mut out.data[(base + i) * d + c0..(base + i) * d + c0 + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs[p_off + j] = p;
                        let vj = &vm.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                block,
                probs,
            },
        )
    }

    /// Attention probabilities of an attention node, laid out
    /// `[block][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn add_block(&mut self, x: Var, pos: Var) -> Var {
        let p = self.value(pos).data.clone();
        let mut v = self.value(x).clone();
        assert_eq!(v.data.len() % p.len(), 0, "block add shapes");
        for chunk in v.data.chunks_mut(p.len()) {
            for (o, pv) in chunk.iter_mut().zip(&p) {
                *o += pv;
            }
        }
        self.push(v, Op::AddBlock(x, pos))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.data.len(), rows * cols, "reshape size");
        let m = Mat::from_vec(rows, cols, v.data.clone());
        self.push(m, Op::Reshape(x))
    }

    pub fn mask_rows(&mut self, x: Var, token: Var, rows: Vec<bool>) -> Var {
        let t = self.value(token).data.clone();
        let mut v = self.value(x).clone();
        assert_eq!(rows.len(), v.rows, "mask length");
        assert_eq!(t.len(), v.cols, "token width");
        for (r, &m) in rows.iter().enumerate() {
            if m {
                v.data[r * v.cols..(r + 1) * v.cols].copy_from_slice(&t);
            }
        }
        self.push(v, Op::MaskRows { x, token, rows })
    }

    /// Normalizes columns `from..from+4` of every row to unit length.
    pub fn quat_normalize(&mut self, x: Var, from: usize) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let q = &mut v.data[r * v.cols + from..r * v.cols + from + 4];
            let n = q.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            q.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        self.push(v, Op::QuatNormalize { x, from, norms })
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros(v.rows, to - from);
        for r in 0..v.rows {
            out.data[r * (to - from)..(r + 1) * (to - from)]
                .copy_from_slice(&v.data[r * v.cols + from..r * v.cols + to]);
        }
        self.push(out, Op::SliceCols(x, from))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumSquares(x))
    }

    /// Back-propagates from the scalar `out`; returns gradients of parameter
    /// slots `0..num_params` (zero matrices for untouched slots are `None`).
    pub fn backward(&self, out: Var, num_params: usize) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut params: Vec<Option<Mat>> = (0..num_params).map(|_| None).collect();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => match &mut params[*p] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (o, v) in gb.data.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|v| *v = -*v);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, neg);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data.iter_mut().for_each(|v| *v *= c);
                    acc(&mut grads, *x, gx);
                }
                Op::Affine(x, scale) => {
                    let mut gx = g;
                    for (v, s) in gx.data.iter_mut().zip(scale) {
                        *v *= s;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    for (v, xv) in gx.data.iter_mut().zip(&self.value(*x).data) {
                        *v *= gelu_grad(*xv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = (g.rows, g.cols);
                    let gam = &self.value(*gamma).data;
                    let mut gg = Mat::zeros(1, cols);
                    let mut gbeta = Mat::zeros(1, cols);
                    let mut gx = Mat::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            gg.data[c] += gr[c] * hr[c];
                            gbeta.data[c] += gr[c];
                            dxhat[c] = gr[c] * gam[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * hr[c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            gx.data[r * cols + c] = inv_std[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    block,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = (qm.rows, qm.cols);
                    let (heads, block) = (*heads, *block);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(n, d);
                    let mut gk = Mat::zeros(n, d);
                    let mut gv = Mat::zeros(n, d);
                    let mut dp = vec![0.0; block];
                    for bi in 0..n / block {
                        let base = bi * block;
                        for h in 0..heads {
                            let c0 = h * dh;
                            for i in 0..block {
                                let p_off = ((bi * heads + h) * block + i) * block;
                                let p = &probs[p_off..p_off + block];
                                let go = &g.data[(base + i) * d + c0..(base + i) * d + c0 + dh];
                                let mut dot = 0.0;
                                for j in 0..block {
                                    let vj = &vm.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += p[j] * dp[j];
                                    let gvj = &mut gv.data[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                    for (o, a) in gvj.iter_mut().zip(go) {
                                        *o += p[j] * a;
                                    }
                                }
                                let qi_off = (base + i) * d + c0;
                                for j in 0..block {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let kj_off = (base + j) * d + c0;
                                    for c in 0..dh {
                                        gq.data[qi_off + c] += ds * km.data[kj_off + c];
                                        gk.data[kj_off + c] += ds * qm.data[qi_off + c];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::AddBlock(x, pos) => {
                    let len = self.value(*pos).data.len();
                    let mut gp = Mat::zeros(self.value(*pos).rows, self.value(*pos).cols);
                    for chunk in g.data.chunks(len) {
                        for (o, v) in gp.data.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *pos, gp);
                    acc(&mut grads, *x, g);
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, g.data));
                }
                Op::MaskRows { x, token, rows } => {
                    let cols = g.cols;
                    let mut gt = Mat::zeros(1, cols);
                    let mut gx = g;
                    for (r, &m) in rows.iter().enumerate() {
                        if m {
                            let row = &mut gx.data[r * cols..(r + 1) * cols];
                            for (o, v) in gt.data.iter_mut().zip(row.iter_mut()) {
                                *o += *v;
                                *v = 0.0;
                            }
                        }
                    }
                    acc(&mut grads, *token, gt);
                    acc(&mut grads, *x, gx);
                }
                Op::QuatNormalize { x, from, norms } => {
                    let y = &node.value;
                    let mut gx = g;
                    for r in 0..y.rows {
                        let off = r * y.cols + from;
                        let yq = &y.data[off..off + 4];
                        let gq = &mut gx.data[off..off + 4];
                        let dot: f64 = yq.iter().zip(gq.iter()).map(|(a, b)| a * b).sum();
                        for (o, a) in gq.iter_mut().zip(yq) {
                            *o = (*o - a * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, from) => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.data[r * xv.cols + from..r * xv.cols + from + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumSquares(x) => {
                    let s = g.data[0];
                    let xv = self.value(*x);
                    let gx = Mat::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| 2.0 * v * s).collect());
                    acc(&mut grads, *x, gx);
                }
            }
        }
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, &[Mat]) -> Var, params: Vec<Mat>) {
        let mut tape = Tape::new();
        let out = build(&mut tape, &params);
        let grads = tape.backward(out, params.len());
        for (p, g) in params.iter().zip(&grads) {
            let g = g.as_ref().expect("gradient reaches every parameter");
            for idx in 0..p.data.len() {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    let which = params.iter().position(|q| std::ptr::eq(q, p)).unwrap();
                    ps[which].data[idx] += delta;
                    let mut t = Tape::new();
                    let o = build(&mut t, &ps);
                    t.value(o).data[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.data[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-6, "analytic {a} numeric {numeric}");
            }
        }
    }

    fn seq(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 0.731).sin()).collect())
    }

    #[test]
    fn matmul_bias_gelu() {
        fd_check(
            |t, p| {
                let a = t.param(0, &p[0]);
                let b = t.param(1, &p[1]);
                let bias = t.param(2, &p[2]);
                let m = t.matmul(a, b);
                let m = t.add_row(m, bias);
                let m = t.gelu(m);
                t.sum_squares(m)
            },
            vec![seq(3, 4, 0.0), seq(4, 2, 1.0), seq(1, 2, 2.0)],
        );
    }

    #[test]
    fn layer_norm_grad() {
        fd_check(
            |t, p| {
                let x = t.param(0, &p[0]);
                let g = t.param(1, &p[1]);
                let b = t.param(2, &p[2]);
                let y = t.layer_norm(x, g, b);
                let w = t.constant(seq(5, 1, 9.0));
                let z = t.matmul(y, w);
                t.sum_squares(z)
            },
            vec![seq(3, 5, 0.3), seq(1, 5, 1.3), seq(1, 5, 2.3)],
        );
    }

    #[test]
    fn attention_grad_and_rows() {
        fd_check(
            |t, p| {
                let q = t.param(0, &p[0]);
                let k = t.param(1, &p[1]);
                let v = t.param(2, &p[2]);
                let o = t.attention(q, k, v, 2, 3);
                let w = t.constant(seq(4, 1, 5.0));
                let z = t.matmul(o, w);
                t.sum_squares(z)
            },
            vec![seq(6, 4, 0.1), seq(6, 4, 3.1), seq(6, 4, 7.1)],
        );
        let mut t = Tape::new();
        let q = t.constant(seq(6, 4, 0.0));
        let o = t.attention(q, q, q, 2, 3);
        for row in t.attention_probs(o).unwrap().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_ops() {
        fd_check(
            |t, p| {
                let x = t.param(0, &p[0]);
                let tok = t.param(1, &p[1]);
                let pos = t.param(2, &p[2]);
                let m = t.mask_rows(x, tok, vec![false, true, false, true]);
                let m = t.add_block(m, pos);
                let m = t.reshape(m, 2, 10);
                let m = t.reshape(m, 4, 5);
                let s = t.slice_cols(m, 1, 5);
                let q = t.quat_normalize(s, 0);
                let a = t.affine(q, vec![1.5; 16], &[0.2; 16]);
                let c = t.constant(seq(4, 4, 4.0));
                let d = t.sub(a, c);
                let e = t.scale(d, 0.5);
                let f = t.add(e, a);
                t.sum_squares(f)
            },
            vec![seq(4, 5, 0.2), seq(1, 5, 1.7), seq(2, 5, 2.9)],
        );
    }
}
