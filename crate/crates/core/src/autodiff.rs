//! Reverse-mode autodiff tape over dense 2D matrices.
//!
//! Covers exactly the ops the toy DiT needs: matmul (plain and with a
//! transposed right operand), row softmax, row layer-norm, gelu, row
//! concat/slice, column concat/slice, scatter-add into selected rows, and
//! a rank-1 outer-product update. The loss node is a 1x1 mean-squared-error
//! matrix. Gradients accumulate in reverse topological (i.e. insertion)
//! order, which is deterministic.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major 2D matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Mat> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mat data {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Mat {
        let data = (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self @ other
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    /// self @ other^T
    pub fn matmul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += arow[k] * brow[k];
                }
                out.data[i * other.rows + j] = s;
            }
        }
        out
    }

    /// self^T @ other
    pub fn matmul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for i in 0..self.cols {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Mat, scale: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

const LN_EPS: f64 = 1e-6;

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub type NodeId = usize;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LayerNormRows(NodeId),
    Gelu(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// out = base with `scale * add[i]` added into row `rows[i]`.
    ScatterAddRows {
        base: NodeId,
        add: NodeId,
        rows: Vec<usize>,
        scale: f64,
    },
    /// out = base + scale * weights ⊗ vec (vec is 1 x cols).
    AddOuter {
        base: NodeId,
        vec: NodeId,
        weights: Vec<f64>,
        scale: f64,
    },
    /// 1x1 mean squared error against a constant target.
    MseMean(NodeId, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Computation tape. Nodes are appended during the forward pass and
/// replayed in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.rows, vb.rows);
        assert_eq!(va.cols, vb.cols);
        let mut v = va.clone();
        v.add_scaled(vb, 1.0);
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x * s).collect(),
        };
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut v = va.clone();
        let n = v.cols as f64;
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(v, Op::LayerNormRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|&x| gelu(x)).collect(),
        };
        self.push(v, Op::Gelu(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.cols, vb.cols);
        let mut data = va.data.clone();
        data.extend_from_slice(&vb.data);
        let v = Mat {
            rows: va.rows + vb.rows,
            cols: va.cols,
            data,
        };
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.rows);
        let v = Mat {
            rows: len,
            cols: va.cols,
            data: va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        };
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.cols);
        let mut data = Vec::with_capacity(va.rows * len);
        for r in 0..va.rows {
            data.extend_from_slice(&va.data[r * va.cols + start..r * va.cols + start + len]);
        }
        let v = Mat {
            rows: va.rows,
            cols: len,
            data,
        };
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.rows;
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in &parts {
                let vp = &self.nodes[p].value;
                assert_eq!(vp.rows, rows);
                data.extend_from_slice(&vp.data[r * vp.cols..(r + 1) * vp.cols]);
            }
        }
        let v = Mat {
            rows,
            cols: total,
            data,
        };
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn scatter_add_rows(
        &mut self,
        base: NodeId,
        add: NodeId,
        rows: Vec<usize>,
        scale: f64,
    ) -> NodeId {
        let (vb, va) = (&self.nodes[base].value, &self.nodes[add].value);
        assert_eq!(va.cols, vb.cols);
        assert_eq!(va.rows, rows.len());
        let mut v = vb.clone();
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += scale * va.data[i * va.cols + c];
            }
        }
        self.push(
            v,
            Op::ScatterAddRows {
                base,
                add,
                rows,
                scale,
            },
        )
    }

    pub fn add_outer(&mut self, base: NodeId, vec: NodeId, weights: Vec<f64>, scale: f64) -> NodeId {
        let (vb, vv) = (&self.nodes[base].value, &self.nodes[vec].value);
        assert_eq!(vv.rows, 1);
        assert_eq!(vv.cols, vb.cols);
        assert_eq!(weights.len(), vb.rows);
        let mut v = vb.clone();
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for c in 0..v.cols {
                v.data[r * v.cols + c] += scale * w * vv.data[c];
            }
        }
        self.push(
            v,
            Op::AddOuter {
                base,
                vec,
                weights,
                scale,
            },
        )
    }

    pub fn mse_mean(&mut self, pred: NodeId, target: Mat) -> NodeId {
        let vp = &self.nodes[pred].value;
        assert_eq!(vp.rows, target.rows);
        assert_eq!(vp.cols, target.cols);
        let n = vp.data.len() as f64;
        let loss = vp
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let v = Mat::from_vec(1, 1, vec![loss]).unwrap();
        self.push(v, Op::MseMean(pred, target))
    }

    /// Gradients of the scalar at `loss` w.r.t. every node.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Mat>> {
        assert_eq!(self.nodes[loss].value.data.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]).unwrap());

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(&self.nodes[*b].value);
                    let db = self.nodes[*a].value.matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // C = A B^T: dA = dC B ; dB = dC^T A
                    let da = g.matmul(&self.nodes[*b].value);
                    let db = g.matmul_tn(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(a, s) => {
                    let mut da = g;
                    for x in da.data.iter_mut() {
                        *x *= s;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..y.cols {
                            da.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNormRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let n = x.cols as f64;
                    let mut da = Mat::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean = gr.iter().sum::<f64>() / n;
                        let gydot = gr.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                        for c in 0..x.cols {
                            da.data[r * x.cols + c] = inv * (gr[c] - gmean - yr[c] * gydot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut da = g;
                    for (d, &xv) in da.data.iter_mut().zip(&x.data) {
                        *d *= gelu_prime(xv);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.rows;
                    let cols = g.cols;
                    let da = Mat {
                        rows: ra,
                        cols,
                        data: g.data[..ra * cols].to_vec(),
                    };
                    let db = Mat {
                        rows: g.rows - ra,
                        cols,
                        data: g.data[ra * cols..].to_vec(),
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SliceRows(a, start, len) => {
                    let va = &self.nodes[*a].value;
                    let mut da = Mat::zeros(va.rows, va.cols);
                    da.data[start * va.cols..(start + len) * va.cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, start, len) => {
                    let va = &self.nodes[*a].value;
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        for c in 0..*len {
                            da.data[r * va.cols + start + c] = g.data[r * len + c];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let vp = &self.nodes[p].value;
                        let mut dp = Mat::zeros(vp.rows, vp.cols);
                        for r in 0..vp.rows {
                            for c in 0..vp.cols {
                                dp.data[r * vp.cols + c] = g.data[r * g.cols + off + c];
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        off += vp.cols;
                    }
                }
                Op::ScatterAddRows {
                    base,
                    add,
                    rows,
                    scale,
                } => {
                    let va = &self.nodes[*add].value;
                    let mut dadd = Mat::zeros(va.rows, va.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..va.cols {
                            dadd.data[i * va.cols + c] = scale * g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *base, g);
                    accumulate(&mut grads, *add, dadd);
                }
                Op::AddOuter {
                    base,
                    vec,
                    weights,
                    scale,
                } => {
                    let mut dvec = Mat::zeros(1, g.cols);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..g.cols {
                            dvec.data[c] += scale * w * g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *base, g);
                    accumulate(&mut grads, *vec, dvec);
                }
                Op::MseMean(pred, target) => {
                    let vp = &self.nodes[*pred].value;
                    let n = vp.data.len() as f64;
                    let s = g.data[0] * 2.0 / n;
                    let mut dp = Mat::zeros(vp.rows, vp.cols);
                    for (d, (&p, &t)) in dp.data.iter_mut().zip(vp.data.iter().zip(&target.data)) {
                        *d = s * (p - t);
                    }
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot => *slot = Some(g),
    }
}
