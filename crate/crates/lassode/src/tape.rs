//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every op of one forward pass; [`Tape::backward`] walks
//! the recording in reverse and accumulates gradients. Gradients of named
//! parameters are exposed by path so the optimizer can match them against the
//! [`ParamStore`]. All math is f64.

use std::collections::HashMap;

use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf {
        path: Option<String>,
    },
    Constant,
    MatMul,
    /// a * b^T
    MatMulNT,
    Add,
    Sub,
    Mul,
    /// x + row-broadcast bias (1 x cols)
    AddRow,
    Scale(f64),
    AddConst,
    Tanh,
    Sigmoid,
    Gelu,
    Exp,
    Ln,
    Softmax,
    /// Softmax restricted to entries where mask != 0; other outputs are 0.
    MaskedSoftmax(Tensor),
    /// inputs: x, gamma (1 x cols), beta (1 x cols)
    LayerNorm {
        eps: f64,
    },
    ConcatRows,
    ConcatCols,
    SliceRows {
        start: usize,
    },
    SliceCols {
        start: usize,
    },
    GatherRows(Vec<usize>),
    ScatterRows {
        indices: Vec<usize>,
    },
    /// out[i][j] = x[i][j] * w[i][0]; inputs: x (r x c), w (r x 1)
    ScaleRowsByCol,
    SumAll,
    MeanAll,
    Reshape,
    Clamp {
        lo: f64,
        hi: f64,
    },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    /// per-path gradients, summed over every fetch of the same parameter
    by_path: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor> {
        self.by_path.get(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.by_path.keys().map(|s| s.as_str())
    }

    /// Gradients assembled outside a single tape, e.g. averaged over a
    /// batch of per-sample backward passes.
    pub fn from_path_map(by_path: HashMap<String, Tensor>) -> Self {
        Gradients {
            grads: Vec::new(),
            by_path,
        }
    }

    pub fn into_path_map(self) -> HashMap<String, Tensor> {
        self.by_path
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) {
    if a.shape() != b.shape() {
        panic!("shape mismatch in {op}: {:?} vs {:?}", a.shape(), b.shape());
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    assert_eq!(
        ac,
        br,
        "shape mismatch in matmul: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        let arow = a.row(i);
        let orow = &mut out.data_mut()[i * bc..(i + 1) * bc];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[k * bc..(k + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matmul_nt_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    assert_eq!(
        ac,
        bc,
        "shape mismatch in matmul_nt: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(ar, br);
    for i in 0..ar {
        let arow = a.row(i);
        for j in 0..br {
            let brow = b.row(j);
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow.iter()) {
                s += x * y;
            }
            out.set(i, j, s);
        }
    }
    out
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (r, c) = a.shape();
    let mut out = Tensor::zeros(c, r);
    for i in 0..r {
        for j in 0..c {
            out.set(j, i, a.get(i, j));
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Leaf { .. } => true,
            Op::Constant => false,
            _ => inputs.iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with gradient tracking but no parameter path.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { path: None }, vec![], t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, vec![], t)
    }

    /// Fetch a stored parameter. Frozen parameters enter as constants, so
    /// their gradient slots stay empty during backward. When low-rank
    /// adapters are attached under `{path}.lora_a/b`, the effective weight
    /// `W + scale * B A` is built on the tape instead.
    pub fn param(&mut self, store: &ParamStore, path: &str) -> Var {
        let entry = store
            .get(path)
            .unwrap_or_else(|| panic!("missing parameter: {path}"));
        let base = if entry.trainable {
            self.push(
                Op::Leaf {
                    path: Some(path.to_string()),
                },
                vec![],
                entry.tensor.clone(),
            )
        } else {
            self.push(Op::Constant, vec![], entry.tensor.clone())
        };
        let a_path = format!("{path}.lora_a");
        if store.get(&a_path).is_some() {
            let scale = store.tensor(&format!("{path}.lora_scale")).get(0, 0);
            let a = self.param(store, &a_path);
            let b = self.param(store, &format!("{path}.lora_b"));
            let delta = self.matmul(b, a);
            let scaled = self.scale(delta, scale);
            return self.add(base, scaled);
        }
        base
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_raw(self.value(a), self.value(b));
        self.push(Op::MatMul, vec![a.0, b.0], v)
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt_raw(self.value(a), self.value(b));
        self.push(Op::MatMulNT, vec![a.0, b.0], v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same("add", self.value(a), self.value(b));
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x += y;
        }
        self.push(Op::Add, vec![a.0, b.0], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_same("sub", self.value(a), self.value(b));
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x -= y;
        }
        self.push(Op::Sub, vec![a.0, b.0], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same("mul", self.value(a), self.value(b));
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *x *= y;
        }
        self.push(Op::Mul, vec![a.0, b.0], v)
    }

    /// x + bias where bias is a 1 x cols row broadcast over the rows of x.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (_, c) = self.value(x).shape();
        let bs = self.value(bias).shape();
        if bs != (1, c) {
            panic!(
                "shape mismatch in add_row: {:?} vs {:?}",
                self.value(x).shape(),
                bs
            );
        }
        let mut v = self.value(x).clone();
        let b = self.nodes[bias.0].value.clone();
        for r in 0..v.rows() {
            for j in 0..c {
                let cur = v.get(r, j);
                v.set(r, j, cur + b.data()[j]);
            }
        }
        self.push(Op::AddRow, vec![x.0, bias.0], v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= c;
        }
        self.push(Op::Scale(c), vec![a.0], v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x += c;
        }
        self.push(Op::AddConst, vec![a.0], v)
    }

    /// 1 - x, used by GRU gates.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_const(neg, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.tanh();
        }
        self.push(Op::Tanh, vec![a.0], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
        self.push(Op::Sigmoid, vec![a.0], v)
    }

    /// tanh-approximation GELU; the backward uses the same approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            let t = (GELU_C * (*x + GELU_A * x.powi(3))).tanh();
            *x = 0.5 * *x * (1.0 + t);
        }
        self.push(Op::Gelu, vec![a.0], v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.exp();
        }
        self.push(Op::Exp, vec![a.0], v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.ln();
        }
        self.push(Op::Ln, vec![a.0], v)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a).clone();
        let v = softmax_rows(&src, None);
        self.push(Op::Softmax, vec![a.0], v)
    }

    /// Row-wise softmax over entries where `mask` is nonzero; masked-out
    /// entries produce 0. `mask` is captured by value (not differentiated).
    pub fn masked_softmax(&mut self, a: Var, mask: Tensor) -> Var {
        check_same("masked_softmax", self.value(a), &mask);
        let src = self.value(a).clone();
        let v = softmax_rows(&src, Some(&mask));
        self.push(Op::MaskedSoftmax(mask), vec![a.0], v)
    }

    /// Layer norm over the last dimension with learnable affine (gamma, beta).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.value(x).shape();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            panic!(
                "shape mismatch in layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.value(x).shape(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            );
        }
        let xv = self.value(x).clone();
        let g = self.value(gamma).clone();
        let b = self.value(beta).clone();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                out.set(i, j, g.data()[j] * xh + b.data()[j]);
            }
        }
        self.push(Op::LayerNorm { eps }, vec![x.0, gamma.0, beta.0], out)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            panic!(
                "shape mismatch in concat_rows: {:?} vs {:?}",
                (ar, ac),
                (br, bc)
            );
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::from_vec(ar + br, ac, data);
        self.push(Op::ConcatRows, vec![a.0, b.0], v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            panic!(
                "shape mismatch in concat_cols: {:?} vs {:?}",
                (ar, ac),
                (br, bc)
            );
        }
        let mut out = Tensor::zeros(ar, ac + bc);
        for i in 0..ar {
            let dst = &mut out.data_mut()[i * (ac + bc)..(i + 1) * (ac + bc)];
            dst[..ac].copy_from_slice(self.nodes[a.0].value.row(i));
            dst[ac..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        self.push(Op::ConcatCols, vec![a.0, b.0], out)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert!(start + len <= r, "slice_rows {start}+{len} out of {r} rows");
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::from_vec(len, c, data);
        self.push(Op::SliceRows { start }, vec![a.0], v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert!(start + len <= c, "slice_cols {start}+{len} out of {c} cols");
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a.0].value.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { start }, vec![a.0], out)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (r, c) = self.value(a).shape();
        let mut out = Tensor::zeros(indices.len(), c);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < r, "gather_rows index {idx} out of {r} rows");
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(self.nodes[a.0].value.row(idx));
        }
        self.push(Op::GatherRows(indices.to_vec()), vec![a.0], out)
    }

    /// Place the rows of `a` at `indices` inside a zero matrix of `total` rows.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], total: usize) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(r, indices.len(), "scatter_rows wants one index per row");
        let mut out = Tensor::zeros(total, c);
        for (i, &idx) in indices.iter().enumerate() {
            assert!(idx < total, "scatter_rows index {idx} out of {total} rows");
            out.data_mut()[idx * c..(idx + 1) * c].copy_from_slice(self.nodes[a.0].value.row(i));
        }
        self.push(
            Op::ScatterRows {
                indices: indices.to_vec(),
            },
            vec![a.0],
            out,
        )
    }

    /// out[i][j] = x[i][j] * w[i][0]; w is an (rows x 1) column.
    pub fn scale_rows_by_col(&mut self, x: Var, w: Var) -> Var {
        let (r, c) = self.value(x).shape();
        if self.value(w).shape() != (r, 1) {
            panic!(
                "shape mismatch in scale_rows_by_col: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            );
        }
        let mut out = self.value(x).clone();
        for i in 0..r {
            let wi = self.nodes[w.0].value.get(i, 0);
            for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                *v *= wi;
            }
        }
        self.push(Op::ScaleRowsByCol, vec![x.0, w.0], out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll, vec![a.0], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::MeanAll, vec![a.0], Tensor::scalar(s / n))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshaped(rows, cols);
        self.push(Op::Reshape, vec![a.0], v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = x.clamp(lo, hi);
        }
        self.push(Op::Clamp { lo, hi }, vec![a.0], v)
    }

    /// x * W + bias-row; the workhorse of every MLP layer.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mm = self.matmul(x, w);
        self.add_row(mm, b)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let (r, c) = self.value(loss).shape();
        assert_eq!(
            (r, c),
            (1, 1),
            "backward needs a scalar loss, got {:?}",
            (r, c)
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut by_path: HashMap<String, Tensor> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { path: Some(p) } = &node.op {
                let Some(g) = &grads[i] else { continue };
                match by_path.get_mut(p) {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += d;
                        }
                    }
                    None => {
                        by_path.insert(p.clone(), g.clone());
                    }
                }
            }
        }
        Gradients { grads, by_path }
    }

    fn accumulate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let input_val = |k: usize| &self.nodes[node.inputs[k]].value;
        let mut add_to = |k: usize, delta: Tensor| {
            let idx = node.inputs[k];
            if !self.nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul => {
                let a = input_val(0);
                let b = input_val(1);
                add_to(0, matmul_nt_raw(g, b));
                add_to(1, matmul_raw(&transpose_raw(a), g));
            }
            Op::MatMulNT => {
                let a = input_val(0);
                let b = input_val(1);
                add_to(0, matmul_raw(g, b));
                add_to(1, matmul_raw(&transpose_raw(g), a));
            }
            Op::Add => {
                add_to(0, g.clone());
                add_to(1, g.clone());
            }
            Op::Sub => {
                add_to(0, g.clone());
                let mut n = g.clone();
                for v in n.data_mut() {
                    *v = -*v;
                }
                add_to(1, n);
            }
            Op::Mul => {
                let a = input_val(0).clone();
                let b = input_val(1).clone();
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(b.data()) {
                    *x *= y;
                }
                add_to(0, ga);
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(a.data()) {
                    *x *= y;
                }
                add_to(1, gb);
            }
            Op::AddRow => {
                add_to(0, g.clone());
                let (r, c) = g.shape();
                let mut gb = Tensor::zeros(1, c);
                for i in 0..r {
                    for j in 0..c {
                        gb.data_mut()[j] += g.get(i, j);
                    }
                }
                add_to(1, gb);
            }
            Op::Scale(s) => {
                let mut gx = g.clone();
                for v in gx.data_mut() {
                    *v *= s;
                }
                add_to(0, gx);
            }
            Op::AddConst => add_to(0, g.clone()),
            Op::Tanh => {
                let y = &node.value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - yv * yv;
                }
                add_to(0, gx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv * (1.0 - yv);
                }
                add_to(0, gx);
            }
            Op::Gelu => {
                let x = input_val(0);
                let mut gx = g.clone();
                for (v, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_C * (xv + GELU_A * xv.powi(3));
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                    let d = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    *v *= d;
                }
                add_to(0, gx);
            }
            Op::Exp => {
                let y = &node.value;
                let mut gx = g.clone();
                for (v, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                    *v *= yv;
                }
                add_to(0, gx);
            }
            Op::Ln => {
                let x = input_val(0);
                let mut gx = g.clone();
                for (v, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    *v /= xv;
                }
                add_to(0, gx);
            }
            Op::Softmax => {
                add_to(0, softmax_backward(&node.value, g, None));
            }
            Op::MaskedSoftmax(mask) => {
                add_to(0, softmax_backward(&node.value, g, Some(mask)));
            }
            Op::LayerNorm { eps } => {
                let x = input_val(0);
                let gamma = input_val(1);
                let (r, c) = x.shape();
                let mut gx = Tensor::zeros(r, c);
                let mut gg = Tensor::zeros(1, c);
                let mut gb = Tensor::zeros(1, c);
                for i in 0..r {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gout = g.row(i);
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for j in 0..c {
                        let gy = gout[j] * gamma.data()[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat[j];
                        gg.data_mut()[j] += gout[j] * xhat[j];
                        gb.data_mut()[j] += gout[j];
                    }
                    for j in 0..c {
                        let gy = gout[j] * gamma.data()[j];
                        gx.set(
                            i,
                            j,
                            inv * (gy - sum_gy / c as f64 - xhat[j] * sum_gy_xhat / c as f64),
                        );
                    }
                }
                add_to(0, gx);
                add_to(1, gg);
                add_to(2, gb);
            }
            Op::ConcatRows => {
                let (ar, c) = input_val(0).shape();
                let (br, _) = input_val(1).shape();
                let ga = Tensor::from_vec(ar, c, g.data()[..ar * c].to_vec());
                let gb = Tensor::from_vec(br, c, g.data()[ar * c..].to_vec());
                add_to(0, ga);
                add_to(1, gb);
            }
            Op::ConcatCols => {
                let (r, ac) = input_val(0).shape();
                let (_, bc) = input_val(1).shape();
                let mut ga = Tensor::zeros(r, ac);
                let mut gb = Tensor::zeros(r, bc);
                for i in 0..r {
                    let grow = g.row(i);
                    ga.data_mut()[i * ac..(i + 1) * ac].copy_from_slice(&grow[..ac]);
                    gb.data_mut()[i * bc..(i + 1) * bc].copy_from_slice(&grow[ac..]);
                }
                add_to(0, ga);
                add_to(1, gb);
            }
            Op::SliceRows { start } => {
                let (r, c) = input_val(0).shape();
                let (gr, _) = g.shape();
                let mut gx = Tensor::zeros(r, c);
                gx.data_mut()[start * c..(start + gr) * c].copy_from_slice(g.data());
                add_to(0, gx);
            }
            Op::SliceCols { start } => {
                let (r, c) = input_val(0).shape();
                let (_, gc) = g.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.data_mut()[i * c + start..i * c + start + gc].copy_from_slice(g.row(i));
                }
                add_to(0, gx);
            }
            Op::GatherRows(indices) => {
                let (r, c) = input_val(0).shape();
                let mut gx = Tensor::zeros(r, c);
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..c {
                        let cur = gx.get(idx, j);
                        gx.set(idx, j, cur + g.get(i, j));
                    }
                }
                add_to(0, gx);
            }
            Op::ScatterRows { indices } => {
                let (_, c) = input_val(0).shape();
                let mut gx = Tensor::zeros(indices.len(), c);
                for (i, &idx) in indices.iter().enumerate() {
                    gx.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.row(idx));
                }
                add_to(0, gx);
            }
            Op::ScaleRowsByCol => {
                let x = input_val(0);
                let w = input_val(1);
                let (r, c) = x.shape();
                let mut gx = g.clone();
                let mut gw = Tensor::zeros(r, 1);
                for i in 0..r {
                    let wi = w.get(i, 0);
                    let mut s = 0.0;
                    for j in 0..c {
                        s += g.get(i, j) * x.get(i, j);
                        let cur = gx.get(i, j);
                        gx.set(i, j, cur * wi);
                    }
                    gw.set(i, 0, s);
                }
                add_to(0, gx);
                add_to(1, gw);
            }
            Op::SumAll => {
                let (r, c) = input_val(0).shape();
                let s = g.get(0, 0);
                add_to(0, Tensor::from_vec(r, c, vec![s; r * c]));
            }
            Op::MeanAll => {
                let (r, c) = input_val(0).shape();
                let s = g.get(0, 0) / (r * c) as f64;
                add_to(0, Tensor::from_vec(r, c, vec![s; r * c]));
            }
            Op::Reshape => {
                let (r, c) = input_val(0).shape();
                add_to(0, g.reshaped(r, c));
            }
            Op::Clamp { lo, hi } => {
                let x = input_val(0);
                let mut gx = g.clone();
                for (v, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv < *lo || xv > *hi {
                        *v = 0.0;
                    }
                }
                add_to(0, gx);
            }
        }
    }
}

fn softmax_rows(src: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let (r, c) = src.shape();
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let row = src.row(i);
        let active = |j: usize| mask.map_or(true, |m| m.get(i, j) != 0.0);
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            if active(j) {
                max = max.max(row[j]);
            }
        }
        if max == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut denom = 0.0;
        for j in 0..c {
            if active(j) {
                denom += (row[j] - max).exp();
            }
        }
        for j in 0..c {
            if active(j) {
                out.set(i, j, (row[j] - max).exp() / denom);
            }
        }
    }
    out
}

fn softmax_backward(y: &Tensor, g: &Tensor, mask: Option<&Tensor>) -> Tensor {
    let (r, c) = y.shape();
    let mut gx = Tensor::zeros(r, c);
    for i in 0..r {
        let active = |j: usize| mask.map_or(true, |m| m.get(i, j) != 0.0);
        let mut dot = 0.0;
        for j in 0..c {
            if active(j) {
                dot += g.get(i, j) * y.get(i, j);
            }
        }
        for j in 0..c {
            if active(j) {
                gx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
            }
        }
    }
    gx
}

/// Max relative error between analytic gradients and central finite
/// differences, over every trainable parameter element (capped per tensor by
/// `max_per_tensor` with a deterministic stride when a tensor is larger).
pub fn grad_check<F>(store: &ParamStore, f: F, eps: f64, max_per_tensor: usize) -> f64
where
    F: Fn(&ParamStore, &mut Tape) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape);
    let grads = tape.backward(loss);

    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    let paths: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(p, _)| p.to_string())
        .collect();
    for path in paths {
        let n = store.get(&path).unwrap().tensor.len();
        let analytic = grads.by_path(&path).cloned();
        let stride = n.div_ceil(max_per_tensor).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(&path).unwrap().tensor.data()[k];

            probe.get_mut(&path).unwrap().tensor.data_mut()[k] = orig + eps;
            let mut t_plus = Tape::new();
            let l_plus = f(&probe, &mut t_plus);
            let f_plus = t_plus.value(l_plus).get(0, 0);

            probe.get_mut(&path).unwrap().tensor.data_mut()[k] = orig - eps;
            let mut t_minus = Tape::new();
            let l_minus = f(&probe, &mut t_minus);
            let f_minus = t_minus.value(l_minus).get(0, 0);

            probe.get_mut(&path).unwrap().tensor.data_mut()[k] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[k]);
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamEntry, ParamStore, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 3, vec![0.1, 2.0, -1.0, 5.0, 5.0, 5.0]));
        let y = tape.softmax(x);
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(Tensor::identity(2));
        let y = tape.matmul(x, id);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // d/dx sum(x^2) at x=3 is 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn linear_layer_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::uniform(3, 2, 0.5, &mut rng));
        store.insert("b", Tensor::uniform(1, 2, 0.5, &mut rng));
        let x = Tensor::uniform(4, 3, 1.0, &mut rng);
        let err = grad_check(
            &store,
            |s, tape| {
                let xv = tape.constant(x.clone());
                let w = tape.param(s, "w");
                let b = tape.param(s, "b");
                let y = tape.affine(xv, w, b);
                let sq = tape.mul(y, y);
                tape.mean_all(sq)
            },
            1e-5,
            usize::MAX,
        );
        assert!(err < 1e-6, "linear layer grad error {err}");
    }

    #[test]
    fn tanh_mlp_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("w1", Tensor::uniform(3, 5, 0.5, &mut rng));
        store.insert("b1", Tensor::uniform(1, 5, 0.5, &mut rng));
        store.insert("w2", Tensor::uniform(5, 2, 0.5, &mut rng));
        store.insert("b2", Tensor::uniform(1, 2, 0.5, &mut rng));
        let x = Tensor::uniform(4, 3, 1.0, &mut rng);
        let err = grad_check(
            &store,
            |s, tape| {
                let xv = tape.constant(x.clone());
                let w1 = tape.param(s, "w1");
                let b1 = tape.param(s, "b1");
                let w2 = tape.param(s, "w2");
                let b2 = tape.param(s, "b2");
                let h = tape.affine(xv, w1, b1);
                let h = tape.tanh(h);
                let y = tape.affine(h, w2, b2);
                let sq = tape.mul(y, y);
                tape.mean_all(sq)
            },
            1e-5,
            usize::MAX,
        );
        assert!(err < 1e-5, "tanh mlp grad error {err}");
    }

    #[test]
    fn mixed_ops_grad_check() {
        // exercises softmax, layer_norm, gelu, exp, ln, clamp, concat, slice,
        // gather/scatter, scale_rows_by_col
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::uniform(4, 4, 0.5, &mut rng));
        store.insert("gamma", Tensor::from_vec(1, 4, vec![1.0, 0.9, 1.1, 1.2]));
        store.insert("beta", Tensor::uniform(1, 4, 0.1, &mut rng));
        store.insert("wcol", Tensor::uniform(3, 1, 0.5, &mut rng));
        let x = Tensor::uniform(3, 4, 0.8, &mut rng);
        let err = grad_check(
            &store,
            |s, tape| {
                let xv = tape.constant(x.clone());
                let w = tape.param(s, "w");
                let gamma = tape.param(s, "gamma");
                let beta = tape.param(s, "beta");
                let wcol = tape.param(s, "wcol");
                let h = tape.matmul(xv, w);
                let h = tape.layer_norm(h, gamma, beta, 1e-5);
                let a = tape.softmax(h);
                let g = tape.gelu(h);
                let cat = tape.concat_cols(a, g);
                let sl = tape.slice_cols(cat, 2, 4);
                let gat = tape.gather_rows(sl, &[2, 0]);
                let sc = tape.scatter_rows(gat, &[1, 2], 3);
                let scl = tape.scale_rows_by_col(sc, wcol);
                let e = tape.exp(scl);
                let cl = tape.clamp(e, 0.2, 5.0);
                let l = tape.ln(cl);
                let sq = tape.mul(l, l);
                tape.mean_all(sq)
            },
            1e-5,
            usize::MAX,
        );
        assert!(err < 1e-5, "mixed ops grad error {err}");
    }

    #[test]
    fn concat_then_slice_routes_gradient_to_sliced_rows_only() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let cat = tape.concat_rows(a, b);
        // keep only the first two rows (the "system token" slice)
        let head = tape.slice_rows(cat, 0, 2);
        let sq = tape.mul(head, head);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.wrt(a).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.insert_entry(
            "frozen",
            ParamEntry {
                tensor: Tensor::scalar(2.0),
                trainable: false,
                lora_adapter: false,
            },
        );
        let mut tape = Tape::new();
        let p = tape.param(&store, "frozen");
        let sq = tape.mul(p, p);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert!(grads.by_path("frozen").is_none());
        assert!(grads.wrt(p).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let result = std::panic::catch_unwind(|| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::zeros(2, 3));
            let b = tape.constant(Tensor::zeros(2, 3));
            tape.matmul(a, b);
        });
        let msg = *result.unwrap_err().downcast::<String>().unwrap();
        assert!(msg.contains("matmul") && msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn masked_softmax_matches_manual_two_logit_softmax() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(1, 4, vec![2.0, 1.0, 0.5, 3.0]));
        // select only the first two entries
        let mask = Tensor::from_vec(1, 4, vec![1.0, 1.0, 0.0, 0.0]);
        let y = tape.masked_softmax(logits, mask);
        let denom = 2.0f64.exp() + 1.0f64.exp();
        assert!((tape.value(y).get(0, 0) - 2.0f64.exp() / denom).abs() < 1e-12);
        assert!((tape.value(y).get(0, 1) - 1.0f64.exp() / denom).abs() < 1e-12);
        assert_eq!(tape.value(y).get(0, 2), 0.0);
        assert_eq!(tape.value(y).get(0, 3), 0.0);
    }
}
