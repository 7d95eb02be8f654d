//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a per-forward-pass arena: every op appends a node holding
//! its value and the ids of its parents, and [`Tape::backward`] replays the
//! arena in reverse, accumulating vector-Jacobian products into leaf grads.
//! Nodes whose inputs are all untracked record no parents, so running the
//! same code with nothing tracked is a plain value computation.
//!
//! Tapes are single-threaded by design; independent tapes may run on
//! independent threads freely.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, check_same_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Back {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    ScaleShift { a: usize, scale: f32 },
    AffineRows { a: usize, scale: Rc<Tensor> },
    Tanh { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softplus { a: usize },
    ClampMin { a: usize, min: f32 },
    Clamp { a: usize, lo: f32, hi: f32 },
    SoftmaxRows { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    RowSum { a: usize },
    CumsumRows { a: usize },
    ConcatCols { a: usize, b: usize, ca: usize },
    SelectCols { a: usize, idx: Rc<Vec<usize>> },
    GatherPerRow { a: usize, idx: Rc<Vec<usize>> },
    Reshape { a: usize },
}

struct Node {
    value: Rc<Tensor>,
    grad: Option<Tensor>,
    tracked: bool,
    back: Back,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros if it never received contributions.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match self.nodes[v.0].grad {
            Some(ref g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.leaf_rc(Rc::new(value), tracked)
    }

    /// Leaf sharing an existing buffer; model parameters enter tapes this
    /// way so no weight matrices are copied per forward pass.
    pub fn leaf_rc(&mut self, value: Rc<Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            back: Back::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, tracked: bool, back: Back) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            tracked,
            back: if tracked { back } else { Back::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::Matmul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("add", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::Add { a: a.0, b: b.0 }))
    }

    /// Broadcast add of a bias row: [r,c] + [c].
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.numel() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        tensor::add_bias_into(out.data_mut(), bv.data());
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::AddBias { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("sub", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x - y)
                .collect(),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("mul", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape("div", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x / y)
                .collect(),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, tracked, Back::Div { a: a.0, b: b.0 }))
    }

    /// y = scale·x + shift
    pub fn scale_shift(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::ScaleShift { a: a.0, scale })
    }

    /// Per-column affine: y[i,j] = x[i,j]·scale[j] + shift[j]. Scale and
    /// shift are plain constants (normalization stats), not tape values.
    pub fn affine_rows(&mut self, a: Var, scale: Rc<Tensor>, shift: &Tensor) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if scale.numel() != c || shift.numel() != c {
            return Err(Error::ShapeMismatch {
                op: "affine_rows",
                lhs: av.shape().to_vec(),
                rhs: scale.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, s), t) in row.iter_mut().zip(scale.data()).zip(shift.data()) {
                *v = *v * s + t;
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(out, tracked, Back::AffineRows { a: a.0, scale }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::tanh);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Tanh { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Relu { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::ln);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Log { a: a.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::softplus);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Softplus { a: a.0 })
    }

    pub fn clamp_min(&mut self, a: Var, min: f32) -> Var {
        let out = self.value(a).map(|v| v.max(min));
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::ClampMin { a: a.0, min })
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::Clamp { a: a.0, lo, hi })
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = av.clone();
        tensor::softmax_rows_into(out.data_mut(), cols);
        let tracked = self.tracked(a);
        self.push(out, tracked, Back::SoftmaxRows { a: a.0 })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), tracked, Back::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s: f32 = self.value(a).data().iter().sum();
        let tracked = self.tracked(a);
        self.push(
            Tensor::scalar(s / n as f32),
            tracked,
            Back::MeanAll { a: a.0 },
        )
    }

    /// [r,c] -> [r], summing each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols().max(1);
        let out: Vec<f32> = av.data().chunks(c).map(|row| row.iter().sum()).collect();
        let n = out.len();
        let tracked = self.tracked(a);
        self.push(Tensor::new(vec![n], out), tracked, Back::RowSum { a: a.0 })
    }

    /// Running sums along each row, matching the scalar knot construction's
    /// accumulation order.
    pub fn cumsum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols().max(1);
        let mut data = Vec::with_capacity(av.numel());
        for row in av.data().chunks(c) {
            let mut acc = 0.0f32;
            for &v in row {
                acc += v;
                data.push(acc);
            }
        }
        let shape = av.shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::new(shape, data), tracked, Back::CumsumRows { a: a.0 })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv.data()[i * cb..(i + 1) * cb]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![r, ca + cb], data),
            tracked,
            Back::ConcatCols { a: a.0, b: b.0, ca },
        ))
    }

    /// Column gather: out[i,j] = a[i, idx[j]]. The idx list may repeat or
    /// permute; the backward pass scatter-adds.
    pub fn select_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "select_cols index {bad} out of range for {c} columns"
            )));
        }
        let k = idx.len();
        let mut data = Vec::with_capacity(r * k);
        for i in 0..r {
            let row = &av.data()[i * c..(i + 1) * c];
            for &j in idx.iter() {
                data.push(row[j]);
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(vec![r, k], data),
            tracked,
            Back::SelectCols { a: a.0, idx },
        ))
    }

    /// Per-row gather: out[i] = a[i, idx[i]].
    pub fn gather_per_row(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        if idx.len() != r {
            return Err(Error::DimMismatch {
                context: "gather_per_row index length".into(),
                expected: r,
                actual: idx.len(),
            });
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            data.push(av.data()[i * c + j]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor::new(vec![r], data),
            tracked,
            Back::GatherPerRow { a: a.0, idx },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = av.reshaped(shape);
        let tracked = self.tracked(a);
        Ok(self.push(out, tracked, Back::Reshape { a: a.0 }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates d(root)/d(leaf) into every tracked leaf reachable from
    /// `root`. The root must hold exactly one element. Repeated calls
    /// without a fresh tape keep accumulating.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.tracked(root) {
            return Err(Error::InvalidArgument(
                "backward on a value with no tracked inputs".into(),
            ));
        }
        {
            let node = &mut self.nodes[root.0];
            let g = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(vec![1]));
            g.data_mut()[0] += 1.0;
        }

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].tracked {
                continue;
            }
            // Ops above the root may belong to a different output; they have
            // no grad and were skipped above.
            let grad = self.nodes[i].grad.take().unwrap();
            let value = Rc::clone(&self.nodes[i].value);
            self.propagate(i, &grad, &value);
            // Interior grads are consumed; only leaves accumulate across
            // repeated backward calls.
            if matches!(self.nodes[i].back, Back::Leaf) {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, contrib: &[f32]) {
        let node = &mut self.nodes[id];
        if !node.tracked {
            return;
        }
        let shape = node.value.shape().to_vec();
        let g = node.grad.get_or_insert_with(|| Tensor::zeros(shape));
        for (gv, &c) in g.data_mut().iter_mut().zip(contrib) {
            *gv += c;
        }
    }

    fn parent_value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes[id].value)
    }

    fn propagate(&mut self, i: usize, grad: &Tensor, value: &Tensor) {
        // Back variants are recorded only on tracked nodes.
        match &self.nodes[i].back {
            Back::Leaf => {}
            &Back::Matmul { a, b } => {
                let av = self.parent_value(a);
                let bv = self.parent_value(b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.nodes[a].tracked {
                    let mut da = vec![0.0f32; m * k];
                    tensor::gemm(grad.data(), m, n, false, bv.data(), k, n, true, &mut da);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].tracked {
                    let mut db = vec![0.0f32; k * n];
                    tensor::gemm(av.data(), m, k, true, grad.data(), m, n, false, &mut db);
                    self.accumulate(b, &db);
                }
            }
            &Back::Add { a, b } => {
                self.accumulate(a, grad.data());
                self.accumulate(b, grad.data());
            }
            &Back::AddBias { a, b } => {
                self.accumulate(a, grad.data());
                if self.nodes[b].tracked {
                    let c = self.nodes[b].value.numel();
                    let mut db = vec![0.0f32; c];
                    for row in grad.data().chunks(c) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            &Back::Sub { a, b } => {
                self.accumulate(a, grad.data());
                if self.nodes[b].tracked {
                    let neg: Vec<f32> = grad.data().iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            &Back::Mul { a, b } => {
                let av = self.parent_value(a);
                let bv = self.parent_value(b);
                if self.nodes[a].tracked {
                    let da: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b].tracked {
                    let db: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            &Back::Div { a, b } => {
                let av = self.parent_value(a);
                let bv = self.parent_value(b);
                if self.nodes[a].tracked {
                    let da: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(g, y)| g / y)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b].tracked {
                    let db: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(b, &db);
                }
            }
            &Back::ScaleShift { a, scale } => {
                let da: Vec<f32> = grad.data().iter().map(|g| g * scale).collect();
                self.accumulate(a, &da);
            }
            Back::AffineRows { a, scale } => {
                let a = *a;
                let scale = Rc::clone(scale);
                let c = scale.numel();
                let mut da = Vec::with_capacity(grad.numel());
                for row in grad.data().chunks(c) {
                    for (g, s) in row.iter().zip(scale.data()) {
                        da.push(g * s);
                    }
                }
                self.accumulate(a, &da);
            }
            &Back::Tanh { a } => {
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::Relu { a } => {
                let av = self.parent_value(a);
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::Exp { a } => {
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::Log { a } => {
                let av = self.parent_value(a);
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::Softplus { a } => {
                let av = self.parent_value(a);
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| g * tensor::sigmoid(*x))
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::ClampMin { a, min } => {
                let av = self.parent_value(a);
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > min { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::Clamp { a, lo, hi } => {
                let av = self.parent_value(a);
                let da: Vec<f32> = grad
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(g, x)| if *x > lo && *x < hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            &Back::SoftmaxRows { a } => {
                let c = value.cols();
                let mut da = Vec::with_capacity(grad.numel());
                for (grow, yrow) in grad.data().chunks(c).zip(value.data().chunks(c)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for (g, y) in grow.iter().zip(yrow) {
                        da.push(y * (g - dot));
                    }
                }
                self.accumulate(a, &da);
            }
            &Back::SumAll { a } => {
                let g = grad.data()[0];
                let n = self.nodes[a].value.numel();
                self.accumulate(a, &vec![g; n]);
            }
            &Back::MeanAll { a } => {
                let n = self.nodes[a].value.numel();
                let g = grad.data()[0] / n.max(1) as f32;
                self.accumulate(a, &vec![g; n]);
            }
            &Back::RowSum { a } => {
                let av = self.parent_value(a);
                let c = av.cols().max(1);
                let mut da = Vec::with_capacity(av.numel());
                for &g in grad.data() {
                    da.extend(std::iter::repeat_n(g, c));
                }
                self.accumulate(a, &da);
            }
            &Back::CumsumRows { a } => {
                // d/da[i,j] = sum of grads at positions >= j in the row
                let c = value.cols().max(1);
                let mut da = vec![0.0f32; grad.numel()];
                for (rg, rd) in grad.data().chunks(c).zip(da.chunks_mut(c)) {
                    let mut acc = 0.0f32;
                    for j in (0..c).rev() {
                        acc += rg[j];
                        rd[j] = acc;
                    }
                }
                self.accumulate(a, &da);
            }
            &Back::ConcatCols { a, b, ca } => {
                let c = value.cols();
                let cb = c - ca;
                let r = value.rows();
                if self.nodes[a].tracked {
                    let mut da = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        da.extend_from_slice(&grad.data()[i * c..i * c + ca]);
                    }
                    self.accumulate(a, &da);
                }
                if self.nodes[b].tracked {
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        db.extend_from_slice(&grad.data()[i * c + ca..(i + 1) * c]);
                    }
                    self.accumulate(b, &db);
                }
            }
            Back::SelectCols { a, idx } => {
                let a = *a;
                let idx = Rc::clone(idx);
                let av = self.parent_value(a);
                let (r, c) = (av.rows(), av.cols());
                let k = idx.len();
                let mut da = vec![0.0f32; r * c];
                for i in 0..r {
                    for (jj, &j) in idx.iter().enumerate() {
                        da[i * c + j] += grad.data()[i * k + jj];
                    }
                }
                self.accumulate(a, &da);
            }
            Back::GatherPerRow { a, idx } => {
                let a = *a;
                let idx = Rc::clone(idx);
                let av = self.parent_value(a);
                let c = av.cols();
                let mut da = vec![0.0f32; av.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    da[i * c + j] += grad.data()[i];
                }
                self.accumulate(a, &da);
            }
            &Back::Reshape { a } => {
                self.accumulate(a, grad.data());
            }
        }
    }
}
