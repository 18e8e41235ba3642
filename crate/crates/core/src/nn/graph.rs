//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed on
//! construction) and [`Graph::backward`] walks the tape in reverse. Nodes that
//! do not depend on a trainable parameter carry no gradient.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use super::params::{ParamId, Params};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    /// Row standardization; caches 1/σ per row.
    Normalize(Var, Vec<f64>),
    Gelu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Forward value supplied by the caller; gradient copied to the source.
    StraightThrough(Var),
    RowNorm(Var),
    RowAbsSum(Var),
    RowSqNorm(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable_store: Option<u64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter. Frozen stores bind as constants. At most one
    /// trainable store may be bound per graph.
    pub fn param(&mut self, store: &Params, id: ParamId) -> Var {
        let value = store.get(id).clone();
        if !store.is_trainable() {
            return self.constant(value);
        }
        match self.trainable_store {
            None => self.trainable_store = Some(store.uid()),
            Some(uid) => assert_eq!(uid, store.uid(), "graph binds two trainable parameter stores"),
        }
        self.push(value, Op::Param(id), true)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// a + broadcast(row), row is 1×n.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + &self.value(row).row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) * &self.value(row).row(0);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Row-wise softmax. Entries equal to -inf receive exactly zero mass.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                row.iter().any(|v| *v != f64::NEG_INFINITY),
                "softmax row is fully masked"
            );
            if !max.is_finite() {
                // Non-finite logits propagate as NaN so divergence is detectable.
                row.fill(f64::NAN);
                continue;
            }
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Standardizes each row to zero mean and unit variance.
    pub fn normalize(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.dot(&row) / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            inv.push(r);
        }
        let ng = self.ng(a);
        self.push(value, Op::Normalize(a, inv), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|v| self.ng(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Mat::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, rows.to_vec()), ng)
    }

    /// Emits `value` in the forward pass and routes the incoming gradient
    /// unchanged to `source`.
    pub fn straight_through(&mut self, source: Var, value: Mat) -> Var {
        assert_eq!(value.dim(), self.value(source).dim(), "straight-through shape mismatch");
        let ng = self.ng(source);
        self.push(value, Op::StraightThrough(source), ng)
    }

    /// Per-row Euclidean norm, T×1.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowNorm(a), ng)
    }

    /// Per-row L1 norm, T×1.
    pub fn row_abs_sum(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.iter().map(|v| v.abs()).sum())
            .insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowAbsSum(a), ng)
    }

    /// Per-row squared Euclidean norm, T×1.
    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let value = self.value(a).map_axis(Axis(1), |r| r.dot(&r)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::RowSqNorm(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Mat::from_elem((1, 1), x.sum() / x.len() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Reverse pass from a 1×1 node. Returns gradients for every bound
    /// trainable parameter, summed over repeated bindings.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.ng(loss) {
            return out;
        }
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let send = |grads: &mut Vec<Option<Mat>>, v: Var, contrib: Mat| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        send(&mut grads, *b, g.clone());
                    }
                    send(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        send(&mut grads, *b, -&g);
                    }
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        send(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    if self.ng(*row) {
                        let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        send(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        send(&mut grads, *a, &g * &self.value(*row).row(0));
                    }
                }
                Op::Scale(a, c) => send(&mut grads, *a, g * *c),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut gr, yr) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = gr.sum();
                        Zip::from(&mut gr).and(&yr).for_each(|gv, &yv| *gv -= yv * dot);
                    }
                    send(&mut grads, *a, gx);
                }
                Op::Normalize(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = g;
                    for ((mut gr, yr), r) in gx.rows_mut().into_iter().zip(y.rows()).zip(inv) {
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.dot(&yr) / n;
                        Zip::from(&mut gr)
                            .and(&yr)
                            .for_each(|gv, &yv| *gv = r * (*gv - mean_g - yv * mean_gy));
                    }
                    send(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*a)).for_each(|gv, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *gv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    send(&mut grads, *a, gx);
                }
                Op::SliceCols(a, start) => {
                    let mut gx = Mat::zeros(self.value(*a).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(&mut grads, *a, gx);
                }
                Op::SliceRows(a, start) => {
                    let mut gx = Mat::zeros(self.value(*a).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            send(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if self.ng(*p) {
                            send(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut gx = Mat::zeros(self.value(*a).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &g.row(i);
                    }
                    send(&mut grads, *a, gx);
                }
                Op::StraightThrough(src) => send(&mut grads, *src, g),
                Op::RowNorm(a) => {
                    let x = self.value(*a);
                    let mut gx = x.clone();
                    for ((mut row, n), gn) in gx.rows_mut().into_iter().zip(node.value.iter()).zip(g.iter()) {
                        if *n > 0.0 {
                            row.mapv_inplace(|v| v * gn / n);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    send(&mut grads, *a, gx);
                }
                Op::RowAbsSum(a) => {
                    let x = self.value(*a);
                    let mut gx = x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                    for (mut row, gn) in gx.rows_mut().into_iter().zip(g.iter()) {
                        row *= *gn;
                    }
                    send(&mut grads, *a, gx);
                }
                Op::RowSqNorm(a) => {
                    let mut gx = self.value(*a) * 2.0;
                    for (mut row, gn) in gx.rows_mut().into_iter().zip(g.iter()) {
                        row *= *gn;
                    }
                    send(&mut grads, *a, gx);
                }
                Op::Sum(a) => {
                    let gx = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                    send(&mut grads, *a, gx);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let gx = Mat::from_elem(x.raw_dim(), g[[0, 0]] / x.len() as f64);
                    send(&mut grads, *a, gx);
                }
            }
        }
        out
    }
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, g: Mat) {
        let i = id.index();
        if self.slots.len() <= i {
            self.slots.resize(i + 1, None);
        }
        match &mut self.slots[i] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.index()).and_then(Option::as_ref)
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId::from_index(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId::from_index(i), g)))
    }
}
