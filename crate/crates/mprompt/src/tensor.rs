//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! The whole training pipeline (prompt MLPs, the frozen generator, attention
//! augmentation, the NLL and CKA losses) is expressed as operations on a
//! [`Tape`]. Values are computed eagerly when an op is recorded, so callers
//! can branch on intermediate values; gradients are computed in a single
//! reverse sweep by [`Tape::backward`].
//!
//! Everything is f64: the gradient checks in the test suite compare analytic
//! gradients against central finite differences at 1e-4 relative error, which
//! f32 cannot support.

use ndarray::{concatenate, s, Array2, Axis};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

const NEG_INF: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    RowSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    Gather { table: Var, ids: Vec<usize> },
    SumAll(Var),
    CrossEntropySum { logits: Var, targets: Vec<usize> },
    RbfGram { x: Var, sigma: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, if `v` influences the loss and requires grad.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar_value on non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are tracked through and to it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf: values participate, gradients are never accumulated
    /// into it (gradients still flow through ops that consume it).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let value = self.value(a) / self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Div(a, b), ng)
    }

    /// `a + row` where `row` is 1 x ncols, broadcast over rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, ac), "add_row shape mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(value, Op::Sqrt(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise softmax with an optional additive mask (entries of `NEG_INF`
    /// disable positions). Every row must keep at least one enabled entry.
    /// The mask is not needed in the backward pass: masked outputs are 0.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&Matrix>) -> Var {
        if let Some(m) = mask {
            assert_eq!(m.dim(), self.shape(x), "softmax mask shape mismatch");
        }
        let mut scores = self.value(x).clone();
        if let Some(m) = mask {
            scores += m;
        }
        let mut value = scores;
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.needs(x);
        self.push(value, Op::RowSoftmax { x }, ng)
    }

    /// Row-wise layer normalization with learned gain and bias (1 x ncols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, c), "layer_norm bias shape");
        let xv = self.value(x);
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let value = &value * self.value(gain) + self.value(bias);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias }, ng)
    }

    /// Vertical concatenation. Zero-row parts are legal.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        let ng = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let ng = parts.iter().any(|v| self.needs(*v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, _) = self.shape(x);
        assert!(start + len <= r, "slice_rows out of range");
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceRows { x, start, len }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (_, c) = self.shape(x);
        assert!(start + len <= c, "slice_cols out of range");
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start, len }, ng)
    }

    /// Select rows of `table` by id (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.shape(table);
        let mut value = Matrix::zeros((ids.len(), cols));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather id {id} out of range {rows}");
            value.row_mut(i).assign(&self.value(table).row(id));
        }
        let ng = self.needs(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Sum over rows of -log softmax(logits)[i, targets[i]].
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "cross_entropy target count mismatch");
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "cross_entropy target {t} out of range {c}");
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        let ng = self.needs(logits);
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// RBF Gram matrix over the rows of `x`: K_ij = exp(-|xi-xj|^2 / (2 sigma^2)).
    /// `sigma` is treated as a constant (no gradient through the bandwidth).
    pub fn rbf_gram(&mut self, x: Var, sigma: f64) -> Var {
        assert!(sigma > 0.0, "rbf bandwidth must be positive");
        let xv = self.value(x);
        let rows = xv.nrows();
        let mut value = Matrix::zeros((rows, rows));
        for i in 0..rows {
            for j in 0..rows {
                let d2 = xv
                    .row(i)
                    .iter()
                    .zip(xv.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                value[[i, j]] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::RbfGram { x, sigma }, ng)
    }

    /// Reverse sweep from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.t().to_owned());
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g / bv);
                    }
                    if self.needs(*b) {
                        let db = -&g * self.value(*a) / (bv * bv);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*row) {
                        let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, dr);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * *c);
                    }
                }
                Op::Sqrt(a) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g / (&node.value * 2.0));
                    }
                }
                Op::Tanh(a) => {
                    if self.needs(*a) {
                        let da = &g * &node.value.mapv(|y| 1.0 - y * y);
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let da = &g * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::RowSoftmax { x } => {
                    if self.needs(*x) {
                        let y = &node.value;
                        let gy = &g * y;
                        let rowsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let dx = y * &(&g - &rowsum);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = self.value(*x);
                    let (r, c) = xv.dim();
                    let gv = self.value(*gain);
                    let mut xhat = xv.clone();
                    let mut inv = vec![0.0; r];
                    for (ri, mut row) in xhat.rows_mut().into_iter().enumerate() {
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        inv[ri] = 1.0 / (var + LN_EPS).sqrt();
                        let iv = inv[ri];
                        row.mapv_inplace(|v| (v - mean) * iv);
                    }
                    if self.needs(*gain) {
                        let dg = (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.needs(*bias) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*x) {
                        let gy = &g * gv;
                        let mut dx = Matrix::zeros((r, c));
                        for ri in 0..r {
                            let gyr = gy.row(ri);
                            let xr = xhat.row(ri);
                            let m1 = gyr.mean().unwrap();
                            let m2 = gyr
                                .iter()
                                .zip(xr.iter())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / c as f64;
                            for ci in 0..c {
                                dx[[ri, ci]] = inv[ri] * (gyr[ci] - m1 - xr[ci] * m2);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (pr, _) = self.shape(*p);
                        if self.needs(*p) && pr > 0 {
                            let dp = g.slice(s![off..off + pr, ..]).to_owned();
                            accumulate(&mut grads, *p, dp);
                        }
                        off += pr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (_, pc) = self.shape(*p);
                        if self.needs(*p) && pc > 0 {
                            let dp = g.slice(s![.., off..off + pc]).to_owned();
                            accumulate(&mut grads, *p, dp);
                        }
                        off += pc;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.needs(*x) {
                        let mut dx = Matrix::zeros(self.shape(*x));
                        dx.slice_mut(s![*start..*start + *len, ..]).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.needs(*x) {
                        let mut dx = Matrix::zeros(self.shape(*x));
                        dx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Gather { table, ids } => {
                    if self.needs(*table) {
                        let mut dt = Matrix::zeros(self.shape(*table));
                        for (ri, &id) in ids.iter().enumerate() {
                            let mut dst = dt.row_mut(id);
                            dst += &g.row(ri);
                        }
                        accumulate(&mut grads, *table, dt);
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(*x) {
                        let dx = Matrix::from_elem(self.shape(*x), g[[0, 0]]);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::CrossEntropySum { logits, targets } => {
                    if self.needs(*logits) {
                        let lv = self.value(*logits);
                        let g0 = g[[0, 0]];
                        let mut dl = Matrix::zeros(lv.dim());
                        for (ri, &t) in targets.iter().enumerate() {
                            let row = lv.row(ri);
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for (ci, e) in exps.iter().enumerate() {
                                dl[[ri, ci]] = g0 * (e / sum - if ci == t { 1.0 } else { 0.0 });
                            }
                        }
                        accumulate(&mut grads, *logits, dl);
                    }
                }
                Op::RbfGram { x, sigma } => {
                    if self.needs(*x) {
                        let xv = self.value(*x);
                        let k = &node.value;
                        let (rows, cols) = xv.dim();
                        let s2 = sigma * sigma;
                        // dL/dx_i = sum_j (g_ij + g_ji) K_ij (x_j - x_i) / sigma^2
                        let mut dx = Matrix::zeros((rows, cols));
                        for i in 0..rows {
                            for j in 0..rows {
                                let coeff = (g[[i, j]] + g[[j, i]]) * k[[i, j]] / s2;
                                for c in 0..cols {
                                    dx[[i, c]] += coeff * (xv[[j, c]] - xv[[i, c]]);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
            }
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
    match &mut grads[v.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

/// Additive mask that lets every query attend `prefix_len` prefix positions
/// plus real positions up to and including its own index.
pub fn causal_mask_with_prefix(queries: usize, prefix_len: usize, keys: usize) -> Matrix {
    assert!(keys >= prefix_len);
    let mut mask = Matrix::zeros((queries, keys));
    for i in 0..queries {
        for j in prefix_len..keys {
            if j - prefix_len > i {
                mask[[i, j]] = NEG_INF;
            }
        }
    }
    mask
}

/// Central finite difference of a scalar function of one coordinate.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x0: f64, step: f64) -> f64 {
    (f(x0 + step) - f(x0 - step)) / (2.0 * step)
}

/// Relative error with a small floor to keep near-zero gradients meaningful.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Gradient-check acceptance: relative error at most 1e-4, with an absolute
/// guard of 1e-9 for entries below central-difference noise (the rounding
/// floor of a step-1e-5 central difference on an O(1) loss is ~1e-10).
pub fn gradient_close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-9 || relative_error(analytic, fd) <= 1e-4
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks analytic gradients of `f` against central differences for every
    /// entry of every input matrix. `f` rebuilds the graph from fresh params.
    fn gradcheck<F>(inputs: &[Matrix], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);

        for (pi, base) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[pi]).expect("missing gradient");
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let fd = central_difference(
                    |x| {
                        let mut perturbed: Vec<Matrix> = inputs.to_vec();
                        perturbed[pi][[r, c]] = x;
                        let mut t = Tape::new();
                        let vs: Vec<Var> =
                            perturbed.iter().map(|m| t.param(m.clone())).collect();
                        let l = f(&mut t, &vs);
                        t.scalar_value(l)
                    },
                    base[[r, c]],
                    1e-5,
                );
                let err = relative_error(g[[r, c]], fd);
                assert!(
                    err <= 1e-4,
                    "grad mismatch input {pi} [{r},{c}]: analytic {} fd {} err {}",
                    g[[r, c]],
                    fd,
                    err
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        gradcheck(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.tanh(p);
            t.sum_all(q)
        });
    }

    #[test]
    fn softmax_with_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_matrix(&mut rng, 3, 5);
        let mask = causal_mask_with_prefix(3, 2, 5);
        gradcheck(&[x], move |t, v| {
            let y = t.row_softmax(v[0], Some(&mask));
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 6);
        let gain = random_matrix(&mut rng, 1, 6);
        let bias = random_matrix(&mut rng, 1, 6);
        gradcheck(&[x, gain, bias], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let q = t.tanh(y);
            t.sum_all(q)
        });
    }

    #[test]
    fn concat_slice_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let table = random_matrix(&mut rng, 5, 3);
        gradcheck(&[a, b, table], |t, v| {
            let g = t.gather(v[2], &[4, 0, 4]);
            let cat = t.concat_rows(&[v[0], v[1], g]);
            let sl = t.slice_rows(cat, 1, 5);
            let sc = t.slice_cols(sl, 1, 2);
            let q = t.mul(sc, sc);
            t.sum_all(q)
        });
    }

    #[test]
    fn cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_matrix(&mut rng, 4, 6);
        gradcheck(&[logits], |t, v| t.cross_entropy_sum(v[0], &[0, 5, 2, 2]));
    }

    #[test]
    fn scalar_quotient_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        gradcheck(&[a, b], |t, v| {
            let ka = t.mul(v[0], v[0]);
            let kb = t.mul(v[1], v[1]);
            let na = t.sum_all(ka);
            let nb = t.sum_all(kb);
            let prod = t.mul(na, nb);
            let denom = t.sqrt(prod);
            let num = t.sum_all(v[0]);
            let num2 = t.mul(num, num);
            t.div(num2, denom)
        });
    }

    #[test]
    fn rbf_gram_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 3);
        gradcheck(&[x], |t, v| {
            let k = t.rbf_gram(v[0], 0.8);
            let kk = t.mul(k, k);
            t.sum_all(kk)
        });
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::from_elem((2, 2), 1.0));
        let w = tape.constant(Matrix::from_elem((2, 2), 2.0));
        let y = tape.matmul(a, w);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.wrt(w).is_none());
        // gradients still flow through the frozen weight to the input
        let ga = grads.wrt(a).unwrap();
        assert_eq!(ga[[0, 0]], 4.0);
    }

    #[test]
    fn causal_mask_prefix_always_visible() {
        let mask = causal_mask_with_prefix(3, 4, 7);
        // query 0: 4 prefix positions + itself
        let visible: usize = mask.row(0).iter().filter(|&&v| v == 0.0).count();
        assert_eq!(visible, 5);
        // last query sees everything
        assert!(mask.row(2).iter().all(|&v| v == 0.0));
    }
}
