//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a node walks the record in reverse and returns the
//! gradient of that node's sum with respect to every recorded node.
//!
//! Everything is a 2-D matrix. Scalars are `1 x 1`. Broadcasting is explicit
//! (`add_row`, `add_col`, `mul_col`) so shapes never change silently.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Tape`].
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Minimum(Var, Var),
    MaskedLogSumExp(Var, Array2<bool>),
    MaskedSoftmax(Var),
    GroupDots { query: Var, keys: Var, group: usize },
    GroupWeightedSum { weights: Var, values: Var, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` if the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materializing zeros of the given shape when absent.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(var).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        let needs_grad = self.inputs_need_grad(&op);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        match op {
            Op::Leaf => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b)
            | Op::Minimum(a, b) => self.ng(*a) || self.ng(*b),
            Op::GroupDots { query: a, keys: b, .. } | Op::GroupWeightedSum { weights: a, values: b, .. } => {
                self.ng(*a) || self.ng(*b)
            }
            Op::ConcatCols(parts) => parts.iter().any(|p| self.ng(*p)),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softplus(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Recip(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::RowSum(a)
            | Op::SliceCols(a, _)
            | Op::MaskedLogSumExp(a, _)
            | Op::MaskedSoftmax(a) => self.ng(*a),
        }
    }

    /// Records a leaf. Leaves receive gradients but have no inputs.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a value that never receives a gradient. Operations whose inputs
    /// are all constants are themselves constant and skipped by `backward`.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Copies `x` into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Array2<f64> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> (usize, usize) {
        self.value(x).dim()
    }

    /// The single entry of a `1 x 1` node.
    pub fn item(&self, x: Var) -> f64 {
        let v = self.value(x);
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar node");
        v[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, m) = self.shape(a);
        assert_eq!(self.shape(row), (1, m), "add_row: bias must be 1 x cols");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a (n x m) + col (n x 1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "add_col: column must be rows x 1");
        let v = self.value(a) + self.value(col);
        self.push(v, Op::AddCol(a, col))
    }

    /// `a (n x m) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (n, _) = self.shape(a);
        assert_eq!(self.shape(col), (n, 1), "mul_col: column must be rows x 1");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    /// Per-row sum, `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowSum(a))
    }

    /// Per-row mean, `n x m -> n x 1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let m = self.shape(a).1 as f64;
        let s = self.row_sum(a);
        self.scale(s, 1.0 / m)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(a).1, "slice_cols: bad range");
        let v = self.value(a).slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Elementwise minimum. Ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "minimum: shape mismatch");
        let v = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.push(v, Op::Minimum(a, b))
    }

    /// Row-wise `log sum exp` over entries where `mask` is true, `n x m -> n x 1`.
    /// Every row must have at least one unmasked entry.
    pub fn masked_logsumexp(&mut self, a: Var, mask: Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "masked_logsumexp: mask shape");
        let mut out = Array2::zeros((x.nrows(), 1));
        for (i, (row, mrow)) in x.outer_iter().zip(mask.outer_iter()).enumerate() {
            out[[i, 0]] = logsumexp_masked(row.iter().copied(), mrow.iter().copied());
        }
        self.push(out, Op::MaskedLogSumExp(a, mask))
    }

    /// Row-wise softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, a: Var, mask: Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "masked_softmax: mask shape");
        let mut out = Array2::zeros(x.dim());
        for ((xr, mr), mut or) in x.outer_iter().zip(mask.outer_iter()).zip(out.outer_iter_mut()) {
            let lse = logsumexp_masked(xr.iter().copied(), mr.iter().copied());
            for ((o, &v), &m) in or.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                *o = if m { (v - lse).exp() } else { 0.0 };
            }
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    /// For `query (b x e)` and `keys ((b * group) x e)`, returns the `b x group`
    /// matrix of dot products between query row `i` and key rows
    /// `i * group .. (i + 1) * group`.
    pub fn group_dots(&mut self, query: Var, keys: Var, group: usize) -> Var {
        let q = self.value(query);
        let k = self.value(keys);
        let (b, e) = q.dim();
        assert_eq!(k.dim(), (b * group, e), "group_dots: key shape");
        let mut out = Array2::zeros((b, group));
        for i in 0..b {
            let qi = q.row(i);
            for j in 0..group {
                out[[i, j]] = qi.dot(&k.row(i * group + j));
            }
        }
        self.push(out, Op::GroupDots { query, keys, group })
    }

    /// For `weights (b x group)` and `values ((b * group) x e)`, returns the
    /// `b x e` matrix whose row `i` is `sum_j weights[i, j] * values[i * group + j]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var, group: usize) -> Var {
        let w = self.value(weights);
        let v = self.value(values);
        let (b, g) = w.dim();
        assert_eq!(g, group, "group_weighted_sum: weight width");
        assert_eq!(v.nrows(), b * group, "group_weighted_sum: value rows");
        let e = v.ncols();
        let mut out = Array2::zeros((b, e));
        for i in 0..b {
            let mut oi = out.row_mut(i);
            for j in 0..group {
                let wij = w[[i, j]];
                if wij != 0.0 {
                    oi.scaled_add(wij, &v.row(i * group + j));
                }
            }
        }
        self.push(out, Op::GroupWeightedSum { weights, values, group })
    }

    /// Gradients of `sum(output)` with respect to every node on the tape.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::AddCol(a, col) => {
                    let gc = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * self.value(*col);
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / self.value(*a)),
                Op::Softplus(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| 0.5 * g / y);
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| 2.0 * g * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = Zip::from(&g).and(&node.value).map_collect(|&g, &y| -g * y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let shape = self.shape(*a);
                    let ga = Array2::from_elem(shape, g[[0, 0]] / (shape.0 * shape.1) as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let shape = self.shape(*a);
                    let ga = g.broadcast(shape).expect("row_sum broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        acc(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    let w = g.ncols();
                    ga.slice_mut(ndarray::s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Zip::from(&g).and(va).and(vb).map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                    let gb = Zip::from(&g).and(va).and(vb).map_collect(|&g, &x, &y| if x <= y { 0.0 } else { g });
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MaskedLogSumExp(a, mask) => {
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let lse = node.value[[i, 0]];
                        let gi = g[[i, 0]];
                        for j in 0..x.ncols() {
                            if mask[[i, j]] {
                                ga[[i, j]] = gi * (x[[i, j]] - lse).exp();
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::GroupDots { query, keys, group } => {
                    let q = self.value(*query);
                    let k = self.value(*keys);
                    let mut gq = Array2::zeros(q.dim());
                    let mut gk = Array2::zeros(k.dim());
                    for i in 0..q.nrows() {
                        for j in 0..*group {
                            let gij = g[[i, j]];
                            if gij == 0.0 {
                                continue;
                            }
                            let r = i * group + j;
                            gq.row_mut(i).scaled_add(gij, &k.row(r));
                            gk.row_mut(r).scaled_add(gij, &q.row(i));
                        }
                    }
                    acc(&mut grads, *query, gq);
                    acc(&mut grads, *keys, gk);
                }
                Op::GroupWeightedSum { weights, values, group } => {
                    let w = self.value(*weights);
                    let v = self.value(*values);
                    let mut gw = Array2::zeros(w.dim());
                    let mut gv = Array2::zeros(v.dim());
                    for i in 0..w.nrows() {
                        let gi = g.row(i);
                        for j in 0..*group {
                            let r = i * group + j;
                            gw[[i, j]] = gi.dot(&v.row(r));
                            let wij = w[[i, j]];
                            if wij != 0.0 {
                                gv.row_mut(r).scaled_add(wij, &gi);
                            }
                        }
                    }
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *values, gv);
                }
            }
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], var: Var, g: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp_masked(values: impl Iterator<Item = f64> + Clone, mask: impl Iterator<Item = bool> + Clone) -> f64 {
    let max = values
        .clone()
        .zip(mask.clone())
        .filter(|(_, m)| *m)
        .map(|(v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(max > f64::NEG_INFINITY || max.is_nan(), "masked reduction over an empty row");
    let s: f64 = values.zip(mask).filter(|(_, m)| *m).map(|(v, _)| (v - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` at `x0`.
    fn numeric_grad(x0: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x0.dim());
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|x| x * x).sum().sqrt();
        let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt()).max(1e-12);
        diff / scale
    }

    fn check(x0: Array2<f64>, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let y = build(&mut t, x);
        let s = t.sum(y);
        let analytic = t.backward(s).get_or_zeros(x, x0.dim());
        let numeric = numeric_grad(&x0, |xv| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let y = build(&mut t, x);
            t.value(y).sum()
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < 1e-6, "relative error {e}\nanalytic {analytic}\nnumeric {numeric}");
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(sample(), |t, x| t.tanh(x));
        check(sample(), |t, x| t.exp(x));
        check(sample(), |t, x| t.softplus(x));
        check(sample(), |t, x| t.square(x));
        check(sample(), |t, x| {
            let y = t.square(x);
            let y = t.add_scalar(y, 1.0);
            let y = t.sqrt(y);
            t.recip(y)
        });
        check(sample(), |t, x| {
            let y = t.exp(x);
            t.log(y)
        });
        check(sample(), |t, x| t.relu(x));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let w0 = array![[0.2, -0.1], [0.5, 0.3], [-0.4, 0.9]];
        check(sample(), move |t, x| {
            let w = t.leaf(w0.clone());
            let y = t.matmul(x, w);
            t.square(y)
        });
        check(sample(), |t, x| {
            let xt = t.transpose(x);
            let y = t.matmul(x, xt);
            t.tanh(y)
        });
        check(sample(), |t, x| {
            let a = t.slice_cols(x, 0, 2);
            let b = t.slice_cols(x, 1, 3);
            let m = t.minimum(a, b);
            let p = t.mul(a, m);
            t.concat_cols(&[p, x])
        });
        check(sample(), |t, x| {
            let rs = t.row_mean(x);
            let c = t.add_col(x, rs);
            let c = t.mul_col(c, rs);
            let r = t.slice_cols(x, 0, 3);
            let r = t.slice_cols(r, 0, 3);
            let first = t.transpose(r);
            let first = t.slice_cols(first, 0, 1);
            let first = t.transpose(first);
            let y = t.add_row(c, first);
            t.square(y)
        });
    }

    #[test]
    fn masked_reductions_match_finite_differences() {
        let mask = array![[true, false, true], [true, true, true]];
        let m1 = mask.clone();
        check(sample(), move |t, x| {
            let l = t.masked_logsumexp(x, m1.clone());
            t.square(l)
        });
        let weights = array![[0.5, 2.0, -1.0], [1.0, -0.3, 0.2]];
        check(sample(), move |t, x| {
            let s = t.masked_softmax(x, mask.clone());
            let w = t.leaf(weights.clone());
            t.mul(s, w)
        });
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 100.0, 2.0]]);
        let s = t.masked_softmax(x, array![[true, false, true]]);
        let v = t.value(s);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn group_ops_match_finite_differences() {
        let keys0 = array![[0.1, 0.2, 0.3], [0.0, -0.5, 0.4], [1.0, 0.3, -0.2], [0.7, 0.7, 0.1]];
        check(sample(), move |t, q| {
            let k = t.leaf(keys0.clone());
            let d = t.group_dots(q, k, 2);
            let w = t.masked_softmax(d, array![[true, true], [true, false]]);
            let out = t.group_weighted_sum(w, k, 2);
            t.square(out)
        });
        let q0 = array![[0.3, 0.1, -0.2], [0.5, -0.4, 0.8]];
        check(array![[0.1, 0.2, 0.3], [0.0, -0.5, 0.4], [1.0, 0.3, -0.2], [0.7, 0.7, 0.1]], move |t, k| {
            let q = t.leaf(q0.clone());
            let d = t.group_dots(q, k, 2);
            let w = t.tanh(d);
            t.group_weighted_sum(w, k, 2)
        });
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut t = Tape::new();
        let x = t.leaf(array![[3.0]]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 7.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let d = t.detach(x);
        let y = t.mul(x, d);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
    }
}
