//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every model in the crate records its forward pass on a [`Tape`]; calling
//! [`Tape::backward`] walks the recorded nodes in reverse and accumulates
//! gradients. All values are 2-D (`[rows, cols]`); scalars are `[1, 1]`.
//!
//! Constants (created with [`Tape::constant`]) never receive gradients and
//! neither does anything computed only from constants, which is how gradient
//! stopping is expressed: re-inserting a value as a constant cuts the graph.

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Powf(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    NormRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    SqDist(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    stopped: RefCell<Vec<Array2<f64>>>,
    replay: Option<Vec<Array2<f64>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose `detach` calls return `values` in order instead of their
    /// inputs, so a perturbed forward pass sees the same stopped quantities.
    pub fn replaying(values: Vec<Array2<f64>>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
    }

    /// Values produced by `detach`, in call order.
    pub fn stopped_values(&self) -> Vec<Array2<f64>> {
        self.stopped.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copy of `v` detached from the graph.
    pub fn detach(&self, v: Var) -> Var {
        let i = self.stopped.borrow().len();
        let value = match self.replay.as_ref().and_then(|r| r.get(i)) {
            Some(r) => r.clone(),
            None => self.value(v).clone(),
        };
        self.stopped.borrow_mut().push(value.clone());
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `[1, 1]` node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn unary(&self, a: Var, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = f(&self.value(a));
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: Op,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `[1, n]` row over every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(a, row, |x, r| x + r, Op::AddRow(a, row))
    }

    /// `a * col`, broadcasting a `[n, 1]` column over every column of `a`.
    pub fn mul_col(&self, a: Var, col: Var) -> Var {
        self.binary(a, col, |x, c| x * c, Op::MulCol(a, col))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), Op::Log(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v * v), Op::Square(a))
    }

    pub fn powf(&self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.mapv(|v| v.powf(p)), Op::Powf(a, p))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for mut row in out.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    row.mapv_inplace(|v| v - lse);
                }
                out
            },
            Op::LogSoftmaxRows(a),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = {
            let v = self.value(a);
            (v.nrows() * v.ncols()) as f64
        };
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `[n, k] -> [n, 1]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        self.unary(a, |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::SumRows(a))
    }

    /// Euclidean norm of each row, `[n, k] -> [n, 1]`. The gradient at a zero
    /// row is taken as zero.
    pub fn norm_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
                    .insert_axis(Axis(1))
            },
            Op::NormRows(a),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![.., start..end]).to_owned(), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
        };
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), tracked)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![start..end, ..]).to_owned(), Op::SliceRows(a, start))
    }

    /// `out[i] = a[idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &idx);
        let tracked = self.tracked(a);
        self.push(value, Op::GatherRows(a, idx), tracked)
    }

    /// `out[i, 0] = a[i, idx[i]]`.
    pub fn pick_cols(&self, a: Var, idx: Vec<usize>) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(idx.len(), x.nrows(), "pick_cols: one index per row");
            Array2::from_shape_fn((idx.len(), 1), |(i, _)| x[[i, idx[i]]])
        };
        let tracked = self.tracked(a);
        self.push(value, Op::PickCols(a, idx), tracked)
    }

    /// Pairwise squared Euclidean distances, `[n, m] x [k, m] -> [n, k]`.
    pub fn sq_dist(&self, z: Var, centers: Var) -> Var {
        self.binary(z, centers, pairwise_sq_dist, Op::SqDist(z, centers))
    }

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, delta: Array2<f64>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].tracked {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if nodes[b.0].tracked {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * val(*b));
                    acc(*b, &g * val(*a));
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &g * val(*c));
                    acc(*c, gc);
                }
                Op::Scale(a, k) => acc(*a, &g * *k),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Tanh(a) => {
                    let mut d = node.value.mapv(|y| 1.0 - y * y);
                    d *= &g;
                    acc(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = node.value.mapv(|y| y * (1.0 - y));
                    d *= &g;
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, &g * &node.value),
                Op::Log(a) => acc(*a, &g / val(*a)),
                Op::Square(a) => acc(*a, &g * &(val(*a) * 2.0)),
                Op::Powf(a, p) => {
                    let p = *p;
                    let mut d = val(*a).mapv(|x| p * x.powf(p - 1.0));
                    d *= &g;
                    acc(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, gy - y * &dot);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, &g - &(sm * &gsum));
                }
                Op::SumAll(a) => {
                    let shape = val(*a).dim();
                    acc(*a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let shape = val(*a).dim();
                    let mut d = Array2::zeros(shape);
                    Zip::from(d.rows_mut())
                        .and(g.rows())
                        .for_each(|mut r, gr| r.fill(gr[0]));
                    acc(*a, d);
                }
                Op::NormRows(a) => {
                    let x = val(*a);
                    let mut d = x.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let n = node.value[[i, 0]];
                        if n > 0.0 {
                            row *= g[[i, 0]] / n;
                        } else {
                            row.fill(0.0);
                        }
                    }
                    acc(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    let h = g.nrows();
                    d.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (i, &j) in idx.iter().enumerate() {
                        let mut row = d.row_mut(j);
                        row += &g.row(i);
                    }
                    acc(*a, d);
                }
                Op::PickCols(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (i, &j) in idx.iter().enumerate() {
                        d[[i, j]] += g[[i, 0]];
                    }
                    acc(*a, d);
                }
                Op::SqDist(z, c) => {
                    // d/dz_i = 2 sum_k g_ik (z_i - c_k); d/dc_k = -2 sum_i g_ik (z_i - c_k)
                    let zv = val(*z);
                    let cv = val(*c);
                    let gsum_rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gsum_cols = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    if nodes[z.0].tracked {
                        let dz = (zv * &gsum_rows - g.dot(cv)) * 2.0;
                        acc(*z, dz);
                    }
                    if nodes[c.0].tracked {
                        let dc = (cv * &gsum_cols - g.t().dot(zv)) * 2.0;
                        acc(*c, dc);
                    }
                }
            }
        }
        Gradients { grads }
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

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

pub fn pairwise_sq_dist(z: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((z.nrows(), c.nrows()));
    for (i, zr) in z.rows().into_iter().enumerate() {
        for (k, cr) in c.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (a, b) in zr.iter().zip(cr.iter()) {
                let d = a - b;
                acc += d * d;
            }
            out[[i, k]] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build(x))/dx against the tape.
    fn check(x0: Array2<f64>, build: impl Fn(&Tape, Var) -> Var) {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = build(&tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get_or_zeros(x, x0.dim());
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let t = Tape::new();
                let v = t.constant(xp);
                let out = build(&t, v);
                t.item(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5, "grad mismatch at {idx}: {a} vs {numeric}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        check(x.clone(), |t, v| {
            let a = t.tanh(v);
            let b = t.sigmoid(v);
            let c = t.mul(a, b);
            let d = t.exp(t.scale(c, 0.5));
            let e = t.square(t.sub(d, a));
            t.sum(t.add_scalar(e, 1.0))
        });
        check(x.mapv(|v| v.abs() + 0.5), |t, v| {
            let l = t.log(v);
            let p = t.powf(v, -1.3);
            t.sum(t.add(l, p))
        });
    }

    #[test]
    fn matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let x = random(&mut rng, 5, 4);
        check(x.clone(), |t, v| {
            let wv = t.constant(w.clone());
            let rv = t.constant(row.clone());
            let h = t.add_row(t.matmul(v, wv), rv);
            let sm = t.softmax_rows(h);
            let ls = t.log_softmax_rows(h);
            t.sum(t.mul(sm, ls))
        });
        check(w.clone(), |t, v| {
            let xv = t.constant(x.clone());
            let h = t.matmul(xv, v);
            let n = t.norm_rows(h);
            let col = t.sum_rows(t.square(h));
            t.sum(t.mul_col(t.concat_cols(&[n, col]), n))
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 3);
        let c = random(&mut rng, 4, 3);
        check(x.clone(), |t, v| {
            let top = t.slice_rows(v, 0, 3);
            let bottom = t.slice_rows(v, 3, 6);
            let mixed = t.concat_rows(&[bottom, top]);
            let g = t.gather_rows(mixed, vec![0, 0, 5, 2]);
            let cols = t.slice_cols(g, 1, 3);
            let p = t.pick_cols(cols, vec![0, 1, 1, 0]);
            t.sum(t.square(p))
        });
        check(x.clone(), |t, v| {
            let cv = t.constant(c.clone());
            let d = t.sq_dist(v, cv);
            t.sum(t.powf(t.add_scalar(d, 1.0), -0.7))
        });
        check(c.clone(), |t, v| {
            let xv = t.constant(x.clone());
            let d = t.sq_dist(xv, v);
            t.sum(t.log_softmax_rows(t.scale(d, -1.0)))
        });
    }

    #[test]
    fn constants_do_not_receive_gradient() {
        let tape = Tape::new();
        let a = tape.param(array![[1.0, 2.0]]);
        let b = tape.constant(array![[3.0, 4.0]]);
        let d = tape.detach(a);
        let y = tape.sum(tape.mul(tape.add(a, b), d));
        let g = tape.backward(y);
        assert!(g.get(b).is_none());
        assert!(g.get(d).is_none());
        assert_eq!(g.get(a).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn norm_rows_has_zero_subgradient_at_origin() {
        let tape = Tape::new();
        let a = tape.param(array![[0.0, 0.0], [3.0, 4.0]]);
        let y = tape.sum(tape.norm_rows(a));
        assert_eq!(tape.item(y), 5.0);
        let g = tape.backward(y);
        let ga = g.get(a).unwrap();
        assert_eq!(ga.row(0).to_vec(), vec![0.0, 0.0]);
        assert!((ga[[1, 0]] - 0.6).abs() < 1e-12 && (ga[[1, 1]] - 0.8).abs() < 1e-12);
    }
}
