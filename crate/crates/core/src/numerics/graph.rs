//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node that
//! holds its forward value and the indices of its inputs, so node order is
//! already a topological order and [`Graph::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! ```
//! use dafec_core::numerics::{Graph, Matrix};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let s = g.sum_all(sq);
//! let grads = g.backward(s).unwrap();
//! assert_eq!(g.value(s).item(), 25.0);
//! assert_eq!(grads.wrt(x).as_slice(), &[6.0, 8.0]);
//! ```

use super::Matrix;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    PairwiseSqDist(Var, Var),
    DropDiagonal(Var),
    LogSoftmaxRows(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    Gather(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that reaches it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Input node: a parameter or a constant. The two differ only in
    /// whether the caller reads its gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a + b` with the single-row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(shape_err("add_row", sa, sb));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(b).as_slice().to_vec();
        for i in 0..sa.0 {
            for (x, c) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += c;
            }
        }
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    fn elementwise(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        Ok(self.value(a).zip_map(self.value(b), f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// `out[i][j] = ‖a_i − b_j‖²` over the rows of `a` and `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("pairwise_sq_dist", sa, sb));
        }
        let (am, bm) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(sa.0, sb.0);
        for i in 0..sa.0 {
            let ai = am.row(i);
            for j in 0..sb.0 {
                out[(i, j)] = ai
                    .iter()
                    .zip(bm.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        Ok(self.push(out, Op::PairwiseSqDist(a, b)))
    }

    /// Removes the diagonal of a square matrix: `m x m` becomes `m x (m−1)`.
    pub fn drop_diagonal(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m != n || m < 2 {
            return Err(Error::invalid(format!(
                "drop_diagonal needs a square matrix of size >= 2, got {m}x{n}"
            )));
        }
        let src = self.value(a);
        let mut out = Matrix::zeros(m, m - 1);
        for i in 0..m {
            let row = src.row(i);
            let dst = out.row_mut(i);
            dst[..i].copy_from_slice(&row[..i]);
            dst[i..].copy_from_slice(&row[i + 1..]);
        }
        Ok(self.push(out, Op::DropDiagonal(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..src.rows() {
            let lse = super::logsumexp(src.row(i));
            for x in out.row_mut(i) {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let sums: Vec<f64> = src.iter_rows().map(|r| r.iter().sum()).collect();
        let n = sums.len();
        let out = Matrix::from_vec(n, 1, sums).expect("column shape");
        self.push(out, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / m.len() as f64;
        self.push(Matrix::scalar(s), Op::MeanAll(a))
    }

    /// `out[i] = a[i][idx[i]]` as an `n x 1` column.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::invalid(format!(
                "gather: {} indices into a {r}x{c} matrix",
                idx.len()
            )));
        }
        let src = self.value(a);
        let vals: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| src[(i, j)]).collect();
        let out = Matrix::from_vec(r, 1, vals).expect("column shape");
        Ok(self.push(out, Op::Gather(a, idx)))
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, up: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = up.matmul(&val(*b).transpose())?;
                let db = val(*a).transpose().matmul(up)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, b) => {
                let mut db = Matrix::zeros(1, up.cols());
                for row in up.iter_rows() {
                    for (d, u) in db.as_mut_slice().iter_mut().zip(row) {
                        *d += u;
                    }
                }
                accumulate(grads, *a, up.clone());
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, up.clone());
                accumulate(grads, *b, up.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, up.clone());
                accumulate(grads, *b, up.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, up.zip_map(val(*b), |u, y| u * y));
                accumulate(grads, *b, up.zip_map(val(*a), |u, x| u * x));
            }
            Op::Scale(a, c) => accumulate(grads, *a, up.map(|u| u * c)),
            Op::AddScalar(a) => accumulate(grads, *a, up.clone()),
            Op::Tanh(a) => {
                accumulate(grads, *a, up.zip_map(&node.value, |u, y| u * (1.0 - y * y)))
            }
            Op::Sigmoid(a) => {
                accumulate(grads, *a, up.zip_map(&node.value, |u, y| u * y * (1.0 - y)))
            }
            Op::Exp(a) => accumulate(grads, *a, up.zip_map(&node.value, |u, y| u * y)),
            Op::Ln(a) => accumulate(grads, *a, up.zip_map(val(*a), |u, x| u / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = up.zip_map(val(*a), |u, x| if x >= lo && x <= hi { u } else { 0.0 });
                accumulate(grads, *a, g);
            }
            Op::PairwiseSqDist(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let mut da = Matrix::zeros(am.rows(), am.cols());
                let mut db = Matrix::zeros(bm.rows(), bm.cols());
                for i in 0..am.rows() {
                    for j in 0..bm.rows() {
                        let u = up[(i, j)];
                        if u == 0.0 {
                            continue;
                        }
                        for k in 0..am.cols() {
                            let diff = 2.0 * u * (am[(i, k)] - bm[(j, k)]);
                            da[(i, k)] += diff;
                            db[(j, k)] -= diff;
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::DropDiagonal(a) => {
                let m = up.rows();
                let mut da = Matrix::zeros(m, m);
                for i in 0..m {
                    let src = up.row(i);
                    let dst = da.row_mut(i);
                    dst[..i].copy_from_slice(&src[..i]);
                    dst[i + 1..].copy_from_slice(&src[i..]);
                }
                accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                // d/dx_j = up_j − softmax_j · Σ_k up_k
                let mut da = up.clone();
                for i in 0..up.rows() {
                    let total: f64 = up.row(i).iter().sum();
                    let logp = node.value.row(i);
                    for (d, lp) in da.row_mut(i).iter_mut().zip(logp) {
                        *d -= lp.exp() * total;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let u = up[(i, 0)];
                    da.row_mut(i).iter_mut().for_each(|x| *x = u);
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let u = up.item();
                accumulate(grads, *a, val(*a).map(|_| u));
            }
            Op::MeanAll(a) => {
                let u = up.item() / val(*a).len() as f64;
                accumulate(grads, *a, val(*a).map(|_| u));
            }
            Op::Gather(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    da[(i, j)] = up[(i, 0)];
                }
                accumulate(grads, *a, da);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, rng: &mut crate::rng::Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Checks d(build)/d(input) against central differences.
    fn check<F>(input: Matrix, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let (r, c) = input.shape();
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out).unwrap();
        let analytic = grads.wrt(x);
        let numeric = finite_diff_grad(
            |p| {
                let mut g = Graph::new();
                let x = g.leaf(Matrix::from_vec(r, c, p.to_vec()).unwrap());
                let out = build(&mut g, x);
                g.value(out).item()
            },
            input.as_slice(),
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(analytic.as_slice(), &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn each_op_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = rng_from_seed(seed);
            let w = random(3, 4, &mut rng);
            let bias = random(1, 4, &mut rng);
            let other = random(5, 3, &mut rng);
            let x = random(5, 3, &mut rng);

            let (w1, b1) = (w.clone(), bias.clone());
            check(x.clone(), move |g, x| {
                let w = g.leaf(w1.clone());
                let b = g.leaf(b1.clone());
                let h = g.matmul(x, w).unwrap();
                let h = g.add_row(h, b).unwrap();
                let h = g.tanh(h);
                g.sum_all(h)
            });
            let w2 = w.clone();
            check(x.clone(), move |g, x| {
                let w = g.leaf(w2.clone());
                let h = g.matmul(x, w).unwrap();
                let s = g.sigmoid(h);
                let s = g.clamp(s, 1e-12, 1.0 - 1e-12);
                let l = g.ln(s);
                g.mean_all(l)
            });
            let o1 = other.clone();
            check(x.clone(), move |g, x| {
                let o = g.leaf(o1.clone());
                let d = g.pairwise_sq_dist(x, o).unwrap();
                let d = g.scale(d, -0.5);
                let lp = g.log_softmax_rows(d);
                let picked = g.gather(lp, vec![0, 1, 2, 3, 4]).unwrap();
                g.mean_all(picked)
            });
            check(x.clone(), |g, x| {
                let d = g.pairwise_sq_dist(x, x).unwrap();
                let d = g.drop_diagonal(d).unwrap();
                let lp = g.log_softmax_rows(d);
                let p = g.exp(lp);
                let plp = g.mul(p, lp).unwrap();
                let h = g.sum_rows(plp);
                let h = g.scale(h, -1.0);
                g.mean_all(h)
            });
            let o2 = other.clone();
            check(x.clone(), move |g, x| {
                let o = g.leaf(o2.clone());
                let a = g.add(x, o).unwrap();
                let b = g.sub(a, x).unwrap();
                let c = g.mul(a, b).unwrap();
                let c = g.add_scalar(c, 2.0);
                let c = g.scale(c, 0.1);
                let e = g.exp(c);
                g.sum_all(e)
            });
        }
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).item(), 7.0);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(1.0));
        let y = g.leaf(Matrix::zeros(2, 3));
        let z = g.scale(x, 2.0);
        let grads = g.backward(z).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y), Matrix::zeros(2, 3));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros(2, 3));
        let b = g.leaf(Matrix::zeros(2, 2));
        assert!(g.add(a, b).is_err());
        assert!(g.matmul(a, a).is_err());
        assert!(g.drop_diagonal(a).is_err());
        assert!(g.pairwise_sq_dist(a, b).is_err());
        assert!(g.backward(a).is_err());
    }
}
