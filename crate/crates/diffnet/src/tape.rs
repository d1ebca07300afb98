//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every node holds a 2-D `f64` matrix. Operations are recorded in
//! evaluation order, so a node's inputs always have smaller indices than
//! the node itself and the backward sweep is a single reverse pass.
//!
//! Shape errors inside primitive ops are programming errors and panic;
//! the network layers in [`crate::nn`] validate user-facing input shapes
//! and return [`DiffnetError::ShapeMismatch`] instead.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{DiffnetError, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Columns(Var, usize),
    Rows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    GaussianLogDensity { x: Var, mean: Var, log_var: Var },
    KlDiagonal { mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Parameters of a [`ParamStore`] bound as leaves on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Broadcast-compatible shapes: identical, or `rhs` is a single row.
fn broadcast_ok(lhs: &Array2<f64>, rhs: &Array2<f64>) -> bool {
    lhs.ncols() == rhs.ncols() && (lhs.nrows() == rhs.nrows() || rhs.nrows() == 1)
}

fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if grad.dim() == shape {
        grad
    } else {
        grad.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
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
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf holding a single row vector.
    pub fn row(&mut self, values: &[f64]) -> Var {
        let arr = Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape");
        self.leaf(arr)
    }

    /// Bind every tensor of `store` as a leaf on this tape.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        let vars = store.iter().map(|(_, t)| self.leaf(t.clone())).collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(broadcast_ok(va, vb), "add shape mismatch {:?} {:?}", va.dim(), vb.dim());
        let out = va + vb;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(broadcast_ok(va, vb), "sub shape mismatch {:?} {:?}", va.dim(), vb.dim());
        let out = va - vb;
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(broadcast_ok(va, vb), "mul shape mismatch {:?} {:?}", va.dim(), vb.dim());
        let out = va * vb;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat row mismatch");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Row-wise concatenation.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("stack column mismatch");
        self.push(out, Op::Stack(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn columns(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::Columns(a, start))
    }

    /// Gather rows by index (indices may repeat).
    pub fn rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(out, Op::Rows(a, idx.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sum across columns: `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a))
    }

    /// Elementwise diagonal-Gaussian log density `log N(x; mean, exp(log_var))`.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, log_var: Var) -> Var {
        let (vx, vm, vl) = (self.value(x), self.value(mean), self.value(log_var));
        assert_eq!(vx.dim(), vm.dim(), "log-density x/mean mismatch");
        assert_eq!(vx.dim(), vl.dim(), "log-density x/log_var mismatch");
        let mut out = Array2::zeros(vx.dim());
        Zip::from(&mut out)
            .and(vx)
            .and(vm)
            .and(vl)
            .for_each(|o, &x, &m, &l| {
                let d = x - m;
                *o = -0.5 * (d * d * (-l).exp() + l + LN_2PI);
            });
        self.push(out, Op::GaussianLogDensity { x, mean, log_var })
    }

    /// Row-wise KL(q ‖ p) between diagonal Gaussians, summed over columns: `n×1`.
    pub fn kl_diagonal(&mut self, mu_q: Var, lv_q: Var, mu_p: Var, lv_p: Var) -> Var {
        let (mq, lq, mp, lp) = (
            self.value(mu_q),
            self.value(lv_q),
            self.value(mu_p),
            self.value(lv_p),
        );
        assert_eq!(mq.dim(), lq.dim(), "kl shape mismatch");
        assert_eq!(mq.dim(), mp.dim(), "kl shape mismatch");
        assert_eq!(mq.dim(), lp.dim(), "kl shape mismatch");
        let mut elem = Array2::zeros(mq.dim());
        Zip::from(&mut elem)
            .and(mq)
            .and(lq)
            .and(mp)
            .and(lp)
            .for_each(|o, &mq, &lq, &mp, &lp| {
                let d = mq - mp;
                *o = 0.5 * (lp - lq + (lq.exp() + d * d) * (-lp).exp() - 1.0);
            });
        let out = elem.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::KlDiagonal { mu_q, lv_q, mu_p, lv_p })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(DiffnetError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    let sb = self.value(*b).dim();
                    accumulate(&mut grads, *b, reduce_to(g.clone(), sb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let sb = self.value(*b).dim();
                    accumulate(&mut grads, *b, reduce_to(-&g, sb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = &g * vb;
                    let gb = reduce_to(&g * va, vb.dim());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x <= 0.0 {
                                *gv = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = &g * &self.value(*a).mapv(sigmoid);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| {
                            if x < *lo || x > *hi {
                                *gv = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::Stack(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        start += h;
                    }
                }
                Op::Columns(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Rows(a, idx) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let ga = Array2::from_elem(va.dim(), g[[0, 0]] / va.len() as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let va = self.value(*a);
                    let ga = g
                        .broadcast(va.dim())
                        .expect("row-sum broadcast")
                        .to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::GaussianLogDensity { x, mean, log_var } => {
                    let (vx, vm, vl) = (self.value(*x), self.value(*mean), self.value(*log_var));
                    let mut gx = Array2::zeros(vx.dim());
                    let mut gl = Array2::zeros(vx.dim());
                    Zip::from(&mut gx)
                        .and(&mut gl)
                        .and(&g)
                        .and(vx)
                        .and(vm)
                        .and(vl)
                        .for_each(|gx, gl, &gv, &x, &m, &l| {
                            let inv = (-l).exp();
                            let d = x - m;
                            *gx = -gv * d * inv;
                            *gl = -0.5 * gv * (1.0 - d * d * inv);
                        });
                    accumulate(&mut grads, *mean, -&gx);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *log_var, gl);
                }
                Op::KlDiagonal { mu_q, lv_q, mu_p, lv_p } => {
                    let (mq, lq, mp, lp) = (
                        self.value(*mu_q),
                        self.value(*lv_q),
                        self.value(*mu_p),
                        self.value(*lv_p),
                    );
                    let dim = mq.dim();
                    let gb = g.broadcast(dim).expect("kl grad broadcast");
                    let mut g_mq = Array2::zeros(dim);
                    let mut g_lq = Array2::zeros(dim);
                    let mut g_lp = Array2::zeros(dim);
                    Zip::from(&mut g_mq)
                        .and(&gb)
                        .and(mq)
                        .and(mp)
                        .and(lp)
                        .for_each(|o, &gv, &mq, &mp, &lp| *o = gv * (mq - mp) * (-lp).exp());
                    Zip::from(&mut g_lq)
                        .and(&gb)
                        .and(lq)
                        .and(lp)
                        .for_each(|o, &gv, &lq, &lp| *o = gv * 0.5 * ((lq - lp).exp() - 1.0));
                    Zip::from(&mut g_lp)
                        .and(&gb)
                        .and(mq)
                        .and(lq)
                        .and(mp)
                        .and(lp)
                        .for_each(|o, &gv, &mq, &lq, &mp, &lp| {
                            let d = mq - mp;
                            *o = gv * 0.5 * (1.0 - (lq.exp() + d * d) * (-lp).exp());
                        });
                    accumulate(&mut grads, *mu_p, -&g_mq);
                    accumulate(&mut grads, *mu_q, g_mq);
                    accumulate(&mut grads, *lv_q, g_lq);
                    accumulate(&mut grads, *lv_p, g_lp);
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar loss with respect to leaf nodes.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient for a leaf, `None` if the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients aligned with the tensors of `store`; disconnected tensors get exact zeros.
    pub fn for_params(&self, bound: &Bound, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .iter()
            .enumerate()
            .map(|(i, (_, t))| match self.get(bound.vars[i]) {
                Some(g) => g.clone(),
                None => Array2::zeros(t.dim()),
            })
            .collect()
    }
}
