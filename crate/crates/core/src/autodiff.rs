//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are 2-D
//! arrays; scalars are `[1, 1]` and vectors are single rows. Calling
//! [`Tape::backward`] on a scalar node returns gradients for every leaf that
//! was registered with `requires_grad = true`. Nodes whose inputs do not need
//! gradients are never visited on the way back, which is what makes frozen
//! sub-networks cheap.
//!
//! The loss operations (`bce`, `kl_target_pred`, `region_nll`, `masked_mse`)
//! are fused: they evaluate the value and its local gradient in one sweep.

use crate::real::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip, s};
use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cosine and sine tables for a pairwise rotation, shape `[rows, cols / 2]`.
#[derive(Debug, Clone)]
pub struct Rotation<F> {
    pub cos: Array2<F>,
    pub sin: Array2<F>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Array2<F>>),
    Scale(Var, F),
    /// Elementwise map with its pointwise derivative stored at forward time.
    Pointwise(Var, Array2<F>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        rstd: Array1<F>,
    },
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Rotate(Var, Rc<Rotation<F>>),
    CumsumCols(Var),
    /// Scalar-valued function of one input with its full gradient precomputed.
    Reduce(Var, Array2<F>),
}

impl<F> Op<F> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Pointwise(a, _)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Rotate(a, _)
            | Op::CumsumCols(a)
            | Op::Reduce(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
        }
    }
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorder for one forward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Grads<F> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// require gradients or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Rotates consecutive column pairs `(2p, 2p + 1)` of every row by the angle
/// whose cosine and sine are stored at `[row, p]`. With `inverse` the rotation
/// is transposed, which is also its adjoint.
pub fn rotate_pairs<F: Real>(x: ArrayView2<F>, cos: ArrayView2<F>, sin: ArrayView2<F>, inverse: bool) -> Array2<F> {
    let (rows, cols) = x.dim();
    debug_assert_eq!(cos.dim(), (rows, cols / 2));
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for p in 0..cols / 2 {
            let c = cos[[r, p]];
            let sn = if inverse { -sin[[r, p]] } else { sin[[r, p]] };
            let x0 = x[[r, 2 * p]];
            let x1 = x[[r, 2 * p + 1]];
            out[[r, 2 * p]] = x0 * c - x1 * sn;
            out[[r, 2 * p + 1]] = x0 * sn + x1 * c;
        }
    }
    out
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        // Keep the graph small when nothing upstream is trainable.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Registers an input. Only leaves created with `requires_grad` receive
    /// gradients.
    pub fn leaf(&self, value: Array2<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Array2<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Borrow of a node's value. Drop it before recording further operations.
    pub fn value(&self, v: Var) -> Ref<'_, Array2<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_owned(&self, v: Var) -> Array2<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> F {
        let n = self.nodes.borrow();
        let val = &n[v.0].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn unary<R>(&self, a: Var, f: impl FnOnce(&Array2<F>, bool) -> R) -> R {
        let n = self.nodes.borrow();
        f(&n[a.0].value, n[a.0].requires_grad)
    }

    fn binary<R>(&self, a: Var, b: Var, f: impl FnOnce(&Array2<F>, &Array2<F>) -> R) -> R {
        let n = self.nodes.borrow();
        f(&n[a.0].value, &n[b.0].value)
    }

    /// `a · b`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| {
            assert_eq!(x.ncols(), y.nrows(), "matmul inner dimensions");
            x.dot(y)
        });
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| {
            assert_eq!(x.ncols(), y.ncols(), "matmul_nt inner dimensions");
            x.dot(&y.t())
        });
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "add shapes");
            x + y
        });
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let v = self.binary(a, row, |x, r| {
            assert_eq!(r.dim(), (1, x.ncols()), "add_row shapes");
            x + r
        });
        self.push(v, Op::AddRow(a, row))
    }

    /// Adds an `[r, 1]` column to every column of `a`.
    pub fn add_col(&self, a: Var, col: Var) -> Var {
        let v = self.binary(a, col, |x, c| {
            assert_eq!(c.dim(), (x.nrows(), 1), "add_col shapes");
            x + c
        });
        self.push(v, Op::AddCol(a, col))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| {
            assert_eq!(x.dim(), y.dim(), "mul shapes");
            x * y
        });
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_const(&self, a: Var, c: Rc<Array2<F>>) -> Var {
        let v = self.unary(a, |x, _| {
            assert_eq!(x.dim(), c.dim(), "mul_const shapes");
            x * &*c
        });
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let v = self.unary(a, |x, _| x * s);
        self.push(v, Op::Scale(a, s))
    }

    fn pointwise(&self, a: Var, f: impl Fn(F) -> (F, F)) -> Var {
        let (v, d) = self.unary(a, |x, rg| {
            let mut out = Array2::zeros(x.dim());
            let mut der = if rg {
                Array2::zeros(x.dim())
            } else {
                Array2::zeros((0, 0))
            };
            if rg {
                Zip::from(&mut out).and(&mut der).and(x).for_each(|o, d, &xi| {
                    let (y, dy) = f(xi);
                    *o = y;
                    *d = dy;
                });
            } else {
                Zip::from(&mut out).and(x).for_each(|o, &xi| *o = f(xi).0);
            }
            (out, der)
        });
        self.push(v, Op::Pointwise(a, d))
    }

    pub fn silu(&self, a: Var) -> Var {
        let (v, d) = self.unary(a, |x, rg| {
            let x = x.as_standard_layout().into_owned();
            let mut s = x.mapv(|v| -v);
            F::exp_in_place(s.as_slice_mut().expect("standard layout"));
            s.mapv_inplace(|e| F::one() / (F::one() + e));
            let out = &x * &s;
            let der = if rg {
                Zip::from(&s)
                    .and(&x)
                    .map_collect(|&si, &xi| si * (F::one() + xi * (F::one() - si)))
            } else {
                Array2::zeros((0, 0))
            };
            (out, der)
        });
        self.push(v, Op::Pointwise(a, d))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.pointwise(a, |x| {
            if x > F::zero() {
                (x, F::one())
            } else {
                (F::zero(), F::zero())
            }
        })
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.pointwise(a, |x| {
            // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
            let y = x.max(F::zero()) + (-x.abs()).exp().ln_1p();
            (y, sigmoid(x))
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.pointwise(a, |x| {
            let s = sigmoid(x);
            (s, s * (F::one() - s))
        })
    }

    /// Row-wise layer normalization with affine `[1, c]` gain and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (v, xhat, rstd) = {
            let n = self.nodes.borrow();
            let xv = &n[x.0].value;
            let g = &n[gamma.0].value;
            let b = &n[beta.0].value;
            let cols = xv.ncols();
            assert_eq!(g.dim(), (1, cols), "layer_norm gain shape");
            assert_eq!(b.dim(), (1, cols), "layer_norm shift shape");
            let inv_c = F::one() / F::of(cols as f64);
            let mut xhat = Array2::zeros(xv.dim());
            let mut rstd = Array1::zeros(xv.nrows());
            for (r, row) in xv.outer_iter().enumerate() {
                let mean = row.sum() * inv_c;
                let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() * inv_c;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                let mut xr = xhat.row_mut(r);
                Zip::from(&mut xr).and(&row).for_each(|o, &a| *o = (a - mean) * rs);
            }
            let v = &xhat * g + b;
            (v, xhat, rstd)
        };
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let v = self.unary(a, |x, _| {
            let mut out = x.as_standard_layout().into_owned();
            for mut row in out.outer_iter_mut() {
                let m = row.fold(F::neg_infinity(), |m, &v| m.max(v));
                let r = row.as_slice_mut().expect("standard layout");
                r.iter_mut().for_each(|v| *v -= m);
                F::exp_in_place(r);
                let inv = F::one() / r.iter().copied().sum::<F>();
                r.iter_mut().for_each(|v| *v *= inv);
            }
            out
        });
        self.push(v, Op::Softmax(a))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.unary(a, |x, _| x.slice(s![start..start + len, ..]).to_owned());
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let v = self.unary(a, |x, _| x.slice(s![.., start..start + len]).to_owned());
        self.push(v, Op::SliceCols(a, start))
    }

    /// Output row `i` is row `idx[i]` of `a`; indices may repeat.
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.unary(a, |x, _| x.select(Axis(0), &idx));
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| n[p.0].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts")
        };
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| n[p.0].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols row counts")
        };
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Pairwise rotation of columns, see [`rotate_pairs`].
    pub fn rotate(&self, a: Var, rot: Rc<Rotation<F>>) -> Var {
        let v = self.unary(a, |x, _| rotate_pairs(x.view(), rot.cos.view(), rot.sin.view(), false));
        self.push(v, Op::Rotate(a, rot))
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&self, a: Var) -> Var {
        let v = self.unary(a, |x, _| {
            let mut out = x.clone();
            out.accumulate_axis_inplace(Axis(1), |&prev, cur| *cur += prev);
            out
        });
        self.push(v, Op::CumsumCols(a))
    }

    fn reduce(&self, a: Var, value: F, grad: Array2<F>) -> Var {
        self.push(Array2::from_elem((1, 1), value), Op::Reduce(a, grad))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (s, g) = self.unary(a, |x, _| (x.sum(), Array2::ones(x.dim())));
        self.reduce(a, s, g)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, g) = self.unary(a, |x, _| {
            let n = F::of(x.len() as f64);
            (x.sum() / n, Array2::from_elem(x.dim(), F::one() / n))
        });
        self.reduce(a, s, g)
    }

    /// Weighted binary cross-entropy
    /// `Σ w·(−y·ln p − (1−y)·ln(1−p)) / denom` with `p` clamped to
    /// `[eps, 1 − eps]`. The clamp has zero derivative where it is active.
    pub fn bce(&self, p: Var, y: &Array2<F>, w: &Array2<F>, denom: F, eps: F) -> Var {
        let (val, g) = self.unary(p, |pv, _| {
            assert_eq!(pv.dim(), y.dim(), "bce shapes");
            assert_eq!(pv.dim(), w.dim(), "bce weight shape");
            let hi = F::one() - eps;
            let mut total = F::zero();
            let mut grad = Array2::zeros(pv.dim());
            Zip::from(&mut grad)
                .and(pv)
                .and(y)
                .and(w)
                .for_each(|gr, &pi, &yi, &wi| {
                    let pc = pi.max(eps).min(hi);
                    total += wi * (-yi * pc.ln() - (F::one() - yi) * (F::one() - pc).ln());
                    if pi > eps && pi < hi {
                        *gr = wi * (-yi / pc + (F::one() - yi) / (F::one() - pc)) / denom;
                    }
                });
            (total / denom, grad)
        });
        self.reduce(p, val, g)
    }

    /// `KL(q ‖ p̂)` where `p̂` is `p` clamped below at `floor` and renormalized.
    /// `q` must sum to one.
    pub fn kl_target_pred(&self, p: Var, q: &Array2<F>, floor: F) -> Var {
        let (val, g) = self.unary(p, |pv, _| {
            assert_eq!(pv.dim(), q.dim(), "kl shapes");
            let pc = pv.mapv(|x| x.max(floor));
            let total_p = pc.sum();
            let qsum = q.sum();
            let mut kl = F::zero();
            let mut grad = Array2::zeros(pv.dim());
            Zip::from(&mut grad)
                .and(pv)
                .and(&pc)
                .and(q)
                .for_each(|gr, &raw, &pi, &qi| {
                    if qi > F::zero() {
                        kl += qi * (qi / (pi / total_p)).ln();
                    }
                    if raw > floor {
                        *gr = -qi / pi + qsum / total_p;
                    }
                });
            (kl, grad)
        });
        self.reduce(p, val, g)
    }

    /// `−ln(a_t / Σ_r a_r)` with `a_r = Σ_{i ∈ r} p_i`.
    /// `region[i]` is the region of column `i`, `None` for columns that belong
    /// to no region.
    pub fn region_nll(&self, p: Var, region: &[Option<usize>], target: usize, floor: F) -> Var {
        let (val, g) = self.unary(p, |pv, _| {
            assert_eq!(pv.dim(), (1, region.len()), "region_nll shapes");
            let mut at = F::zero();
            let mut total = F::zero();
            for (i, r) in region.iter().enumerate() {
                if let Some(r) = r {
                    total += pv[[0, i]];
                    if *r == target {
                        at += pv[[0, i]];
                    }
                }
            }
            let atc = at.max(floor);
            let val = -(atc / total).ln();
            let mut grad = Array2::zeros(pv.dim());
            for (i, r) in region.iter().enumerate() {
                if let Some(r) = r {
                    let mut d = F::one() / total;
                    if *r == target && at > floor {
                        d -= F::one() / atc;
                    }
                    grad[[0, i]] = d;
                }
            }
            (val, grad)
        });
        self.reduce(p, val, g)
    }

    /// Mean squared error restricted to the listed rows:
    /// `Σ_{i ∈ rows} Σ_j (x_ij − t_ij)² / (|rows| · cols)`.
    pub fn masked_mse(&self, x: Var, target: &Array2<F>, rows: &[usize]) -> Var {
        let (val, g) = self.unary(x, |xv, _| {
            assert_eq!(xv.dim(), target.dim(), "masked_mse shapes");
            let denom = F::of((rows.len() * xv.ncols()) as f64);
            let mut total = F::zero();
            let mut grad = Array2::zeros(xv.dim());
            let two = F::of(2.0);
            for &r in rows {
                let mut gr = grad.row_mut(r);
                Zip::from(&mut gr)
                    .and(xv.row(r))
                    .and(target.row(r))
                    .for_each(|gi, &a, &b| {
                        let d = a - b;
                        total += d * d;
                        *gi = two * d / denom;
                    });
            }
            (total / denom, grad)
        });
        self.reduce(x, val, g)
    }

    /// Gradients of the scalar `root` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, root: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.dim(), (1, 1), "backward needs a scalar root");
        let mut slots: Vec<Option<Array2<F>>> = Vec::with_capacity(root.0 + 1);
        slots.resize_with(root.0 + 1, || None);
        if !nodes[root.0].requires_grad {
            return Grads { slots };
        }
        slots[root.0] = Some(Array2::ones((1, 1)));

        fn slot<'a, F: Real>(
            slots: &'a mut [Option<Array2<F>>],
            nodes: &[Node<F>],
            v: Var,
        ) -> Option<&'a mut Array2<F>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(slots[v.0].get_or_insert_with(|| Array2::zeros(node.value.dim())))
        }

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = slots[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        general_mat_mul(F::one(), &g, &nodes[b.0].value.t(), F::one(), ga);
                    }
                    if let Some(gb) = slot(&mut slots, &nodes, *b) {
                        general_mat_mul(F::one(), &nodes[a.0].value.t(), &g, F::one(), gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        general_mat_mul(F::one(), &g, &nodes[b.0].value, F::one(), ga);
                    }
                    if let Some(gb) = slot(&mut slots, &nodes, *b) {
                        general_mat_mul(F::one(), &g.t(), &nodes[a.0].value, F::one(), gb);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        *ga += &g;
                    }
                    if let Some(gb) = slot(&mut slots, &nodes, *b) {
                        *gb += &g;
                    }
                }
                Op::AddRow(a, r) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        *ga += &g;
                    }
                    if let Some(gr) = slot(&mut slots, &nodes, *r) {
                        *gr += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                }
                Op::AddCol(a, c) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        *ga += &g;
                    }
                    if let Some(gc) = slot(&mut slots, &nodes, *c) {
                        *gc += &g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        Zip::from(ga)
                            .and(&g)
                            .and(&nodes[b.0].value)
                            .for_each(|o, &gi, &bi| *o += gi * bi);
                    }
                    if let Some(gb) = slot(&mut slots, &nodes, *b) {
                        Zip::from(gb)
                            .and(&g)
                            .and(&nodes[a.0].value)
                            .for_each(|o, &gi, &ai| *o += gi * ai);
                    }
                }
                Op::MulConst(a, c) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        Zip::from(ga).and(&g).and(&**c).for_each(|o, &gi, &ci| *o += gi * ci);
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        ga.scaled_add(*s, &g);
                    }
                }
                Op::Pointwise(a, d) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        Zip::from(ga).and(&g).and(d).for_each(|o, &gi, &di| *o += gi * di);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if let Some(gb) = slot(&mut slots, &nodes, *beta) {
                        *gb += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                    if let Some(gg) = slot(&mut slots, &nodes, *gamma) {
                        *gg += &(&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    }
                    if nodes[x.0].requires_grad {
                        let gam = nodes[gamma.0].value.row(0).to_owned();
                        let cols = g.ncols();
                        let inv_c = F::one() / F::of(cols as f64);
                        let gx = slot(&mut slots, &nodes, *x).expect("requires grad");
                        for r in 0..g.nrows() {
                            let dxhat: Array1<F> = &g.row(r) * &gam;
                            let xh = xhat.row(r);
                            let m1 = dxhat.sum() * inv_c;
                            let m2 = (&dxhat * &xh).sum() * inv_c;
                            let rs = rstd[r];
                            let mut out = gx.row_mut(r);
                            Zip::from(&mut out)
                                .and(&dxhat)
                                .and(&xh)
                                .for_each(|o, &d, &h| *o += rs * (d - m1 - h * m2));
                        }
                    }
                }
                Op::Softmax(a) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        let y = &node.value;
                        for r in 0..y.nrows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot = (&yr * &gr).sum();
                            let mut out = ga.row_mut(r);
                            Zip::from(&mut out)
                                .and(&yr)
                                .and(&gr)
                                .for_each(|o, &yi, &gi| *o += yi * (gi - dot));
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        let len = g.nrows();
                        let mut view = ga.slice_mut(s![*start..*start + len, ..]);
                        view += &g;
                    }
                }
                Op::SliceCols(a, start) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        let len = g.ncols();
                        let mut view = ga.slice_mut(s![.., *start..*start + len]);
                        view += &g;
                    }
                }
                Op::GatherRows(a, idx) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        for (i, &src) in idx.iter().enumerate() {
                            let mut row = ga.row_mut(src);
                            row += &g.row(i);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.nrows();
                        if let Some(gp) = slot(&mut slots, &nodes, *p) {
                            *gp += &g.slice(s![offset..offset + len, ..]);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.ncols();
                        if let Some(gp) = slot(&mut slots, &nodes, *p) {
                            *gp += &g.slice(s![.., offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::Rotate(a, rot) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        *ga += &rotate_pairs(g.view(), rot.cos.view(), rot.sin.view(), true);
                    }
                }
                Op::CumsumCols(a) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        // reverse running sum
                        for r in 0..g.nrows() {
                            let mut acc = F::zero();
                            for c in (0..g.ncols()).rev() {
                                acc += g[[r, c]];
                                ga[[r, c]] += acc;
                            }
                        }
                    }
                }
                Op::Reduce(a, local) => {
                    if let Some(ga) = slot(&mut slots, &nodes, *a) {
                        ga.scaled_add(g[[0, 0]], local);
                    }
                }
            }
        }
        Grads { slots }
    }
}
