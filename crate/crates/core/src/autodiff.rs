//! A small reverse-mode differentiation tape over dense matrices.
//!
//! Every node holds a `DMatrix<f64>` value. Operations record a backward
//! closure that maps the adjoint of the output onto adjoint contributions for
//! each parent. Scalars are 1x1 matrices.
//!
//! The tape is single-threaded (`Rc`/`RefCell`). Parallel callers build one
//! tape per worker and move plain matrices between them.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

type Mat = DMatrix<f64>;
type Backward = Box<dyn Fn(&Mat) -> Vec<(usize, Mat)>>;

struct Node {
    value: Rc<Mat>,
    backward: Option<Backward>,
}

/// Records a computation so that adjoints can be propagated back to leaves.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            record: true,
        }
    }

    /// A tape that evaluates values only; `backward` on it yields zeros.
    pub fn forward_only() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_element(1, 1, value))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Mat::from_column_slice(values.len(), 1, values))
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Mat::from_row_slice(1, values.len(), values))
    }

    pub fn identity(&self, n: usize) -> Var<'_> {
        self.leaf(Mat::identity(n, n))
    }

    fn push(&self, value: Mat, backward: Option<Backward>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            backward: if self.record { backward } else { None },
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Propagates the given output adjoints back through the tape.
    ///
    /// Seeds may name any nodes; adjoints are accumulated before a node's
    /// backward closure runs, so seeding an interior node is valid.
    pub fn backward_from(&self, seeds: &[(Var<'_>, Mat)]) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Mat>> = vec![None; nodes.len()];
        let mut top = 0;
        for (var, seed) in seeds {
            assert!(std::ptr::eq(var.tape, self), "seed belongs to another tape");
            let shape = nodes[var.id].value.shape();
            assert_eq!(seed.shape(), shape, "seed shape mismatch");
            accumulate(&mut adj[var.id], seed.clone());
            top = top.max(var.id + 1);
        }
        for id in (0..top).rev() {
            let Some(node_adj) = adj[id].take() else {
                continue;
            };
            if let Some(bw) = &nodes[id].backward {
                for (parent, contrib) in bw(&node_adj) {
                    debug_assert!(parent < id);
                    accumulate(&mut adj[parent], contrib);
                }
            }
            adj[id] = Some(node_adj);
        }
        Gradients { adj }
    }

    /// Gradient of a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert_eq!(output.shape(), (1, 1), "backward needs a scalar output");
        self.backward_from(&[(output, Mat::from_element(1, 1, 1.0))])
    }
}

fn accumulate(slot: &mut Option<Mat>, contrib: Mat) {
    match slot {
        Some(acc) => *acc += contrib,
        None => *slot = Some(contrib),
    }
}

/// Adjoints indexed by node.
pub struct Gradients {
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `var`, zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Mat {
        match self.adj.get(var.id).and_then(|a| a.as_ref()) {
            Some(a) => a.clone(),
            None => {
                let (r, c) = var.shape();
                Mat::zeros(r, c)
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

fn lower_tri(m: &Mat) -> Mat {
    let mut out = m.clone();
    let n = out.nrows();
    for j in 0..out.ncols() {
        for i in 0..j.min(n) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// tril with halved diagonal.
fn phi(m: &Mat) -> Mat {
    let mut out = lower_tri(m);
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] *= 0.5;
    }
    out
}

/// Solves `l x = b` for lower-triangular `l`.
pub(crate) fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    let mut x = b.clone();
    let ok = l.solve_lower_triangular_mut(&mut x);
    debug_assert!(ok);
    x
}

/// Solves `lᵀ x = b` for lower-triangular `l`.
pub(crate) fn solve_lower_t(l: &Mat, b: &Mat) -> Mat {
    let mut x = b.clone();
    let ok = l.tr_solve_lower_triangular_mut(&mut x);
    debug_assert!(ok);
    x
}

/// Adjoint of `a ↦ chol(a)` for symmetric `a`, given `l` and `l̄`.
pub(crate) fn cholesky_adjoint(l: &Mat, l_bar: &Mat) -> Mat {
    let p = phi(&(l.transpose() * l_bar));
    let tmp = solve_lower_t(l, &p);
    let s = solve_lower_t(l, &tmp.transpose());
    (&s + s.transpose()) * 0.5
}

/// Lower Cholesky factor or `None` when `a` is not numerically positive definite.
pub(crate) fn cholesky_lower(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars on different tapes");
    }

    fn unary(self, value: Mat, bw: impl Fn(&Mat) -> Mat + 'static) -> Var<'t> {
        let p = self.id;
        self.tape
            .push(value, Some(Box::new(move |g| vec![(p, bw(g))])))
    }

    fn binary(
        self,
        other: Var<'t>,
        value: Mat,
        bw: impl Fn(&Mat) -> (Mat, Mat) + 'static,
    ) -> Var<'t> {
        self.same_tape(&other);
        let (a, b) = (self.id, other.id);
        self.tape.push(
            value,
            Some(Box::new(move |g| {
                let (ga, gb) = bw(g);
                vec![(a, ga), (b, gb)]
            })),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.binary(other, v, |g| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.binary(other, v, |g| (g.clone(), -g))
    }

    pub fn neg(self) -> Var<'t> {
        let v = -&*self.value();
        self.unary(v, |g| -g)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.unary(v, move |g| g * c)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g| g.clone())
    }

    /// Matrix product.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = &*a * &*b;
        self.binary(other, v, move |g| (g * b.transpose(), a.transpose() * g))
    }

    /// `selfᵀ · other` without materializing the transpose on the tape.
    pub fn tr_matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = a.tr_mul(&b);
        self.binary(other, v, move |g| (&*b * g.transpose(), &*a * g))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, |g| g.transpose())
    }

    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = a.component_mul(&b);
        self.binary(other, v, move |g| (g.component_mul(&b), g.component_mul(&a)))
    }

    /// Multiplies every entry by a 1x1 variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value());
        let c = sv[(0, 0)];
        let v = &*a * c;
        self.binary(s, v, move |g| {
            (g * c, Mat::from_element(1, 1, g.dot(&a)))
        })
    }

    /// Scales row `r` by `v[r]`, with `v` a column vector.
    pub fn scale_rows(self, v: Var<'t>) -> Var<'t> {
        let (a, s) = (self.value(), v.value());
        assert_eq!(s.shape(), (a.nrows(), 1));
        let mut out = (*a).clone();
        for (r, mut row) in out.row_iter_mut().enumerate() {
            row *= s[(r, 0)];
        }
        self.binary(v, out, move |g| {
            let mut ga = g.clone();
            let mut gs = Mat::zeros(s.nrows(), 1);
            for r in 0..ga.nrows() {
                gs[(r, 0)] = g.row(r).dot(&a.row(r));
                let mut row = ga.row_mut(r);
                row *= s[(r, 0)];
            }
            (ga, gs)
        })
    }

    /// Adds a 1×c row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), row.value());
        assert_eq!(b.shape(), (1, a.ncols()));
        let mut out = (*a).clone();
        for mut r in out.row_iter_mut() {
            r += &*b;
        }
        self.binary(row, out, |g| {
            let s = g.row_sum();
            (g.clone(), Mat::from_row_slice(1, s.len(), s.as_slice()))
        })
    }

    /// Multiplies column `c` by `row[c]`.
    pub fn scale_cols(self, row: Var<'t>) -> Var<'t> {
        let (a, s) = (self.value(), row.value());
        assert_eq!(s.shape(), (1, a.ncols()));
        let mut out = (*a).clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            col *= s[(0, c)];
        }
        self.binary(row, out, move |g| {
            let mut ga = g.clone();
            let mut gs = Mat::zeros(1, s.ncols());
            for c in 0..ga.ncols() {
                gs[(0, c)] = g.column(c).dot(&a.column(c));
                let mut col = ga.column_mut(c);
                col *= s[(0, c)];
            }
            (ga, gs)
        })
    }

    pub fn sum(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.shape();
        let v = Mat::from_element(1, 1, a.sum());
        self.unary(v, move |g| Mat::from_element(r, c, g[(0, 0)]))
    }

    pub fn sum_squares(self) -> Var<'t> {
        let a = self.value();
        let v = Mat::from_element(1, 1, a.norm_squared());
        self.unary(v, move |g| &*a * (2.0 * g[(0, 0)]))
    }

    /// Sum of entries of `self ⊙ other`.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let v = Mat::from_element(1, 1, a.dot(&b));
        self.binary(other, v, move |g| (&*b * g[(0, 0)], &*a * g[(0, 0)]))
    }

    /// Column-wise dot products: output `ncols × 1`, entry `c` = `self[:,c]·other[:,c]`.
    pub fn col_dots(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape());
        let v = Mat::from_fn(a.ncols(), 1, |c, _| a.column(c).dot(&b.column(c)));
        self.binary(other, v, move |g| {
            let mut ga = (*b).clone();
            let mut gb = (*a).clone();
            for c in 0..ga.ncols() {
                let w = g[(c, 0)];
                ga.column_mut(c).scale_mut(w);
                gb.column_mut(c).scale_mut(w);
            }
            (ga, gb)
        })
    }

    pub fn map_elementwise(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let v = a.map(f);
        let out = v.clone();
        self.unary(v, move |g| {
            Mat::from_fn(g.nrows(), g.ncols(), |i, j| {
                g[(i, j)] * df(a[(i, j)], out[(i, j)])
            })
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.map_elementwise(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.map_elementwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn softplus(self) -> Var<'t> {
        self.map_elementwise(softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.map_elementwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `a·x + (1−a)·tanh(x)`.
    pub fn leaky_tanh(self, slope: f64) -> Var<'t> {
        self.map_elementwise(
            move |x| slope * x + (1.0 - slope) * x.tanh(),
            move |x, _| {
                let t = x.tanh();
                slope + (1.0 - slope) * (1.0 - t * t)
            },
        )
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.map_elementwise(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn square(self) -> Var<'t> {
        self.map_elementwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(self) -> Var<'t> {
        self.map_elementwise(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sub_matrix(self, r0: usize, c0: usize, nr: usize, nc: usize) -> Var<'t> {
        let a = self.value();
        let (rows, cols) = a.shape();
        let v = a.view((r0, c0), (nr, nc)).into_owned();
        self.unary(v, move |g| {
            let mut out = Mat::zeros(rows, cols);
            out.view_mut((r0, c0), (nr, nc)).copy_from(g);
            out
        })
    }

    pub fn rows(self, r0: usize, nr: usize) -> Var<'t> {
        let nc = self.shape().1;
        self.sub_matrix(r0, 0, nr, nc)
    }

    pub fn columns(self, c0: usize, nc: usize) -> Var<'t> {
        let nr = self.shape().0;
        self.sub_matrix(0, c0, nr, nc)
    }

    pub fn column_at(self, c: usize) -> Var<'t> {
        self.columns(c, 1)
    }

    pub fn entry(self, r: usize, c: usize) -> Var<'t> {
        self.sub_matrix(r, c, 1, 1)
    }

    /// Diagonal as a column vector.
    pub fn diag(self) -> Var<'t> {
        let a = self.value();
        let (r, c) = a.shape();
        let n = r.min(c);
        let v = Mat::from_fn(n, 1, |i, _| a[(i, i)]);
        self.unary(v, move |g| {
            let mut out = Mat::zeros(r, c);
            for i in 0..n {
                out[(i, i)] = g[(i, 0)];
            }
            out
        })
    }

    /// Adds `s·I` for a 1x1 variable `s`.
    pub fn add_scaled_identity(self, s: Var<'t>) -> Var<'t> {
        let (a, sv) = (self.value(), s.value());
        assert_eq!(a.nrows(), a.ncols());
        let mut v = (*a).clone();
        for i in 0..v.nrows() {
            v[(i, i)] += sv[(0, 0)];
        }
        self.binary(s, v, |g| (g.clone(), Mat::from_element(1, 1, g.trace())))
    }

    /// Lower Cholesky factor. Returns `None` if the matrix is not positive definite.
    pub fn cholesky(self) -> Option<Var<'t>> {
        let a = self.value();
        let l = cholesky_lower(&a)?;
        let lc = l.clone();
        Some(self.unary(l, move |g| cholesky_adjoint(&lc, &lower_tri(g))))
    }

    /// `x = self⁻¹ b` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let x = solve_lower(&l, &b.value());
        let xc = x.clone();
        self.binary(b, x, move |g| {
            let gb = solve_lower_t(&l, g);
            let gl = lower_tri(&(-(&gb * xc.transpose())));
            (gl, gb)
        })
    }

    /// `x = self⁻ᵀ b` for lower-triangular `self`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let x = solve_lower_t(&l, &b.value());
        let xc = x.clone();
        self.binary(b, x, move |g| {
            let gb = solve_lower(&l, g);
            let gl = lower_tri(&(-(&xc * gb.transpose())));
            (gl, gb)
        })
    }

    /// `2·Σ ln L_ii`, the log-determinant of `L Lᵀ`.
    pub fn chol_logdet(self) -> Var<'t> {
        let l = self.value();
        let n = l.nrows();
        let v: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        self.unary(Mat::from_element(1, 1, v), move |g| {
            let mut out = Mat::zeros(n, n);
            for i in 0..n {
                out[(i, i)] = 2.0 * g[(0, 0)] / l[(i, i)];
            }
            out
        })
    }

    /// Record a custom node with explicit value and per-parent backward maps.
    pub fn custom(
        parents: &[Var<'t>],
        value: Mat,
        backward: impl Fn(&Mat) -> Vec<Mat> + 'static,
    ) -> Var<'t> {
        let tape = parents[0].tape;
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                assert!(std::ptr::eq(p.tape, tape), "vars on different tapes");
                p.id
            })
            .collect();
        tape.push(
            value,
            Some(Box::new(move |g| {
                let grads = backward(g);
                debug_assert_eq!(grads.len(), ids.len());
                ids.iter().copied().zip(grads).collect()
            })),
        )
    }
}

/// Horizontal concatenation.
pub fn hcat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let rows = values[0].nrows();
    let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Mat::zeros(rows, total);
    let mut c = 0;
    for v in &values {
        assert_eq!(v.nrows(), rows);
        out.view_mut((0, c), (rows, v.ncols())).copy_from(&**v);
        c += v.ncols();
    }
    Var::custom(parts, out, move |g| {
        let mut c = 0;
        widths
            .iter()
            .map(|&w| {
                let part = g.view((0, c), (rows, w)).into_owned();
                c += w;
                part
            })
            .collect()
    })
}

/// Vertical concatenation.
pub fn vcat<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let cols = values[0].ncols();
    let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
    let total: usize = heights.iter().sum();
    let mut out = Mat::zeros(total, cols);
    let mut r = 0;
    for v in &values {
        assert_eq!(v.ncols(), cols);
        out.view_mut((r, 0), (v.nrows(), cols)).copy_from(&**v);
        r += v.nrows();
    }
    Var::custom(parts, out, move |g| {
        let mut r = 0;
        heights
            .iter()
            .map(|&h| {
                let part = g.view((r, 0), (h, cols)).into_owned();
                r += h;
                part
            })
            .collect()
    })
}

/// Block-diagonal matrix from the given blocks.
pub fn block_diag<'t>(parts: &[Var<'t>]) -> Var<'t> {
    let values: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
    let shapes: Vec<(usize, usize)> = values.iter().map(|v| v.shape()).collect();
    let rows: usize = shapes.iter().map(|s| s.0).sum();
    let cols: usize = shapes.iter().map(|s| s.1).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for v in &values {
        out.view_mut((r, c), v.shape()).copy_from(&**v);
        r += v.nrows();
        c += v.ncols();
    }
    Var::custom(parts, out, move |g| {
        let (mut r, mut c) = (0, 0);
        shapes
            .iter()
            .map(|&s| {
                let part = g.view((r, c), s).into_owned();
                r += s.0;
                c += s.1;
                part
            })
            .collect()
    })
}

/// Square block matrix from a row-major `n × n` grid of equally sized blocks.
/// `None` entries are zero blocks of size `bs × bs`.
pub fn block_grid<'t>(grid: &[Vec<Option<Var<'t>>>], bs: usize) -> Var<'t> {
    let n = grid.len();
    let mut parents = Vec::new();
    let mut slots = Vec::new();
    let mut out = Mat::zeros(n * bs, n * bs);
    for (bi, row) in grid.iter().enumerate() {
        assert_eq!(row.len(), n);
        for (bj, blk) in row.iter().enumerate() {
            if let Some(v) = blk {
                let val = v.value();
                assert_eq!(val.shape(), (bs, bs));
                out.view_mut((bi * bs, bj * bs), (bs, bs)).copy_from(&*val);
                parents.push(*v);
                slots.push((bi, bj));
            }
        }
    }
    Var::custom(&parents, out, move |g| {
        slots
            .iter()
            .map(|&(bi, bj)| g.view((bi * bs, bj * bs), (bs, bs)).into_owned())
            .collect()
    })
}

/// Inverse of softplus, for initializing raw parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn softplus_f64(x: f64) -> f64 {
    softplus(x)
}

pub fn sigmoid_f64(x: f64) -> f64 {
    sigmoid(x)
}
