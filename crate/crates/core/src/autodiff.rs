//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records one forward pass as a tape of nodes; [`Graph::backward`]
//! replays it in reverse and accumulates gradients into a [`ParamStore`].
//! Everything is two-dimensional: row vectors are `1×C` matrices, scalars are
//! `1×1`. The graph also keeps a shape audit of every allocated node so tests
//! can assert that no quadratic-in-frames intermediate is ever materialized.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Matrix = Array2<f64>;

/// Handle to a named parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Rc<Matrix>,
    grad: Matrix,
    adam_m: Matrix,
    adam_v: Matrix,
}

/// Registry of learnable tensors with their gradients and optimizer state.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name. Panics on duplicate names:
    /// those are construction bugs, not runtime conditions.
    pub fn register(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.entries.len());
        let shape = value.raw_dim();
        self.entries.push(ParamEntry {
            name: name.clone(),
            value: Rc::new(value),
            grad: Matrix::zeros(shape),
            adam_m: Matrix::zeros(shape),
            adam_v: Matrix::zeros(shape),
        });
        self.by_name.insert(name, id);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    fn value_rc(&self, id: ParamId) -> Rc<Matrix> {
        Rc::clone(&self.entries[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(value.raw_dim(), self.entries[id.0].value.raw_dim());
        self.entries[id.0].value = Rc::new(value);
    }

    /// Mutable access for in-place updates (optimizer steps, perturbations).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.mapv_inplace(|g| g * factor);
        }
    }

    /// One Adam update with bias correction. `step` starts at 1.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64) {
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for e in &mut self.entries {
            ndarray::Zip::from(&mut e.adam_m)
                .and(&e.grad)
                .for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            ndarray::Zip::from(&mut e.adam_v)
                .and(&e.grad)
                .for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let value = Rc::make_mut(&mut e.value);
            ndarray::Zip::from(value)
                .and(&e.adam_m)
                .and(&e.adam_v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// One value in the computation graph. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    id: usize,
    value: Rc<Matrix>,
}

const NO_NODE: usize = usize::MAX;

impl Var {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.value.len(), 1);
        self.value[[0, 0]]
    }
}

type BackFn = Box<dyn Fn(&Matrix) -> Matrix>;

struct Node {
    /// (parent node id, gradient contribution given this node's gradient)
    inputs: Vec<(usize, BackFn)>,
}

/// Running record of every matrix allocated through the graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShapeAudit {
    /// Largest value of `min(rows, cols)` seen. A `T×T` intermediate would
    /// push this to `T`.
    pub max_min_dim: usize,
    /// Largest element count seen.
    pub max_area: usize,
}

/// Records one forward pass. In eval mode no tape is kept and values are
/// freed as soon as their `Var`s drop; the shape audit is kept either way.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    train: bool,
    rng: Option<RefCell<ChaCha8Rng>>,
    param_leaves: RefCell<Vec<(ParamId, usize)>>,
    param_cache: RefCell<HashMap<ParamId, Var>>,
    audit: RefCell<ShapeAudit>,
}

impl Graph {
    /// Training-mode graph: records the tape, enables dropout fed by `rng`.
    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            train: true,
            rng: Some(RefCell::new(rng)),
            param_leaves: RefCell::new(Vec::new()),
            param_cache: RefCell::new(HashMap::new()),
            audit: RefCell::new(ShapeAudit::default()),
        }
    }

    /// Inference-mode graph: no tape, dropout disabled, deterministic.
    pub fn eval() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            train: false,
            rng: None,
            param_leaves: RefCell::new(Vec::new()),
            param_cache: RefCell::new(HashMap::new()),
            audit: RefCell::new(ShapeAudit::default()),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn audit(&self) -> ShapeAudit {
        *self.audit.borrow()
    }

    fn track(&self, value: &Matrix) {
        let (r, c) = (value.nrows(), value.ncols());
        let mut a = self.audit.borrow_mut();
        a.max_min_dim = a.max_min_dim.max(r.min(c));
        a.max_area = a.max_area.max(r * c);
    }

    fn push(&self, value: Matrix, inputs: Vec<(usize, BackFn)>) -> Var {
        self.track(&value);
        if !self.train {
            return Var {
                id: NO_NODE,
                value: Rc::new(value),
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { inputs });
        Var {
            id,
            value: Rc::new(value),
        }
    }

    /// A leaf with no gradient (inputs, positional tables, masks).
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Vec::new())
    }

    /// A parameter leaf. Repeated requests within one graph share a node so
    /// gradients from every use accumulate.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.borrow().get(&id) {
            return v.clone();
        }
        let value = store.value_rc(id);
        self.track(&value);
        let var = if self.train {
            let mut nodes = self.nodes.borrow_mut();
            let node_id = nodes.len();
            nodes.push(Node { inputs: Vec::new() });
            self.param_leaves.borrow_mut().push((id, node_id));
            Var { id: node_id, value }
        } else {
            Var { id: NO_NODE, value }
        };
        self.param_cache.borrow_mut().insert(id, var.clone());
        var
    }

    /// Backpropagate from a `1×1` loss and accumulate parameter gradients.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) {
        assert!(self.train, "backward requires a training-mode graph");
        assert_eq!(loss.value.len(), 1, "backward expects a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Matrix::ones((1, 1)));
        for id in (0..=loss.id).rev() {
            if nodes[id].inputs.is_empty() {
                continue; // leaf: keep its gradient for the scatter below
            }
            if let Some(g) = grads[id].take() {
                for (parent, back) in &nodes[id].inputs {
                    let contrib = back(&g);
                    match &mut grads[*parent] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        for (pid, node_id) in self.param_leaves.borrow().iter() {
            if let Some(g) = grads[*node_id].take() {
                self.accumulate(store, *pid, g);
            }
        }
    }

    fn accumulate(&self, store: &mut ParamStore, id: ParamId, g: Matrix) {
        store.entries[id.0].grad += &g;
    }

    // ── Elementwise and linear ops ──────────────────────────────────────

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.value.raw_dim(), b.value.raw_dim());
        let out = &*a.value + &*b.value;
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Matrix| g.clone()) as BackFn),
                (b.id, Box::new(|g: &Matrix| g.clone())),
            ],
        )
    }

    /// `a: R×C` plus a `1×C` row broadcast over every row.
    pub fn add_row(&self, a: &Var, row: &Var) -> Var {
        assert_eq!(row.rows(), 1);
        assert_eq!(a.cols(), row.cols());
        let out = &*a.value + &row.value.row(0);
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Matrix| g.clone()) as BackFn),
                (
                    row.id,
                    Box::new(|g: &Matrix| {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0)).to_owned()
                    }),
                ),
            ],
        )
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.value.raw_dim(), b.value.raw_dim());
        let out = &*a.value - &*b.value;
        self.push(
            out,
            vec![
                (a.id, Box::new(|g: &Matrix| g.clone()) as BackFn),
                (b.id, Box::new(|g: &Matrix| -g)),
            ],
        )
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.value.raw_dim(), b.value.raw_dim());
        let out = &*a.value * &*b.value;
        let av = Rc::clone(&a.value);
        let bv = Rc::clone(&b.value);
        self.push(
            out,
            vec![
                (a.id, Box::new(move |g: &Matrix| g * &*bv) as BackFn),
                (b.id, Box::new(move |g: &Matrix| g * &*av)),
            ],
        )
    }

    /// `k·a + c` applied elementwise.
    pub fn affine(&self, a: &Var, k: f64, c: f64) -> Var {
        let out = a.value.mapv(|x| k * x + c);
        self.push(out, vec![(a.id, Box::new(move |g: &Matrix| g * k) as BackFn)])
    }

    pub fn scale(&self, a: &Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.cols(), b.rows());
        let out = a.value.dot(&*b.value);
        let av = Rc::clone(&a.value);
        let bv = Rc::clone(&b.value);
        self.push(
            out,
            vec![
                (a.id, Box::new(move |g: &Matrix| g.dot(&bv.t())) as BackFn),
                (b.id, Box::new(move |g: &Matrix| av.t().dot(g))),
            ],
        )
    }

    pub fn transpose(&self, a: &Var) -> Var {
        let out = a.value.t().to_owned();
        self.push(
            out,
            vec![(a.id, Box::new(|g: &Matrix| g.t().to_owned()) as BackFn)],
        )
    }

    pub fn relu(&self, a: &Var) -> Var {
        let out = a.value.mapv(|x| x.max(0.0));
        let av = Rc::clone(&a.value);
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx).and(&*av).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    gx
                }) as BackFn,
            )],
        )
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let var = self.push(out, Vec::new());
        if self.train {
            let yv = Rc::clone(&var.value);
            self.nodes.borrow_mut()[var.id].inputs.push((
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx)
                        .and(&*yv)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    gx
                }),
            ));
        }
        var
    }

    pub fn tanh(&self, a: &Var) -> Var {
        let out = a.value.mapv(f64::tanh);
        let var = self.push(out, Vec::new());
        if self.train {
            let yv = Rc::clone(&var.value);
            self.nodes.borrow_mut()[var.id].inputs.push((
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx)
                        .and(&*yv)
                        .for_each(|gi, &y| *gi *= 1.0 - y * y);
                    gx
                }),
            ));
        }
        var
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: &Var) -> Var {
        let mut out = a.value.as_ref().clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let var = self.push(out, Vec::new());
        if self.train {
            let yv = Rc::clone(&var.value);
            self.nodes.borrow_mut()[var.id].inputs.push((
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = g * &*yv;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(yv.rows()) {
                        let dot: f64 = grow.sum();
                        ndarray::Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gi, &y| *gi -= dot * y);
                    }
                    gx
                }),
            ));
        }
        var
    }

    /// `ln(max(a, floor))`; entries at or below the floor get zero gradient.
    pub fn ln_clamped(&self, a: &Var, floor: f64) -> Var {
        let out = a.value.mapv(|x| x.max(floor).ln());
        let av = Rc::clone(&a.value);
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx).and(&*av).for_each(|gi, &x| {
                        *gi = if x > floor { *gi / x } else { 0.0 };
                    });
                    gx
                }) as BackFn,
            )],
        )
    }

    pub fn concat_cols(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.rows(), b.rows());
        let out = ndarray::concatenate(Axis(1), &[a.value.view(), b.value.view()])
            .expect("concat_cols shape");
        let ca = a.cols();
        let cb = b.cols();
        self.push(
            out,
            vec![
                (
                    a.id,
                    Box::new(move |g: &Matrix| g.slice(s![.., ..ca]).to_owned()) as BackFn,
                ),
                (
                    b.id,
                    Box::new(move |g: &Matrix| g.slice(s![.., ca..ca + cb]).to_owned()),
                ),
            ],
        )
    }

    pub fn slice_cols(&self, a: &Var, lo: usize, hi: usize) -> Var {
        assert!(lo < hi && hi <= a.cols());
        let out = a.value.slice(s![.., lo..hi]).to_owned();
        let (rows, cols) = (a.rows(), a.cols());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = Matrix::zeros((rows, cols));
                    gx.slice_mut(s![.., lo..hi]).assign(g);
                    gx
                }) as BackFn,
            )],
        )
    }

    pub fn slice_rows(&self, a: &Var, lo: usize, hi: usize) -> Var {
        assert!(lo < hi && hi <= a.rows());
        let out = a.value.slice(s![lo..hi, ..]).to_owned();
        let (rows, cols) = (a.rows(), a.cols());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = Matrix::zeros((rows, cols));
                    gx.slice_mut(s![lo..hi, ..]).assign(g);
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Stack a list of equal-width blocks vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape");
        let mut inputs: Vec<(usize, BackFn)> = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for p in parts {
            let lo = offset;
            let hi = offset + p.rows();
            offset = hi;
            inputs.push((
                p.id,
                Box::new(move |g: &Matrix| g.slice(s![lo..hi, ..]).to_owned()),
            ));
        }
        self.push(out, inputs)
    }

    /// Rows of the output copy `a[row_of[t]]`. Backward scatter-adds.
    pub fn gather_rows(&self, a: &Var, row_of: Vec<usize>) -> Var {
        let cols = a.cols();
        let rows_in = a.rows();
        let mut out = Matrix::zeros((row_of.len(), cols));
        for (t, &k) in row_of.iter().enumerate() {
            assert!(k < rows_in, "gather_rows index out of range");
            out.row_mut(t).assign(&a.value.row(k));
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = Matrix::zeros((rows_in, cols));
                    for (t, &k) in row_of.iter().enumerate() {
                        let mut target = gx.row_mut(k);
                        target += &g.row(t);
                    }
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Mean of the rows of each `[start, end)` interval. Intervals must be
    /// non-empty; they normally partition `[0, rows)`.
    pub fn segment_mean_rows(&self, a: &Var, intervals: Vec<(usize, usize)>) -> Var {
        let cols = a.cols();
        let rows_in = a.rows();
        let mut out = Matrix::zeros((intervals.len(), cols));
        for (k, &(start, end)) in intervals.iter().enumerate() {
            assert!(start < end && end <= rows_in, "bad segment interval");
            let mean = a.value.slice(s![start..end, ..]).mean_axis(Axis(0)).unwrap();
            out.row_mut(k).assign(&mean);
        }
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = Matrix::zeros((rows_in, cols));
                    for (k, &(start, end)) in intervals.iter().enumerate() {
                        let w = 1.0 / (end - start) as f64;
                        let grow = g.row(k).mapv(|v| v * w);
                        for t in start..end {
                            let mut target = gx.row_mut(t);
                            target += &grow;
                        }
                    }
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Columns `[x(t−d) | x(t) | x(t+d)]` with zero padding, the unrolled
    /// form of a centered kernel-3 dilated convolution.
    pub fn dilated_shift_concat(&self, x: &Var, dilation: usize) -> Var {
        let (t_len, c) = (x.rows(), x.cols());
        let d = dilation;
        let mut out = Matrix::zeros((t_len, 3 * c));
        for t in 0..t_len {
            if t >= d {
                out.slice_mut(s![t, ..c]).assign(&x.value.row(t - d));
            }
            out.slice_mut(s![t, c..2 * c]).assign(&x.value.row(t));
            if t + d < t_len {
                out.slice_mut(s![t, 2 * c..]).assign(&x.value.row(t + d));
            }
        }
        self.push(
            out,
            vec![(
                x.id,
                Box::new(move |g: &Matrix| {
                    let mut gx = Matrix::zeros((t_len, c));
                    for t in 0..t_len {
                        if t >= d {
                            let mut target = gx.row_mut(t - d);
                            target += &g.slice(s![t, ..c]);
                        }
                        {
                            let mut target = gx.row_mut(t);
                            target += &g.slice(s![t, c..2 * c]);
                        }
                        if t + d < t_len {
                            let mut target = gx.row_mut(t + d);
                            target += &g.slice(s![t, 2 * c..]);
                        }
                    }
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Row-wise layer normalization with learned `1×C` gain and shift.
    pub fn layer_norm_rows(&self, a: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let c = a.cols() as f64;
        assert_eq!(gamma.rows(), 1);
        assert_eq!(beta.rows(), 1);
        let mut normed = a.value.as_ref().clone();
        let mut inv_std = Vec::with_capacity(a.rows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            row.mapv_inplace(|x| (x - mean) * istd);
        }
        let normed = Rc::new(normed);
        let out = {
            let mut o = normed.as_ref().clone();
            for mut row in o.rows_mut() {
                ndarray::Zip::from(&mut row)
                    .and(gamma.value.row(0))
                    .for_each(|x, &g| *x *= g);
                ndarray::Zip::from(&mut row)
                    .and(beta.value.row(0))
                    .for_each(|x, &b| *x += b);
            }
            o
        };
        let gamma_v = Rc::clone(&gamma.value);
        let normed_a = Rc::clone(&normed);
        let normed_b = Rc::clone(&normed);
        self.push(
            out,
            vec![
                (
                    a.id,
                    Box::new(move |g: &Matrix| {
                        // dL/dx = istd * (gγ − mean(gγ) − x̂·mean(gγ·x̂)) per row
                        let mut gx = g.clone();
                        for mut row in gx.rows_mut() {
                            ndarray::Zip::from(&mut row)
                                .and(gamma_v.row(0))
                                .for_each(|gi, &ga| *gi *= ga);
                        }
                        for ((mut grow, xrow), &istd) in gx
                            .rows_mut()
                            .into_iter()
                            .zip(normed_a.rows())
                            .zip(inv_std.iter())
                        {
                            let m1 = grow.sum() / c;
                            let m2 = grow
                                .iter()
                                .zip(xrow.iter())
                                .map(|(&gi, &x)| gi * x)
                                .sum::<f64>()
                                / c;
                            ndarray::Zip::from(&mut grow)
                                .and(&xrow)
                                .for_each(|gi, &x| *gi = istd * (*gi - m1 - x * m2));
                        }
                        gx
                    }) as BackFn,
                ),
                (
                    gamma.id,
                    Box::new(move |g: &Matrix| {
                        (g * &*normed_b).sum_axis(Axis(0)).insert_axis(Axis(0))
                    }),
                ),
                (
                    beta.id,
                    Box::new(|g: &Matrix| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ),
            ],
        )
    }

    /// Inverted dropout; identity in eval mode.
    pub fn dropout(&self, a: &Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a.clone();
        }
        let keep = 1.0 - p;
        let rng_cell = self
            .rng
            .as_ref()
            .expect("training graph always carries an rng");
        let mut rng = rng_cell.borrow_mut();
        let mask = Matrix::from_shape_fn(a.value.raw_dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        drop(rng);
        let out = &*a.value * &mask;
        self.push(
            out,
            vec![(a.id, Box::new(move |g: &Matrix| g * &mask) as BackFn)],
        )
    }

    /// `scale · Σ_picks −ln(max(a[r,c], floor))`, as a `1×1` scalar. Picks
    /// may repeat; each occurrence contributes its own term.
    pub fn pick_neg_log_sum(&self, a: &Var, picks: Vec<(usize, usize)>, scale: f64, floor: f64) -> Var {
        let mut total = 0.0;
        for &(r, c) in &picks {
            total -= a.value[[r, c]].max(floor).ln();
        }
        let out = Matrix::from_elem((1, 1), scale * total);
        let av = Rc::clone(&a.value);
        let (rows, cols) = (a.rows(), a.cols());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let g0 = g[[0, 0]];
                    let mut gx = Matrix::zeros((rows, cols));
                    for &(r, c) in &picks {
                        let x = av[[r, c]];
                        if x > floor {
                            gx[[r, c]] -= g0 * scale / x;
                        }
                    }
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Truncated squared difference between adjacent rows, averaged over all
    /// `(rows−1)·cols` pairs: `mean(min(|a[t+1]−a[t]|, tau)²)`. Zero for a
    /// single row.
    pub fn truncated_sq_mean_rowdiff(&self, a: &Var, tau: f64) -> Var {
        let (rows, cols) = (a.rows(), a.cols());
        if rows < 2 {
            return self.constant(Matrix::zeros((1, 1)));
        }
        let count = ((rows - 1) * cols) as f64;
        let mut total = 0.0;
        for t in 0..rows - 1 {
            for c in 0..cols {
                let d = a.value[[t + 1, c]] - a.value[[t, c]];
                total += d.abs().min(tau).powi(2);
            }
        }
        let out = Matrix::from_elem((1, 1), total / count);
        let av = Rc::clone(&a.value);
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| {
                    let g0 = g[[0, 0]];
                    let mut gx = Matrix::zeros((rows, cols));
                    for t in 0..rows - 1 {
                        for c in 0..cols {
                            let d = av[[t + 1, c]] - av[[t, c]];
                            if d.abs() < tau {
                                let coeff = g0 * 2.0 * d / count;
                                gx[[t + 1, c]] += coeff;
                                gx[[t, c]] -= coeff;
                            }
                        }
                    }
                    gx
                }) as BackFn,
            )],
        )
    }

    /// Sum of every entry, as a `1×1` scalar.
    pub fn sum_all(&self, a: &Var) -> Var {
        let out = Matrix::from_elem((1, 1), a.value.sum());
        let (rows, cols) = (a.rows(), a.cols());
        self.push(
            out,
            vec![(
                a.id,
                Box::new(move |g: &Matrix| Matrix::from_elem((rows, cols), g[[0, 0]])) as BackFn,
            )],
        )
    }
}
