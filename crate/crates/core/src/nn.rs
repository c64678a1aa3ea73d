//! Neural-network building blocks on top of the autodiff tape: linear maps,
//! layer norm, single- and multi-head attention, a feed-forward block, a
//! gated recurrent refiner and the sinusoidal positional table.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, ParamId, ParamStore, Var};

/// Xavier-uniform init for a `fan_in × fan_out` matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-bound..bound))
}

/// Small-scale normal init used for embedding-like tables.
pub fn embedding_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| {
        // Box-Muller; ChaCha gives uniform f64 in [0,1)
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// The standard sinusoidal positional table, `len × width`.
pub fn sinusoidal_table(len: usize, width: usize) -> Matrix {
    let mut table = Array2::zeros((len, width));
    for pos in 0..len {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            table[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Row-wise affine map `x·W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        Self {
            w: store.register(format!("{prefix}.w"), xavier(rng, fan_in, fan_out)),
            b: store.register(format!("{prefix}.b"), Matrix::zeros((1, fan_out))),
        }
    }

    /// Zero-initialized map: classifier heads start at uniform probabilities.
    pub fn zeros(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: store.register(format!("{prefix}.w"), Matrix::zeros((fan_in, fan_out))),
            b: store.register(format!("{prefix}.b"), Matrix::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Var {
        g.add_row(&g.matmul(x, &g.param(store, self.w)), &g.param(store, self.b))
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.register(format!("{prefix}.gamma"), Matrix::ones((1, width))),
            beta: store.register(format!("{prefix}.beta"), Matrix::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Var {
        g.layer_norm_rows(x, &g.param(store, self.gamma), &g.param(store, self.beta), 1e-5)
    }
}

/// Single-head cross-attention that exposes its attention map. Positional
/// encodings enter queries and keys only; the residual comes from the raw
/// query content.
pub struct SingleHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    width: usize,
}

impl SingleHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, width: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{prefix}.q"), width, width),
            k: Linear::new(store, rng, &format!("{prefix}.k"), width, width),
            v: Linear::new(store, rng, &format!("{prefix}.v"), width, width),
            out: Linear::new(store, rng, &format!("{prefix}.out"), width, width),
            width,
        }
    }

    /// Returns `(updated queries, attention map)` where the map has one row
    /// per query summing to one over the keys.
    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        query_seq: &Var,
        query_pos: &Var,
        kv_seq: &Var,
        kv_pos: &Var,
    ) -> (Var, Var) {
        let q = self.q.forward(g, store, &g.add(query_seq, query_pos));
        let k = self.k.forward(g, store, &g.add(kv_seq, kv_pos));
        let v = self.v.forward(g, store, kv_seq);
        let scores = g.scale(&g.matmul(&q, &g.transpose(&k)), 1.0 / (self.width as f64).sqrt());
        let attn = g.softmax_rows(&scores);
        let mixed = self.out.forward(g, store, &g.matmul(&attn, &v));
        (g.add(query_seq, &mixed), attn)
    }
}

/// Multi-head attention used inside the token transformers. Returns the
/// mixed values only; callers add their own residual.
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        assert!(width % heads == 0, "attention width must divide into heads");
        Self {
            q: Linear::new(store, rng, &format!("{prefix}.q"), width, width),
            k: Linear::new(store, rng, &format!("{prefix}.k"), width, width),
            v: Linear::new(store, rng, &format!("{prefix}.v"), width, width),
            out: Linear::new(store, rng, &format!("{prefix}.out"), width, width),
            heads,
            head_dim: width / heads,
            dropout,
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        store: &ParamStore,
        query_seq: &Var,
        query_pos: &Var,
        kv_seq: &Var,
        kv_pos: &Var,
    ) -> Var {
        let q = self.q.forward(g, store, &g.add(query_seq, query_pos));
        let k = self.k.forward(g, store, &g.add(kv_seq, kv_pos));
        let v = self.v.forward(g, store, kv_seq);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * self.head_dim;
            let hi = lo + self.head_dim;
            let qh = g.slice_cols(&q, lo, hi);
            let kh = g.slice_cols(&k, lo, hi);
            let vh = g.slice_cols(&v, lo, hi);
            let attn = g.softmax_rows(&g.scale(&g.matmul(&qh, &g.transpose(&kh)), scale));
            head_outputs.push(g.matmul(&attn, &vh));
        }
        let mut merged = head_outputs[0].clone();
        for h in &head_outputs[1..] {
            merged = g.concat_cols(&merged, h);
        }
        g.dropout(&self.out.forward(g, store, &merged), self.dropout)
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        width: usize,
        expansion: usize,
        dropout: f64,
    ) -> Self {
        Self {
            inner: Linear::new(store, rng, &format!("{prefix}.inner"), width, width * expansion),
            outer: Linear::new(store, rng, &format!("{prefix}.outer"), width * expansion, width),
            dropout,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: &Var) -> Var {
        let h = g.relu(&self.inner.forward(g, store, x));
        g.dropout(&self.outer.forward(g, store, &h), self.dropout)
    }
}

/// Single-layer unidirectional gated recurrent unit over the rows of a
/// `K×H` sequence.
pub struct Gru {
    w_ih: ParamId, // H × 3H, gate order [r | z | n]
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    width: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, width: usize) -> Self {
        Self {
            w_ih: store.register(format!("{prefix}.w_ih"), xavier(rng, width, 3 * width)),
            w_hh: store.register(format!("{prefix}.w_hh"), xavier(rng, width, 3 * width)),
            b_ih: store.register(format!("{prefix}.b_ih"), Matrix::zeros((1, 3 * width))),
            b_hh: store.register(format!("{prefix}.b_hh"), Matrix::zeros((1, 3 * width))),
            width,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, seq: &Var) -> Var {
        let h_dim = self.width;
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_ih = g.param(store, self.b_ih);
        let b_hh = g.param(store, self.b_hh);
        let mut hidden = g.constant(Matrix::zeros((1, h_dim)));
        let mut outputs = Vec::with_capacity(seq.rows());
        for t in 0..seq.rows() {
            let x = g.slice_rows(seq, t, t + 1);
            let gi = g.add_row(&g.matmul(&x, &w_ih), &b_ih);
            let gh = g.add_row(&g.matmul(&hidden, &w_hh), &b_hh);
            let r = g.sigmoid(&g.add(
                &g.slice_cols(&gi, 0, h_dim),
                &g.slice_cols(&gh, 0, h_dim),
            ));
            let z = g.sigmoid(&g.add(
                &g.slice_cols(&gi, h_dim, 2 * h_dim),
                &g.slice_cols(&gh, h_dim, 2 * h_dim),
            ));
            let n = g.tanh(&g.add(
                &g.slice_cols(&gi, 2 * h_dim, 3 * h_dim),
                &g.mul(&r, &g.slice_cols(&gh, 2 * h_dim, 3 * h_dim)),
            ));
            // h' = (1−z)⊙n + z⊙h
            let one_minus_z = g.affine(&z, -1.0, 1.0);
            hidden = g.add(&g.mul(&one_minus_z, &n), &g.mul(&z, &hidden));
            outputs.push(hidden.clone());
        }
        g.concat_rows(&outputs)
    }
}
