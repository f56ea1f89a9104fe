//! Small building blocks shared by the expert, the encoders and the
//! denoiser.

use rand::Rng;

use super::graph::{Graph, Var};
use super::mat::Mat;
use super::store::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng);
        let b = store.add(format!("{name}.b"), Mat::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    /// Same as [`Linear::new`] with the weight scaled down, for output heads.
    pub fn new_scaled(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let layer = Self::new(store, name, in_dim, out_dim, rng);
        let w = store.value_mut(layer.w);
        *w = w.scale(scale);
        layer
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Mat::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let s = g.mul_row(n, gamma);
        g.add_row(s, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value streams.
#[derive(Clone, Debug)]
pub struct Attention {
    /// Absent when queries come from another module's projection.
    pub q: Option<Linear>,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        let q = Linear::new(store, &format!("{name}.q"), dim, dim, rng);
        let mut attn = Self::without_query(store, name, dim, kv_dim, heads, rng);
        attn.q = Some(q);
        attn
    }

    /// Keys, values and output projection only; callers supply projected
    /// queries to [`Attention::attend`].
    pub fn without_query(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: None,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Projects queries once so several attention passes can share them.
    pub fn project_queries(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.q
            .as_ref()
            .expect("attention built without a query projection")
            .forward(g, store, x)
    }

    /// Attention output (after the output projection) and the per-head
    /// weight matrices.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var) -> (Var, Vec<Var>) {
        self.attend_biased(g, store, q, kv, None)
    }

    /// As [`Attention::attend`], adding `bias` (queries x keys) to every
    /// head's scores before the softmax.
    pub fn attend_biased(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        kv: Var,
        bias: Option<Var>,
    ) -> (Var, Vec<Var>) {
        let k = self.k.forward(g, store, kv);
        let v = self.v.forward(g, store, kv);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let mut s = g.scale(s, scale);
            if let Some(b) = bias {
                s = g.add(s, b);
            }
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, vh));
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, store, cat), weights)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Var) -> Var {
        let q = self.project_queries(g, store, x);
        self.attend(g, store, q, kv).0
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.silu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm self-attention encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, 2 * dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.ln1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, store, x);
        let f = self.ff.forward(g, store, h);
        g.add(x, f)
    }
}

/// Sinusoidal table, `len x dim`.
pub fn sinusoidal(len: usize, dim: usize, offset: f64) -> Mat {
    Mat::from_fn(len, dim, |t, c| {
        let i = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / dim as f64);
        let arg = (t as f64 + offset) * freq;
        if c % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Sinusoidal embedding of a scalar position, `1 x dim`.
pub fn sinusoidal_scalar(pos: f64, dim: usize) -> Mat {
    sinusoidal(1, dim, pos)
}

/// Same-length temporal convolution with zero padding, realized as a sum
/// of shifted matmuls. Input `T x in`, output `T x out`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub taps: Vec<ParamId>,
    pub b: ParamId,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernel required");
        let limit = (6.0 / ((in_dim * kernel) + out_dim) as f64).sqrt();
        let taps = (0..kernel)
            .map(|k| {
                let m = Mat::from_fn(in_dim, out_dim, |_, _| rng.random_range(-limit..limit));
                store.add(format!("{name}.tap{k}"), m)
            })
            .collect();
        let b = store.add(format!("{name}.b"), Mat::zeros(1, out_dim));
        Self {
            taps,
            b,
            kernel,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let t = g.value(x).rows();
        let half = self.kernel / 2;
        let zero = g.constant(Mat::zeros(half, self.in_dim));
        let padded = g.concat_rows(&[zero, x, zero]);
        let mut acc: Option<Var> = None;
        for (k, &tap) in self.taps.iter().enumerate() {
            let w = g.param(store, tap);
            let shifted = g.slice_rows(padded, k, t);
            let y = g.matmul(shifted, w);
            acc = Some(match acc {
                Some(a) => g.add(a, y),
                None => y,
            });
        }
        let b = g.param(store, self.b);
        g.add_row(acc.expect("kernel > 0"), b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_convex_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 8, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Mat::from_fn(5, 8, |r, c| ((r * 3 + c) % 7) as f64 * 0.1));
        let q = attn.project_queries(&mut g, &store, x);
        let (_, weights) = attn.attend(&mut g, &store, q, x);
        for w in weights {
            for r in 0..5 {
                let s: f64 = g.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_with_identity_center_tap_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", 3, 3, 3, &mut rng);
        *store.value_mut(conv.taps[0]) = Mat::zeros(3, 3);
        *store.value_mut(conv.taps[1]) = Mat::identity(3);
        *store.value_mut(conv.taps[2]) = Mat::zeros(3, 3);
        let mut g = Graph::new();
        let xm = Mat::from_fn(6, 3, |r, c| (r + c) as f64);
        let x = g.constant(xm.clone());
        let y = conv.forward(&mut g, &store, x);
        assert_eq!(g.value(y), &xm);
    }
}
