//! Stage 2: semantically disentangled style encoder.
//!
//! A temporal self-attention backbone produces per-frame style vectors and
//! pooling logits; attention pooling collapses them into one embedding.
//! Training combines a triplet loss over speakers with a decoupling penalty
//! (orthogonality plus kernel independence) against the frozen semantic
//! encoder's embeddings of the same windows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, Diverged, TrainError, TrainResult};
use crate::corpus::{Corpus, Split};
use crate::error::{invalid, Result};
use crate::expert::cosine_lr;
use crate::linalg::solve_spd_mat;
use crate::motion::MotionSequence;
use crate::nn::layers::{sinusoidal, EncoderLayer, LayerNorm, Linear};
use crate::nn::{softmax_rows, Adam, AdamConfig, Graph, Mat, ParamStore, Var};
use crate::rng;
use crate::semantic::SemanticEncoder;

pub const KIND: &str = "style_encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub style_dim: usize,
    /// Training crop length.
    pub crop: usize,
    pub min_window: usize,
    pub steps: usize,
    /// Triplets per step.
    pub batch: usize,
    pub lr: f64,
    pub lambda_orth: f64,
    pub lambda_hsic: f64,
    pub margin: f64,
    pub use_triplet: bool,
    pub seed: u64,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            style_dim: 16,
            crop: 64,
            min_window: 8,
            steps: 300,
            batch: 12,
            lr: 2e-3,
            lambda_orth: 1.0,
            lambda_hsic: 5.0,
            margin: 0.2,
            use_triplet: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding {
    pub vector: Vec<f64>,
}

impl StyleEmbedding {
    pub fn normalized(&self) -> Vec<f64> {
        let n = self.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return self.vector.clone();
        }
        self.vector.iter().map(|x| x / n).collect()
    }

    pub fn cosine(&self, other: &StyleEmbedding) -> f64 {
        self.normalized()
            .iter()
            .zip(other.normalized())
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPoolState {
    pub frames: Mat,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Softmax-weighted average of the frame vectors.
pub fn attention_pool(frames: &Mat, logits: &[f64]) -> Result<(StyleEmbedding, AttentionPoolState)> {
    if frames.rows() == 0 {
        return Err(invalid("attention pooling over zero frames"));
    }
    if logits.len() != frames.rows() {
        return Err(invalid(format!("{} logits for {} frames", logits.len(), frames.rows())));
    }
    let weights = softmax_rows(&Mat::row_vector(logits));
    let s = weights.matmul(frames);
    let state = AttentionPoolState {
        frames: frames.clone(),
        logits: logits.to_vec(),
        weights: weights.into_vec(),
    };
    Ok((StyleEmbedding { vector: s.into_vec() }, state))
}

fn sq_distances(x: &Mat) -> Mat {
    let n = x.rows();
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Median pairwise distance, falling back to 1 when every row coincides.
pub fn median_bandwidth(x: &Mat) -> f64 {
    let n = x.rows();
    let d = sq_distances(x);
    let mut all: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d.get(i, j).sqrt())
        .collect();
    if all.is_empty() {
        return 1.0;
    }
    all.sort_by(f64::total_cmp);
    let m = all.len();
    let med = if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    };
    if med < 1e-12 {
        log::warn!("hsic: zero median distance, using bandwidth 1.0");
        return 1.0;
    }
    med
}

/// Gaussian Gram matrix with the median bandwidth; returns `(K, sigma^2)`.
pub fn gaussian_gram(x: &Mat) -> (Mat, f64) {
    let sigma = median_bandwidth(x);
    let s2 = sigma * sigma;
    (sq_distances(x).map(|d| (-d / (2.0 * s2)).exp()), s2)
}

fn center(k: &Mat) -> Mat {
    let n = k.rows();
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let col_means = k.col_means();
    let total = k.mean();
    Mat::from_fn(n, n, |i, j| k.get(i, j) - row_means[i] - col_means.get(0, j) + total)
}

fn check_hsic_inputs(x: &Mat, y: &Mat) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(invalid(format!("hsic rows differ: {} vs {}", x.rows(), y.rows())));
    }
    if x.rows() < 4 {
        return Err(invalid(format!("hsic needs at least 4 samples, got {}", x.rows())));
    }
    Ok(())
}

/// Biased HSIC estimate `tr(KHLH) / (n-1)^2`.
pub fn hsic_value(x: &Mat, y: &Mat) -> Result<f64> {
    check_hsic_inputs(x, y)?;
    let n = x.rows() as f64;
    let (k, _) = gaussian_gram(x);
    let (l, _) = gaussian_gram(y);
    Ok(center(&k).dot(&l) / ((n - 1.0) * (n - 1.0)))
}

/// Gradient of `tr(KHLH)/(n-1)^2` with respect to the rows of `x`, given
/// the centered other kernel `m = HLH`. The bandwidth is held fixed.
fn hsic_grad(x: &Mat, k: &Mat, s2: f64, m: &Mat) -> Mat {
    let n = x.rows();
    let w = k.zip_map(m, |a, b| a * b);
    let wx = w.matmul(x);
    let scale = -2.0 / (s2 * ((n - 1) * (n - 1)) as f64);
    Mat::from_fn(n, x.cols(), |i, c| {
        let row_sum: f64 = w.row(i).iter().sum();
        scale * (row_sum * x.get(i, c) - wx.get(i, c))
    })
}

/// Graph HSIC with gradients into both arguments.
pub fn hsic(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (xm, ym) = (g.value(x).clone(), g.value(y).clone());
    check_hsic_inputs(&xm, &ym)?;
    let n = xm.rows() as f64;
    let (k, kx) = gaussian_gram(&xm);
    let (l, ly) = gaussian_gram(&ym);
    let (hkh, hlh) = (center(&k), center(&l));
    let value = hkh.dot(&l) / ((n - 1.0) * (n - 1.0));
    let gx = hsic_grad(&xm, &k, kx, &hlh);
    let gy = hsic_grad(&ym, &l, ly, &hkh);
    Ok(g.scalar_fn(value, vec![(x, gx), (y, gy)]))
}

/// `lambda_orth * |S^T V|_F^2 / n^2 + lambda_hsic * HSIC(S, V)` on row-
/// normalized batches; `semantic` is treated as a constant.
pub fn decouple_loss(g: &mut Graph, style: Var, semantic: &Mat, lambda_orth: f64, lambda_hsic: f64) -> Result<Var> {
    let n = g.value(style).rows();
    if semantic.rows() != n {
        return Err(invalid(format!("{n} style rows vs {} semantic rows", semantic.rows())));
    }
    let s = g.normalize_rows(style);
    let v = g.constant(semantic.normalize_rows());
    let st = g.transpose(s);
    let prod = g.matmul(st, v);
    let sq = g.square(prod);
    let orth = g.sum_all(sq);
    let orth = g.scale(orth, lambda_orth / (n * n) as f64);
    if lambda_hsic == 0.0 {
        return Ok(orth);
    }
    let vm = semantic.normalize_rows();
    check_hsic_inputs(g.value(s), &vm)?;
    let sm = g.value(s).clone();
    let (k, s2) = gaussian_gram(&sm);
    let (l, _) = gaussian_gram(&vm);
    let hlh = center(&l);
    let nn = (n - 1) as f64;
    let value = center(&k).dot(&l) / (nn * nn);
    let grad = hsic_grad(&sm, &k, s2, &hlh).scale(lambda_hsic);
    let h = g.scalar_fn(lambda_hsic * value, vec![(s, grad)]);
    Ok(g.add(orth, h))
}

/// Plain-value counterpart of [`decouple_loss`].
pub fn decouple_value(style: &Mat, semantic: &Mat, lambda_orth: f64, lambda_hsic: f64) -> Result<f64> {
    let n = style.rows();
    if semantic.rows() != n {
        return Err(invalid(format!("{n} style rows vs {} semantic rows", semantic.rows())));
    }
    let (s, v) = (style.normalize_rows(), semantic.normalize_rows());
    let orth = s.t_matmul(&v).sq_norm() / (n * n) as f64;
    let h = if lambda_hsic == 0.0 { 0.0 } else { hsic_value(&s, &v)? };
    Ok(lambda_orth * orth + lambda_hsic * h)
}

/// Mean hinge `max(0, margin + |a-p|^2 - |a-n|^2)` over aligned rows.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    let (a, p, n) = (
        g.value(anchor).shape(),
        g.value(positive).shape(),
        g.value(negative).shape(),
    );
    if a != p || a != n {
        return Err(invalid(format!("triplet shapes differ: {a:?} {p:?} {n:?}")));
    }
    if margin <= 0.0 {
        return Err(invalid("triplet margin must be positive"));
    }
    let ones = g.constant(Mat::filled(a.1, 1, 1.0));
    let dp = g.sub(anchor, positive);
    let dp = g.square(dp);
    let dp = g.matmul(dp, ones);
    let dn = g.sub(anchor, negative);
    let dn = g.square(dn);
    let dn = g.matmul(dn, ones);
    let gap = g.sub(dp, dn);
    let gap = g.add_const(gap, margin);
    let hinge = g.relu(gap);
    Ok(g.mean_all(hinge))
}

pub fn triplet_value(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(invalid("triplet embedding dims differ"));
    }
    if margin <= 0.0 {
        return Err(invalid("triplet margin must be positive"));
    }
    let d = |x: &[f64]| anchor.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    Ok((margin + d(positive) - d(negative)).max(0.0))
}

#[derive(Clone, Debug)]
pub struct StyleEncoder {
    pub config: StyleConfig,
    pub expr_dim: usize,
    pub store: ParamStore,
    input: Linear,
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
    frame_head: Linear,
    logit_head: Linear,
    pub metrics: serde_json::Value,
}

impl StyleEncoder {
    pub fn new(config: &StyleConfig, expr_dim: usize) -> Self {
        let mut rng = rng::seeded(config.seed, &[0x57, 0x1]);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let input = Linear::new(&mut store, "input", expr_dim, d, &mut rng);
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("layer{l}"), d, config.heads, &mut rng))
            .collect();
        let ln = LayerNorm::new(&mut store, "ln", d);
        let frame_head = Linear::new(&mut store, "pool.frame", d, config.style_dim, &mut rng);
        let logit_head = Linear::new(&mut store, "pool.logit", d, 1, &mut rng);
        Self {
            config: config.clone(),
            expr_dim,
            store,
            input,
            layers,
            ln,
            frame_head,
            logit_head,
            metrics: serde_json::Value::Null,
        }
    }

    /// Returns the pooled embedding (`1 x d_s`), the frame vectors and the
    /// pooling logits (`T x 1`).
    pub fn forward(&self, g: &mut Graph, expression: &Mat) -> (Var, Var, Var) {
        let x = g.constant(expression.clone());
        let h = self.input.forward(g, &self.store, x);
        let pos = g.constant(sinusoidal(expression.rows(), self.config.d_model, 0.0));
        let mut h = g.add(h, pos);
        for layer in &self.layers {
            h = layer.forward(g, &self.store, h);
        }
        let h = self.ln.forward(g, &self.store, h);
        let frames = self.frame_head.forward(g, &self.store, h);
        let logits = self.logit_head.forward(g, &self.store, h);
        let row = g.transpose(logits);
        let w = g.softmax_rows(row);
        (g.matmul(w, frames), frames, logits)
    }

    fn check(&self, seq: &MotionSequence) -> Result<()> {
        if seq.len() < self.config.min_window {
            return Err(invalid(format!(
                "sequence of {} frames is shorter than the minimum {}",
                seq.len(),
                self.config.min_window
            )));
        }
        if seq.expr_dim() != self.expr_dim {
            return Err(invalid(format!(
                "sequence has {} expression dims, encoder expects {}",
                seq.expr_dim(),
                self.expr_dim
            )));
        }
        Ok(())
    }

    pub fn embed_style(&self, seq: &MotionSequence) -> Result<StyleEmbedding> {
        self.check(seq)?;
        let mut g = Graph::new();
        let (s, _, _) = self.forward(&mut g, &seq.expression);
        Ok(StyleEmbedding {
            vector: g.value(s).data().to_vec(),
        })
    }

    pub fn pool_state(&self, seq: &MotionSequence) -> Result<AttentionPoolState> {
        self.check(seq)?;
        let mut g = Graph::new();
        let (_, frames, logits) = self.forward(&mut g, &seq.expression);
        let (_, state) = attention_pool(g.value(frames), g.value(logits).data())?;
        Ok(state)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = json!({ "style": self.config, "expr_dim": self.expr_dim });
        Checkpoint::from_store(KIND, config, self.metrics.clone(), &[("", &self.store)])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: StyleConfig =
            serde_json::from_value(ck.config["style"].clone()).map_err(|e| invalid(format!("style config: {e}")))?;
        let expr_dim = ck.config["expr_dim"]
            .as_u64()
            .ok_or_else(|| invalid("expr_dim missing"))? as usize;
        let mut enc = Self::new(&config, expr_dim);
        ck.fill_store("", &mut enc.store)?;
        enc.metrics = ck.metrics.clone();
        Ok(enc)
    }
}

/// Multi-class ridge regression on one-hot targets with standardized
/// features; returns test accuracy.
pub fn ridge_probe(train_x: &Mat, train_y: &[usize], test_x: &Mat, test_y: &[usize], classes: usize) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || test_x.rows() == 0 {
        return Err(invalid("probe inputs and labels disagree in length"));
    }
    let d = train_x.cols();
    let mean = train_x.col_means();
    let sd: Vec<f64> = (0..d)
        .map(|c| {
            let m = mean.get(0, c);
            let v = train_x.column(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / train_x.rows() as f64;
            v.sqrt().max(1e-8)
        })
        .collect();
    let design = |x: &Mat| {
        Mat::from_fn(x.rows(), d + 1, |r, c| {
            if c == d {
                1.0
            } else {
                (x.get(r, c) - mean.get(0, c)) / sd[c]
            }
        })
    };
    let (xtr, xte) = (design(train_x), design(test_x));
    let y = Mat::from_fn(train_y.len(), classes, |r, c| if train_y[r] == c { 1.0 } else { 0.0 });
    let mut gram = xtr.t_matmul(&xtr);
    for i in 0..d {
        gram.set(i, i, gram.get(i, i) + 1e-2 * train_x.rows() as f64);
    }
    gram.set(d, d, gram.get(d, d) + 1e-9);
    let w = solve_spd_mat(&gram, &xtr.t_matmul(&y))?;
    let scores = xte.matmul(&w);
    let hits = (0..test_y.len())
        .filter(|&r| {
            let row = scores.row(r);
            let best = (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("classes > 0");
            best == test_y[r]
        })
        .count();
    Ok(hits as f64 / test_y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Fit on training scripts of every speaker, scored on held-out scripts.
    pub speaker_accuracy: f64,
    /// Fit on seen speakers, scored on held-out speakers, after removing
    /// each speaker's mean embedding.
    pub content_accuracy: f64,
    /// Same split without the per-speaker centering.
    pub content_accuracy_uncentered: f64,
    pub content_chance: f64,
    /// Independence between style and semantic embeddings of held-out clips.
    pub hsic: f64,
}

/// Subtracts each speaker's mean row. Speaker identity dominates raw
/// embeddings, so without this a cross-speaker content probe mostly
/// measures speaker shift rather than content.
pub fn center_by_speaker(emb: &Mat, corpus: &Corpus) -> Mat {
    let mut out = emb.clone();
    for s in 0..corpus.config.n_speakers {
        let idx: Vec<usize> = (0..corpus.clips.len())
            .filter(|&i| corpus.clips[i].speaker == s)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mean = emb.select_rows(&idx).col_means();
        for &i in &idx {
            for c in 0..out.cols() {
                out.set(i, c, emb.get(i, c) - mean.get(0, c));
            }
        }
    }
    out
}

pub fn style_matrix(enc: &StyleEncoder, corpus: &Corpus) -> Result<Mat> {
    let rows = corpus
        .clips
        .iter()
        .map(|c| enc.embed_style(&c.motion).map(|e| e.vector))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mat::from_rows(&rows))
}

pub fn probe_report(enc: &StyleEncoder, semantic: &SemanticEncoder, corpus: &Corpus) -> Result<ProbeReport> {
    let cfg = &corpus.config;
    let emb = style_matrix(enc, corpus)?;
    let seen_content = |c: usize| c < cfg.n_contents - cfg.held_out_contents;
    let seen_speaker = |s: usize| s < cfg.n_speakers - cfg.held_out_speakers;
    let pick = |f: &dyn Fn(usize) -> bool| (0..corpus.clips.len()).filter(|&i| f(i)).collect::<Vec<_>>();
    let sp_train = pick(&|i| seen_content(corpus.clips[i].content));
    let sp_test = pick(&|i| !seen_content(corpus.clips[i].content));
    let ct_train = pick(&|i| seen_speaker(corpus.clips[i].speaker));
    let ct_test = pick(&|i| !seen_speaker(corpus.clips[i].speaker));
    let labels = |idx: &[usize], f: &dyn Fn(usize) -> usize| idx.iter().map(|&i| f(i)).collect::<Vec<_>>();
    let spk = |i: usize| corpus.clips[i].speaker;
    let cnt = |i: usize| corpus.clips[i].content;
    let speaker_accuracy = ridge_probe(
        &emb.select_rows(&sp_train),
        &labels(&sp_train, &spk),
        &emb.select_rows(&sp_test),
        &labels(&sp_test, &spk),
        cfg.n_speakers,
    )?;
    let content_probe = |m: &Mat| {
        ridge_probe(
            &m.select_rows(&ct_train),
            &labels(&ct_train, &cnt),
            &m.select_rows(&ct_test),
            &labels(&ct_test, &cnt),
            cfg.n_contents,
        )
    };
    let content_accuracy_uncentered = content_probe(&emb)?;
    let content_accuracy = content_probe(&center_by_speaker(&emb, corpus))?;
    let held: Vec<usize> = (0..corpus.clips.len())
        .filter(|&i| corpus.clips[i].split != Split::Train)
        .collect();
    let sem = held
        .iter()
        .map(|&i| semantic.embed(&corpus.clips[i].motion, 0, corpus.clips[i].motion.len()))
        .collect::<Result<Vec<_>>>()?;
    let hsic = hsic_value(
        &emb.select_rows(&held).normalize_rows(),
        &Mat::from_rows(&sem).normalize_rows(),
    )?
    .max(0.0);
    Ok(ProbeReport {
        speaker_accuracy,
        content_accuracy,
        content_accuracy_uncentered,
        content_chance: 1.0 / cfg.n_contents as f64,
        hsic,
    })
}

/// Semantic embeddings for every crop start of every clip in `clips`.
struct SemanticTable {
    rows: Vec<Vec<Vec<f64>>>,
}

impl SemanticTable {
    fn build(corpus: &Corpus, semantic: &SemanticEncoder, clips: &[usize], crop: usize) -> Result<Self> {
        let mut rows = vec![Vec::new(); corpus.clips.len()];
        for &i in clips {
            let m = &corpus.clips[i].motion;
            rows[i] = (0..=m.len() - crop)
                .map(|s| semantic.embed(m, s, crop))
                .collect::<Result<_>>()?;
        }
        Ok(Self { rows })
    }
}

struct Triplet {
    clips: [usize; 3],
    starts: [usize; 3],
}

fn sample_triplets(corpus: &Corpus, pool: &[usize], crop: usize, n: usize, rng: &mut rng::Rng) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = pool[rng.random_range(0..pool.len())];
        let (sa, ca) = (corpus.clips[a].speaker, corpus.clips[a].content);
        let pos: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&j| corpus.clips[j].speaker == sa && corpus.clips[j].content != ca)
            .collect();
        let neg: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&j| corpus.clips[j].speaker != sa)
            .collect();
        let p = pos[rng.random_range(0..pos.len())];
        let q = neg[rng.random_range(0..neg.len())];
        let mut starts = [0; 3];
        for (k, &c) in [a, p, q].iter().enumerate() {
            starts[k] = rng.random_range(0..=corpus.clips[c].motion.len() - crop);
        }
        out.push(Triplet {
            clips: [a, p, q],
            starts,
        });
    }
    out
}

pub fn train_sdse(corpus: &Corpus, semantic: &SemanticEncoder, config: &StyleConfig) -> TrainResult<StyleEncoder> {
    let pool = corpus.indices(Split::Train);
    let mut speakers: Vec<usize> = pool.iter().map(|&i| corpus.clips[i].speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(invalid("triplets need at least 2 training speakers").into());
    }
    for &s in &speakers {
        let mut contents: Vec<usize> = pool
            .iter()
            .filter(|&&i| corpus.clips[i].speaker == s)
            .map(|&i| corpus.clips[i].content)
            .collect();
        contents.sort_unstable();
        contents.dedup();
        if contents.len() < 2 {
            return Err(invalid(format!("speaker {s} has fewer than 2 training contents")).into());
        }
    }
    if semantic.expr_dim != corpus.config.expr_dim {
        return Err(invalid("semantic encoder width differs from the corpus").into());
    }
    let crop = config.crop.min(corpus.config.frames).max(config.min_window);
    if corpus.clips.iter().any(|c| c.motion.len() < crop) {
        return Err(invalid("clips shorter than the style crop").into());
    }
    let table = SemanticTable::build(corpus, semantic, &pool, crop)?;
    let mut enc = StyleEncoder::new(config, corpus.config.expr_dim);
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut rng = rng::seeded(config.seed, &[0x57, 0x2]);
    let mut last_good = enc.store.clone();
    let (mut curve, mut trip_curve, mut dec_curve) = (Vec::new(), Vec::new(), Vec::new());
    for step in 0..config.steps {
        let triplets = sample_triplets(corpus, &pool, crop, config.batch, &mut rng);
        let mut g = Graph::new();
        let mut roles: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut sem_rows = Vec::with_capacity(3 * triplets.len());
        for (k, role) in roles.iter_mut().enumerate() {
            for t in &triplets {
                let (c, s) = (t.clips[k], t.starts[k]);
                let window = corpus.clips[c].motion.expression.slice_rows(s, crop);
                role.push(enc.forward(&mut g, &window).0);
                sem_rows.push(table.rows[c][s].clone());
            }
        }
        let [a, p, n] = roles.map(|r| g.concat_rows(&r));
        let all = g.concat_rows(&[a, p, n]);
        let mut loss = decouple_loss(
            &mut g,
            all,
            &Mat::from_rows(&sem_rows),
            config.lambda_orth,
            config.lambda_hsic,
        )?;
        let dec = g.scalar(loss);
        let mut trip = 0.0;
        if config.use_triplet {
            let t = triplet_loss(&mut g, a, p, n, config.margin)?;
            trip = g.scalar(t);
            loss = g.add(loss, t);
        }
        let value = g.scalar(loss);
        if !value.is_finite() {
            enc.store = last_good;
            return Err(TrainError::Diverged(Diverged {
                step,
                detail: format!("style loss {value}"),
                last_good: enc,
            }));
        }
        last_good = enc.store.clone();
        let grads = g.backward(loss);
        opt.step(&mut enc.store, &grads, cosine_lr(step, config.steps));
        curve.push(value);
        trip_curve.push(trip);
        dec_curve.push(dec);
    }
    enc.store.round_f32();
    let probes = probe_report(&enc, semantic, corpus)?;
    enc.metrics = json!({
        "probes": probes,
        "loss_curve": curve,
        "triplet_curve": trip_curve,
        "decouple_curve": dec_curve,
        "corpus_fingerprint": corpus.fingerprint(),
    });
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_examples() {
        let frames = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (s, st) = attention_pool(&frames, &[0.0, 0.0]).unwrap();
        assert_eq!(s.vector, vec![0.5, 0.5]);
        assert!((st.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (s, _) = attention_pool(&frames, &[3f64.ln(), 0.0]).unwrap();
        assert!((s.vector[0] - 0.75).abs() < 1e-12 && (s.vector[1] - 0.25).abs() < 1e-12);
        let same = Mat::from_rows(&vec![vec![0.3, -2.0]; 4]);
        let (s, _) = attention_pool(&same, &[5.0, -1.0, 0.0, 2.0]).unwrap();
        assert!((s.vector[0] - 0.3).abs() < 1e-12 && (s.vector[1] + 2.0).abs() < 1e-12);
        assert!(attention_pool(&Mat::zeros(0, 2), &[]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_value(&a, &a, &[1.0, 0.0], 0.2).unwrap(), 0.0);
        assert!((triplet_value(&a, &a, &a, 0.2).unwrap() - 0.2).abs() < 1e-15);
        let p = [0.5f64.sqrt(), 0.0];
        let n = [0.0, 0.4f64.sqrt()];
        assert!((triplet_value(&a, &p, &n, 0.2).unwrap() - 0.3).abs() < 1e-12);
        assert!(triplet_value(&a, &[0.0], &a, 0.2).is_err());
    }

    #[test]
    fn hsic_of_constant_is_zero() {
        let mut r = rng::seeded(1, &[]);
        let x = Mat::filled(8, 3, 0.7);
        let y = rng::normal_mat(&mut r, 8, 2);
        assert!(hsic_value(&x, &y).unwrap().abs() < 1e-12);
        assert!(hsic_value(&Mat::zeros(3, 1), &Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn style_embedding_rejects_short_input() {
        let enc = StyleEncoder::new(&StyleConfig::default(), 12);
        let seq = MotionSequence::new(vec![], Mat::zeros(5, 12), Mat::zeros(5, 4), 25).unwrap();
        assert!(enc.embed_style(&seq).is_err());
        let seq = MotionSequence::new(vec![], Mat::filled(20, 12, 0.1), Mat::zeros(20, 4), 25).unwrap();
        assert_eq!(enc.embed_style(&seq).unwrap(), enc.embed_style(&seq).unwrap());
    }
}
