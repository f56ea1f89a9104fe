//! Audio/motion sync expert.
//!
//! Two small temporal-convolution towers embed an audio window and the
//! matching lower-face motion window into a shared unit sphere. Training is
//! binary cross-entropy on `(1 + cos) / 2` with time-aligned pairs as
//! positives and temporally offset or cross-script pairs as negatives.
//! The audio tower supplies the audio-semantic targets for the semantic
//! encoder; the pair provides the sync-confidence proxy.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, Diverged, TrainError, TrainResult};
use crate::corpus::{Corpus, PseudoAudioFeatures, Split};
use crate::error::{invalid, Result};
use crate::motion::{MotionSequence, RegionPartition};
use crate::nn::layers::{Conv1d, Linear};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParamStore, Var};
use crate::rng;

pub const KIND: &str = "motion_expert";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Minimum shift for temporal negatives.
    pub min_offset: usize,
    /// Fraction of each batch that is negative pairs.
    pub negative_fraction: f64,
    /// Fraction of negatives drawn as temporal offsets (rest cross-script).
    pub offset_share: f64,
    /// Stride between windows for sync scoring.
    pub sync_stride: usize,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            window: 16,
            embed_dim: 32,
            hidden: 32,
            kernel: 3,
            steps: 800,
            batch: 32,
            lr: 3e-3,
            min_offset: 5,
            negative_fraction: 0.5,
            offset_share: 0.5,
            sync_stride: 4,
            seed: 0,
        }
    }
}

/// Unit-norm embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbedding {
    pub vector: Vec<f64>,
}

impl SemanticEmbedding {
    pub fn cosine(&self, other: &SemanticEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug)]
struct Tower {
    conv1: Conv1d,
    conv2: Conv1d,
    head: Linear,
}

impl Tower {
    fn new(store: &mut ParamStore, name: &str, input: usize, cfg: &ExpertConfig, rng: &mut rng::Rng) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), input, cfg.hidden, cfg.kernel, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), cfg.hidden, cfg.hidden, cfg.kernel, rng),
            head: Linear::new(store, &format!("{name}.head"), cfg.hidden, cfg.embed_dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let h = g.silu(h);
        let pooled = g.mean_rows(h);
        let e = self.head.forward(g, store, pooled);
        g.normalize_rows(e)
    }
}

/// Whole-window standardization (single mean and deviation over all
/// entries), which makes the audio tower invariant to positive rescaling.
pub fn standardize_window(x: &Mat) -> Mat {
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return x.map(|v| v - mean);
    }
    x.map(|v| (v - mean) / sd)
}

#[derive(Clone, Debug)]
pub struct MotionExpert {
    pub config: ExpertConfig,
    pub partition: RegionPartition,
    pub audio_dim: usize,
    pub store: ParamStore,
    audio: Tower,
    motion: Tower,
    pub metrics: serde_json::Value,
}

impl MotionExpert {
    pub fn new(config: &ExpertConfig, audio_dim: usize, partition: &RegionPartition) -> Self {
        let mut rng = rng::seeded(config.seed, &[0xe4, 0x1]);
        let mut store = ParamStore::new();
        let audio = Tower::new(&mut store, "audio", audio_dim, config, &mut rng);
        let motion = Tower::new(&mut store, "motion", partition.lower.len(), config, &mut rng);
        Self {
            config: config.clone(),
            partition: partition.clone(),
            audio_dim,
            store,
            audio,
            motion,
            metrics: serde_json::Value::Null,
        }
    }

    fn audio_var(&self, g: &mut Graph, features: &Mat) -> Var {
        let x = g.constant(standardize_window(features));
        self.audio.forward(g, &self.store, x)
    }

    fn motion_var(&self, g: &mut Graph, lower: &Mat) -> Var {
        let x = g.constant(lower.clone());
        self.motion.forward(g, &self.store, x)
    }

    fn check_window(len: usize, start: usize, width: usize) -> Result<()> {
        if width == 0 {
            return Err(invalid("embedding window must be nonempty"));
        }
        if start + width > len {
            return Err(invalid(format!(
                "window [{start}, {}) outside sequence of {len} frames",
                start + width
            )));
        }
        Ok(())
    }

    /// Audio-semantic embedding of frames `[start, start + len)`.
    pub fn embed_audio(&self, audio: &PseudoAudioFeatures, start: usize, len: usize) -> Result<SemanticEmbedding> {
        Self::check_window(audio.len(), start, len)?;
        if audio.features.cols() != self.audio_dim {
            return Err(invalid(format!(
                "audio has {} channels, expert expects {}",
                audio.features.cols(),
                self.audio_dim
            )));
        }
        let mut g = Graph::new();
        let e = self.audio_var(&mut g, &audio.features.slice_rows(start, len));
        Ok(SemanticEmbedding {
            vector: g.value(e).data().to_vec(),
        })
    }

    /// Motion-tower embedding of the lower-face dims of a window.
    pub fn embed_motion(&self, motion: &MotionSequence, start: usize, len: usize) -> Result<SemanticEmbedding> {
        Self::check_window(motion.len(), start, len)?;
        let lower = motion
            .expression
            .slice_rows(start, len)
            .select_cols(&self.partition.lower);
        let mut g = Graph::new();
        let e = self.motion_var(&mut g, &lower);
        Ok(SemanticEmbedding {
            vector: g.value(e).data().to_vec(),
        })
    }

    /// Mean audio/motion cosine over sliding windows; in `[-1, 1]`.
    pub fn sync_confidence(
        &self,
        audio: &PseudoAudioFeatures,
        motion: &MotionSequence,
        partition: &RegionPartition,
    ) -> Result<f64> {
        if audio.len() != motion.len() {
            return Err(invalid(format!(
                "audio has {} frames, motion has {}",
                audio.len(),
                motion.len()
            )));
        }
        if partition != &self.partition {
            return Err(invalid("sync_confidence partition differs from the expert's"));
        }
        let t = audio.len();
        let w = self.config.window.min(t);
        let stride = self.config.sync_stride.max(1);
        let mut starts: Vec<usize> = (0..=t - w).step_by(stride).collect();
        if *starts.last().expect("nonempty") != t - w {
            starts.push(t - w);
        }
        let mut total = 0.0;
        for &s in &starts {
            let a = self.embed_audio(audio, s, w)?;
            let m = self.embed_motion(motion, s, w)?;
            total += a.cosine(&m);
        }
        Ok((total / starts.len() as f64).clamp(-1.0, 1.0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = json!({
            "expert": self.config,
            "audio_dim": self.audio_dim,
            "partition": self.partition,
        });
        Checkpoint::from_store(KIND, config, self.metrics.clone(), &[("", &self.store)])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: ExpertConfig =
            serde_json::from_value(ck.config["expert"].clone()).map_err(|e| invalid(format!("expert config: {e}")))?;
        let audio_dim = ck.config["audio_dim"]
            .as_u64()
            .ok_or_else(|| invalid("expert audio_dim missing"))? as usize;
        let partition: RegionPartition = serde_json::from_value(ck.config["partition"].clone())
            .map_err(|e| invalid(format!("expert partition: {e}")))?;
        let mut m = Self::new(&config, audio_dim, &partition);
        ck.fill_store("", &mut m.store)?;
        m.metrics = ck.metrics.clone();
        Ok(m)
    }
}

struct Pair {
    clip: usize,
    audio_start: usize,
    motion_clip: usize,
    motion_start: usize,
    label: f64,
}

fn offset_start(rng: &mut rng::Rng, start: usize, t: usize, w: usize, min_offset: usize) -> Option<usize> {
    let candidates: Vec<usize> = (0..=t - w).filter(|&s| s.abs_diff(start) >= min_offset).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

fn sample_pairs(corpus: &Corpus, pool: &[usize], cfg: &ExpertConfig, rng: &mut rng::Rng) -> Vec<Pair> {
    let n_neg = ((cfg.batch as f64) * cfg.negative_fraction).round() as usize;
    let mut pairs = Vec::with_capacity(cfg.batch);
    for k in 0..cfg.batch {
        let clip = pool[rng.random_range(0..pool.len())];
        let t = corpus.clips[clip].motion.len();
        let w = cfg.window.min(t);
        let start = rng.random_range(0..=t - w);
        if k >= n_neg {
            pairs.push(Pair {
                clip,
                audio_start: start,
                motion_clip: clip,
                motion_start: start,
                label: 1.0,
            });
            continue;
        }
        let temporal = rng.random_bool(cfg.offset_share.clamp(0.0, 1.0));
        let shifted = if temporal {
            offset_start(rng, start, t, w, cfg.min_offset)
        } else {
            None
        };
        match shifted {
            Some(s) => pairs.push(Pair {
                clip,
                audio_start: start,
                motion_clip: clip,
                motion_start: s,
                label: 0.0,
            }),
            None => {
                let content = corpus.clips[clip].content;
                let others: Vec<usize> = pool
                    .iter()
                    .copied()
                    .filter(|&j| corpus.clips[j].content != content)
                    .collect();
                let other = if others.is_empty() {
                    clip
                } else {
                    others[rng.random_range(0..others.len())]
                };
                let tt = corpus.clips[other].motion.len();
                let s = rng.random_range(0..=tt.saturating_sub(w));
                pairs.push(Pair {
                    clip,
                    audio_start: start,
                    motion_clip: other,
                    motion_start: s,
                    label: 0.0,
                });
            }
        }
    }
    pairs
}

/// Fraction of windows where the aligned pair outscores a shifted pair.
pub fn offset_accuracy(expert: &MotionExpert, corpus: &Corpus, clips: &[usize], seed: u64) -> Result<f64> {
    let mut rng = rng::seeded(seed, &[0xacc]);
    let w = expert.config.window;
    let (mut hits, mut total) = (0usize, 0usize);
    for &i in clips {
        let clip = &corpus.clips[i];
        let t = clip.motion.len();
        if t < w {
            continue;
        }
        for start in (0..=t - w).step_by(w / 2) {
            let Some(shift) = offset_start(&mut rng, start, t, w, expert.config.min_offset) else {
                continue;
            };
            let a = expert.embed_audio(&clip.audio, start, w)?;
            let aligned = a.cosine(&expert.embed_motion(&clip.motion, start, w)?);
            let offset = a.cosine(&expert.embed_motion(&clip.motion, shift, w)?);
            hits += (aligned > offset) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Trains the expert on the train split; validation accuracy uses the
/// validation split.
pub fn train_expert(corpus: &Corpus, config: &ExpertConfig) -> TrainResult<MotionExpert> {
    if config.negative_fraction <= 0.0 || (config.batch as f64 * config.negative_fraction).round() < 1.0 {
        return Err(invalid("contrastive objective needs at least one negative per batch").into());
    }
    if config.negative_fraction >= 1.0 {
        return Err(invalid("contrastive objective needs at least one positive per batch").into());
    }
    let pool = corpus.indices(Split::Train);
    if pool.is_empty() {
        return Err(invalid("train split is empty").into());
    }
    if corpus.clips[pool[0]].motion.len() < config.window {
        return Err(invalid("clips shorter than the expert window").into());
    }
    let cc = &corpus.config;
    let mut expert = MotionExpert::new(config, cc.audio_dim, &cc.partition);
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut rng = rng::seeded(config.seed, &[0xe4, 0x2]);
    let mut last_good = expert.store.clone();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pairs = sample_pairs(corpus, &pool, config, &mut rng);
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let w = config.window;
            let audio = corpus.clips[p.clip].audio.features.slice_rows(p.audio_start, w);
            let lower = corpus.clips[p.motion_clip]
                .motion
                .expression
                .slice_rows(p.motion_start, w)
                .select_cols(&cc.partition.lower);
            let a = expert.audio_var(&mut g, &audio);
            let m = expert.motion_var(&mut g, &lower);
            let prod = g.mul(a, m);
            let cos = g.sum_all(prod);
            terms.push((cos, p.label));
        }
        let loss = bce_on_cosines(&mut g, &terms);
        let value = g.scalar(loss);
        if !value.is_finite() {
            expert.store = last_good;
            return Err(TrainError::Diverged(Diverged {
                step,
                detail: format!("expert loss {value}"),
                last_good: expert,
            }));
        }
        last_good = expert.store.clone();
        let grads = g.backward(loss);
        opt.step(&mut expert.store, &grads, cosine_lr(step, config.steps));
        curve.push(value);
    }
    expert.store.round_f32();
    let val = corpus.indices(Split::Val);
    let acc = offset_accuracy(&expert, corpus, &val, config.seed)?;
    expert.metrics = json!({
        "val_offset_accuracy": acc,
        "loss_curve": curve,
        "corpus_fingerprint": corpus.fingerprint(),
    });
    Ok(expert)
}

/// Mean BCE with `p = (1 + cos) / 2`, clamped away from 0 and 1.
fn bce_on_cosines(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let eps = 1e-6;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(terms.len());
    for &(cos, y) in terms {
        let c = g.scalar(cos);
        let p = ((1.0 + c) / 2.0).clamp(eps, 1.0 - eps);
        value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        let dp = -(y / p) + (1.0 - y) / (1.0 - p);
        let inside = (1.0 + c) / 2.0 > eps && (1.0 + c) / 2.0 < 1.0 - eps;
        let d = if inside { dp * 0.5 } else { 0.0 };
        grads.push((cos, Mat::scalar(d / terms.len() as f64)));
    }
    g.scalar_fn(value / terms.len() as f64, grads)
}

/// Half-cosine decay to 10% of the base rate.
pub(crate) fn cosine_lr(step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
