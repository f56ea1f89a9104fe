//! Conditional diffusion transformer over motion tensors.
//!
//! Each block runs self-attention, then two cross-attention passes that
//! share one query projection: one over per-frame audio tokens, one over
//! the single style token. The two outputs are fused per channel region.
//! The first half of the hidden channels is the upper-face group and the
//! second half the lower-face group. For each region the audio and style
//! outputs are scored by cosine against their sum, turned into a dominance
//! factor `D = sigmoid(P_a - P_s)`, and recombined as
//! `Z_s / D + Z_a` (upper) or `Z_a * D + Z_s` (lower).

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, Diverged, TrainError, TrainResult};
use crate::corpus::{Corpus, PseudoAudioFeatures, Split};
use crate::error::{invalid, Result};
use crate::expert::{cosine_lr, MotionExpert};
use crate::motion::{MotionSequence, RegionPartition};
use crate::nn::graph::sigmoid;
use crate::nn::layers::{sinusoidal, sinusoidal_scalar, Attention, Conv1d, FeedForward, LayerNorm, Linear};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParamStore, Var};
use crate::rng;
use crate::style::{StyleEmbedding, StyleEncoder};

pub const KIND: &str = "motion_diffusion";

/// Lower and upper bounds of the dominance factor.
pub const D_MIN: f64 = 0.11920292202211755;
pub const D_MAX: f64 = 0.8807970779778823;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub audio_kernel: usize,
    /// Each frame attends to audio tokens at most this many frames away.
    pub audio_window: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Region modulation; `false` fuses the two streams by plain addition.
    pub hscales: bool,
    /// Blocks that modulate; `None` means every block.
    pub modulated_blocks: Option<Vec<usize>>,
    pub eval_every: usize,
    pub min_frames: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            d_model: 64,
            blocks: 4,
            heads: 4,
            audio_kernel: 5,
            audio_window: 3,
            steps: 1200,
            batch: 8,
            lr: 1e-3,
            hscales: true,
            modulated_blocks: None,
            eval_every: 300,
            min_frames: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let betas = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("betas must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("betas must be nondecreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    /// Cumulative product at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(x0: &Mat, t: usize, noise: &Mat, schedule: &NoiseSchedule) -> Result<Mat> {
    schedule.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(invalid(format!(
            "x0 {:?} and noise {:?} differ in shape",
            x0.shape(),
            noise.shape()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, e| a * x + b * e))
}

/// Hidden-channel groups standing for the upper and lower face.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGroups {
    pub upper: Range<usize>,
    pub lower: Range<usize>,
}

impl RegionGroups {
    pub fn halves(d_model: usize) -> Self {
        Self {
            upper: 0..d_model / 2,
            lower: d_model / 2..d_model,
        }
    }

    fn check(&self, cols: usize) -> Result<()> {
        if self.upper.is_empty() || self.lower.is_empty() || self.upper.end > cols || self.lower.end > cols {
            return Err(invalid(format!(
                "region groups {:?}/{:?} do not fit {cols} channels",
                self.upper, self.lower
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub p_a: f64,
    pub p_s: f64,
    /// A flattened slice had zero norm; the affected score is 0.
    pub degenerate: bool,
}

fn flat_cosine(x: &Mat, z: &Mat) -> Option<f64> {
    let (nx, nz) = (x.sq_norm(), z.sq_norm());
    if nx == 0.0 || nz == 0.0 {
        return None;
    }
    Some(x.dot(z) / (nx * nz).sqrt())
}

/// Cosine of each stream against the combined map, per region, with every
/// token of the region flattened into one vector.
pub fn region_projection_scores(z_a: &Mat, z_s: &Mat, groups: &RegionGroups) -> Result<[RegionScore; 2]> {
    if z_a.shape() != z_s.shape() {
        return Err(invalid(format!(
            "Z_a {:?} and Z_s {:?} differ in shape",
            z_a.shape(),
            z_s.shape()
        )));
    }
    groups.check(z_a.cols())?;
    let score = |r: &Range<usize>| {
        let a = z_a.slice_cols(r.start, r.len());
        let s = z_s.slice_cols(r.start, r.len());
        let z = a.zip_map(&s, |x, y| x + y);
        let (pa, ps) = (flat_cosine(&a, &z), flat_cosine(&s, &z));
        RegionScore {
            p_a: pa.unwrap_or(0.0),
            p_s: ps.unwrap_or(0.0),
            degenerate: pa.is_none() || ps.is_none(),
        }
    };
    Ok([score(&groups.upper), score(&groups.lower)])
}

pub fn dominance(p_a: f64, p_s: f64) -> f64 {
    sigmoid(p_a - p_s)
}

/// Region-wise fusion: `Z_s / D_u + Z_a` on the upper group,
/// `Z_a * D_l + Z_s` on the lower group; other channels add.
pub fn modulate(z_a: &Mat, z_s: &Mat, d_u: f64, d_l: f64, groups: &RegionGroups) -> Result<Mat> {
    if z_a.shape() != z_s.shape() {
        return Err(invalid("Z_a and Z_s differ in shape"));
    }
    groups.check(z_a.cols())?;
    if !(d_u > 0.0 && d_l > 0.0) {
        return Err(invalid(format!("dominance factors must be positive, got {d_u}, {d_l}")));
    }
    Ok(Mat::from_fn(z_a.rows(), z_a.cols(), |r, c| {
        let (a, s) = (z_a.get(r, c), z_s.get(r, c));
        if groups.upper.contains(&c) {
            s / d_u + a
        } else if groups.lower.contains(&c) {
            a * d_l + s
        } else {
            a + s
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub block: usize,
    pub timestep: usize,
    pub region: Region,
    pub p_a: f64,
    pub p_s: f64,
    pub d: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModulationTelemetry {
    pub records: Vec<TelemetryRecord>,
}

impl ModulationTelemetry {
    pub fn mean_d(&self, region: Region) -> f64 {
        let ds: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.region == region)
            .map(|r| r.d)
            .collect();
        if ds.is_empty() {
            return f64::NAN;
        }
        ds.iter().sum::<f64>() / ds.len() as f64
    }

    pub fn d_range(&self) -> (f64, f64) {
        self.records
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.d), hi.max(r.d))
            })
    }

    /// Every D strictly inside the sigmoid range and equal to
    /// `sigmoid(P_a - P_s)`.
    pub fn is_consistent(&self) -> bool {
        self.records.iter().all(|r| {
            r.d > D_MIN
                && r.d < D_MAX
                && (-1.0..=1.0).contains(&r.p_a)
                && (-1.0..=1.0).contains(&r.p_s)
                && r.d == dominance(r.p_a, r.p_s)
        })
    }
}

/// Per-sequence conditioning inputs before projection: normalized audio
/// features with the expert embedding of the surrounding window appended,
/// and the raw style embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInputs {
    pub audio: Mat,
    pub style: Vec<f64>,
    pub null_audio: bool,
    pub null_style: bool,
}

/// Projected condition tokens, as seen by the cross-attention layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub audio_tokens: Mat,
    pub style_token: Mat,
    pub null_audio: bool,
    pub null_style: bool,
}

/// Anything that predicts noise for a stacked batch of sequences.
pub trait NoisePredictor {
    fn channels(&self) -> usize;
    /// `x_t` stacks the sequences row-wise; `lens[i]` rows belong to
    /// sequence `i`, noised to step `ts[i]`.
    fn predict_noise(
        &self,
        g: &mut Graph,
        x_t: Var,
        lens: &[usize],
        conds: &[ConditionInputs],
        ts: &[usize],
    ) -> Result<Var>;
}

/// Samples `t` and noise per sequence and returns the mean squared error
/// between the noise and its prediction, with the sampled steps.
pub fn denoising_loss(
    g: &mut Graph,
    model: &dyn NoisePredictor,
    x0: &[Mat],
    conds: &[ConditionInputs],
    schedule: &NoiseSchedule,
    rng: &mut rng::Rng,
) -> Result<(Var, Vec<usize>)> {
    if x0.is_empty() || x0.len() != conds.len() {
        return Err(invalid(format!(
            "{} sequences vs {} condition sets",
            x0.len(),
            conds.len()
        )));
    }
    let c = model.channels();
    if let Some(bad) = x0.iter().find(|x| x.cols() != c) {
        return Err(invalid(format!(
            "sequence has {} channels, model expects {c}",
            bad.cols()
        )));
    }
    let mut ts = Vec::with_capacity(x0.len());
    let mut noisy = Vec::with_capacity(x0.len());
    let mut noises = Vec::with_capacity(x0.len());
    for x in x0 {
        let t = rng.random_range(1..=schedule.len());
        let eps = rng::normal_mat(rng, x.rows(), x.cols());
        noisy.push(forward_diffuse(x, t, &eps, schedule)?);
        noises.push(eps);
        ts.push(t);
    }
    let lens: Vec<usize> = x0.iter().map(|x| x.rows()).collect();
    let xt = g.constant(Mat::concat_rows(&noisy.iter().collect::<Vec<_>>()));
    let eps = g.constant(Mat::concat_rows(&noises.iter().collect::<Vec<_>>()));
    let pred = model.predict_noise(g, xt, &lens, conds, &ts)?;
    if g.value(pred).shape() != g.value(eps).shape() {
        return Err(invalid("noise prediction has the wrong shape"));
    }
    let diff = g.sub(eps, pred);
    let sq = g.square(diff);
    Ok((g.mean_all(sq), ts))
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    query: Linear,
    cross_a: Attention,
    cross_s: Attention,
    ln3: LayerNorm,
    ff: FeedForward,
    modulated: bool,
}

/// Per-sequence scores of one block: `(region, score, D)`.
type BlockScores = Vec<[(RegionScore, f64); 2]>;

fn graph_cosine(g: &mut Graph, x: Var, z: Var) -> Var {
    let xz = g.mul(x, z);
    let dot = g.sum_all(xz);
    let xx = g.square(x);
    let nx = g.sum_all(xx);
    let zz = g.square(z);
    let nz = g.sum_all(zz);
    let den = g.mul(nx, nz);
    let den = g.add_const(den, 1e-300);
    let den = g.sqrt(den);
    g.div(dot, den)
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &DiffusionConfig, modulated: bool, rng: &mut rng::Rng) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: Attention::new(store, &format!("{name}.self"), d, d, cfg.heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            cross_a: Attention::without_query(store, &format!("{name}.audio"), d, d, cfg.heads, rng),
            cross_s: Attention::without_query(store, &format!("{name}.style"), d, d, cfg.heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, 2 * d, rng),
            modulated,
        }
    }

    /// Audio and style cross-attention outputs for one sequence, sharing the
    /// projected queries `q`.
    fn dual_cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        audio: Var,
        style: Var,
        band: Var,
    ) -> (Var, Var) {
        let (za, _) = self.cross_a.attend_biased(g, store, q, audio, Some(band));
        let (zs, _) = self.cross_s.attend(g, store, q, style);
        (za, zs)
    }

    /// Fused cross-attention output and the scores behind it.
    fn fuse(
        &self,
        g: &mut Graph,
        za: Var,
        zs: Var,
        groups: &RegionGroups,
        hscales: bool,
    ) -> (Var, [(RegionScore, f64); 2]) {
        let mut parts = Vec::with_capacity(2);
        let mut scores = [(
            RegionScore {
                p_a: 0.0,
                p_s: 0.0,
                degenerate: false,
            },
            0.5,
        ); 2];
        for (k, r) in [&groups.upper, &groups.lower].into_iter().enumerate() {
            let a = g.slice_cols(za, r.start, r.len());
            let s = g.slice_cols(zs, r.start, r.len());
            let z = g.add(a, s);
            let pa = graph_cosine(g, a, z);
            let ps = graph_cosine(g, s, z);
            let gap = g.sub(pa, ps);
            let d = g.sigmoid(gap);
            let degenerate = g.value(a).sq_norm() == 0.0 || g.value(s).sq_norm() == 0.0 || g.value(z).sq_norm() == 0.0;
            scores[k] = (
                RegionScore {
                    p_a: g.scalar(pa),
                    p_s: g.scalar(ps),
                    degenerate,
                },
                g.scalar(d),
            );
            let fused = if hscales && self.modulated {
                if k == 0 {
                    let scaled = g.div_scalar(s, d);
                    g.add(scaled, a)
                } else {
                    let scaled = g.mul_scalar(a, d);
                    g.add(scaled, s)
                }
            } else {
                z
            };
            parts.push(fused);
        }
        (g.concat_cols(&parts), scores)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        spans: &[(usize, usize)],
        audio: Var,
        style: &[Var],
        bands: &[Var],
        groups: &RegionGroups,
        hscales: bool,
    ) -> (Var, BlockScores) {
        let x = self.ln1.forward(g, store, h);
        let attn: Vec<Var> = spans
            .iter()
            .map(|&(s, n)| {
                let xs = g.slice_rows(x, s, n);
                self.self_attn.forward(g, store, xs, xs)
            })
            .collect();
        let attn = g.concat_rows(&attn);
        let h = g.add(h, attn);
        let x = self.ln2.forward(g, store, h);
        let q = self.query.forward(g, store, x);
        let mut fused = Vec::with_capacity(spans.len());
        let mut scores = Vec::with_capacity(spans.len());
        for (i, &(s, n)) in spans.iter().enumerate() {
            let qs = g.slice_rows(q, s, n);
            let a = g.slice_rows(audio, s, n);
            let (za, zs) = self.dual_cross_attention(g, store, qs, a, style[i], bands[i]);
            let (z, sc) = self.fuse(g, za, zs, groups, hscales);
            fused.push(z);
            scores.push(sc);
        }
        let fused = g.concat_rows(&fused);
        let h = g.add(h, fused);
        let x = self.ln3.forward(g, store, h);
        let f = self.ff.forward(g, store, x);
        (g.add(h, f), scores)
    }
}

/// Additive attention bias that masks keys more than `radius` frames away.
pub fn band_bias(len: usize, radius: usize) -> Mat {
    Mat::from_fn(len, len, |r, c| if r.abs_diff(c) <= radius { 0.0 } else { -1e9 })
}

/// Channel statistics used to whiten motion and audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub motion_mean: Mat,
    pub motion_std: Mat,
    pub audio_mean: Mat,
    pub audio_std: Mat,
}

fn column_stats(rows: &Mat) -> (Mat, Mat) {
    let mean = rows.col_means();
    let sd = Mat::from_fn(1, rows.cols(), |_, c| {
        let m = mean.get(0, c);
        let v = rows.column(c).iter().map(|x| (x - m) * (x - m)).sum::<f64>() / rows.rows() as f64;
        v.sqrt().max(1e-6)
    });
    (mean, sd)
}

impl Normalizer {
    pub fn fit(corpus: &Corpus, clips: &[usize]) -> Self {
        let motion: Vec<Mat> = clips.iter().map(|&i| corpus.clips[i].motion.motion_tensor()).collect();
        let audio: Vec<&Mat> = clips.iter().map(|&i| &corpus.clips[i].audio.features).collect();
        let (motion_mean, motion_std) = column_stats(&Mat::concat_rows(&motion.iter().collect::<Vec<_>>()));
        let (audio_mean, audio_std) = column_stats(&Mat::concat_rows(&audio));
        let mut n = Self {
            motion_mean,
            motion_std,
            audio_mean,
            audio_std,
        };
        for m in [
            &mut n.motion_mean,
            &mut n.motion_std,
            &mut n.audio_mean,
            &mut n.audio_std,
        ] {
            m.round_f32();
        }
        n
    }

    fn apply(x: &Mat, mean: &Mat, sd: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - mean.get(0, c)) / sd.get(0, c))
    }

    pub fn motion(&self, x: &Mat) -> Mat {
        Self::apply(x, &self.motion_mean, &self.motion_std)
    }

    pub fn motion_inverse(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |r, c| {
            x.get(r, c) * self.motion_std.get(0, c) + self.motion_mean.get(0, c)
        })
    }

    pub fn audio(&self, x: &Mat) -> Mat {
        Self::apply(x, &self.audio_mean, &self.audio_std)
    }
}

#[derive(Clone, Debug)]
pub struct MotionDenoiser {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub partition: RegionPartition,
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub audio_dim: usize,
    pub expert_dim: usize,
    pub expert_window: usize,
    pub style_dim: usize,
    pub groups: RegionGroups,
    pub normalizer: Normalizer,
    pub store: ParamStore,
    input: Linear,
    time1: Linear,
    time2: Linear,
    audio_conv: Conv1d,
    audio_out: Linear,
    style_proj: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out_upper: Linear,
    out_lower: Linear,
    /// Maps `[upper dims, lower dims, pose]` back to tensor column order.
    perm: Mat,
    pub metrics: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenoiserShape {
    partition: RegionPartition,
    expr_dim: usize,
    pose_dim: usize,
    audio_dim: usize,
    expert_dim: usize,
    expert_window: usize,
    style_dim: usize,
}

impl MotionDenoiser {
    fn build(config: &DiffusionConfig, shape: &DenoiserShape, normalizer: Normalizer) -> Result<Self> {
        let d = config.d_model;
        if d < 2 || !d.is_multiple_of(2) || config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(invalid(format!(
                "d_model {d} must be even and divisible by {} heads",
                config.heads
            )));
        }
        if config.audio_kernel.is_multiple_of(2) {
            return Err(invalid("audio_kernel must be odd"));
        }
        if let Some(bad) = config.modulated_blocks.iter().flatten().find(|&&b| b >= config.blocks) {
            return Err(invalid(format!("modulated block {bad} outside 0..{}", config.blocks)));
        }
        shape.partition.validate(shape.expr_dim)?;
        let schedule = NoiseSchedule::linear(config.t_steps, config.beta_start, config.beta_end)?;
        let mut rng = rng::seeded(config.seed, &[0xd1, 0x1]);
        let mut store = ParamStore::new();
        let c = shape.expr_dim + shape.pose_dim;
        let input = Linear::new(&mut store, "input", c, d, &mut rng);
        let time1 = Linear::new(&mut store, "time1", d, d, &mut rng);
        let time2 = Linear::new(&mut store, "time2", d, d, &mut rng);
        let audio_in = shape.audio_dim + shape.expert_dim;
        let audio_conv = Conv1d::new(&mut store, "audio.conv", audio_in, d, config.audio_kernel, &mut rng);
        let audio_out = Linear::new(&mut store, "audio.out", d, d, &mut rng);
        let style_proj = Linear::new(&mut store, "style.proj", shape.style_dim, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                let modulated = config.modulated_blocks.as_ref().is_none_or(|m| m.contains(&b));
                Block::new(&mut store, &format!("block{b}"), config, modulated, &mut rng)
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "ln_out", d);
        let groups = RegionGroups::halves(d);
        let nu = shape.partition.upper.len();
        let nl = shape.partition.lower.len() + shape.pose_dim;
        let out_upper = Linear::new_scaled(&mut store, "out.upper", groups.upper.len(), nu, 0.1, &mut rng);
        let out_lower = Linear::new_scaled(&mut store, "out.lower", groups.lower.len(), nl, 0.1, &mut rng);
        let targets: Vec<usize> = shape
            .partition
            .upper
            .iter()
            .chain(&shape.partition.lower)
            .copied()
            .chain(shape.expr_dim..c)
            .collect();
        let mut perm = Mat::zeros(c, c);
        for (k, &t) in targets.iter().enumerate() {
            perm.set(k, t, 1.0);
        }
        Ok(Self {
            config: config.clone(),
            schedule,
            partition: shape.partition.clone(),
            expr_dim: shape.expr_dim,
            pose_dim: shape.pose_dim,
            audio_dim: shape.audio_dim,
            expert_dim: shape.expert_dim,
            expert_window: shape.expert_window,
            style_dim: shape.style_dim,
            groups,
            normalizer,
            store,
            input,
            time1,
            time2,
            audio_conv,
            audio_out,
            style_proj,
            blocks,
            ln_out,
            out_upper,
            out_lower,
            perm,
            metrics: serde_json::Value::Null,
        })
    }

    fn shape(&self) -> DenoiserShape {
        DenoiserShape {
            partition: self.partition.clone(),
            expr_dim: self.expr_dim,
            pose_dim: self.pose_dim,
            audio_dim: self.audio_dim,
            expert_dim: self.expert_dim,
            expert_window: self.expert_window,
            style_dim: self.style_dim,
        }
    }

    /// Audio conditioning rows: whitened features plus, for every frame, the
    /// expert embedding of the window around it.
    pub fn audio_inputs(&self, audio: &PseudoAudioFeatures, expert: &MotionExpert) -> Result<Mat> {
        if audio.features.cols() != self.audio_dim {
            return Err(invalid(format!(
                "audio has {} channels, model expects {}",
                audio.features.cols(),
                self.audio_dim
            )));
        }
        if expert.config.embed_dim != self.expert_dim {
            return Err(invalid("expert embedding width differs from the model's"));
        }
        let t = audio.len();
        if t < self.config.min_frames {
            return Err(invalid(format!(
                "audio of {t} frames is shorter than the minimum {}",
                self.config.min_frames
            )));
        }
        let w = self.expert_window.min(t);
        let embeds: Vec<Vec<f64>> = (0..=t - w)
            .map(|s| expert.embed_audio(audio, s, w).map(|e| e.vector))
            .collect::<Result<_>>()?;
        let feats = self.normalizer.audio(&audio.features);
        Ok(Mat::from_fn(t, self.audio_dim + self.expert_dim, |r, c| {
            if c < self.audio_dim {
                feats.get(r, c)
            } else {
                let start = r.saturating_sub(w / 2).min(t - w);
                embeds[start][c - self.audio_dim]
            }
        }))
    }

    pub fn conditions(
        &self,
        audio: &PseudoAudioFeatures,
        expert: &MotionExpert,
        style: &StyleEmbedding,
    ) -> Result<ConditionInputs> {
        if style.vector.len() != self.style_dim {
            return Err(invalid(format!(
                "style embedding has {} dims, model expects {}",
                style.vector.len(),
                self.style_dim
            )));
        }
        Ok(ConditionInputs {
            audio: self.audio_inputs(audio, expert)?,
            style: style.vector.clone(),
            null_audio: false,
            null_style: false,
        })
    }

    fn condition_vars(&self, g: &mut Graph, conds: &[ConditionInputs]) -> (Var, Vec<Var>) {
        let mut audio = Vec::with_capacity(conds.len());
        let mut style = Vec::with_capacity(conds.len());
        for c in conds {
            let a = g.constant(c.audio.clone());
            let a = self.audio_conv.forward(g, &self.store, a);
            let a = g.silu(a);
            let mut a = self.audio_out.forward(g, &self.store, a);
            if c.null_audio {
                a = g.scale(a, 0.0);
            }
            audio.push(a);
            let s = g.constant(Mat::row_vector(&c.style));
            let mut s = self.style_proj.forward(g, &self.store, s);
            if c.null_style {
                s = g.scale(s, 0.0);
            }
            style.push(s);
        }
        (g.concat_rows(&audio), style)
    }

    pub fn condition_bundle(&self, cond: &ConditionInputs) -> ConditionBundle {
        let mut g = Graph::new();
        let (a, s) = self.condition_vars(&mut g, std::slice::from_ref(cond));
        ConditionBundle {
            audio_tokens: g.value(a).clone(),
            style_token: g.value(s[0]).clone(),
            null_audio: cond.null_audio,
            null_style: cond.null_style,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        lens: &[usize],
        conds: &[ConditionInputs],
        ts: &[usize],
    ) -> Result<(Var, Vec<BlockScores>)> {
        if lens.len() != conds.len() || lens.len() != ts.len() {
            return Err(invalid("lens, conditions and timesteps differ in count"));
        }
        let total: usize = lens.iter().sum();
        if g.value(x_t).rows() != total || g.value(x_t).cols() != self.expr_dim + self.pose_dim {
            return Err(invalid(format!(
                "x_t {:?} does not match {total} rows of {} channels",
                g.value(x_t).shape(),
                self.expr_dim + self.pose_dim
            )));
        }
        for ((&n, c), &t) in lens.iter().zip(conds).zip(ts) {
            if c.audio.rows() != n {
                return Err(invalid(format!(
                    "{} audio tokens for {n} motion frames",
                    c.audio.rows()
                )));
            }
            if c.audio.cols() != self.audio_dim + self.expert_dim || c.style.len() != self.style_dim {
                return Err(invalid("condition widths do not match the model"));
            }
            self.schedule.check(t)?;
        }
        let d = self.config.d_model;
        let mut spans = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for &n in lens {
            spans.push((offset, n));
            offset += n;
        }
        let pos: Vec<Mat> = lens.iter().map(|&n| sinusoidal(n, d, 0.0)).collect();
        let pos = g.constant(Mat::concat_rows(&pos.iter().collect::<Vec<_>>()));
        let temb: Vec<Mat> = ts.iter().map(|&t| sinusoidal_scalar(t as f64, d)).collect();
        let temb = g.constant(Mat::concat_rows(&temb.iter().collect::<Vec<_>>()));
        let temb = self.time1.forward(g, &self.store, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, &self.store, temb);
        let temb_rows: Vec<Var> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let row = g.slice_rows(temb, i, 1);
                g.broadcast_rows(row, n)
            })
            .collect();
        let temb = g.concat_rows(&temb_rows);
        let h = self.input.forward(g, &self.store, x_t);
        let h = g.add(h, pos);
        let mut h = g.add(h, temb);
        let (audio, style) = self.condition_vars(g, conds);
        let audio = g.add(audio, pos);
        let bands: Vec<Var> = lens
            .iter()
            .map(|&n| g.constant(band_bias(n, self.config.audio_window)))
            .collect();
        let mut scores = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, sc) = block.forward(
                g,
                &self.store,
                h,
                &spans,
                audio,
                &style,
                &bands,
                &self.groups,
                self.config.hscales,
            );
            h = next;
            scores.push(sc);
        }
        let h = self.ln_out.forward(g, &self.store, h);
        let hu = g.slice_cols(h, self.groups.upper.start, self.groups.upper.len());
        let hl = g.slice_cols(h, self.groups.lower.start, self.groups.lower.len());
        let ou = self.out_upper.forward(g, &self.store, hu);
        let ol = self.out_lower.forward(g, &self.store, hl);
        let out = g.concat_cols(&[ou, ol]);
        let perm = g.constant(self.perm.clone());
        Ok((g.matmul(out, perm), scores))
    }

    /// Ancestral sampling for a batch of condition sets; each sequence draws
    /// its noise from its own seed, so results do not depend on batching.
    pub fn sample_batch(
        &self,
        conds: &[ConditionInputs],
        seeds: &[u64],
        steps: Option<usize>,
    ) -> Result<Vec<(Mat, ModulationTelemetry)>> {
        let t_max = self.schedule.len();
        match steps {
            Some(s) if s > t_max => return Err(invalid(format!("{s} sampling steps exceed the schedule's {t_max}"))),
            Some(s) if s != t_max => {
                return Err(invalid(format!(
                    "only full ancestral sampling over all {t_max} steps is supported, got {s}"
                )))
            }
            _ => {}
        }
        if conds.len() != seeds.len() {
            return Err(invalid("one seed per condition set required"));
        }
        if let Some(c) = conds.iter().find(|c| c.audio.rows() < self.config.min_frames) {
            return Err(invalid(format!(
                "audio of {} frames is shorter than the minimum {}",
                c.audio.rows(),
                self.config.min_frames
            )));
        }
        let c = self.expr_dim + self.pose_dim;
        let lens: Vec<usize> = conds.iter().map(|k| k.audio.rows()).collect();
        let mut rngs: Vec<rng::Rng> = seeds.iter().map(|&s| rng::seeded(s, &[0xd1, 0x5a])).collect();
        let mut xs: Vec<Mat> = lens
            .iter()
            .zip(rngs.iter_mut())
            .map(|(&n, r)| rng::normal_mat(r, n, c))
            .collect();
        let mut tel = vec![ModulationTelemetry::default(); conds.len()];
        for t in (1..=t_max).rev() {
            let mut g = Graph::new();
            let x = g.constant(Mat::concat_rows(&xs.iter().collect::<Vec<_>>()));
            let ts = vec![t; conds.len()];
            let (pred, scores) = self.forward(&mut g, x, &lens, conds, &ts)?;
            let pred = g.value(pred);
            let (beta, alpha, ab) = (
                self.schedule.betas[t - 1],
                self.schedule.alphas[t - 1],
                self.schedule.alpha_bar(t),
            );
            let ab_prev = if t > 1 { self.schedule.alpha_bar(t - 1) } else { 1.0 };
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let coef = beta / (1.0 - ab).sqrt();
            let mut offset = 0;
            for (i, x) in xs.iter_mut().enumerate() {
                let eps = pred.slice_rows(offset, lens[i]);
                offset += lens[i];
                let z = if t > 1 {
                    rng::normal_mat(&mut rngs[i], lens[i], c)
                } else {
                    Mat::zeros(lens[i], c)
                };
                *x = Mat::from_fn(lens[i], c, |r, k| {
                    (x.get(r, k) - coef * eps.get(r, k)) / alpha.sqrt() + sigma * z.get(r, k)
                });
                for (b, block) in scores.iter().enumerate() {
                    for (k, region) in [Region::Upper, Region::Lower].into_iter().enumerate() {
                        let (sc, d) = block[i][k];
                        tel[i].records.push(TelemetryRecord {
                            block: b,
                            timestep: t,
                            region,
                            p_a: sc.p_a,
                            p_s: sc.p_s,
                            d,
                            degenerate: sc.degenerate,
                        });
                    }
                }
            }
        }
        Ok(xs
            .into_iter()
            .zip(tel)
            .map(|(x, t)| (self.normalizer.motion_inverse(&x), t))
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = json!({ "diffusion": self.config, "shape": self.shape() });
        let mut ck = Checkpoint::from_store(KIND, config, self.metrics.clone(), &[("", &self.store)]);
        let n = &self.normalizer;
        for (name, m) in [
            ("norm/motion_mean", &n.motion_mean),
            ("norm/motion_std", &n.motion_std),
            ("norm/audio_mean", &n.audio_mean),
            ("norm/audio_std", &n.audio_std),
        ] {
            ck.tensors.push((name.into(), m.clone()));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: DiffusionConfig = serde_json::from_value(ck.config["diffusion"].clone())
            .map_err(|e| invalid(format!("diffusion config: {e}")))?;
        let shape: DenoiserShape =
            serde_json::from_value(ck.config["shape"].clone()).map_err(|e| invalid(format!("diffusion shape: {e}")))?;
        let get = |name: &str| {
            ck.tensor(name)
                .cloned()
                .ok_or_else(|| invalid(format!("checkpoint lacks {name}")))
        };
        let normalizer = Normalizer {
            motion_mean: get("norm/motion_mean")?,
            motion_std: get("norm/motion_std")?,
            audio_mean: get("norm/audio_mean")?,
            audio_std: get("norm/audio_std")?,
        };
        let mut model = Self::build(&config, &shape, normalizer)?;
        ck.fill_store("", &mut model.store)?;
        model.metrics = ck.metrics.clone();
        Ok(model)
    }
}

impl NoisePredictor for MotionDenoiser {
    fn channels(&self) -> usize {
        self.expr_dim + self.pose_dim
    }

    fn predict_noise(
        &self,
        g: &mut Graph,
        x_t: Var,
        lens: &[usize],
        conds: &[ConditionInputs],
        ts: &[usize],
    ) -> Result<Var> {
        Ok(self.forward(g, x_t, lens, conds, ts)?.0)
    }
}

/// Generates motion for `audio` in the style of `style_ref`.
pub fn sample_motion(
    model: &MotionDenoiser,
    audio: &PseudoAudioFeatures,
    style_ref: &MotionSequence,
    sdse: &StyleEncoder,
    expert: &MotionExpert,
    steps: Option<usize>,
    seed: u64,
) -> Result<(MotionSequence, ModulationTelemetry)> {
    let style = sdse.embed_style(style_ref)?;
    let cond = model.conditions(audio, expert, &style)?;
    let (x, tel) = model
        .sample_batch(std::slice::from_ref(&cond), &[seed], steps)?
        .remove(0);
    let seq = MotionSequence::from_motion_tensor(style_ref.shape.clone(), &x, model.expr_dim, style_ref.fps)?;
    Ok((seq, tel))
}

/// Precomputed conditions for every clip, with the style taken from the
/// clip itself; callers swap in another clip's style as needed.
pub(crate) struct ClipConditions {
    pub audio: Vec<Mat>,
    pub style: Vec<Vec<f64>>,
}

impl ClipConditions {
    pub(crate) fn build(
        model: &MotionDenoiser,
        corpus: &Corpus,
        sdse: &StyleEncoder,
        expert: &MotionExpert,
    ) -> Result<Self> {
        let mut audio = Vec::with_capacity(corpus.clips.len());
        let mut style = Vec::with_capacity(corpus.clips.len());
        for clip in &corpus.clips {
            audio.push(model.audio_inputs(&clip.audio, expert)?);
            style.push(sdse.embed_style(&clip.motion)?.vector);
        }
        Ok(Self { audio, style })
    }

    pub(crate) fn pair(&self, clip: usize, style_clip: usize) -> ConditionInputs {
        ConditionInputs {
            audio: self.audio[clip].clone(),
            style: self.style[style_clip].clone(),
            null_audio: false,
            null_style: false,
        }
    }
}

/// A clip of the same speaker with a different script, drawn from `pool`;
/// falls back to the clip itself.
pub(crate) fn style_partner(corpus: &Corpus, pool: &[usize], clip: usize, rng: &mut rng::Rng) -> usize {
    let (s, c) = (corpus.clips[clip].speaker, corpus.clips[clip].content);
    let cands: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&j| corpus.clips[j].speaker == s && corpus.clips[j].content != c)
        .collect();
    if cands.is_empty() {
        clip
    } else {
        cands[rng.random_range(0..cands.len())]
    }
}

struct ValSet {
    x0: Vec<Mat>,
    conds: Vec<ConditionInputs>,
    ts: Vec<usize>,
    noise: Vec<Mat>,
}

impl ValSet {
    fn loss(&self, model: &MotionDenoiser) -> Result<(f64, [f64; 2])> {
        let mut g = Graph::new();
        let noisy = self
            .x0
            .iter()
            .zip(&self.noise)
            .zip(&self.ts)
            .map(|((x, e), &t)| forward_diffuse(x, t, e, &model.schedule))
            .collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = self.x0.iter().map(|x| x.rows()).collect();
        let x = g.constant(Mat::concat_rows(&noisy.iter().collect::<Vec<_>>()));
        let (pred, scores) = model.forward(&mut g, x, &lens, &self.conds, &self.ts)?;
        let eps = Mat::concat_rows(&self.noise.iter().collect::<Vec<_>>());
        let mse = g.value(pred).zip_map(&eps, |a, b| (a - b) * (a - b)).mean();
        let mut d = [0.0; 2];
        let mut count = 0.0;
        for block in &scores {
            for seq in block {
                d[0] += seq[0].1;
                d[1] += seq[1].1;
                count += 1.0;
            }
        }
        Ok((mse, [d[0] / count, d[1] / count]))
    }
}

/// Training state at a step boundary; resuming from it reproduces the rest
/// of the uninterrupted run exactly.
#[derive(Clone, Debug)]
pub struct DiffusionSnapshot {
    pub step: usize,
    pub store: ParamStore,
    pub adam: Adam,
    pub rng: rng::Rng,
    pub loss_curve: Vec<f64>,
    pub val_curve: Vec<serde_json::Value>,
    pub telemetry: Vec<serde_json::Value>,
}

pub const SNAPSHOT_KIND: &str = "motion_diffusion_snapshot";

impl DiffusionSnapshot {
    pub fn checkpoint(&self, config: &DiffusionConfig) -> Checkpoint {
        let state = json!({
            "diffusion": config,
            "step": self.step,
            "adam_step": self.adam.steps(),
            "rng_seed": self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>(),
            "rng_stream": self.rng.get_stream(),
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "loss_curve": self.loss_curve,
            "val_curve": self.val_curve,
            "telemetry": self.telemetry,
        });
        let mut ck = Checkpoint::from_store(SNAPSHOT_KIND, state, serde_json::Value::Null, &[("model", &self.store)]);
        for (name, m, v) in self.adam.moments(&self.store) {
            ck.tensors.push((format!("adam_m/{name}"), m));
            ck.tensors.push((format!("adam_v/{name}"), v));
        }
        ck.full_precision = true;
        ck
    }

    /// Restores a snapshot onto the parameter layout of `template`.
    pub fn from_checkpoint(ck: &Checkpoint, template: &ParamStore, config: &DiffusionConfig) -> Result<Self> {
        use rand::SeedableRng as _;
        ck.expect_kind(SNAPSHOT_KIND)?;
        let bad = |what: &str| invalid(format!("snapshot field {what} is missing or malformed"));
        let saved: DiffusionConfig =
            serde_json::from_value(ck.config["diffusion"].clone()).map_err(|_| bad("diffusion"))?;
        if &saved != config {
            return Err(invalid("snapshot was written under a different diffusion config"));
        }
        let mut store = template.clone();
        ck.fill_store("model", &mut store)?;
        let moments = template
            .named()
            .filter_map(|(name, _)| {
                Some((
                    name.to_string(),
                    ck.tensor(&format!("adam_m/{name}"))?.clone(),
                    ck.tensor(&format!("adam_v/{name}"))?.clone(),
                ))
            })
            .collect::<Vec<_>>();
        let adam_step = ck.config["adam_step"].as_u64().ok_or_else(|| bad("adam_step"))?;
        let adam = Adam::restore(AdamConfig::with_lr(config.lr), &store, adam_step, &moments)?;
        let hex = ck.config["rng_seed"].as_str().ok_or_else(|| bad("rng_seed"))?;
        if hex.len() != 64 {
            return Err(bad("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (k, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * k..2 * k + 2], 16).map_err(|_| bad("rng_seed"))?;
        }
        let mut rng = rng::Rng::from_seed(seed);
        rng.set_stream(ck.config["rng_stream"].as_u64().ok_or_else(|| bad("rng_stream"))?);
        let pos: u128 = ck.config["rng_word_pos"]
            .as_str()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| bad("rng_word_pos"))?;
        rng.set_word_pos(pos);
        let list = |key: &str| ck.config[key].as_array().cloned().ok_or_else(|| bad(key));
        let loss_curve = serde_json::from_value(ck.config["loss_curve"].clone()).map_err(|_| bad("loss_curve"))?;
        Ok(Self {
            step: ck.config["step"].as_u64().ok_or_else(|| bad("step"))? as usize,
            store,
            adam,
            rng,
            loss_curve,
            val_curve: list("val_curve")?,
            telemetry: list("telemetry")?,
        })
    }
}

pub fn train_diffusion(
    corpus: &Corpus,
    sdse: &StyleEncoder,
    expert: &MotionExpert,
    config: &DiffusionConfig,
) -> TrainResult<MotionDenoiser> {
    train_diffusion_resumable(corpus, sdse, expert, config, None, &mut |_| Ok(()))
}

/// Untrained model with the layout `train_diffusion` would build; used to
/// restore snapshots.
pub fn initial_model(
    corpus: &Corpus,
    sdse: &StyleEncoder,
    expert: &MotionExpert,
    config: &DiffusionConfig,
) -> Result<MotionDenoiser> {
    let cc = &corpus.config;
    let pool = corpus.indices(Split::Train);
    if pool.is_empty() || corpus.indices(Split::Val).is_empty() {
        return Err(invalid("diffusion training needs nonempty train and validation splits"));
    }
    if sdse.expr_dim != cc.expr_dim {
        return Err(invalid("style encoder width differs from the corpus"));
    }
    let shape = DenoiserShape {
        partition: cc.partition.clone(),
        expr_dim: cc.expr_dim,
        pose_dim: cc.pose_dim,
        audio_dim: cc.audio_dim,
        expert_dim: expert.config.embed_dim,
        expert_window: expert.config.window,
        style_dim: sdse.config.style_dim,
    };
    MotionDenoiser::build(config, &shape, Normalizer::fit(corpus, &pool))
}

/// Trains from scratch or from `resume`, handing a snapshot to `on_snapshot`
/// at every validation point.
pub fn train_diffusion_resumable(
    corpus: &Corpus,
    sdse: &StyleEncoder,
    expert: &MotionExpert,
    config: &DiffusionConfig,
    resume: Option<DiffusionSnapshot>,
    on_snapshot: &mut dyn FnMut(&DiffusionSnapshot) -> Result<()>,
) -> TrainResult<MotionDenoiser> {
    let mut model = initial_model(corpus, sdse, expert, config)?;
    let pool = corpus.indices(Split::Train);
    let val = corpus.indices(Split::Val);
    let conds = ClipConditions::build(&model, corpus, sdse, expert)?;
    let x0: Vec<Mat> = corpus
        .clips
        .iter()
        .map(|c| model.normalizer.motion(&c.motion.motion_tensor()))
        .collect();

    let mut vrng = rng::seeded(config.seed, &[0xd1, 0x3]);
    let all: Vec<usize> = pool.iter().chain(&val).copied().collect();
    let mut valset = ValSet {
        x0: Vec::new(),
        conds: Vec::new(),
        ts: Vec::new(),
        noise: Vec::new(),
    };
    for (k, &i) in val.iter().enumerate() {
        let partner = style_partner(corpus, &all, i, &mut vrng);
        valset.x0.push(x0[i].clone());
        valset.conds.push(conds.pair(i, partner));
        valset.ts.push(1 + (k * model.schedule.len()) / val.len());
        valset
            .noise
            .push(rng::normal_mat(&mut vrng, x0[i].rows(), x0[i].cols()));
    }
    let record_val = |model: &MotionDenoiser, snap: &mut DiffusionSnapshot| -> Result<()> {
        let (loss, d) = valset.loss(model)?;
        snap.val_curve.push(json!({ "step": snap.step, "loss": loss }));
        snap.telemetry
            .push(json!({ "step": snap.step, "mean_d_upper": d[0], "mean_d_lower": d[1] }));
        Ok(())
    };

    let mut snap = match resume {
        Some(s) => {
            if s.step > config.steps {
                return Err(invalid(format!(
                    "snapshot step {} beyond the configured {}",
                    s.step, config.steps
                ))
                .into());
            }
            s
        }
        None => {
            let mut s = DiffusionSnapshot {
                step: 0,
                store: model.store.clone(),
                adam: Adam::new(AdamConfig::with_lr(config.lr)),
                rng: rng::seeded(config.seed, &[0xd1, 0x2]),
                loss_curve: Vec::with_capacity(config.steps),
                val_curve: Vec::new(),
                telemetry: Vec::new(),
            };
            record_val(&model, &mut s)?;
            s
        }
    };
    model.store = snap.store.clone();
    while snap.step < config.steps {
        let step = snap.step;
        let rng = &mut snap.rng;
        let batch: Vec<usize> = (0..config.batch)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let bx: Vec<Mat> = batch.iter().map(|&i| x0[i].clone()).collect();
        let bc: Vec<ConditionInputs> = batch
            .iter()
            .map(|&i| {
                let partner = style_partner(corpus, &pool, i, rng);
                conds.pair(i, partner)
            })
            .collect();
        let mut g = Graph::new();
        let (loss, _) = denoising_loss(&mut g, &model, &bx, &bc, &model.schedule, rng)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            model.store = snap.store;
            return Err(TrainError::Diverged(Diverged {
                step,
                detail: format!("denoising loss {value}"),
                last_good: model,
            }));
        }
        let grads = g.backward(loss);
        snap.adam.step(&mut model.store, &grads, cosine_lr(step, config.steps));
        snap.loss_curve.push(value);
        snap.step += 1;
        snap.store = model.store.clone();
        if snap.step % config.eval_every.max(1) == 0 && snap.step < config.steps {
            record_val(&model, &mut snap)?;
            on_snapshot(&snap)?;
        }
    }
    model.store.round_f32();
    if snap.val_curve.last().and_then(|v| v["step"].as_u64()) != Some(config.steps as u64) {
        record_val(&model, &mut snap)?;
    }
    model.metrics = json!({
        "loss_curve": snap.loss_curve,
        "val_curve": snap.val_curve,
        "telemetry": snap.telemetry,
        "corpus_fingerprint": corpus.fingerprint(),
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_inputs(cfg: &DiffusionConfig) -> (Block, ParamStore, Mat, Mat, Mat) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3, &[]);
        let block = Block::new(&mut store, "b", cfg, true, &mut r);
        let q = rng::normal_mat(&mut r, 6, cfg.d_model);
        let audio = rng::normal_mat(&mut r, 6, cfg.d_model);
        let style = rng::normal_mat(&mut r, 1, cfg.d_model);
        (block, store, q, audio, style)
    }

    #[test]
    fn dual_cross_attention_examples() {
        let cfg = DiffusionConfig {
            d_model: 8,
            heads: 2,
            ..DiffusionConfig::default()
        };
        let (block, mut store, q, audio, style) = block_inputs(&cfg);
        let mut g = Graph::new();
        let (qv, av, sv) = (
            g.constant(q.clone()),
            g.constant(audio.clone()),
            g.constant(style.clone()),
        );
        let band = g.constant(band_bias(6, 2));
        let (_, zs) = block.dual_cross_attention(&mut g, &store, qv, av, sv, band);
        let zs = g.value(zs).clone();
        for r in 1..6 {
            assert!(zs.slice_rows(r, 1).max_abs_diff(&zs.slice_rows(0, 1)) < 1e-12);
        }
        let (_, weights) = block.cross_a.attend_biased(&mut g, &store, qv, av, Some(band));
        for w in weights {
            for r in 0..6 {
                assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        for attn in [&block.cross_a, &block.cross_s] {
            for id in [attn.v.w, attn.v.b, attn.o.b] {
                let shape = store.value(id).shape();
                *store.value_mut(id) = Mat::zeros(shape.0, shape.1);
            }
        }
        let mut g = Graph::new();
        let (qv, av, sv) = (g.constant(q), g.constant(audio), g.constant(style));
        let band = g.constant(band_bias(6, 2));
        let (za, zs) = block.dual_cross_attention(&mut g, &store, qv, av, sv, band);
        assert_eq!(g.value(za).sq_norm(), 0.0);
        assert_eq!(g.value(zs).sq_norm(), 0.0);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(NoiseSchedule::from_betas(vec![0.1, 0.05]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = Mat::from_fn(3, 2, |r, c| (r + c) as f64);
        let y = forward_diffuse(&x, 4, &Mat::zeros(3, 2), &s).unwrap();
        assert!(y.max_abs_diff(&x.scale(s.alpha_bar(4).sqrt())) < 1e-15);
        assert!(forward_diffuse(&x, 0, &Mat::zeros(3, 2), &s).is_err());
        assert!(forward_diffuse(&x, 11, &Mat::zeros(3, 2), &s).is_err());
        let tiny = NoiseSchedule::from_betas(vec![1e-300]).unwrap();
        assert_eq!(forward_diffuse(&x, 1, &Mat::filled(3, 2, 1.0), &tiny).unwrap(), x);
    }

    #[test]
    fn dominance_examples() {
        assert_eq!(dominance(0.3, 0.3), 0.5);
        assert!((dominance(1.0, -1.0) - 0.88080).abs() < 5e-6);
        assert!((dominance(-1.0, 1.0) - 0.11920).abs() < 5e-6);
        assert!((dominance(1.0, -1.0) - D_MAX).abs() < 1e-15);
    }

    #[test]
    fn projection_score_examples() {
        let g = RegionGroups::halves(4);
        let za = Mat::from_fn(3, 4, |r, c| (r as f64 + 1.0) * (c as f64 - 1.5));
        let [u, l] = region_projection_scores(&za, &Mat::zeros(3, 4), &g).unwrap();
        assert!((u.p_a - 1.0).abs() < 1e-12 && u.p_s == 0.0 && u.degenerate);
        assert!((l.p_a - 1.0).abs() < 1e-12);
        let [u, _] = region_projection_scores(&za, &za, &g).unwrap();
        assert!((u.p_a - 1.0).abs() < 1e-12 && (u.p_s - 1.0).abs() < 1e-12 && !u.degenerate);
    }

    #[test]
    fn modulate_examples() {
        let g = RegionGroups::halves(4);
        let za = Mat::from_fn(2, 4, |r, c| (r * 4 + c) as f64);
        let zs = Mat::from_fn(2, 4, |r, c| 1.0 - (r + c) as f64);
        let m = modulate(&za, &zs, 0.5, 0.5, &g).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let want = if c < 2 {
                    2.0 * zs.get(r, c) + za.get(r, c)
                } else {
                    0.5 * za.get(r, c) + zs.get(r, c)
                };
                assert!((m.get(r, c) - want).abs() < 1e-15);
            }
        }
        let plain = modulate(&za, &zs, 1.0, 1.0, &g).unwrap();
        assert!(plain.max_abs_diff(&za.zip_map(&zs, |a, b| a + b)) < 1e-15);
        assert!(modulate(&za, &zs, 0.0, 0.5, &g).is_err());
    }
}
