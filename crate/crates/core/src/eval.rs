//! Parameter-space proxy metrics, the end-to-end pipeline and the
//! ablation harness. Every number reported here is a proxy computed on
//! motion parameters; nothing is rendered.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, Stage};
use crate::corpus::{Corpus, Split};
use crate::diffusion::{
    style_partner, train_diffusion, ConditionInputs, ModulationTelemetry, MotionDenoiser, Region, D_MAX, D_MIN,
};
use crate::error::{invalid, Error, Result};
use crate::expert::{train_expert, MotionExpert};
use crate::motion::{MotionSequence, RegionPartition};
use crate::nn::Mat;
use crate::rng;
use crate::semantic::{train_semantic_encoder, SemanticEncoder};
use crate::style::{train_sdse, StyleEncoder};

fn check_pair(gen: &MotionSequence, gt: &MotionSequence) -> Result<()> {
    if gen.len() != gt.len() {
        return Err(invalid(format!(
            "generated {} frames, ground truth {}",
            gen.len(),
            gt.len()
        )));
    }
    if gen.expr_dim() != gt.expr_dim() || gen.pose_dim() != gt.pose_dim() {
        return Err(invalid("generated and ground-truth channel counts differ"));
    }
    if gen.is_empty() {
        return Err(invalid("empty sequences"));
    }
    Ok(())
}

fn mean_frame_distance(gen: &Mat, gt: &Mat, cols: &[usize]) -> f64 {
    let total: f64 = (0..gen.rows())
        .map(|t| {
            cols.iter()
                .map(|&c| (gen.get(t, c) - gt.get(t, c)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / gen.rows() as f64
}

/// Mean per-frame L2 distance over the lower-region expression dims.
pub fn mlmd_proxy(gen: &MotionSequence, gt: &MotionSequence, partition: &RegionPartition) -> Result<f64> {
    check_pair(gen, gt)?;
    partition.validate(gt.expr_dim())?;
    Ok(mean_frame_distance(&gen.expression, &gt.expression, &partition.lower))
}

/// Mean per-frame L2 distance over all expression and pose dims.
pub fn flmd_proxy(gen: &MotionSequence, gt: &MotionSequence) -> Result<f64> {
    check_pair(gen, gt)?;
    let (a, b) = (gen.motion_tensor(), gt.motion_tensor());
    let cols: Vec<usize> = (0..a.cols()).collect();
    Ok(mean_frame_distance(&a, &b, &cols))
}

/// Expert audio/motion agreement of a generated sequence.
pub fn sync_proxy(
    expert: &MotionExpert,
    audio: &crate::corpus::PseudoAudioFeatures,
    gen: &MotionSequence,
) -> Result<f64> {
    expert.sync_confidence(audio, gen, &expert.partition)
}

/// Cosine between the probe embedding of `gen` and the centroid of the
/// probe embeddings of `references`.
pub fn stylesim_proxy(gen: &MotionSequence, references: &[&MotionSequence], probe: &StyleEncoder) -> Result<f64> {
    if references.is_empty() {
        return Err(invalid("stylesim needs at least one reference clip"));
    }
    let e = probe.embed_style(gen)?.vector;
    let mut centroid = vec![0.0; e.len()];
    for r in references {
        for (c, v) in centroid.iter_mut().zip(probe.embed_style(r)?.vector) {
            *c += v / references.len() as f64;
        }
    }
    let dot: f64 = e.iter().zip(&centroid).map(|(a, b)| a * b).sum();
    let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ne == 0.0 || nc == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (ne * nc)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip: usize,
    pub speaker: usize,
    pub content: usize,
    /// Clip whose motion served as style reference.
    pub style_clip: usize,
    pub mlmd: f64,
    pub flmd: f64,
    pub sync: f64,
    pub stylesim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mlmd: f64,
    pub flmd: f64,
    pub sync: f64,
    pub stylesim: f64,
}

impl Aggregates {
    pub fn mean(clips: &[ClipMetrics]) -> Self {
        let n = clips.len() as f64;
        let m = |f: fn(&ClipMetrics) -> f64| clips.iter().map(f).sum::<f64>() / n;
        Self {
            mlmd: m(|c| c.mlmd),
            flmd: m(|c| c.flmd),
            sync: m(|c| c.sync),
            stylesim: m(|c| c.stylesim),
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Mlmd => self.mlmd,
            Metric::Flmd => self.flmd,
            Metric::Sync => self.sync,
            Metric::StyleSim => self.stylesim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Mlmd,
    Flmd,
    Sync,
    StyleSim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Mlmd, Metric::Flmd, Metric::Sync, Metric::StyleSim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mlmd => "MLMD_proxy",
            Metric::Flmd => "FLMD_proxy",
            Metric::Sync => "Sync_proxy",
            Metric::StyleSim => "StyleSim_proxy",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Sync | Metric::StyleSim)
    }
}

/// Dominance statistics over all sampling calls of an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSummary {
    pub mean_d_upper: f64,
    pub mean_d_lower: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub records: usize,
    /// Every record inside the open sigmoid range and consistent with its
    /// scores.
    pub in_range: bool,
    /// Whether audio dominates more on the lower face than the upper.
    pub lower_exceeds_upper: bool,
}

impl ModulationSummary {
    pub fn from_telemetry<'a>(items: impl IntoIterator<Item = &'a ModulationTelemetry>) -> Self {
        let (mut su, mut nu, mut sl, mut nl) = (0.0, 0usize, 0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut in_range = true;
        let mut records = 0;
        for t in items {
            in_range &= t.is_consistent();
            for r in &t.records {
                records += 1;
                lo = lo.min(r.d);
                hi = hi.max(r.d);
                match r.region {
                    Region::Upper => {
                        su += r.d;
                        nu += 1;
                    }
                    Region::Lower => {
                        sl += r.d;
                        nl += 1;
                    }
                }
            }
        }
        let (mean_d_upper, mean_d_lower) = (su / nu.max(1) as f64, sl / nl.max(1) as f64);
        Self {
            mean_d_upper,
            mean_d_lower,
            d_min: lo,
            d_max: hi,
            records,
            in_range: in_range && lo > D_MIN && hi < D_MAX,
            lower_exceeds_upper: mean_d_lower > mean_d_upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Always "proxy": these are parameter-space stand-ins for image metrics.
    pub label: String,
    pub split: String,
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub corpus_fingerprint: String,
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Aggregates,
    pub modulation: Option<ModulationSummary>,
}

pub fn split_description(corpus: &Corpus) -> String {
    let c = &corpus.config;
    let first = c.n_speakers - c.held_out_speakers;
    format!(
        "test split: held-out speakers {}..{} with all {} contents",
        first,
        c.n_speakers - 1,
        c.n_contents
    )
}

/// Trained components of one configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub expert: Arc<MotionExpert>,
    pub semantic: Arc<SemanticEncoder>,
    pub sdse: Arc<StyleEncoder>,
    pub diffusion: Arc<MotionDenoiser>,
}

/// Trained components keyed by the hash of the config sections they depend
/// on, so variants that differ only downstream share upstream stages.
#[derive(Default)]
pub struct ComponentCache {
    experts: HashMap<String, Arc<MotionExpert>>,
    semantics: HashMap<String, Arc<SemanticEncoder>>,
    sdses: HashMap<String, Arc<StyleEncoder>>,
    diffusions: HashMap<String, Arc<MotionDenoiser>>,
}

impl ComponentCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expert(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Arc<MotionExpert>> {
        let key = cfg.stage_hash(Stage::Expert);
        if let Some(e) = self.experts.get(&key) {
            return Ok(e.clone());
        }
        info!("training motion expert (seed {})", cfg.expert.seed);
        let e = Arc::new(train_expert(corpus, &cfg.expert)?);
        self.experts.insert(key, e.clone());
        Ok(e)
    }

    pub fn semantic(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Arc<SemanticEncoder>> {
        let key = cfg.stage_hash(Stage::Semantic);
        if let Some(s) = self.semantics.get(&key) {
            return Ok(s.clone());
        }
        let expert = self.expert(corpus, cfg)?;
        info!("training semantic encoder (seed {})", cfg.semantic.seed);
        let s = Arc::new(train_semantic_encoder(corpus, &expert, &cfg.semantic)?);
        self.semantics.insert(key, s.clone());
        Ok(s)
    }

    pub fn sdse(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Arc<StyleEncoder>> {
        let key = cfg.stage_hash(Stage::Sdse);
        if let Some(s) = self.sdses.get(&key) {
            return Ok(s.clone());
        }
        let semantic = self.semantic(corpus, cfg)?;
        info!("training style encoder (seed {})", cfg.style.seed);
        let s = Arc::new(train_sdse(corpus, &semantic, &cfg.style)?);
        self.sdses.insert(key, s.clone());
        Ok(s)
    }

    pub fn diffusion(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Arc<MotionDenoiser>> {
        let key = cfg.stage_hash(Stage::Diffusion);
        if let Some(d) = self.diffusions.get(&key) {
            return Ok(d.clone());
        }
        let expert = self.expert(corpus, cfg)?;
        let sdse = self.sdse(corpus, cfg)?;
        info!("training diffusion model (seed {})", cfg.diffusion.seed);
        let d = Arc::new(train_diffusion(corpus, &sdse, &expert, &cfg.diffusion)?);
        self.diffusions.insert(key, d.clone());
        Ok(d)
    }

    pub fn pipeline(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Pipeline> {
        Ok(Pipeline {
            expert: self.expert(corpus, cfg)?,
            semantic: self.semantic(corpus, cfg)?,
            sdse: self.sdse(corpus, cfg)?,
            diffusion: self.diffusion(corpus, cfg)?,
        })
    }

    /// Style encoder used only for scoring, trained with an offset seed on
    /// top of the run's own semantic encoder.
    pub fn probe(&mut self, corpus: &Corpus, cfg: &RunConfig) -> Result<Arc<StyleEncoder>> {
        self.sdse(corpus, &probe_config(cfg))
    }
}

/// Config whose style section trains the scoring probe.
pub fn probe_config(cfg: &RunConfig) -> RunConfig {
    let mut p = cfg.clone();
    p.style = crate::style::StyleConfig {
        seed: cfg.style.seed + cfg.eval.probe_seed_offset,
        ..cfg.style.clone()
    };
    p
}

pub fn train_pipeline(corpus: &Corpus, cfg: &RunConfig) -> Result<Pipeline> {
    ComponentCache::new().pipeline(corpus, cfg)
}

/// Generates every test clip from its own audio with the style of another
/// clip by the same speaker, then scores against the ground truth.
pub fn evaluate(
    corpus: &Corpus,
    pipeline: &Pipeline,
    probe: &StyleEncoder,
    sample_seed: u64,
    variant: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let test = corpus.indices(Split::Test);
    if test.is_empty() {
        return Err(invalid("corpus has no test clips"));
    }
    let model = &pipeline.diffusion;
    let mut prng = rng::seeded(sample_seed, &[0xe7a1]);
    let mut conds = Vec::with_capacity(test.len());
    let mut partners = Vec::with_capacity(test.len());
    let mut seeds = Vec::with_capacity(test.len());
    for &i in &test {
        let partner = style_partner(corpus, &test, i, &mut prng);
        let style = pipeline.sdse.embed_style(&corpus.clips[partner].motion)?;
        conds.push(model.conditions(&corpus.clips[i].audio, &pipeline.expert, &style)?);
        partners.push(partner);
        seeds.push(rng::derive(sample_seed, &[i as u64]));
    }
    let outputs = model.sample_batch(&conds, &seeds, None)?;
    let mut clips = Vec::with_capacity(test.len());
    let mut telemetry = Vec::with_capacity(test.len());
    for ((&i, &partner), (x, tel)) in test.iter().zip(&partners).zip(outputs) {
        let clip = &corpus.clips[i];
        let gen = MotionSequence::from_motion_tensor(clip.motion.shape.clone(), &x, model.expr_dim, clip.motion.fps)?;
        let refs: Vec<&MotionSequence> = test
            .iter()
            .filter(|&&j| j != i && corpus.clips[j].speaker == clip.speaker)
            .map(|&j| &corpus.clips[j].motion)
            .collect();
        clips.push(ClipMetrics {
            clip: i,
            speaker: clip.speaker,
            content: clip.content,
            style_clip: partner,
            mlmd: mlmd_proxy(&gen, &clip.motion, &corpus.config.partition)?,
            flmd: flmd_proxy(&gen, &clip.motion)?,
            sync: sync_proxy(&pipeline.expert, &clip.audio, &gen)?,
            stylesim: stylesim_proxy(&gen, &refs, probe)?,
        });
        telemetry.push(tel);
    }
    Ok(EvalReport {
        label: "proxy".into(),
        split: split_description(corpus),
        variant: variant.into(),
        seed: sample_seed,
        config_hash: config_hash.into(),
        corpus_fingerprint: corpus.fingerprint(),
        aggregate: Aggregates::mean(&clips),
        clips,
        modulation: Some(ModulationSummary::from_telemetry(&telemetry)),
    })
}

/// Scores each test clip against itself with itself as the only style
/// reference; distances are 0 and similarity 1.
pub fn evaluate_identity(
    corpus: &Corpus,
    expert: &MotionExpert,
    probe: &StyleEncoder,
    config_hash: &str,
) -> Result<EvalReport> {
    let test = corpus.indices(Split::Test);
    if test.is_empty() {
        return Err(invalid("corpus has no test clips"));
    }
    let mut clips = Vec::with_capacity(test.len());
    for &i in &test {
        let c = &corpus.clips[i];
        clips.push(ClipMetrics {
            clip: i,
            speaker: c.speaker,
            content: c.content,
            style_clip: i,
            mlmd: mlmd_proxy(&c.motion, &c.motion, &corpus.config.partition)?,
            flmd: flmd_proxy(&c.motion, &c.motion)?,
            sync: sync_proxy(expert, &c.audio, &c.motion)?,
            stylesim: stylesim_proxy(&c.motion, &[&c.motion], probe)?,
        });
    }
    Ok(EvalReport {
        label: "proxy".into(),
        split: split_description(corpus),
        variant: "ground_truth".into(),
        seed: 0,
        config_hash: config_hash.into(),
        corpus_fingerprint: corpus.fingerprint(),
        aggregate: Aggregates::mean(&clips),
        clips,
        modulation: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapResult {
    pub clip: usize,
    pub own_style: usize,
    pub other_style: usize,
    /// Relative L2 change of the per-dim variance profile.
    pub upper_change: f64,
    pub lower_change: f64,
}

fn variance_profile(x: &Mat, dims: &[usize]) -> Vec<f64> {
    dims.iter()
        .map(|&c| {
            let col = x.column(c);
            let m = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64
        })
        .collect()
}

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// For each test clip, samples twice with the same seed: once with a style
/// reference from its own speaker and once from another test speaker, and
/// measures how much each region's variance profile moves.
pub fn style_swap_sensitivity(corpus: &Corpus, pipeline: &Pipeline, seed: u64) -> Result<Vec<SwapResult>> {
    let test = corpus.indices(Split::Test);
    let model = &pipeline.diffusion;
    let part = &corpus.config.partition;
    let mut prng = rng::seeded(seed, &[0x5a9]);
    let mut conds: Vec<ConditionInputs> = Vec::with_capacity(2 * test.len());
    let mut seeds = Vec::with_capacity(2 * test.len());
    let mut pairs = Vec::with_capacity(test.len());
    for &i in &test {
        let clip = &corpus.clips[i];
        let own = style_partner(corpus, &test, i, &mut prng);
        let others: Vec<usize> = test
            .iter()
            .copied()
            .filter(|&j| corpus.clips[j].speaker != clip.speaker)
            .collect();
        if others.is_empty() {
            return Err(invalid("style swap needs at least two test speakers"));
        }
        let other = others[rand::Rng::random_range(&mut prng, 0..others.len())];
        for s in [own, other] {
            let style = pipeline.sdse.embed_style(&corpus.clips[s].motion)?;
            conds.push(model.conditions(&clip.audio, &pipeline.expert, &style)?);
            seeds.push(rng::derive(seed, &[0x5a9, i as u64]));
        }
        pairs.push((i, own, other));
    }
    let out = model.sample_batch(&conds, &seeds, None)?;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(k, &(clip, own_style, other_style))| {
            let (a, b) = (&out[2 * k].0, &out[2 * k + 1].0);
            SwapResult {
                clip,
                own_style,
                other_style,
                upper_change: relative_change(&variance_profile(a, &part.upper), &variance_profile(b, &part.upper)),
                lower_change: relative_change(&variance_profile(a, &part.lower), &variance_profile(b, &part.lower)),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoMemoryBank,
    NoDisModule,
    NoTriplet,
    NoHscales,
}

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMemoryBank => "no_memory_bank",
            Variant::NoDisModule => "no_dis_module",
            Variant::NoTriplet => "no_triplet",
            Variant::NoHscales => "no_hscales",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoMemoryBank => "w/o memory bank",
            Variant::NoDisModule => "w/o dis-module",
            Variant::NoTriplet => "w/o triplet loss",
            Variant::NoHscales => "w/o h-scales",
        }
    }
}

/// A variant and the config fields it overrides (a JSON merge patch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: Variant,
    pub overrides: Value,
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

impl AblationSpec {
    /// The four ablations, then the full model.
    pub fn standard() -> Vec<Self> {
        vec![
            Self {
                variant: Variant::NoMemoryBank,
                overrides: json!({ "semantic": { "use_memory_bank": false } }),
            },
            Self {
                variant: Variant::NoDisModule,
                overrides: json!({ "style": { "lambda_orth": 0.0, "lambda_hsic": 0.0 } }),
            },
            Self {
                variant: Variant::NoTriplet,
                overrides: json!({ "style": { "use_triplet": false } }),
            },
            Self {
                variant: Variant::NoHscales,
                overrides: json!({ "diffusion": { "hscales": false } }),
            },
            Self {
                variant: Variant::Full,
                overrides: json!({}),
            },
        ]
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut v = base.to_json();
        merge(&mut v, &self.overrides);
        let cfg = RunConfig::from_json_str(&v.to_string())
            .map_err(|e| invalid(format!("variant {}: {e}", self.variant.id())))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub label: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Outcome of the three ordering checks, per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingChecks {
    /// Seeds where the full model ranks first on all four metrics.
    pub full_first_all: Vec<u64>,
    /// Seeds where the no-dis-module variant has the lowest StyleSim.
    pub nodis_worst_stylesim: Vec<u64>,
    /// Seeds where no-h-scales has the lowest Sync among the variants other
    /// than full and no-dis-module.
    pub nohscales_worst_sync: Vec<u64>,
}

impl AblationTable {
    pub fn aggregate(&self, variant: Variant, seed: u64) -> Option<Aggregates> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .and_then(|r| r.report.as_ref())
            .map(|r| r.aggregate)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut v: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.variant) {
                v.push(r.variant);
            }
        }
        v
    }

    /// Rank (1 = best) of each variant on `metric` for `seed`; failed rows
    /// are unranked.
    pub fn ranks(&self, seed: u64, metric: Metric) -> Vec<(Variant, usize)> {
        let mut vals: Vec<(Variant, f64)> = self
            .variants()
            .into_iter()
            .filter_map(|v| Some((v, self.aggregate(v, seed)?.get(metric))))
            .collect();
        vals.sort_by(|a, b| {
            let o = a.1.total_cmp(&b.1);
            if metric.higher_is_better() {
                o.reverse()
            } else {
                o
            }
        });
        vals.iter().enumerate().map(|(k, (v, _))| (*v, k + 1)).collect()
    }

    fn rank_of(&self, seed: u64, metric: Metric, variant: Variant) -> Option<usize> {
        self.ranks(seed, metric)
            .into_iter()
            .find(|(v, _)| *v == variant)
            .map(|(_, r)| r)
    }

    pub fn ordering_checks(&self) -> OrderingChecks {
        let mut out = OrderingChecks {
            full_first_all: vec![],
            nodis_worst_stylesim: vec![],
            nohscales_worst_sync: vec![],
        };
        for &seed in &self.seeds {
            if Metric::ALL
                .iter()
                .all(|&m| self.rank_of(seed, m, Variant::Full) == Some(1))
            {
                out.full_first_all.push(seed);
            }
            let ranked = self.ranks(seed, Metric::StyleSim);
            if ranked.last().map(|r| r.0) == Some(Variant::NoDisModule) {
                out.nodis_worst_stylesim.push(seed);
            }
            let rest: Vec<(Variant, f64)> = [Variant::NoMemoryBank, Variant::NoTriplet, Variant::NoHscales]
                .into_iter()
                .filter_map(|v| Some((v, self.aggregate(v, seed)?.sync)))
                .collect();
            if rest.len() == 3
                && rest.iter().min_by(|a, b| a.1.total_cmp(&b.1)).map(|r| r.0) == Some(Variant::NoHscales)
            {
                out.nohscales_worst_sync.push(seed);
            }
        }
        out
    }

    /// Mean and sample standard deviation over seeds.
    pub fn summary(&self, variant: Variant, metric: Metric) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|&s| Some(self.aggregate(variant, s)?.get(metric)))
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some((mean, sd))
    }

    /// Rows are variants, columns the four proxies as mean ± sd over seeds
    /// with the mean rank in brackets.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            out,
            "Ablation ({} metrics; {}; seeds {})",
            self.label,
            self.split,
            seeds.join(", ")
        );
        let _ = write!(out, "{:<18}", "variant");
        for m in Metric::ALL {
            let dir = if m.higher_is_better() { "higher" } else { "lower" };
            let _ = write!(out, " | {:>26}", format!("{} ({dir})", m.name()));
        }
        out.push('\n');
        out.push_str(&"-".repeat(18 + 4 * 29));
        out.push('\n');
        for v in self.variants() {
            let _ = write!(out, "{:<18}", v.label());
            for m in Metric::ALL {
                let cell = match self.summary(v, m) {
                    Some((mean, sd)) => {
                        let ranks: Vec<usize> = self.seeds.iter().filter_map(|&s| self.rank_of(s, m, v)).collect();
                        let mr = ranks.iter().sum::<usize>() as f64 / ranks.len().max(1) as f64;
                        format!("{mean:.4} ± {sd:.4} [{mr:.1}]")
                    }
                    None => "failed".into(),
                };
                let _ = write!(out, " | {cell:>26}");
            }
            out.push('\n');
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                out,
                "failed: {} seed {}: {}",
                r.variant.id(),
                r.seed,
                r.error.as_deref().unwrap_or("")
            );
        }
        out
    }

    pub fn render_svg(&self) -> String {
        let panels: Vec<(String, Vec<(String, f64)>)> = Metric::ALL
            .iter()
            .map(|&m| {
                let bars = self
                    .variants()
                    .into_iter()
                    .map(|v| (v.id().to_string(), self.summary(v, m).map_or(f64::NAN, |s| s.0)))
                    .collect();
                (m.name().to_string(), bars)
            })
            .collect();
        crate::plot::bar_chart_svg(&format!("Ablation ({} metrics, mean over seeds)", self.label), &panels)
    }
}

/// Trains and evaluates every spec under every seed. A failing variant is
/// recorded in its row and the harness moves on.
pub fn run_ablations(
    corpus: &Corpus,
    base: &RunConfig,
    specs: &[AblationSpec],
    seeds: &[u64],
) -> Result<AblationTable> {
    if specs.is_empty() || seeds.is_empty() {
        return Err(invalid("ablation needs at least one spec and one seed"));
    }
    let mut rows = Vec::with_capacity(specs.len() * seeds.len());
    let mut cache = ComponentCache::new();
    for &seed in seeds {
        let seeded = base.clone().with_seed(seed);
        let probe = cache.probe(corpus, &seeded);
        for spec in specs {
            let outcome = (|| -> Result<(String, EvalReport)> {
                let probe = probe
                    .as_ref()
                    .map_err(|e| Error::InvalidArgument(format!("probe style encoder: {e}")))?;
                let cfg = spec.apply(&seeded)?;
                let hash = cfg.hash();
                let pipeline = cache.pipeline(corpus, &cfg)?;
                let report = evaluate(corpus, &pipeline, probe, cfg.eval.sample_seed, spec.variant.id(), &hash)?;
                Ok((hash, report))
            })();
            match outcome {
                Ok((config_hash, report)) => {
                    info!("{} seed {seed}: {:?}", spec.variant.id(), report.aggregate);
                    rows.push(AblationRow {
                        variant: spec.variant,
                        seed,
                        config_hash,
                        report: Some(report),
                        error: None,
                    });
                }
                Err(e) => {
                    warn!("{} seed {seed} failed: {e}", spec.variant.id());
                    let config_hash = spec.apply(&seeded).map(|c| c.hash()).unwrap_or_default();
                    rows.push(AblationRow {
                        variant: spec.variant,
                        seed,
                        config_hash,
                        report: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    Ok(AblationTable {
        label: "proxy".into(),
        split: split_description(corpus),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(expr: Mat, pose: Mat) -> MotionSequence {
        MotionSequence::new(vec![0.0; 2], expr, pose, 25).unwrap()
    }

    #[test]
    fn distance_examples() {
        let part = RegionPartition::contiguous(12, 6).unwrap();
        let gt = seq(Mat::from_fn(5, 12, |r, c| (r * c) as f64 * 0.1), Mat::zeros(5, 4));
        assert_eq!(mlmd_proxy(&gt, &gt, &part).unwrap(), 0.0);
        assert_eq!(flmd_proxy(&gt, &gt).unwrap(), 0.0);
        let shifted = seq(
            Mat::from_fn(5, 12, |r, c| (r * c) as f64 * 0.1 + if c >= 6 { 1.0 } else { 0.0 }),
            Mat::zeros(5, 4),
        );
        assert!((mlmd_proxy(&shifted, &gt, &part).unwrap() - 6f64.sqrt()).abs() < 1e-12);
        let upper = seq(
            Mat::from_fn(5, 12, |r, c| (r * c) as f64 * 0.1 + if c < 6 { 3.0 } else { 0.0 }),
            Mat::zeros(5, 4),
        );
        assert_eq!(mlmd_proxy(&upper, &gt, &part).unwrap(), 0.0);
        let short = seq(Mat::zeros(4, 12), Mat::zeros(4, 4));
        assert!(mlmd_proxy(&short, &gt, &part).is_err());
        assert!(flmd_proxy(&short, &gt).is_err());
        let one = seq(Mat::zeros(1, 12), Mat::filled(1, 4, 1.0));
        assert_eq!(
            flmd_proxy(&one, &seq(Mat::zeros(1, 12), Mat::zeros(1, 4))).unwrap(),
            2.0
        );
    }

    #[test]
    fn specs_cover_the_table() {
        let specs = AblationSpec::standard();
        assert_eq!(specs.len(), 5);
        let base = RunConfig::default();
        let nodis = specs[1].apply(&base).unwrap();
        assert_eq!((nodis.style.lambda_orth, nodis.style.lambda_hsic), (0.0, 0.0));
        assert!(!specs[3].apply(&base).unwrap().diffusion.hscales);
        assert_eq!(specs[4].apply(&base).unwrap(), base);
        assert_eq!(
            base.stage_hash(Stage::Sdse),
            specs[3].apply(&base).unwrap().stage_hash(Stage::Sdse)
        );
    }
}
