//! Stage 1: visual semantic encoder aligned to the expert's audio space.
//!
//! The encoder maps expression windows to unit vectors whose pairwise
//! cosine structure should match the audio embeddings of the same windows.
//! A pair of memory banks enlarges the pair set; after every step the most
//! redundant audio-bank slots are overwritten by the current batch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, Diverged, TrainError, TrainResult};
use crate::corpus::{Corpus, Split};
use crate::error::{invalid, Result};
use crate::expert::{cosine_lr, MotionExpert};
use crate::motion::MotionSequence;
use crate::nn::layers::{sinusoidal, EncoderLayer, LayerNorm, Linear};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParamStore, Var};
use crate::rng;

pub const KIND: &str = "semantic_encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub bank_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub use_memory_bank: bool,
    /// Stride between held-out windows for validation.
    pub val_stride: usize,
    pub seed: u64,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            window: 16,
            d_model: 32,
            heads: 2,
            layers: 2,
            bank_size: 256,
            batch: 32,
            steps: 300,
            lr: 2e-3,
            use_memory_bank: true,
            val_stride: 8,
            seed: 0,
        }
    }
}

/// Aligned audio/visual memory banks. Slot `i` of both banks always comes
/// from the same window, recorded in `clip_a` / `clip_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBankPair {
    pub bank_a: Mat,
    pub bank_v: Mat,
    pub slot_age: Vec<u64>,
    pub clip_a: Vec<usize>,
    pub clip_v: Vec<usize>,
}

impl MemoryBankPair {
    pub fn new(bank_a: &Mat, bank_v: &Mat, clips: Vec<usize>) -> Result<Self> {
        if bank_a.rows() != bank_v.rows() || bank_a.cols() != bank_v.cols() {
            return Err(invalid(format!(
                "bank shapes differ: {:?} vs {:?}",
                bank_a.shape(),
                bank_v.shape()
            )));
        }
        if clips.len() != bank_a.rows() {
            return Err(invalid("one clip id per bank slot required"));
        }
        Ok(Self {
            bank_a: bank_a.normalize_rows(),
            bank_v: bank_v.normalize_rows(),
            slot_age: vec![0; bank_a.rows()],
            clip_a: clips.clone(),
            clip_v: clips,
        })
    }

    pub fn len(&self) -> usize {
        self.bank_a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.bank_a.rows() == 0
    }

    fn assert_aligned(&self) {
        assert_eq!(self.clip_a, self.clip_v, "memory bank slots lost alignment");
        assert_eq!(self.bank_a.rows(), self.bank_v.rows());
    }

    /// Replaces the `k` most redundant slots (ranked on the audio bank) with
    /// the batch rows, in rank order. Returns the replaced slot indices.
    pub fn update(&mut self, batch_a: &Mat, batch_v: &Mat, clips: &[usize]) -> Result<Vec<usize>> {
        let k = batch_a.rows();
        if batch_v.rows() != k || clips.len() != k {
            return Err(invalid(format!(
                "batch sizes differ: {k} audio, {} visual, {} ids",
                batch_v.rows(),
                clips.len()
            )));
        }
        if k > 0 && (batch_a.cols() != self.bank_a.cols() || batch_v.cols() != self.bank_v.cols()) {
            return Err(invalid("batch embedding width differs from the bank"));
        }
        if k > self.len() {
            return Err(invalid(format!("batch of {k} exceeds bank size {}", self.len())));
        }
        self.slot_age.iter_mut().for_each(|a| *a += 1);
        if k == 0 {
            return Ok(Vec::new());
        }
        let rho = redundancy_scores(&self.bank_a)?;
        let slots = select_replace_indices(&rho, k)?;
        let (na, nv) = (batch_a.normalize_rows(), batch_v.normalize_rows());
        for (r, &slot) in slots.iter().enumerate() {
            self.bank_a.row_mut(slot).copy_from_slice(na.row(r));
            self.bank_v.row_mut(slot).copy_from_slice(nv.row(r));
            self.clip_a[slot] = clips[r];
            self.clip_v[slot] = clips[r];
            self.slot_age[slot] = 0;
        }
        self.assert_aligned();
        Ok(slots)
    }

    /// Mean off-diagonal cosine of the audio bank.
    pub fn mean_pairwise_cosine(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        redundancy_scores(&self.bank_a)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .unwrap_or(0.0)
    }
}

/// Mean cosine of each row to every other row (rows assumed unit-norm).
pub fn redundancy_scores(bank_a: &Mat) -> Result<Vec<f64>> {
    let n = bank_a.rows();
    if n < 2 {
        return Err(invalid(format!("redundancy needs at least 2 entries, got {n}")));
    }
    let s = bank_a.matmul_t(bank_a);
    Ok((0..n)
        .map(|i| {
            let off: f64 = s
                .row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum();
            off / (n - 1) as f64
        })
        .collect())
}

/// Indices of the `k` largest scores, largest first; ties go to the
/// smaller index.
pub fn select_replace_indices(rho: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > rho.len() {
        return Err(invalid(format!("replacement count {k} outside 1..={}", rho.len())));
    }
    let mut idx: Vec<usize> = (0..rho.len()).collect();
    idx.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

struct PairSet {
    v: Mat,
    a: Mat,
    batch: usize,
}

fn pair_set(v_unit: &Mat, a: &Mat, banks: Option<&MemoryBankPair>) -> Result<PairSet> {
    if v_unit.rows() != a.rows() {
        return Err(invalid(format!(
            "{} visual rows vs {} audio rows",
            v_unit.rows(),
            a.rows()
        )));
    }
    let a_unit = a.normalize_rows();
    let (v, a) = match banks {
        Some(b) if !b.is_empty() => {
            if b.bank_v.cols() != v_unit.cols() || b.bank_a.cols() != a.cols() {
                return Err(invalid("bank embedding width differs from the batch"));
            }
            (
                Mat::concat_rows(&[v_unit, &b.bank_v]),
                Mat::concat_rows(&[&a_unit, &b.bank_a]),
            )
        }
        _ => (v_unit.clone(), a_unit),
    };
    if v.rows() < 2 {
        return Err(invalid("structural loss needs at least 2 entries"));
    }
    Ok(PairSet {
        v,
        a,
        batch: v_unit.rows(),
    })
}

fn cosine_gap(p: &PairSet) -> Mat {
    let mut d = p.v.matmul_t(&p.v);
    let sa = p.a.matmul_t(&p.a);
    d.axpy(-1.0, &sa);
    for i in 0..d.rows() {
        d.set(i, i, 0.0);
    }
    d
}

/// Sum over unordered pairs of `(cos v_i v_j - cos a_i a_j)^2` across batch
/// and bank entries.
pub fn structural_loss_value(v: &Mat, a: &Mat, banks: Option<&MemoryBankPair>) -> Result<f64> {
    let p = pair_set(&v.normalize_rows(), a, banks)?;
    Ok(cosine_gap(&p).sq_norm() / 2.0)
}

/// Graph version of [`structural_loss_value`]; gradient reaches `v` only.
pub fn global_structural_loss(g: &mut Graph, v: Var, a: &Mat, banks: Option<&MemoryBankPair>) -> Result<Var> {
    let vn = g.normalize_rows(v);
    let p = pair_set(g.value(vn), a, banks)?;
    let d = cosine_gap(&p);
    let value = d.sq_norm() / 2.0;
    let grad = d.slice_rows(0, p.batch).matmul(&p.v).scale(2.0);
    Ok(g.scalar_fn(value, vec![(vn, grad)]))
}

fn num_pairs(batch: usize, bank: usize) -> f64 {
    let n = (batch + bank) as f64;
    n * (n - 1.0) / 2.0
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub config: SemanticConfig,
    pub expr_dim: usize,
    pub embed_dim: usize,
    pub store: ParamStore,
    input: Linear,
    layers: Vec<EncoderLayer>,
    ln: LayerNorm,
    head: Linear,
    pub banks: Option<MemoryBankPair>,
    pub metrics: serde_json::Value,
}

impl SemanticEncoder {
    pub fn new(config: &SemanticConfig, expr_dim: usize, embed_dim: usize) -> Self {
        let mut rng = rng::seeded(config.seed, &[0x5e, 0x1]);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let input = Linear::new(&mut store, "input", expr_dim, d, &mut rng);
        let layers = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("layer{l}"), d, config.heads, &mut rng))
            .collect();
        let ln = LayerNorm::new(&mut store, "ln", d);
        let head = Linear::new(&mut store, "head", d, embed_dim, &mut rng);
        Self {
            config: config.clone(),
            expr_dim,
            embed_dim,
            store,
            input,
            layers,
            ln,
            head,
            banks: None,
            metrics: serde_json::Value::Null,
        }
    }

    /// Unit embedding (`1 x d_e`) of an expression window (`T x E`).
    pub fn forward(&self, g: &mut Graph, expression: &Mat) -> Var {
        let x = g.constant(expression.clone());
        let h = self.input.forward(g, &self.store, x);
        let pos = g.constant(sinusoidal(expression.rows(), self.config.d_model, 0.0));
        let mut h = g.add(h, pos);
        for layer in &self.layers {
            h = layer.forward(g, &self.store, h);
        }
        let h = self.ln.forward(g, &self.store, h);
        let pooled = g.mean_rows(h);
        let e = self.head.forward(g, &self.store, pooled);
        g.normalize_rows(e)
    }

    pub fn embed_expression(&self, expression: &Mat) -> Result<Vec<f64>> {
        if expression.rows() == 0 || expression.cols() != self.expr_dim {
            return Err(invalid(format!(
                "expression window {:?} does not match encoder width {}",
                expression.shape(),
                self.expr_dim
            )));
        }
        let mut g = Graph::new();
        let e = self.forward(&mut g, expression);
        Ok(g.value(e).data().to_vec())
    }

    pub fn embed(&self, seq: &MotionSequence, start: usize, len: usize) -> Result<Vec<f64>> {
        if len == 0 || start + len > seq.len() {
            return Err(invalid(format!(
                "window [{start}, {}) outside sequence of {} frames",
                start + len,
                seq.len()
            )));
        }
        self.embed_expression(&seq.expression.slice_rows(start, len))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = json!({ "semantic": self.config, "expr_dim": self.expr_dim, "embed_dim": self.embed_dim });
        let mut ck = Checkpoint::from_store(KIND, config, self.metrics.clone(), &[("", &self.store)]);
        if let Some(b) = &self.banks {
            ck.tensors.push(("bank/a".into(), b.bank_a.clone()));
            ck.tensors.push(("bank/v".into(), b.bank_v.clone()));
            let meta = Mat::from_fn(b.len(), 2, |i, c| {
                if c == 0 {
                    b.clip_a[i] as f64
                } else {
                    b.slot_age[i] as f64
                }
            });
            ck.tensors.push(("bank/meta".into(), meta));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: SemanticConfig = serde_json::from_value(ck.config["semantic"].clone())
            .map_err(|e| invalid(format!("semantic config: {e}")))?;
        let dim = |k: &str| {
            ck.config[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| invalid(format!("{k} missing")))
        };
        let mut enc = Self::new(&config, dim("expr_dim")?, dim("embed_dim")?);
        ck.fill_store("", &mut enc.store)?;
        if let (Some(a), Some(v), Some(meta)) = (ck.tensor("bank/a"), ck.tensor("bank/v"), ck.tensor("bank/meta")) {
            let clips: Vec<usize> = meta.column(0).iter().map(|&x| x as usize).collect();
            let mut banks = MemoryBankPair::new(a, v, clips)?;
            banks.bank_a = a.clone();
            banks.bank_v = v.clone();
            banks.slot_age = meta.column(1).iter().map(|&x| x as u64).collect();
            enc.banks = Some(banks);
        }
        enc.metrics = ck.metrics.clone();
        Ok(enc)
    }
}

/// Audio embeddings for every window start of every clip, computed once.
pub(crate) struct AudioTable {
    window: usize,
    rows: Vec<Vec<Vec<f64>>>,
}

impl AudioTable {
    pub(crate) fn build(corpus: &Corpus, expert: &MotionExpert, clips: &[usize], window: usize) -> Result<Self> {
        let mut rows = vec![Vec::new(); corpus.clips.len()];
        for &i in clips {
            let clip = &corpus.clips[i];
            rows[i] = (0..=clip.audio.len().saturating_sub(window))
                .map(|s| expert.embed_audio(&clip.audio, s, window).map(|e| e.vector))
                .collect::<Result<_>>()?;
        }
        Ok(Self { window, rows })
    }

    pub(crate) fn get(&self, clip: usize, start: usize) -> &[f64] {
        &self.rows[clip][start]
    }
}

/// Held-out mean squared and mean absolute cosine gaps over all window pairs.
fn held_out_alignment(
    enc: &SemanticEncoder,
    corpus: &Corpus,
    table: &AudioTable,
    windows: &[(usize, usize)],
) -> Result<(f64, f64)> {
    let w = table.window;
    let mut v = Vec::with_capacity(windows.len());
    let mut a = Vec::with_capacity(windows.len());
    for &(clip, start) in windows {
        v.push(enc.embed(&corpus.clips[clip].motion, start, w)?);
        a.push(table.get(clip, start).to_vec());
    }
    let p = pair_set(&Mat::from_rows(&v), &Mat::from_rows(&a), None)?;
    let d = cosine_gap(&p);
    let n = windows.len();
    let pairs = (n * (n - 1)) as f64;
    let abs: f64 = d.data().iter().map(|x| x.abs()).sum::<f64>() / pairs;
    Ok((d.sq_norm() / pairs, abs))
}

fn sample_window(corpus: &Corpus, pool: &[usize], w: usize, rng: &mut rng::Rng) -> (usize, usize) {
    let clip = pool[rng.random_range(0..pool.len())];
    let start = rng.random_range(0..=corpus.clips[clip].motion.len() - w);
    (clip, start)
}

pub fn train_semantic_encoder(
    corpus: &Corpus,
    expert: &MotionExpert,
    config: &SemanticConfig,
) -> TrainResult<SemanticEncoder> {
    let w = config.window;
    if config.use_memory_bank && config.bank_size < config.batch {
        return Err(invalid(format!(
            "bank size {} is smaller than batch size {}",
            config.bank_size, config.batch
        ))
        .into());
    }
    if config.batch < 2 {
        return Err(invalid("batch size must be at least 2").into());
    }
    let pool = corpus.indices(Split::Train);
    let val = corpus.indices(Split::Val);
    if pool.is_empty() || val.is_empty() {
        return Err(invalid("semantic training needs nonempty train and validation splits").into());
    }
    if corpus.clips.iter().any(|c| c.motion.len() < w) {
        return Err(invalid("clips shorter than the encoder window").into());
    }
    let all: Vec<usize> = pool.iter().chain(&val).copied().collect();
    let table = AudioTable::build(corpus, expert, &all, w)?;
    let val_windows: Vec<(usize, usize)> = val
        .iter()
        .flat_map(|&c| {
            (0..=corpus.clips[c].motion.len() - w)
                .step_by(config.val_stride.max(1))
                .map(move |s| (c, s))
        })
        .collect();

    let mut enc = SemanticEncoder::new(config, corpus.config.expr_dim, expert.config.embed_dim);
    let (init_val, _) = held_out_alignment(&enc, corpus, &table, &val_windows)?;
    let mut rng = rng::seeded(config.seed, &[0x5e, 0x2]);
    let window_id = |clip: usize, start: usize| clip * 1000 + start;

    if config.use_memory_bank {
        let mut a = Vec::with_capacity(config.bank_size);
        let mut v = Vec::with_capacity(config.bank_size);
        let mut ids = Vec::with_capacity(config.bank_size);
        for _ in 0..config.bank_size {
            let (clip, start) = sample_window(corpus, &pool, w, &mut rng);
            a.push(table.get(clip, start).to_vec());
            v.push(enc.embed(&corpus.clips[clip].motion, start, w)?);
            ids.push(window_id(clip, start));
        }
        enc.banks = Some(MemoryBankPair::new(&Mat::from_rows(&a), &Mat::from_rows(&v), ids)?);
    }

    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut last_good = enc.store.clone();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<(usize, usize)> = (0..config.batch)
            .map(|_| sample_window(corpus, &pool, w, &mut rng))
            .collect();
        let a = Mat::from_rows(&batch.iter().map(|&(c, s)| table.get(c, s).to_vec()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let rows: Vec<Var> = batch
            .iter()
            .map(|&(c, s)| enc.forward(&mut g, &corpus.clips[c].motion.expression.slice_rows(s, w)))
            .collect();
        let v = g.concat_rows(&rows);
        let loss = global_structural_loss(&mut g, v, &a, enc.banks.as_ref())?;
        let bank_len = enc.banks.as_ref().map_or(0, |b| b.len());
        let value = g.scalar(loss) / num_pairs(config.batch, bank_len);
        if !value.is_finite() {
            enc.store = last_good;
            return Err(TrainError::Diverged(Diverged {
                step,
                detail: format!("structural loss {value}"),
                last_good: enc,
            }));
        }
        last_good = enc.store.clone();
        let v_batch = g.value(v).clone();
        let grads = g.backward(loss);
        opt.step(&mut enc.store, &grads, cosine_lr(step, config.steps));
        if let Some(banks) = enc.banks.as_mut() {
            let ids: Vec<usize> = batch.iter().map(|&(c, s)| window_id(c, s)).collect();
            banks.update(&a, &v_batch, &ids)?;
        }
        curve.push(value);
    }
    enc.store.round_f32();
    let (final_val, align) = held_out_alignment(&enc, corpus, &table, &val_windows)?;
    enc.metrics = json!({
        "val_structural_loss": final_val,
        "val_structural_loss_random_init": init_val,
        "val_alignment": align,
        "loss_curve": curve,
        "corpus_fingerprint": corpus.fingerprint(),
    });
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_rho(m: &Mat) -> Vec<f64> {
        let n = m.rows();
        (0..n)
            .map(|i| {
                let mut s = 0.0;
                for j in 0..n {
                    if j != i {
                        s += m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                s / (n - 1) as f64
            })
            .collect()
    }

    #[test]
    fn two_rows_share_their_cosine() {
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let r = redundancy_scores(&m).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-15 && (r[1] - 0.6).abs() < 1e-15);
        assert!(redundancy_scores(&Mat::from_rows(&[vec![1.0, 0.0]])).is_err());
    }

    #[test]
    fn identical_rows_are_fully_redundant() {
        let m = Mat::from_rows(&vec![vec![0.0, 1.0, 0.0]; 5]);
        assert!(redundancy_scores(&m).unwrap().iter().all(|&r| (r - 1.0).abs() < 1e-15));
    }

    #[test]
    fn selection_order_and_ties() {
        assert_eq!(select_replace_indices(&[0.5, 0.7, 0.3], 1).unwrap(), vec![1]);
        assert_eq!(select_replace_indices(&[0.5, 0.5], 1).unwrap(), vec![0]);
        let mut all = select_replace_indices(&[0.1, 0.9, 0.4], 3).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(select_replace_indices(&[0.1], 2).is_err());
        assert!(select_replace_indices(&[0.1], 0).is_err());
    }

    #[test]
    fn update_on_identical_bank_spreads_it() {
        let n = 6;
        let bank = Mat::from_rows(&vec![vec![1.0, 0.0, 0.0]; n]);
        let mut banks = MemoryBankPair::new(&bank, &bank, (0..n).collect()).unwrap();
        let before = banks.mean_pairwise_cosine();
        let batch = Mat::from_rows(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        let slots = banks.update(&batch, &batch, &[100, 101]).unwrap();
        assert_eq!(slots, vec![0, 1]);
        assert!(banks.mean_pairwise_cosine() < before);
        assert_eq!(banks.bank_a.row(1), &[0.0, 0.0, 1.0]);
        assert_eq!(banks.slot_age, vec![0, 0, 1, 1, 1, 1]);
        assert_eq!(banks.clip_a, banks.clip_v);
    }

    #[test]
    fn empty_batch_leaves_banks() {
        let bank = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut banks = MemoryBankPair::new(&bank, &bank, vec![0, 1]).unwrap();
        let copy = banks.clone();
        banks.update(&Mat::zeros(0, 2), &Mat::zeros(0, 2), &[]).unwrap();
        assert_eq!(banks.bank_a, copy.bank_a);
        assert!(banks.update(&Mat::zeros(1, 2), &Mat::zeros(2, 2), &[0]).is_err());
    }

    #[test]
    fn structural_loss_examples() {
        let v = Mat::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((structural_loss_value(&v, &a, None).unwrap() - 1.0).abs() < 1e-15);
        assert!(structural_loss_value(&a, &a, None).unwrap().abs() < 1e-15);
        assert!(structural_loss_value(&Mat::zeros(1, 2), &Mat::zeros(1, 2), None).is_err());
    }

    #[test]
    fn redundancy_matches_loop() {
        let mut r = rng::seeded(3, &[]);
        for n in [2usize, 3, 9, 30] {
            let m = rng::normal_mat(&mut r, n, 5).normalize_rows();
            let fast = redundancy_scores(&m).unwrap();
            for (x, y) in fast.iter().zip(brute_rho(&m)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
