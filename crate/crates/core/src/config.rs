use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::diffusion::DiffusionConfig;
use crate::error::{invalid, Error, Result};
use crate::expert::ExpertConfig;
use crate::semantic::SemanticConfig;
use crate::style::StyleConfig;

/// Key-order-independent hash of a JSON document (first 16 hex chars of
/// SHA-256 over the canonical, key-sorted serialization).
pub fn hash_json(value: &Value) -> String {
    let canonical = canonicalize(value);
    let text = serde_json::to_string(&canonical).expect("json value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = serde_json::Map::new();
            for k in keys {
                out.insert(k.clone(), canonicalize(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Seeds and sizes for evaluation and ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// The style-similarity probe is a second style encoder trained with
    /// `seed + probe_seed_offset`.
    pub probe_seed_offset: u64,
    pub sample_seed: u64,
    /// Training seeds for `ablate`.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_seed_offset: 1000,
            sample_seed: 0,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

/// Everything a run needs, one section per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_root: PathBuf,
    pub corpus: CorpusConfig,
    pub expert: ExpertConfig,
    pub semantic: SemanticConfig,
    pub style: StyleConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_root: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            expert: ExpertConfig::default(),
            semantic: SemanticConfig::default(),
            style: StyleConfig::default(),
            diffusion: DiffusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field(path: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidArgument(m) => invalid(format!("{path}: {m}")),
        other => other,
    }
}

fn check(ok: bool, path: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("{path}: {msg}")))
    }
}

impl RunConfig {
    /// Parses a config document; missing keys take defaults, unknown keys
    /// and type errors are reported with their path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self =
            serde_path_to_error::deserialize(de).map_err(|e| invalid(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(crate::error::io_err(format!("reading {}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => invalid(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Sets the seed of every training stage; the corpus keeps its own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.expert.seed = seed;
        self.semantic.seed = seed;
        self.style.seed = seed;
        self.diffusion.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        c.partition.validate(c.expr_dim).map_err(field("corpus.partition"))?;
        c.validate().map_err(field("corpus"))?;
        c.validate_splits().map_err(field("corpus"))?;

        let e = &self.expert;
        check(
            e.window >= 2 && e.window <= c.frames,
            "expert.window",
            "must lie in 2..=frames",
        )?;
        check(e.kernel % 2 == 1, "expert.kernel", "must be odd")?;
        check(e.embed_dim > 0 && e.hidden > 0, "expert.embed_dim", "must be positive")?;
        check(
            e.steps > 0 && e.batch > 0,
            "expert.steps",
            "steps and batch must be positive",
        )?;
        check(e.lr > 0.0, "expert.lr", "must be positive")?;
        check(
            (0.0..=1.0).contains(&e.negative_fraction) && (0.0..=1.0).contains(&e.offset_share),
            "expert.negative_fraction",
            "fractions must lie in [0, 1]",
        )?;
        check(e.sync_stride > 0, "expert.sync_stride", "must be positive")?;

        let s = &self.semantic;
        check(
            s.window >= 2 && s.window <= c.frames,
            "semantic.window",
            "must lie in 2..=frames",
        )?;
        check(
            s.heads > 0 && s.d_model.is_multiple_of(s.heads),
            "semantic.heads",
            "must divide d_model",
        )?;
        check(s.batch >= 2, "semantic.batch", "must be at least 2")?;
        check(s.bank_size >= s.batch, "semantic.bank_size", "must be at least batch")?;
        check(
            s.steps > 0 && s.lr > 0.0,
            "semantic.steps",
            "steps and lr must be positive",
        )?;
        check(s.val_stride > 0, "semantic.val_stride", "must be positive")?;

        let st = &self.style;
        check(
            st.heads > 0 && st.d_model.is_multiple_of(st.heads),
            "style.heads",
            "must divide d_model",
        )?;
        check(st.style_dim > 0, "style.style_dim", "must be positive")?;
        check(
            st.min_window >= 1 && st.min_window <= st.crop && st.crop <= c.frames,
            "style.crop",
            "must satisfy min_window <= crop <= frames",
        )?;
        check(st.batch >= 2, "style.batch", "must be at least 2")?;
        check(
            st.steps > 0 && st.lr > 0.0,
            "style.steps",
            "steps and lr must be positive",
        )?;
        check(
            st.lambda_orth >= 0.0 && st.lambda_hsic >= 0.0 && st.margin >= 0.0,
            "style.lambda_orth",
            "loss weights and margin must be nonnegative",
        )?;

        let d = &self.diffusion;
        check(d.t_steps > 0, "diffusion.t_steps", "must be positive")?;
        check(
            d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0,
            "diffusion.beta_start",
            "betas must satisfy 0 < start <= end < 1",
        )?;
        check(
            d.d_model >= 2 && d.d_model.is_multiple_of(2) && d.heads > 0 && d.d_model.is_multiple_of(d.heads),
            "diffusion.d_model",
            "must be even and divisible by heads",
        )?;
        check(d.blocks > 0, "diffusion.blocks", "must be positive")?;
        check(d.audio_kernel % 2 == 1, "diffusion.audio_kernel", "must be odd")?;
        check(
            d.modulated_blocks.iter().flatten().all(|&b| b < d.blocks),
            "diffusion.modulated_blocks",
            "entries must be below blocks",
        )?;
        check(
            d.min_frames >= 1 && d.min_frames <= c.frames,
            "diffusion.min_frames",
            "must lie in 1..=frames",
        )?;
        check(
            d.steps > 0 && d.batch > 0 && d.lr > 0.0,
            "diffusion.steps",
            "steps, batch and lr must be positive",
        )?;
        check(
            !self.eval.ablation_seeds.is_empty(),
            "eval.ablation_seeds",
            "must not be empty",
        )?;
        Ok(())
    }

    /// Hash of every setting except where outputs go.
    pub fn hash(&self) -> String {
        let mut v = self.to_json();
        if let Some(m) = v.as_object_mut() {
            m.remove("output_root");
        }
        hash_json(&v)
    }

    /// Hash of the sections a stage depends on, so a change to a later
    /// stage leaves earlier artifacts addressable.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut v = serde_json::Map::new();
        v.insert("corpus".into(), serde_json::to_value(&self.corpus).expect("serializes"));
        let sections: &[&str] = match stage {
            Stage::Corpus => &[],
            Stage::Expert => &["expert"],
            Stage::Semantic => &["expert", "semantic"],
            Stage::Sdse => &["expert", "semantic", "style"],
            Stage::Diffusion => &["expert", "semantic", "style", "diffusion"],
            Stage::Probe => &["expert", "semantic", "style", "eval"],
            Stage::Eval | Stage::Ablate => &["expert", "semantic", "style", "diffusion", "eval"],
        };
        let all = self.to_json();
        for s in sections {
            v.insert((*s).into(), all[*s].clone());
        }
        hash_json(&Value::Object(v))
    }
}

/// Pipeline stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Corpus,
    Expert,
    Semantic,
    Sdse,
    Diffusion,
    Probe,
    Eval,
    Ablate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Expert => "expert",
            Stage::Semantic => "semantic",
            Stage::Sdse => "sdse",
            Stage::Diffusion => "diffusion",
            Stage::Probe => "probe",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"a": 1, "b": {"x": [1, 2], "y": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"b": {"y": null, "x": [1, 2]}, "a": 1}"#).unwrap();
        assert_eq!(hash_json(&a), hash_json(&b));
        let c: Value = serde_json::from_str(r#"{"a": 1, "b": {"x": [2, 1], "y": null}}"#).unwrap();
        assert_ne!(hash_json(&a), hash_json(&c));
    }

    #[test]
    fn partial_document_takes_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"diffusion": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.diffusion.steps, 7);
        assert_eq!(cfg.corpus, CorpusConfig::default());
        assert_eq!(RunConfig::from_json_str("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_json_str(r#"{"corpus": {"partition": {"upper": [0, 1], "lower": [1]}}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("corpus.partition"), "{e}");
        let e = RunConfig::from_json_str(r#"{"style": {"stepz": 3}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("style"), "{e}");
        let e = RunConfig::from_json_str(r#"{"diffusion": {"steps": "many"}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("diffusion.steps"), "{e}");
    }

    #[test]
    fn shipped_defaults_match() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::default());
    }

    #[test]
    fn stage_hash_ignores_later_sections() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.diffusion.steps += 1;
        assert_eq!(a.stage_hash(Stage::Sdse), b.stage_hash(Stage::Sdse));
        assert_ne!(a.stage_hash(Stage::Diffusion), b.stage_hash(Stage::Diffusion));
    }
}
