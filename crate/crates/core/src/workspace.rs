//! On-disk artifact layout `<root>/<stage>/<stage hash>/` and the commands
//! built on it.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{Checkpoint, TrainError};
use crate::config::{RunConfig, Stage};
use crate::corpus::{Corpus, PseudoAudioFeatures};
use crate::diffusion::{
    initial_model, sample_motion, train_diffusion_resumable, DiffusionSnapshot, ModulationTelemetry, MotionDenoiser,
};
use crate::error::{invalid, io_err, Error, Result};
use crate::eval::{evaluate, evaluate_identity, run_ablations, AblationSpec, AblationTable, EvalReport, Pipeline};
use crate::expert::{train_expert, MotionExpert};
use crate::motion::{read_json, write_json, MotionSequence};
use crate::semantic::{train_semantic_encoder, SemanticEncoder};
use crate::style::{train_sdse, StyleEncoder};

const RECORD: &str = "run.json";

/// Written last into every finished artifact directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub stage_hash: String,
    pub config_hash: String,
    pub corpus_fingerprint: String,
    pub config: Value,
}

pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    pub force: bool,
    pub allow_mismatch: bool,
}

fn remove(dir: &Path) -> Result<()> {
    fs::remove_dir_all(dir).map_err(io_err(format!("removing {}", dir.display())))
}

impl Workspace {
    pub fn new(config: RunConfig) -> Self {
        Self {
            root: config.output_root.clone(),
            config,
            force: false,
            allow_mismatch: false,
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name()).join(self.config.stage_hash(stage))
    }

    fn record(&self, stage: Stage) -> RunRecord {
        RunRecord {
            stage,
            stage_hash: self.config.stage_hash(stage),
            config_hash: self.config.hash(),
            corpus_fingerprint: crate::config::hash_json(
                &serde_json::to_value(&self.config.corpus).expect("config serializes"),
            ),
            config: self.config.to_json(),
        }
    }

    /// Empty output directory for `stage`. A finished artifact or a resumable
    /// snapshot is kept unless `force` is set; leftovers of a failed run are
    /// cleared.
    pub fn prepare_output(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if dir.exists() {
            let precious = dir.join(RECORD).exists() || dir.join("snapshot").exists();
            if precious && !self.force {
                return Err(Error::RefusedOverwrite(dir));
            }
            remove(&dir)?;
        }
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        Ok(dir)
    }

    fn finish(&self, dir: &Path, stage: Stage) -> Result<()> {
        write_json(&dir.join(RECORD), &self.record(stage))
    }

    /// Finished artifact directory for `stage`. With `allow_mismatch`, a
    /// missing directory falls back to the newest finished artifact of the
    /// stage produced under another config.
    pub fn locate(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        let expected = self.config.stage_hash(stage);
        if dir.join(RECORD).exists() {
            let rec: RunRecord = read_json(&dir.join(RECORD))?;
            if rec.stage_hash != expected && !self.allow_mismatch {
                return Err(Error::HashMismatch {
                    artifact: rec.stage_hash,
                    run: expected,
                });
            }
            return Ok(dir);
        }
        if self.allow_mismatch {
            let parent = self.root.join(stage.name());
            let mut found: Vec<(std::time::SystemTime, PathBuf)> = fs::read_dir(&parent)
                .into_iter()
                .flatten()
                .flatten()
                .map(|e| e.path())
                .filter(|p| p.join(RECORD).exists())
                .filter_map(|p| Some((fs::metadata(p.join(RECORD)).ok()?.modified().ok()?, p)))
                .collect();
            found.sort();
            if let Some((_, p)) = found.pop() {
                warn!("using {} {} built under a different config", stage.name(), p.display());
                return Ok(p);
            }
        }
        Err(Error::MissingPrerequisite(stage.name().into()))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.locate(Stage::Corpus)?)
    }

    fn checkpoint(&self, stage: Stage, corpus: &Corpus) -> Result<Checkpoint> {
        let ck = Checkpoint::load(&self.locate(stage)?.join("checkpoint"))?;
        let fp = ck.metrics["corpus_fingerprint"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        if fp != corpus.fingerprint() && !self.allow_mismatch {
            return Err(Error::HashMismatch {
                artifact: fp,
                run: corpus.fingerprint(),
            });
        }
        Ok(ck)
    }

    pub fn expert(&self, corpus: &Corpus) -> Result<MotionExpert> {
        MotionExpert::from_checkpoint(&self.checkpoint(Stage::Expert, corpus)?)
    }

    pub fn semantic(&self, corpus: &Corpus) -> Result<SemanticEncoder> {
        SemanticEncoder::from_checkpoint(&self.checkpoint(Stage::Semantic, corpus)?)
    }

    pub fn sdse(&self, corpus: &Corpus) -> Result<StyleEncoder> {
        StyleEncoder::from_checkpoint(&self.checkpoint(Stage::Sdse, corpus)?)
    }

    pub fn probe(&self, corpus: &Corpus) -> Result<StyleEncoder> {
        StyleEncoder::from_checkpoint(&self.checkpoint(Stage::Probe, corpus)?)
    }

    pub fn diffusion(&self, corpus: &Corpus) -> Result<MotionDenoiser> {
        MotionDenoiser::from_checkpoint(&self.checkpoint(Stage::Diffusion, corpus)?)
    }

    pub fn synth_data(&self) -> Result<PathBuf> {
        let corpus = Corpus::generate(&self.config.corpus)?;
        let dir = self.prepare_output(Stage::Corpus)?;
        let manifest = corpus.write(&dir)?;
        info!("wrote {} clips to {}", manifest.entries.len(), dir.display());
        self.finish(&dir, Stage::Corpus)?;
        Ok(dir)
    }

    fn save_trained(&self, dir: &Path, stage: Stage, ck: &Checkpoint) -> Result<()> {
        ck.save(&dir.join("checkpoint"))?;
        write_json(&dir.join("curve.json"), &ck.metrics)?;
        self.finish(dir, stage)
    }

    /// Trains one stage. Prerequisites are checked before anything is
    /// written. `resume` continues an interrupted diffusion run from its
    /// last snapshot; the short stages simply rerun.
    pub fn train(&self, stage: Stage, resume: bool) -> Result<PathBuf> {
        let corpus = self.corpus()?;
        let cfg = &self.config;
        match stage {
            Stage::Expert => {
                let dir = self.prepare_output(stage)?;
                let e = train_expert(&corpus, &cfg.expert)?;
                self.save_trained(&dir, stage, &e.checkpoint())?;
                Ok(dir)
            }
            Stage::Semantic => {
                let expert = self.expert(&corpus).map_err(prereq("expert"))?;
                let dir = self.prepare_output(stage)?;
                let s = train_semantic_encoder(&corpus, &expert, &cfg.semantic)?;
                self.save_trained(&dir, stage, &s.checkpoint())?;
                Ok(dir)
            }
            Stage::Sdse | Stage::Probe => {
                let semantic = self.semantic(&corpus).map_err(prereq("semantic"))?;
                let style = if stage == Stage::Probe {
                    crate::eval::probe_config(cfg).style
                } else {
                    cfg.style.clone()
                };
                let dir = self.prepare_output(stage)?;
                let s = train_sdse(&corpus, &semantic, &style)?;
                self.save_trained(&dir, stage, &s.checkpoint())?;
                Ok(dir)
            }
            Stage::Diffusion => {
                let sdse = self.sdse(&corpus).map_err(prereq("sdse"))?;
                let expert = self.expert(&corpus).map_err(prereq("expert"))?;
                self.train_diffusion(&corpus, &sdse, &expert, resume)
            }
            other => Err(invalid(format!("{} is not a training stage", other.name()))),
        }
    }

    fn train_diffusion(
        &self,
        corpus: &Corpus,
        sdse: &StyleEncoder,
        expert: &MotionExpert,
        resume: bool,
    ) -> Result<PathBuf> {
        let dir = self.stage_dir(Stage::Diffusion);
        let snap_dir = dir.join("snapshot");
        let finished = dir.join(RECORD).exists();
        let cfg = &self.config.diffusion;
        let start = if resume && !finished && snap_dir.join("manifest.json").exists() {
            let template = initial_model(corpus, sdse, expert, cfg)?;
            let snap = DiffusionSnapshot::from_checkpoint(&Checkpoint::load(&snap_dir)?, &template.store, cfg)?;
            info!("resuming diffusion training at step {}", snap.step);
            Some(snap)
        } else {
            if resume {
                warn!("no diffusion snapshot to resume from; training from scratch");
            }
            self.prepare_output(Stage::Diffusion)?;
            None
        };
        let mut save = |s: &DiffusionSnapshot| -> Result<()> {
            let tmp = dir.join("snapshot.tmp");
            if tmp.exists() {
                remove(&tmp)?;
            }
            s.checkpoint(cfg).save(&tmp)?;
            if snap_dir.exists() {
                remove(&snap_dir)?;
            }
            fs::rename(&tmp, &snap_dir).map_err(io_err("replacing diffusion snapshot"))
        };
        let model = match train_diffusion_resumable(corpus, sdse, expert, cfg, start, &mut save) {
            Ok(m) => m,
            Err(TrainError::Diverged(d)) => {
                d.last_good.checkpoint().save(&dir.join("diverged"))?;
                return Err(Error::Diverged {
                    step: d.step,
                    detail: format!("{}; last finite weights in diverged/", d.detail),
                });
            }
            Err(TrainError::Failed(e)) => return Err(e),
        };
        self.save_trained(&dir, Stage::Diffusion, &model.checkpoint())?;
        if snap_dir.exists() {
            remove(&snap_dir)?;
        }
        Ok(dir)
    }

    /// Samples motion for an audio file in the style of a reference
    /// sequence directory.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        audio_path: &Path,
        style_ref: &Path,
        out: &Path,
        steps: Option<usize>,
        seed: u64,
        plot: bool,
    ) -> Result<(MotionSequence, ModulationTelemetry)> {
        let corpus_cfg = &self.config.corpus;
        let corpus = Corpus::generate(corpus_cfg)?;
        let expert = self.expert(&corpus).map_err(prereq("expert"))?;
        let sdse = self.sdse(&corpus).map_err(prereq("sdse"))?;
        let model = self.diffusion(&corpus).map_err(prereq("diffusion"))?;
        let audio = PseudoAudioFeatures::read(audio_path, model.audio_dim)?;
        let reference = MotionSequence::read_dir(style_ref)?;
        if out.join("expression.f32").exists() && !self.force {
            return Err(Error::RefusedOverwrite(out.to_path_buf()));
        }
        let (seq, tel) = sample_motion(&model, &audio, &reference, &sdse, &expert, steps, seed)?;
        seq.write_dir(out)?;
        write_json(&out.join("telemetry.json"), &tel)?;
        let mut rec = serde_json::to_value(self.record(Stage::Diffusion)).expect("record serializes");
        rec["seed"] = seed.into();
        write_json(&out.join(RECORD), &rec)?;
        if plot {
            let svg = crate::plot::trajectory_svg(&seq, &corpus_cfg.partition);
            fs::write(out.join("trajectories.svg"), svg).map_err(io_err("writing trajectories.svg"))?;
        }
        Ok((seq, tel))
    }

    /// Scores the trained pipeline on the test split, or with `identity`
    /// the ground truth against itself.
    pub fn eval(&self, identity: bool) -> Result<(PathBuf, EvalReport)> {
        let corpus = self.corpus()?;
        let expert = self.expert(&corpus).map_err(prereq("expert"))?;
        let probe = self.probe(&corpus).map_err(prereq("probe"))?;
        let hash = self.config.hash();
        let report = if identity {
            evaluate_identity(&corpus, &expert, &probe, &hash)?
        } else {
            let pipeline = Pipeline {
                semantic: self.semantic(&corpus).map_err(prereq("semantic"))?.into(),
                sdse: self.sdse(&corpus).map_err(prereq("sdse"))?.into(),
                diffusion: self.diffusion(&corpus).map_err(prereq("diffusion"))?.into(),
                expert: expert.into(),
            };
            evaluate(&corpus, &pipeline, &probe, self.config.eval.sample_seed, "full", &hash)?
        };
        let mut dir = self.stage_dir(Stage::Eval);
        if identity {
            dir = dir.join("identity");
        }
        if dir.join("report.json").exists() && !self.force {
            return Err(Error::RefusedOverwrite(dir));
        }
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        write_json(&dir.join("report.json"), &report)?;
        self.finish(&dir, Stage::Eval)?;
        Ok((dir, report))
    }

    /// Trains and scores all variants under the configured seeds.
    pub fn ablate(&self, seeds: Option<Vec<u64>>) -> Result<(PathBuf, AblationTable)> {
        let corpus = self.corpus()?;
        let seeds = seeds.unwrap_or_else(|| self.config.eval.ablation_seeds.clone());
        let dir = self.prepare_output(Stage::Ablate)?;
        let table = run_ablations(&corpus, &self.config, &AblationSpec::standard(), &seeds)?;
        write_json(&dir.join("ablation.json"), &table)?;
        let mut text = table.render_text();
        text.push_str(&format!("{:?}\n", table.ordering_checks()));
        fs::write(dir.join("table.txt"), text).map_err(io_err("writing table.txt"))?;
        fs::write(dir.join("ablation.svg"), table.render_svg()).map_err(io_err("writing ablation.svg"))?;
        self.finish(&dir, Stage::Ablate)?;
        Ok((dir, table))
    }
}

/// Maps a missing upstream artifact to an error naming the stage.
fn prereq(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::MissingPrerequisite(_) => Error::MissingPrerequisite(stage.into()),
        other => other,
    }
}
