use talkstyle::corpus::{Corpus, CorpusConfig, PseudoAudioFeatures};
use talkstyle::diffusion::{
    denoising_loss, forward_diffuse, initial_model, sample_motion, train_diffusion, ConditionInputs, DiffusionConfig,
    MotionDenoiser, NoisePredictor, NoiseSchedule, Region,
};
use talkstyle::expert::{ExpertConfig, MotionExpert};
use talkstyle::nn::{Graph, Mat, Var};
use talkstyle::rng;
use talkstyle::style::{StyleConfig, StyleEncoder};

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

#[test]
fn closed_form_marginal_matches_iterated_steps() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let t = 10;
    let n = 100_000;
    let mut r = rng::seeded(7, &[]);
    let x0 = Mat::filled(1, n, 1.5);
    let closed = forward_diffuse(&x0, t, &rng::normal_mat(&mut r, 1, n), &s).unwrap();
    let mut x = x0.clone();
    for k in 1..=t {
        let eps = rng::normal_mat(&mut r, 1, n);
        let b = s.betas[k - 1];
        x = x.zip_map(&eps, |v, e| (1.0 - b).sqrt() * v + b.sqrt() * e);
    }
    let (m1, v1) = moments(closed.data());
    let (m2, v2) = moments(x.data());
    assert!((m1 - m2).abs() / m1.abs() < 0.02, "means {m1} vs {m2}");
    assert!((v1 - v2).abs() / v1 < 0.02, "variances {v1} vs {v2}");
    assert!((v1 - (1.0 - s.alpha_bar(t))).abs() / v1 < 0.02);
}

/// Recovers the exact noise from `x_t` because it knows `x0`.
struct Oracle<'a> {
    x0: &'a [Mat],
    schedule: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn channels(&self) -> usize {
        self.x0[0].cols()
    }

    fn predict_noise(
        &self,
        g: &mut Graph,
        x_t: Var,
        lens: &[usize],
        _: &[ConditionInputs],
        ts: &[usize],
    ) -> talkstyle::Result<Var> {
        let xt = g.value(x_t).clone();
        let mut off = 0;
        let mut parts = Vec::new();
        for ((x0, &n), &t) in self.x0.iter().zip(lens).zip(ts) {
            let ab = self.schedule.alpha_bar(t);
            parts.push(
                xt.slice_rows(off, n)
                    .zip_map(x0, |x, y| (x - ab.sqrt() * y) / (1.0 - ab).sqrt()),
            );
            off += n;
        }
        Ok(g.constant(Mat::concat_rows(&parts.iter().collect::<Vec<_>>())))
    }
}

struct Zero(usize);

impl NoisePredictor for Zero {
    fn channels(&self) -> usize {
        self.0
    }

    fn predict_noise(
        &self,
        g: &mut Graph,
        x_t: Var,
        _: &[usize],
        _: &[ConditionInputs],
        _: &[usize],
    ) -> talkstyle::Result<Var> {
        let (r, c) = g.value(x_t).shape();
        Ok(g.constant(Mat::zeros(r, c)))
    }
}

fn null_conds(x0: &[Mat]) -> Vec<ConditionInputs> {
    x0.iter()
        .map(|x| ConditionInputs {
            audio: Mat::zeros(x.rows(), 1),
            style: vec![],
            null_audio: true,
            null_style: true,
        })
        .collect()
}

#[test]
fn mock_predictors_bound_the_loss() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut r = rng::seeded(8, &[]);
    let x0: Vec<Mat> = (0..64).map(|_| rng::normal_mat(&mut r, 64, 16)).collect();
    let conds = null_conds(&x0);

    let mut g = Graph::new();
    let (loss, ts) = denoising_loss(&mut g, &Oracle { x0: &x0, schedule: &s }, &x0, &conds, &s, &mut r).unwrap();
    assert!(g.scalar(loss) < 1e-20);
    assert!(ts.iter().all(|&t| (1..=200).contains(&t)));

    let mut g = Graph::new();
    let (loss, _) = denoising_loss(&mut g, &Zero(16), &x0, &conds, &s, &mut r).unwrap();
    assert!((g.scalar(loss) - 1.0).abs() < 0.05);

    let mut g = Graph::new();
    assert!(denoising_loss(&mut g, &Zero(15), &x0, &conds, &s, &mut r).is_err());
}

struct Tiny {
    corpus: Corpus,
    expert: MotionExpert,
    sdse: StyleEncoder,
    model: MotionDenoiser,
}

fn tiny(cfg: &DiffusionConfig) -> Tiny {
    let corpus = Corpus::generate(&CorpusConfig {
        frames: 32,
        ..CorpusConfig::default()
    })
    .unwrap();
    let cc = &corpus.config;
    let expert = MotionExpert::new(&ExpertConfig::default(), cc.audio_dim, &cc.partition);
    let sdse = StyleEncoder::new(
        &StyleConfig {
            crop: 32,
            ..StyleConfig::default()
        },
        cc.expr_dim,
    );
    let model = initial_model(&corpus, &sdse, &expert, cfg).unwrap();
    Tiny {
        corpus,
        expert,
        sdse,
        model,
    }
}

fn small_config() -> DiffusionConfig {
    DiffusionConfig {
        t_steps: 8,
        d_model: 16,
        blocks: 2,
        heads: 2,
        steps: 4,
        eval_every: 2,
        ..DiffusionConfig::default()
    }
}

#[test]
fn sampling_contracts() {
    let t = tiny(&small_config());
    let clip = &t.corpus.clips[0];
    let other = &t.corpus.clips[11];
    let (seq, tel) = sample_motion(&t.model, &clip.audio, &other.motion, &t.sdse, &t.expert, None, 3).unwrap();
    assert_eq!(seq.len(), clip.audio.len());
    assert_eq!(seq.expr_dim() + seq.pose_dim(), 16);
    assert_eq!(tel.records.len(), 8 * 2 * 2);
    assert!(tel.is_consistent());
    assert!(!tel.mean_d(Region::Upper).is_nan());

    let (again, _) = sample_motion(&t.model, &clip.audio, &other.motion, &t.sdse, &t.expert, Some(8), 3).unwrap();
    assert_eq!(seq, again);
    let (different, _) = sample_motion(&t.model, &clip.audio, &other.motion, &t.sdse, &t.expert, None, 4).unwrap();
    assert_ne!(seq, different);

    // output length follows the audio, not the style reference
    let longer = PseudoAudioFeatures::new(Mat::concat_rows(&[
        &clip.audio.features,
        &clip.audio.features.slice_rows(0, 8),
    ]))
    .unwrap();
    let (seq40, _) = sample_motion(&t.model, &longer, &other.motion, &t.sdse, &t.expert, None, 3).unwrap();
    assert_eq!(seq40.len(), 40);

    let err = sample_motion(&t.model, &clip.audio, &other.motion, &t.sdse, &t.expert, Some(9), 3).unwrap_err();
    assert!(err.to_string().contains("exceed"), "{err}");
    let err = sample_motion(&t.model, &clip.audio, &other.motion, &t.sdse, &t.expert, Some(4), 3).unwrap_err();
    assert!(err.to_string().contains("only full ancestral"), "{err}");
    let short = clip.audio.window(0, 4).unwrap();
    assert!(sample_motion(&t.model, &short, &other.motion, &t.sdse, &t.expert, None, 3).is_err());
}

#[test]
fn batched_sampling_equals_single_sampling() {
    let t = tiny(&small_config());
    let style = t.sdse.embed_style(&t.corpus.clips[3].motion).unwrap();
    let conds: Vec<ConditionInputs> = [0usize, 5]
        .iter()
        .map(|&i| t.model.conditions(&t.corpus.clips[i].audio, &t.expert, &style).unwrap())
        .collect();
    let both = t.model.sample_batch(&conds, &[1, 2], None).unwrap();
    let one = t.model.sample_batch(&conds[1..], &[2], None).unwrap();
    assert!(both[1].0.max_abs_diff(&one[0].0) < 1e-9);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let t = tiny(&small_config());
    let trained = train_diffusion(&t.corpus, &t.sdse, &t.expert, &small_config())
        .map_err(talkstyle::Error::from)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    trained.checkpoint().save(dir.path()).unwrap();
    let loaded =
        MotionDenoiser::from_checkpoint(&talkstyle::checkpoint::Checkpoint::load(dir.path()).unwrap()).unwrap();
    let a: Vec<_> = trained.store.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let b: Vec<_> = loaded.store.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
    assert_eq!(a, b);
    let clip = &t.corpus.clips[2];
    let x = sample_motion(&trained, &clip.audio, &clip.motion, &t.sdse, &t.expert, None, 9).unwrap();
    let y = sample_motion(&loaded, &clip.audio, &clip.motion, &t.sdse, &t.expert, None, 9).unwrap();
    assert_eq!(x, y);
    let curve = trained.metrics["val_curve"].as_array().unwrap();
    assert_eq!(curve.len(), 3, "validation at steps 0, 2 and 4");
}

#[test]
fn disabling_modulation_still_trains() {
    let cfg = DiffusionConfig {
        hscales: false,
        ..small_config()
    };
    let t = tiny(&cfg);
    let model = train_diffusion(&t.corpus, &t.sdse, &t.expert, &cfg)
        .map_err(talkstyle::Error::from)
        .unwrap();
    let losses = model.metrics["loss_curve"].as_array().unwrap();
    assert!(losses.iter().all(|l| l.as_f64().unwrap().is_finite()));
    let clip = &t.corpus.clips[0];
    let (_, tel) = sample_motion(&model, &clip.audio, &clip.motion, &t.sdse, &t.expert, None, 0).unwrap();
    assert!(tel.is_consistent());
}

#[test]
fn interrupted_training_resumes_on_the_same_trajectory() {
    use talkstyle::checkpoint::Checkpoint;
    use talkstyle::checkpoint::TrainError;
    use talkstyle::diffusion::{train_diffusion_resumable, DiffusionSnapshot};

    let cfg = DiffusionConfig {
        steps: 6,
        eval_every: 2,
        ..small_config()
    };
    let t = tiny(&cfg);
    let full = train_diffusion_resumable(&t.corpus, &t.sdse, &t.expert, &cfg, None, &mut |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let stopped = train_diffusion_resumable(&t.corpus, &t.sdse, &t.expert, &cfg, None, &mut |s| {
        seen += 1;
        if s.step == 4 {
            return Err(talkstyle::Error::InvalidArgument("interrupted".into()));
        }
        s.checkpoint(&cfg).save(dir.path())
    });
    assert!(matches!(stopped, Err(TrainError::Failed(_))));
    assert_eq!(seen, 2);

    let snap =
        DiffusionSnapshot::from_checkpoint(&Checkpoint::load(dir.path()).unwrap(), &t.model.store, &cfg).unwrap();
    assert_eq!(snap.step, 2);
    let resumed = train_diffusion_resumable(&t.corpus, &t.sdse, &t.expert, &cfg, Some(snap), &mut |_| Ok(())).unwrap();
    let a: Vec<_> = full.store.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
    let b: Vec<_> = resumed.store.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
    assert_eq!(a, b);
    assert_eq!(full.metrics["loss_curve"], resumed.metrics["loss_curve"]);
    assert_eq!(full.metrics["val_curve"], resumed.metrics["val_curve"]);
}
