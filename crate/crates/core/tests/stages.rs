use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use talkstyle::corpus::{Corpus, CorpusConfig, Split};
use talkstyle::expert::{offset_accuracy, train_expert, ExpertConfig, MotionExpert};
use talkstyle::motion::MotionSequence;
use talkstyle::nn::Mat;
use talkstyle::rng;
use talkstyle::semantic::{
    redundancy_scores, select_replace_indices, train_semantic_encoder, SemanticConfig, SemanticEncoder,
};
use talkstyle::style::{decouple_value, hsic_value, train_sdse, StyleConfig};

struct Stages {
    corpus: Corpus,
    expert: MotionExpert,
    semantic: SemanticEncoder,
}

fn stages() -> &'static Stages {
    static S: OnceLock<Stages> = OnceLock::new();
    S.get_or_init(|| {
        let corpus = Corpus::generate(&CorpusConfig::default()).unwrap();
        let expert = train_expert(&corpus, &ExpertConfig::default())
            .map_err(talkstyle::Error::from)
            .unwrap();
        let semantic = train_semantic_encoder(&corpus, &expert, &SemanticConfig::default())
            .map_err(talkstyle::Error::from)
            .unwrap();
        Stages {
            corpus,
            expert,
            semantic,
        }
    })
}

#[test]
fn trained_expert_prefers_aligned_windows() {
    let s = stages();
    let val = s.corpus.indices(Split::Val);
    let acc = offset_accuracy(&s.expert, &s.corpus, &val, 11).unwrap();
    assert!(acc >= 0.9, "validation offset accuracy {acc}");

    let cc = &s.corpus.config;
    let all: Vec<usize> = (0..s.corpus.clips.len()).collect();
    let chance: Vec<f64> = (0..5u64)
        .map(|k| {
            let cfg = ExpertConfig {
                seed: 100 + k,
                ..ExpertConfig::default()
            };
            let fresh = MotionExpert::new(&cfg, cc.audio_dim, &cc.partition);
            offset_accuracy(&fresh, &s.corpus, &all, k).unwrap()
        })
        .collect();
    let mean = chance.iter().sum::<f64>() / chance.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "untrained accuracies {chance:?}");
}

#[test]
fn frozen_motion_scores_like_a_random_pairing() {
    let s = stages();
    let part = &s.corpus.config.partition;
    let test = s.corpus.indices(Split::Test);
    let mut r = rng::seeded(3, &[]);
    let mut null = Vec::new();
    for _ in 0..200 {
        let (a, b) = (test[r.random_range(0..test.len())], test[r.random_range(0..test.len())]);
        // a shared script would be genuinely in sync
        if s.corpus.clips[a].content != s.corpus.clips[b].content {
            null.push(
                s.expert
                    .sync_confidence(&s.corpus.clips[a].audio, &s.corpus.clips[b].motion, part)
                    .unwrap(),
            );
        }
    }
    null.sort_by(f64::total_cmp);
    let (lo, hi) = (null[null.len() / 40], null[null.len() - 1 - null.len() / 40]);
    let mut aligned = 0.0;
    for &i in &test {
        let clip = &s.corpus.clips[i];
        let m = &clip.motion;
        let frozen = MotionSequence::new(
            m.shape.clone(),
            Mat::from_fn(m.len(), m.expr_dim(), |_, c| m.expression.get(0, c)),
            Mat::from_fn(m.len(), m.pose_dim(), |_, c| m.pose.get(0, c)),
            m.fps,
        )
        .unwrap();
        let score = s.expert.sync_confidence(&clip.audio, &frozen, part).unwrap();
        assert!(
            score >= lo - 0.05 && score <= hi + 0.05,
            "frozen {score} outside null [{lo}, {hi}]"
        );
        aligned += s.expert.sync_confidence(&clip.audio, m, part).unwrap() / test.len() as f64;
    }
    assert!(aligned > hi, "aligned mean {aligned} vs null upper {hi}");
}

#[test]
fn semantic_training_shrinks_held_out_structural_loss() {
    let m = &stages().semantic.metrics;
    let (trained, init) = (
        m["val_structural_loss"].as_f64().unwrap(),
        m["val_structural_loss_random_init"].as_f64().unwrap(),
    );
    assert!(init >= 5.0 * trained, "random init {init} vs trained {trained}");
}

#[test]
fn style_embeddings_group_by_speaker() {
    let s = stages();
    let cfg = StyleConfig::default();
    let sdse = train_sdse(&s.corpus, &s.semantic, &cfg)
        .map_err(talkstyle::Error::from)
        .unwrap();
    let val = s.corpus.indices(Split::Val);
    let emb: Vec<_> = val
        .iter()
        .map(|&i| sdse.embed_style(&s.corpus.clips[i].motion).unwrap())
        .collect();
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for a in 0..val.len() {
        for b in a + 1..val.len() {
            let c = emb[a].cosine(&emb[b]);
            let (ca, cb) = (&s.corpus.clips[val[a]], &s.corpus.clips[val[b]]);
            if ca.speaker == cb.speaker && ca.content != cb.content {
                same.push(c);
            } else if ca.speaker != cb.speaker {
                cross.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!same.is_empty() && !cross.is_empty());
    assert!(
        mean(&same) >= mean(&cross),
        "same {} cross {}",
        mean(&same),
        mean(&cross)
    );
}

/// Rows of the lower Cholesky factor realize the Gram matrix.
fn cholesky(g: &[[f64; 3]; 3]) -> Vec<Vec<f64>> {
    let mut l = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j {
                (g[i][i] - s).sqrt()
            } else {
                (g[i][j] - s) / l[j][j]
            };
        }
    }
    l
}

#[test]
fn redundancy_of_a_constructed_triple() {
    let gram = [[1.0, 0.9, 0.1], [0.9, 1.0, 0.5], [0.1, 0.5, 1.0]];
    let rows = cholesky(&gram);
    let rho = redundancy_scores(&Mat::from_rows(&rows)).unwrap();
    for (got, want) in rho.iter().zip([0.5, 0.7, 0.3]) {
        assert!((got - want).abs() < 1e-12, "{rho:?}");
    }
    assert_eq!(select_replace_indices(&rho, 1).unwrap(), vec![1]);
}

#[test]
fn independent_samples_sit_inside_the_permutation_null() {
    let mut r = rng::seeded(0, &[]);
    let n = 512;
    let x = rng::normal_mat(&mut r, n, 2);
    let y = rng::normal_mat(&mut r, n, 2);
    let observed = hsic_value(&x, &y).unwrap();
    let mut order: Vec<usize> = (0..n).collect();
    let mut null: Vec<f64> = (0..200)
        .map(|_| {
            order.shuffle(&mut r);
            hsic_value(&x, &y.select_rows(&order)).unwrap()
        })
        .collect();
    null.sort_by(f64::total_cmp);
    assert!(
        observed < null[189],
        "observed {observed} vs 95th percentile {}",
        null[189]
    );

    // a dependent pair lands far outside it
    let dependent = hsic_value(&x, &x.map(|v| v * v)).unwrap();
    assert!(dependent > null[199]);
}

#[test]
fn decoupling_examples() {
    let mut r = rng::seeded(22, &[]);
    let v = rng::normal_mat(&mut r, 8, 6);
    let vn = v.normalize_rows();
    let gram = vn.t_matmul(&vn).sq_norm() / 64.0;
    let got = decouple_value(&v, &v, 1.0, 0.5).unwrap();
    assert!((got - (gram + 0.5 * hsic_value(&vn, &vn).unwrap())).abs() < 1e-12);

    // disjoint supports, independently drawn rows; what remains is the O(1/n) estimator bias
    let n = 2048;
    let s = Mat::from_fn(n, 8, |_, c| if c < 4 { r.random_range(-1.0..1.0) } else { 0.0 });
    let sem = Mat::from_fn(n, 8, |_, c| if c >= 4 { r.random_range(-1.0..1.0) } else { 0.0 });
    let loss = decouple_value(&s, &sem, 1.0, 1.0).unwrap();
    assert!(loss < 1e-3, "{loss}");
}
