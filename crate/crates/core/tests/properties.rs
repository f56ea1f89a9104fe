use proptest::prelude::*;
use talkstyle::diffusion::{dominance, modulate, NoiseSchedule, RegionGroups};
use talkstyle::eval::{flmd_proxy, mlmd_proxy, Aggregates, ClipMetrics};
use talkstyle::motion::{savgol_smooth, MotionSequence, RegionPartition};
use talkstyle::nn::Mat;
use talkstyle::semantic::{structural_loss_value, MemoryBankPair};
use talkstyle::style::{attention_pool, decouple_value, hsic_value, triplet_value};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Mat::from_vec(rows, cols, v))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
fn orthogonalize(m: &Mat) -> Mat {
    let n = m.rows();
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..n {
        let mut v = m.row(r).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.iter().map(|x| x / norm).collect());
    }
    Mat::from_rows(&q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn savgol_commutes_with_channel_permutation(
        expr in mat(20, 6),
        perm in permutation(6),
    ) {
        let seq = MotionSequence::new(vec![0.0; 2], expr.clone(), Mat::zeros(20, 1), 25).unwrap();
        let permuted = MotionSequence::new(vec![0.0; 2], expr.select_cols(&perm), Mat::zeros(20, 1), 25).unwrap();
        let a = savgol_smooth(&seq, 7, 2).unwrap().sequence.expression.select_cols(&perm);
        let b = savgol_smooth(&permuted, 7, 2).unwrap().sequence.expression;
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn structural_loss_is_permutation_symmetric_and_rotation_invariant(
        v in mat(6, 4),
        a in mat(6, 4),
        perm in permutation(6),
        rot in mat(4, 4),
    ) {
        let base = structural_loss_value(&v, &a, None).unwrap();
        let permuted = structural_loss_value(&v.select_rows(&perm), &a.select_rows(&perm), None).unwrap();
        prop_assert!(close(base, permuted, 1e-10));
        let q = orthogonalize(&rot);
        let rotated = structural_loss_value(&v.matmul(&q), &a, None).unwrap();
        prop_assert!(close(base, rotated, 1e-10));
    }

    #[test]
    fn bank_updates_keep_slots_aligned(
        bank in mat(8, 4),
        batches in prop::collection::vec(mat(3, 4), 1..5),
    ) {
        let mut banks = MemoryBankPair::new(&bank, &bank.scale(2.0), (0..8).collect()).unwrap();
        for (k, b) in batches.iter().enumerate() {
            let ids: Vec<usize> = (0..3).map(|i| 100 * (k + 1) + i).collect();
            banks.update(b, &b.scale(-1.0), &ids).unwrap();
            prop_assert_eq!(&banks.clip_a, &banks.clip_v);
            for r in 0..banks.len() {
                let na: f64 = banks.bank_a.row(r).iter().map(|x| x * x).sum();
                prop_assert!((na.sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_pool_is_a_shift_invariant_convex_combination(
        frames in mat(7, 3),
        logits in prop::collection::vec(-4.0f64..4.0, 7),
        shift in -50.0f64..50.0,
    ) {
        let (s, state) = attention_pool(&frames, &logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let (s2, _) = attention_pool(&frames, &shifted).unwrap();
        for c in 0..3 {
            prop_assert!((s.vector[c] - s2.vector[c]).abs() < 1e-12);
            let col = frames.column(c);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.vector[c] >= lo - 1e-12 && s.vector[c] <= hi + 1e-12);
        }
        prop_assert!((state.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(state.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn hsic_is_symmetric_and_permutation_invariant(
        x in mat(9, 3),
        y in mat(9, 2),
        perm in permutation(9),
    ) {
        let xy = hsic_value(&x, &y).unwrap();
        prop_assert!((xy - hsic_value(&y, &x).unwrap()).abs() < 1e-10);
        let p = hsic_value(&x.select_rows(&perm), &y.select_rows(&perm)).unwrap();
        prop_assert!((xy - p).abs() < 1e-10);
    }

    #[test]
    fn decouple_loss_ignores_joint_row_order(
        s in mat(8, 4),
        v in mat(8, 5),
        perm in permutation(8),
    ) {
        let base = decouple_value(&s, &v, 1.0, 0.5).unwrap();
        let p = decouple_value(&s.select_rows(&perm), &v.select_rows(&perm), 1.0, 0.5).unwrap();
        prop_assert!(close(base, p, 1e-10));
    }

    #[test]
    fn triplet_is_nonnegative_and_zero_past_the_margin(
        a in prop::collection::vec(-1.0f64..1.0, 5),
        p in prop::collection::vec(-1.0f64..1.0, 5),
        n in prop::collection::vec(-1.0f64..1.0, 5),
        margin in 0.01f64..1.0,
    ) {
        let l = triplet_value(&a, &p, &n, margin).unwrap();
        prop_assert!(l >= 0.0);
        let d = |x: &[f64]| a.iter().zip(x).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        if d(&n) >= d(&p) + margin {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn schedule_matches_iterated_product(
        t_steps in 1usize..1000,
        start in 1e-5f64..1e-3,
        extra in 1e-4f64..0.05,
    ) {
        let s = NoiseSchedule::linear(t_steps, start, start + extra).unwrap();
        let mut prod = 1.0;
        for t in 1..=t_steps {
            prod *= 1.0 - s.betas[t - 1];
            prop_assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            if t > 1 {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn modulation_is_monotone_in_dominance(
        za in mat(4, 8),
        zs in mat(4, 8),
        d1 in 0.12f64..0.85,
        step in 0.001f64..0.03,
    ) {
        let g = RegionGroups::halves(8);
        let d2 = d1 + step;
        let lo = modulate(&za, &zs, d1, d1, &g).unwrap();
        let hi = modulate(&za, &zs, d2, d2, &g).unwrap();
        let style_part = |z: &Mat| z.slice_cols(0, 4).zip_map(&za.slice_cols(0, 4), |a, b| a - b).sq_norm();
        let audio_part = |z: &Mat| z.slice_cols(4, 4).zip_map(&zs.slice_cols(4, 4), |a, b| a - b).sq_norm();
        if zs.slice_cols(0, 4).sq_norm() > 0.0 {
            prop_assert!(style_part(&hi) < style_part(&lo));
        }
        if za.slice_cols(4, 4).sq_norm() > 0.0 {
            prop_assert!(audio_part(&hi) > audio_part(&lo));
        }
        let plain = modulate(&za, &zs, 1.0, 1.0, &g).unwrap();
        prop_assert!(plain.max_abs_diff(&za.zip_map(&zs, |a, b| a + b)) < 1e-15);
    }

    #[test]
    fn proxies_ignore_shared_translation(
        gen in mat(10, 16),
        gt in mat(10, 16),
        offset in prop::collection::vec(-3.0f64..3.0, 16),
    ) {
        let part = RegionPartition::contiguous(12, 6).unwrap();
        let seq = |m: &Mat| MotionSequence::from_motion_tensor(vec![0.0; 4], m, 12, 25).unwrap();
        let shift = |m: &Mat| Mat::from_fn(10, 16, |r, c| m.get(r, c) + offset[c]);
        let (a, b) = (seq(&gen), seq(&gt));
        let (a2, b2) = (seq(&shift(&gen)), seq(&shift(&gt)));
        prop_assert!(close(mlmd_proxy(&a, &b, &part).unwrap(), mlmd_proxy(&a2, &b2, &part).unwrap(), 1e-12));
        prop_assert!(close(flmd_proxy(&a, &b).unwrap(), flmd_proxy(&a2, &b2).unwrap(), 1e-12));
    }

    #[test]
    fn whole_face_distance_bounds_the_mouth_share(gen in mat(6, 16), gt in mat(6, 16)) {
        let part = RegionPartition::contiguous(12, 6).unwrap();
        let seq = |m: &Mat| MotionSequence::from_motion_tensor(vec![0.0; 4], m, 12, 25).unwrap();
        // per frame, the full squared distance contains the lower-region one
        for t in 0..6 {
            let (g1, g2) = (seq(&gen.slice_rows(t, 1)), seq(&gt.slice_rows(t, 1)));
            let f = flmd_proxy(&g1, &g2).unwrap();
            let m = mlmd_proxy(&g1, &g2, &part).unwrap();
            prop_assert!(f * f >= m * m - 1e-12);
            prop_assert!(f * f >= m * m / 16.0 - 1e-12);
        }
    }

    #[test]
    fn aggregates_are_clip_means(values in prop::collection::vec((0.0f64..3.0, 0.0f64..3.0, -1.0f64..1.0, -1.0f64..1.0), 1..30)) {
        let clips: Vec<ClipMetrics> = values
            .iter()
            .enumerate()
            .map(|(i, &(mlmd, flmd, sync, stylesim))| ClipMetrics {
                clip: i, speaker: 0, content: i, style_clip: i, mlmd, flmd, sync, stylesim,
            })
            .collect();
        let agg = Aggregates::mean(&clips);
        let n = values.len() as f64;
        prop_assert!((agg.mlmd - values.iter().map(|v| v.0).sum::<f64>() / n).abs() < 1e-9);
        prop_assert!((agg.flmd - values.iter().map(|v| v.1).sum::<f64>() / n).abs() < 1e-9);
        prop_assert!((agg.sync - values.iter().map(|v| v.2).sum::<f64>() / n).abs() < 1e-9);
        prop_assert!((agg.stylesim - values.iter().map(|v| v.3).sum::<f64>() / n).abs() < 1e-9);
    }
}

#[test]
fn dominance_is_monotone_on_a_grid() {
    let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 / 20.0).collect();
    for &ps in &grid {
        for w in grid.windows(2) {
            assert!(dominance(w[1], ps) > dominance(w[0], ps));
            assert!(dominance(ps, w[1]) < dominance(ps, w[0]));
        }
    }
}
