//! Facial-motion data model: per-frame expression and pose coefficients,
//! the static shape vector, the upper/lower face partition, and the
//! Savitzky–Golay smoother applied to estimated parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::linalg;
use crate::nn::Mat;

/// One frame of expression (`E`) and pose (`P`) coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFrame {
    pub expression: Vec<f64>,
    pub pose: Vec<f64>,
}

/// Identity labels carried alongside a sequence on disk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub speaker_id: Option<u32>,
    pub content_id: Option<u32>,
}

/// A talking-face parameter track. Expression and pose are stored as
/// `T x E` and `T x P` matrices; shape is constant over the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub shape: Vec<f64>,
    pub expression: Mat,
    pub pose: Mat,
    pub fps: u32,
    pub meta: SequenceMeta,
}

impl MotionSequence {
    pub fn new(shape: Vec<f64>, expression: Mat, pose: Mat, fps: u32) -> Result<Self> {
        let seq = Self {
            shape,
            expression,
            pose,
            fps,
            meta: SequenceMeta::default(),
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn from_frames(shape: Vec<f64>, frames: &[MotionFrame], fps: u32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| invalid("motion sequence needs at least one frame"))?;
        let (e, p) = (first.expression.len(), first.pose.len());
        if frames.iter().any(|f| f.expression.len() != e || f.pose.len() != p) {
            return Err(invalid("frames disagree on expression/pose dimensions"));
        }
        let expression = Mat::from_fn(frames.len(), e, |t, i| frames[t].expression[i]);
        let pose = Mat::from_fn(frames.len(), p, |t, i| frames[t].pose[i]);
        Self::new(shape, expression, pose, fps)
    }

    pub fn with_meta(mut self, meta: SequenceMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.expression.rows() == 0 {
            return Err(invalid("motion sequence needs T >= 1"));
        }
        if self.expression.rows() != self.pose.rows() {
            return Err(invalid(format!(
                "expression has {} frames but pose has {}",
                self.expression.rows(),
                self.pose.rows()
            )));
        }
        if self.fps == 0 {
            return Err(invalid("fps must be positive"));
        }
        if !self.expression.is_finite() || !self.pose.is_finite() || self.shape.iter().any(|x| !x.is_finite()) {
            return Err(invalid("motion sequence contains non-finite values"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.expression.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn expr_dim(&self) -> usize {
        self.expression.cols()
    }

    pub fn pose_dim(&self) -> usize {
        self.pose.cols()
    }

    pub fn frame(&self, t: usize) -> MotionFrame {
        MotionFrame {
            expression: self.expression.row(t).to_vec(),
            pose: self.pose.row(t).to_vec(),
        }
    }

    /// `T x (E + P)` motion tensor, expression first.
    pub fn motion_tensor(&self) -> Mat {
        Mat::concat_cols(&[&self.expression, &self.pose])
    }

    pub fn from_motion_tensor(shape: Vec<f64>, x: &Mat, expr_dim: usize, fps: u32) -> Result<Self> {
        if x.cols() < expr_dim {
            return Err(invalid("motion tensor narrower than expression dims"));
        }
        let expression = x.slice_cols(0, expr_dim);
        let pose = x.slice_cols(expr_dim, x.cols() - expr_dim);
        Self::new(shape, expression, pose, fps)
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(invalid(format!(
                "window [{start}, {}) outside 0..{}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            expression: self.expression.slice_rows(start, len),
            pose: self.pose.slice_rows(start, len),
            fps: self.fps,
            meta: self.meta,
        })
    }

    /// Rounds all values to `f32`, the serialized precision.
    pub fn round_f32(&mut self) {
        self.expression.round_f32();
        self.pose.round_f32();
        self.shape.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let manifest = SequenceManifest {
            frames: self.len(),
            expr_dim: self.expr_dim(),
            pose_dim: self.pose_dim(),
            shape_dim: self.shape.len(),
            fps: self.fps,
            speaker_id: self.meta.speaker_id,
            content_id: self.meta.content_id,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_f32(&dir.join("expression.f32"), self.expression.data())?;
        write_f32(&dir.join("pose.f32"), self.pose.data())?;
        write_f32(&dir.join("shape.f32"), &self.shape)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let m: SequenceManifest = read_json(&dir.join("manifest.json"))?;
        let expression = read_f32(&dir.join("expression.f32"), m.frames * m.expr_dim)?;
        let pose = read_f32(&dir.join("pose.f32"), m.frames * m.pose_dim)?;
        let shape = read_f32(&dir.join("shape.f32"), m.shape_dim)?;
        let seq = Self::new(
            shape,
            Mat::from_vec(m.frames, m.expr_dim, expression),
            Mat::from_vec(m.frames, m.pose_dim, pose),
            m.fps,
        )?;
        Ok(seq.with_meta(SequenceMeta {
            speaker_id: m.speaker_id,
            content_id: m.content_id,
        }))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceManifest {
    frames: usize,
    expr_dim: usize,
    pose_dim: usize,
    shape_dim: usize,
    fps: u32,
    speaker_id: Option<u32>,
    content_id: Option<u32>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(format!("writing {}", path.display())))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Raw little-endian `f32` dump.
pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(invalid(format!(
            "{} holds {} bytes, expected {} f32 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Raw little-endian `f64` dump.
pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_f64(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    if bytes.len() != expected * 8 {
        return Err(invalid(format!(
            "{} holds {} bytes, expected {} f64 values",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Upper-face (`r_u`) and lower-face (`r_l`) expression-dimension sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl RegionPartition {
    pub fn new(upper: Vec<usize>, lower: Vec<usize>, expr_dim: usize) -> Result<Self> {
        let p = Self { upper, lower };
        p.validate(expr_dim)?;
        Ok(p)
    }

    /// First `n_upper` dims upper, the rest lower.
    pub fn contiguous(expr_dim: usize, n_upper: usize) -> Result<Self> {
        Self::new((0..n_upper).collect(), (n_upper..expr_dim).collect(), expr_dim)
    }

    pub fn validate(&self, expr_dim: usize) -> Result<()> {
        if self.upper.is_empty() || self.lower.is_empty() {
            return Err(invalid("partition regions must be nonempty"));
        }
        let mut seen = vec![false; expr_dim];
        for &i in self.upper.iter().chain(&self.lower) {
            if i >= expr_dim {
                return Err(invalid(format!("partition index {i} out of range for E={expr_dim}")));
            }
            if seen[i] {
                return Err(invalid(format!("partition index {i} appears twice")));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("partition does not cover expression dim {missing}")));
        }
        Ok(())
    }
}

/// Column-selects the upper and lower expression dims of a `T x E` matrix.
pub fn split_regions(features: &Mat, partition: &RegionPartition) -> Result<(Mat, Mat)> {
    partition.validate(features.cols())?;
    Ok((
        features.select_cols(&partition.upper),
        features.select_cols(&partition.lower),
    ))
}

/// Inverse of [`split_regions`].
pub fn merge_regions(upper: &Mat, lower: &Mat, partition: &RegionPartition) -> Result<Mat> {
    let e = partition.upper.len() + partition.lower.len();
    partition.validate(e)?;
    if upper.cols() != partition.upper.len() || lower.cols() != partition.lower.len() || upper.rows() != lower.rows() {
        return Err(invalid("region matrices do not match partition"));
    }
    let mut out = Mat::zeros(upper.rows(), e);
    for t in 0..upper.rows() {
        for (k, &i) in partition.upper.iter().enumerate() {
            out.set(t, i, upper.get(t, k));
        }
        for (k, &i) in partition.lower.iter().enumerate() {
            out.set(t, i, lower.get(t, k));
        }
    }
    Ok(out)
}

/// Result of [`savgol_smooth`]; `skipped` is set when the window exceeded
/// the sequence length and the input was returned unchanged.
#[derive(Clone, Debug)]
pub struct Smoothed {
    pub sequence: MotionSequence,
    pub skipped: bool,
}

/// Least-squares weights that evaluate the degree-`polyorder` fit over
/// window positions `0..window` at position `at`.
pub fn savgol_weights(window: usize, polyorder: usize, at: usize) -> Result<Vec<f64>> {
    check_savgol_args(window, polyorder)?;
    let half = (window / 2) as f64;
    // centered, scaled abscissae keep the normal equations well conditioned
    let xs: Vec<f64> = (0..window).map(|j| (j as f64 - half) / half.max(1.0)).collect();
    let n = polyorder + 1;
    let vander = |x: f64| -> Vec<f64> { (0..n).map(|k| x.powi(k as i32)).collect() };
    let mut gram = Mat::zeros(n, n);
    for &x in &xs {
        let v = vander(x);
        for a in 0..n {
            for b in 0..n {
                gram.set(a, b, gram.get(a, b) + v[a] * v[b]);
            }
        }
    }
    let target = vander(xs[at]);
    let sol = linalg::solve_spd(&gram, &target)?;
    Ok(xs
        .iter()
        .map(|&x| vander(x).iter().zip(&sol).map(|(a, b)| a * b).sum())
        .collect())
}

fn check_savgol_args(window: usize, polyorder: usize) -> Result<()> {
    if window.is_multiple_of(2) {
        return Err(invalid(format!("Savitzky-Golay window must be odd, got {window}")));
    }
    if polyorder >= window {
        return Err(invalid(format!("polyorder {polyorder} must be below window {window}")));
    }
    Ok(())
}

/// Smooths one channel. Interior frames use the centered window; the first
/// and last `window / 2` frames evaluate the fit over the window flush with
/// the boundary.
pub fn savgol_channel(values: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    check_savgol_args(window, polyorder)?;
    let n = values.len();
    if window > n {
        return Ok(values.to_vec());
    }
    let half = window / 2;
    let center = savgol_weights(window, polyorder, half)?;
    let mut out = vec![0.0; n];
    for t in half..n - half {
        out[t] = center
            .iter()
            .zip(&values[t - half..t + half + 1])
            .map(|(w, y)| w * y)
            .sum();
    }
    for t in 0..half {
        let w = savgol_weights(window, polyorder, t)?;
        out[t] = w.iter().zip(&values[..window]).map(|(w, y)| w * y).sum();
        let w = savgol_weights(window, polyorder, window - 1 - t)?;
        out[n - 1 - t] = w.iter().zip(&values[n - window..]).map(|(w, y)| w * y).sum();
    }
    Ok(out)
}

fn smooth_columns(m: &Mat, window: usize, polyorder: usize) -> Result<Mat> {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let sm = savgol_channel(&m.column(c), window, polyorder)?;
        for (t, v) in sm.into_iter().enumerate() {
            out.set(t, c, v);
        }
    }
    Ok(out)
}

/// Savitzky–Golay smoothing of every expression and pose channel. Shape,
/// fps and labels pass through untouched.
pub fn savgol_smooth(seq: &MotionSequence, window: usize, polyorder: usize) -> Result<Smoothed> {
    check_savgol_args(window, polyorder)?;
    if window > seq.len() {
        log::warn!(
            "savgol window {window} exceeds sequence length {}; left unsmoothed",
            seq.len()
        );
        return Ok(Smoothed {
            sequence: seq.clone(),
            skipped: true,
        });
    }
    let mut out = seq.clone();
    out.expression = smooth_columns(&seq.expression, window, polyorder)?;
    out.pose = smooth_columns(&seq.pose, window, polyorder)?;
    Ok(Smoothed {
        sequence: out,
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq_from_channel(values: &[f64]) -> MotionSequence {
        let t = values.len();
        MotionSequence::new(vec![0.5], Mat::from_vec(t, 1, values.to_vec()), Mat::zeros(t, 1), 25).unwrap()
    }

    /// Degree-`p` least-squares fit of `ys` at abscissae `xs`, evaluated at
    /// `x0`, by Gaussian elimination on the raw (unscaled) normal equations.
    fn lstsq_oracle(xs: &[f64], ys: &[f64], p: usize, x0: f64) -> f64 {
        let n = p + 1;
        let mut a = vec![vec![0.0; n + 1]; n];
        for (&x, &y) in xs.iter().zip(ys) {
            for r in 0..n {
                for c in 0..n {
                    a[r][c] += x.powi((r + c) as i32);
                }
                a[r][n] += y * x.powi(r as i32);
            }
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|k| a[k][n] / a[k][k] * x0.powi(k as i32)).sum()
    }

    #[test]
    fn constant_channel_is_unchanged() {
        let s = savgol_smooth(&seq_from_channel(&[3.0; 5]), 5, 2).unwrap();
        assert!(!s.skipped);
        for v in s.sequence.expression.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_channel_is_unchanged() {
        let s = savgol_smooth(&seq_from_channel(&[0.0, 1.0, 2.0, 3.0, 4.0]), 5, 2).unwrap();
        for (t, v) in s.sequence.expression.data().iter().enumerate() {
            assert!((v - t as f64).abs() < 1e-12, "frame {t}: {v}");
        }
    }

    #[test]
    fn quadratic_with_linear_fit_matches_oracle() {
        let ys = [0.0, 1.0, 4.0, 9.0, 16.0];
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let s = savgol_smooth(&seq_from_channel(&ys), 5, 1).unwrap();
        let got = s.sequence.expression.data();
        // center: mean of the window
        assert!((got[2] - 6.0).abs() < 1e-12);
        for t in 0..5 {
            let want = lstsq_oracle(&xs, &ys, 1, t as f64);
            assert!((got[t] - want).abs() < 1e-10, "frame {t}: {} vs {want}", got[t]);
        }
        assert!((got[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn longer_quadratic_boundaries_match_oracle() {
        let ys: Vec<f64> = (0..12).map(|t| ((t * 7) % 5) as f64 - 0.3 * t as f64).collect();
        let s = savgol_smooth(&seq_from_channel(&ys), 7, 2).unwrap();
        let got = s.sequence.expression.data();
        for t in 0usize..12 {
            let start = t.saturating_sub(3).min(12 - 7);
            let xs: Vec<f64> = (start..start + 7).map(|x| x as f64).collect();
            let want = lstsq_oracle(&xs, &ys[start..start + 7], 2, t as f64);
            assert!((got[t] - want).abs() < 1e-10, "frame {t}");
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let seq = seq_from_channel(&[1.0; 9]);
        assert!(savgol_smooth(&seq, 4, 2).is_err());
        assert!(savgol_smooth(&seq, 5, 5).is_err());
        assert!(savgol_smooth(&seq, 5, 7).is_err());
    }

    #[test]
    fn window_longer_than_sequence_is_flagged() {
        let seq = seq_from_channel(&[1.0, 5.0, 2.0]);
        let s = savgol_smooth(&seq, 5, 2).unwrap();
        assert!(s.skipped);
        assert_eq!(s.sequence, seq);
    }

    #[test]
    fn shape_and_fps_pass_through() {
        let mut seq = seq_from_channel(&[1.0, 5.0, 2.0, 7.0, 3.0, 3.0, 1.0]);
        seq.shape = vec![0.1, 0.2, 0.3];
        seq.fps = 30;
        let s = savgol_smooth(&seq, 5, 2).unwrap().sequence;
        assert_eq!(s.shape, seq.shape);
        assert_eq!(s.fps, 30);
    }

    #[test]
    fn split_selects_indices() {
        let p = RegionPartition::new(vec![0, 1], vec![2, 3], 4).unwrap();
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let (u, l) = split_regions(&m, &p).unwrap();
        assert_eq!(u.data(), &[1.0, 2.0]);
        assert_eq!(l.data(), &[3.0, 4.0]);
    }

    #[test]
    fn invalid_partitions_are_rejected() {
        assert!(RegionPartition::new(vec![0, 1], vec![1, 2], 3).is_err());
        assert!(RegionPartition::new(vec![0, 1], vec![2, 4], 4).is_err());
        assert!(RegionPartition::new(vec![0], vec![2], 3).is_err());
        assert!(RegionPartition::new(vec![], vec![0, 1], 2).is_err());
    }

    #[test]
    fn sequence_dir_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = MotionSequence::new(
            vec![0.1, -0.2],
            Mat::from_fn(6, 3, |t, c| (t as f64 * 0.37 - c as f64).sin()),
            Mat::from_fn(6, 2, |t, c| (t * c) as f64 * 0.01),
            25,
        )
        .unwrap()
        .with_meta(SequenceMeta {
            speaker_id: Some(3),
            content_id: Some(7),
        });
        seq.round_f32();
        seq.write_dir(dir.path()).unwrap();
        let back = MotionSequence::read_dir(dir.path()).unwrap();
        assert_eq!(back, seq);
        let bytes = std::fs::read(dir.path().join("expression.f32")).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        back.write_dir(dir2.path()).unwrap();
        assert_eq!(std::fs::read(dir2.path().join("expression.f32")).unwrap(), bytes);
    }

    fn partition_strategy() -> impl Strategy<Value = (usize, RegionPartition)> {
        (2usize..10).prop_flat_map(|e| {
            Just((0..e).collect::<Vec<_>>())
                .prop_shuffle()
                .prop_flat_map(move |perm| {
                    (1..e).prop_map(move |cut| {
                        (
                            e,
                            RegionPartition {
                                upper: perm[..cut].to_vec(),
                                lower: perm[cut..].to_vec(),
                            },
                        )
                    })
                })
        })
    }

    proptest! {
        #[test]
        fn split_then_merge_is_identity((e, p) in partition_strategy(), rows in 1usize..6, seed in 0u64..1000) {
            let m = Mat::from_fn(rows, e, |r, c| ((seed as usize + r * 31 + c * 17) % 97) as f64 / 7.0);
            let (u, l) = split_regions(&m, &p).unwrap();
            prop_assert_eq!(merge_regions(&u, &l, &p).unwrap(), m);
        }

        #[test]
        fn polynomials_up_to_polyorder_are_preserved(
            coeffs in proptest::collection::vec(-2.0f64..2.0, 1..4),
            half in 1usize..5,
            len in 10usize..30,
        ) {
            let polyorder = (coeffs.len() - 1).min(2 * half);
            let window = 2 * half + 1;
            let ys: Vec<f64> = (0..len)
                .map(|t| coeffs[..=polyorder].iter().enumerate().map(|(k, c)| c * (t as f64 / len as f64).powi(k as i32)).sum())
                .collect();
            let out = savgol_channel(&ys, window, polyorder).unwrap();
            let scale = ys.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in out.iter().zip(&ys) {
                prop_assert!((a - b).abs() / scale < 1e-10);
            }
        }

        #[test]
        fn smoothing_commutes_with_channel_permutation(seed in 0u64..500) {
            let m = Mat::from_fn(15, 4, |t, c| (((seed as usize + t * 13 + c * 29) % 23) as f64).sqrt());
            let seq = MotionSequence::new(vec![], m.clone(), Mat::zeros(15, 1), 25).unwrap();
            let perm = [2usize, 0, 3, 1];
            let permuted = MotionSequence::new(vec![], m.select_cols(&perm), Mat::zeros(15, 1), 25).unwrap();
            let a = savgol_smooth(&seq, 7, 2).unwrap().sequence.expression.select_cols(&perm);
            let b = savgol_smooth(&permuted, 7, 2).unwrap().sequence.expression;
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
