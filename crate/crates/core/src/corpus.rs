//! Synthetic talking-motion corpus with known style and content factors.
//!
//! Every clip is rendered as `motion = semantic(script) + style(speaker)`:
//!
//! * lower-face expression dims follow phoneme targets (smoothed), scaled by
//!   a per-speaker articulation gain and shifted by per-speaker offsets;
//! * upper-face expression dims carry only speaker dynamics, a fixed
//!   low-frequency oscillation per dim plus an offset;
//! * pose mixes a speaker sway with a small phoneme-energy nod.
//!
//! Pseudo-audio is generated from the same phoneme track through per-phoneme
//! spectral templates, so audio and lower-face motion share their content.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::motion::{read_f32, read_json, write_f32, write_json, MotionSequence, RegionPartition, SequenceMeta};
use crate::nn::Mat;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub shape_dim: usize,
    pub audio_dim: usize,
    pub vocab: usize,
    pub fps: u32,
    pub frames: usize,
    pub n_speakers: usize,
    pub n_contents: usize,
    pub partition: RegionPartition,
    /// Gaussian observation noise on motion channels.
    pub noise_std: f64,
    pub audio_noise_std: f64,
    /// Upper-face oscillation amplitude range.
    pub amplitude_range: (f64, f64),
    /// Minimum amplitude gap between any two speakers on at least one dim.
    pub separation: f64,
    pub gain_range: (f64, f64),
    pub offset_range: f64,
    /// Oscillation frequency range in Hz.
    pub freq_range: (f64, f64),
    pub sway_range: (f64, f64),
    pub run_length: (usize, usize),
    pub held_out_speakers: usize,
    pub held_out_contents: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            expr_dim: 12,
            pose_dim: 4,
            shape_dim: 4,
            audio_dim: 13,
            vocab: 10,
            fps: 25,
            frames: 64,
            n_speakers: 8,
            n_contents: 10,
            partition: RegionPartition {
                upper: (0..6).collect(),
                lower: (6..12).collect(),
            },
            noise_std: 0.02,
            audio_noise_std: 0.1,
            amplitude_range: (0.2, 1.0),
            separation: 0.1,
            gain_range: (0.6, 1.4),
            offset_range: 0.5,
            freq_range: (0.4, 2.5),
            sway_range: (0.05, 0.3),
            run_length: (3, 8),
            held_out_speakers: 2,
            held_out_contents: 2,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.partition.validate(self.expr_dim)?;
        if self.pose_dim == 0 || self.audio_dim == 0 || self.vocab < 2 || self.frames == 0 {
            return Err(invalid("pose_dim, audio_dim, frames must be positive and vocab >= 2"));
        }
        if self.fps == 0 {
            return Err(invalid("fps must be positive"));
        }
        let (lo, hi) = self.amplitude_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("amplitude_range must satisfy 0 < lo <= hi"));
        }
        if self.separation <= 0.0 || self.separation > hi - lo {
            return Err(invalid(format!(
                "separation {} is infeasible for amplitude range width {}",
                self.separation,
                hi - lo
            )));
        }
        if !(self.gain_range.0 > 0.0 && self.gain_range.1 >= self.gain_range.0) {
            return Err(invalid("gain_range must be positive and ordered"));
        }
        let nyquist = self.fps as f64 / 2.0;
        if !(self.freq_range.0 > 0.0 && self.freq_range.1 >= self.freq_range.0 && self.freq_range.1 < nyquist) {
            return Err(invalid(format!("freq_range must lie in (0, {nyquist})")));
        }
        if self.run_length.0 < 2 || self.run_length.1 < self.run_length.0 {
            return Err(invalid("run_length must satisfy 2 <= min <= max"));
        }
        if self.noise_std < 0.0 || self.audio_noise_std < 0.0 {
            return Err(invalid("noise levels must be nonnegative"));
        }
        Ok(())
    }

    pub fn validate_splits(&self) -> Result<()> {
        if self.held_out_speakers == 0 || self.held_out_speakers >= self.n_speakers {
            return Err(invalid(format!(
                "test split needs 1..{} held-out speakers, got {} of {}",
                self.n_speakers, self.held_out_speakers, self.n_speakers
            )));
        }
        if self.held_out_contents == 0 || self.held_out_contents >= self.n_contents {
            return Err(invalid(format!(
                "test split needs 1..{} held-out contents, got {} of {}",
                self.n_contents, self.held_out_contents, self.n_contents
            )));
        }
        Ok(())
    }

    fn amplitude_levels(&self) -> u64 {
        let (lo, hi) = self.amplitude_range;
        ((hi - lo) / self.separation + 1e-9).floor() as u64 + 1
    }
}

/// Per-speaker style factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStyle {
    pub speaker_id: u32,
    /// Oscillation amplitude per upper dim.
    pub upper_amplitude: Vec<f64>,
    pub upper_freq: Vec<f64>,
    pub upper_phase: Vec<f64>,
    /// Articulation gain per lower dim.
    pub lower_gain: Vec<f64>,
    /// Baseline per expression dim.
    pub offset: Vec<f64>,
    pub pose_sway: Vec<f64>,
    pub pose_freq: Vec<f64>,
    pub pose_phase: Vec<f64>,
    pub shape: Vec<f64>,
}

impl SpeakerStyle {
    /// Style that adds nothing: no oscillation, unit gain, zero offsets.
    pub fn neutral(config: &CorpusConfig) -> Self {
        let (nu, nl) = (config.partition.upper.len(), config.partition.lower.len());
        Self {
            speaker_id: u32::MAX,
            upper_amplitude: vec![0.0; nu],
            upper_freq: vec![1.0; nu],
            upper_phase: vec![0.0; nu],
            lower_gain: vec![1.0; nl],
            offset: vec![0.0; config.expr_dim],
            pose_sway: vec![0.0; config.pose_dim],
            pose_freq: vec![1.0; config.pose_dim],
            pose_phase: vec![0.0; config.pose_dim],
            shape: vec![0.0; config.shape_dim],
        }
    }

    /// Flattened amplitude scales (upper amplitudes then lower gains).
    pub fn amplitudes(&self) -> Vec<f64> {
        self.upper_amplitude.iter().chain(&self.lower_gain).copied().collect()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Draws a speaker style. Upper amplitudes sit on a grid of spacing
/// `separation`; the grid cell vector is a bijective scramble of the seed,
/// so two seeds below `levels^n_upper` always differ by at least one grid
/// step on some dim.
pub fn sample_speaker(seed: u64, config: &CorpusConfig) -> Result<SpeakerStyle> {
    config.validate()?;
    let nu = config.partition.upper.len();
    let nl = config.partition.lower.len();
    let levels = config.amplitude_levels();
    let digits = (0..nu)
        .take_while(|&k| levels.checked_pow(k as u32 + 1).is_some())
        .count();
    let modulus = levels.pow(digits as u32);
    let mut mult: u64 = 0x9E37_79B9 % modulus.max(2);
    while modulus > 1 && (mult == 0 || gcd(mult, modulus) != 1) {
        mult += 1;
    }
    let code = ((seed as u128 * mult as u128 + 0x5bd1_e995) % modulus as u128) as u64;

    let mut rng = rng::seeded(seed, &[0x5e]);
    let (lo, _) = config.amplitude_range;
    let mut rest = code;
    let mut upper_amplitude = Vec::with_capacity(nu);
    for k in 0..nu {
        let level = if k < digits {
            let d = rest % levels;
            rest /= levels;
            d
        } else {
            rng.random_range(0..levels)
        };
        upper_amplitude.push(lo + level as f64 * config.separation);
    }
    let (flo, fhi) = config.freq_range;
    let upper_freq = (0..nu).map(|_| rng.random_range(flo..=fhi)).collect();
    let upper_phase = (0..nu).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let (glo, ghi) = config.gain_range;
    let lower_gain = (0..nl).map(|_| rng.random_range(glo..=ghi)).collect();
    let off = config.offset_range;
    let offset = (0..config.expr_dim).map(|_| rng.random_range(-off..=off)).collect();
    let (slo, shi) = config.sway_range;
    let pose_sway = (0..config.pose_dim).map(|_| rng.random_range(slo..=shi)).collect();
    let pose_freq = (0..config.pose_dim).map(|_| rng.random_range(flo..=fhi)).collect();
    let pose_phase = (0..config.pose_dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let shape = (0..config.shape_dim).map(|_| rng::normal(&mut rng)).collect();
    Ok(SpeakerStyle {
        speaker_id: (seed & 0xFFFF_FFFF) as u32,
        upper_amplitude,
        upper_freq,
        upper_phase,
        lower_gain,
        offset,
        pose_sway,
        pose_freq,
        pose_phase,
        shape,
    })
}

/// Corpus-wide phoneme tables: lower-face targets, spectral templates and
/// the per-phoneme articulation energy driving the pose nod.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeTables {
    pub lower_targets: Mat,
    pub audio_templates: Mat,
    pub energy: Vec<f64>,
    pub pose_coupling: Vec<f64>,
}

impl PhonemeTables {
    pub fn generate(config: &CorpusConfig) -> Self {
        let mut rng = rng::seeded(config.seed, &[0x7ab1e5]);
        let nl = config.partition.lower.len();
        let lower_targets = Mat::from_fn(config.vocab, nl, |_, _| rng.random_range(-1.0..1.0));
        let audio_templates = rng::normal_mat(&mut rng, config.vocab, config.audio_dim);
        let energy = (0..config.vocab).map(|_| rng.random_range(0.0..1.0)).collect();
        let pose_coupling = (0..config.pose_dim).map(|p| if p == 0 { 0.3 } else { 0.1 }).collect();
        Self {
            lower_targets,
            audio_templates,
            energy,
            pose_coupling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentScript {
    pub content_id: u32,
    pub phonemes: Vec<usize>,
}

impl ContentScript {
    pub fn generate(content_id: u32, config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed, &[0xc0, content_id as u64]);
        let mut phonemes = Vec::with_capacity(config.frames);
        let mut prev = usize::MAX;
        while phonemes.len() < config.frames {
            let mut ph = rng.random_range(0..config.vocab);
            if ph == prev {
                ph = (ph + 1 + rng.random_range(0..config.vocab - 1)) % config.vocab;
            }
            let run = rng.random_range(config.run_length.0..=config.run_length.1);
            phonemes.extend(std::iter::repeat_n(ph, run));
            prev = ph;
        }
        phonemes.truncate(config.frames);
        // a truncated final run shorter than 2 frames joins the previous one
        let n = phonemes.len();
        if n >= 2 && phonemes[n - 1] != phonemes[n - 2] {
            phonemes[n - 1] = phonemes[n - 2];
        }
        let script = Self { content_id, phonemes };
        script.validate(config.vocab)?;
        Ok(script)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(invalid("empty phoneme track"));
        }
        if let Some(&bad) = self.phonemes.iter().find(|&&p| p >= vocab) {
            return Err(invalid(format!("phoneme {bad} outside vocabulary of {vocab}")));
        }
        let mut start = 0;
        for t in 1..=self.phonemes.len() {
            if t == self.phonemes.len() || self.phonemes[t] != self.phonemes[start] {
                if t - start < 2 && self.phonemes.len() >= 2 {
                    return Err(invalid(format!("phoneme run at frame {start} shorter than 2 frames")));
                }
                start = t;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }
}

/// MFCC-like per-frame features, `T x F`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoAudioFeatures {
    pub features: Mat,
}

impl PseudoAudioFeatures {
    pub fn new(features: Mat) -> Result<Self> {
        if features.rows() == 0 || !features.is_finite() {
            return Err(invalid("audio features must be nonempty and finite"));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(invalid(format!(
                "audio window [{start}, {}) outside 0..{}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            features: self.features.slice_rows(start, len),
        })
    }

    /// Raw row-major `f32` file of `T x audio_dim` values.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_f32(path, self.features.data())
    }

    pub fn read(path: &Path, audio_dim: usize) -> Result<Self> {
        let bytes = fs::metadata(path)
            .map_err(io_err(format!("reading {}", path.display())))?
            .len() as usize;
        if audio_dim == 0 || !bytes.is_multiple_of(4 * audio_dim) {
            return Err(invalid(format!(
                "{} holds {bytes} bytes, not a whole number of {audio_dim}-channel f32 frames",
                path.display()
            )));
        }
        let frames = bytes / (4 * audio_dim);
        let data = read_f32(path, frames * audio_dim)?;
        Self::new(Mat::from_vec(frames, audio_dim, data))
    }
}

/// Noise-free additive decomposition of a rendered clip.
#[derive(Clone, Debug)]
pub struct MotionComponents {
    /// Script-driven expression (`T x E`, zero on upper dims).
    pub semantic: Mat,
    /// Speaker-driven expression (`T x E`).
    pub style: Mat,
    pub pose_semantic: Mat,
    pub pose_style: Mat,
    pub audio: Mat,
}

fn centered_average(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len() as isize;
    (0..n)
        .map(|t| {
            let taps = (t - half as isize..=t + half as isize).map(|k| values[k.clamp(0, n - 1) as usize]);
            taps.sum::<f64>() / (2 * half + 1) as f64
        })
        .collect()
}

/// Renders the noise-free semantic and style components of a clip.
pub fn render_components(
    style: &SpeakerStyle,
    script: &ContentScript,
    tables: &PhonemeTables,
    config: &CorpusConfig,
) -> Result<MotionComponents> {
    config.validate()?;
    script.validate(config.vocab)?;
    let part = &config.partition;
    if style.upper_amplitude.len() != part.upper.len()
        || style.lower_gain.len() != part.lower.len()
        || style.offset.len() != config.expr_dim
        || style.pose_sway.len() != config.pose_dim
    {
        return Err(invalid("speaker style dims do not match corpus config"));
    }
    if tables.lower_targets.shape() != (config.vocab, part.lower.len())
        || tables.audio_templates.cols() != config.audio_dim
    {
        return Err(invalid("phoneme tables do not match corpus config"));
    }
    let t_len = script.len();
    let fps = config.fps as f64;
    let mut semantic = Mat::zeros(t_len, config.expr_dim);
    let mut style_part = Mat::zeros(t_len, config.expr_dim);
    for (j, &dim) in part.lower.iter().enumerate() {
        let raw: Vec<f64> = script
            .phonemes
            .iter()
            .map(|&p| tables.lower_targets.get(p, j))
            .collect();
        let smooth = centered_average(&raw, 2);
        for (t, &s) in smooth.iter().enumerate() {
            semantic.set(t, dim, s);
            style_part.set(t, dim, (style.lower_gain[j] - 1.0) * s + style.offset[dim]);
        }
    }
    for (u, &dim) in part.upper.iter().enumerate() {
        for t in 0..t_len {
            let arg = 2.0 * PI * style.upper_freq[u] * t as f64 / fps + style.upper_phase[u];
            style_part.set(t, dim, style.upper_amplitude[u] * arg.sin() + style.offset[dim]);
        }
    }
    let energy: Vec<f64> = script.phonemes.iter().map(|&p| tables.energy[p]).collect();
    let energy = centered_average(&energy, 2);
    let mut pose_semantic = Mat::zeros(t_len, config.pose_dim);
    let mut pose_style = Mat::zeros(t_len, config.pose_dim);
    for p in 0..config.pose_dim {
        for t in 0..t_len {
            pose_semantic.set(t, p, tables.pose_coupling[p] * energy[t]);
            let arg = 2.0 * PI * style.pose_freq[p] * t as f64 / fps + style.pose_phase[p];
            pose_style.set(t, p, style.pose_sway[p] * arg.sin());
        }
    }
    let audio = Mat::from_fn(t_len, config.audio_dim, |t, f| {
        tables.audio_templates.get(script.phonemes[t], f)
    });
    Ok(MotionComponents {
        semantic,
        style: style_part,
        pose_semantic,
        pose_style,
        audio,
    })
}

/// Renders one clip: additive components plus observation noise.
pub fn render_motion(
    style: &SpeakerStyle,
    script: &ContentScript,
    tables: &PhonemeTables,
    config: &CorpusConfig,
    noise_seed: u64,
) -> Result<(MotionSequence, PseudoAudioFeatures)> {
    let comp = render_components(style, script, tables, config)?;
    let mut rng = rng::seeded(noise_seed, &[0x401]);
    let t_len = script.len();
    let mut expression = Mat::from_fn(t_len, config.expr_dim, |t, e| {
        comp.semantic.get(t, e) + comp.style.get(t, e)
    });
    let mut pose = Mat::from_fn(t_len, config.pose_dim, |t, p| {
        comp.pose_semantic.get(t, p) + comp.pose_style.get(t, p)
    });
    let mut audio = comp.audio;
    if config.noise_std > 0.0 {
        expression
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += config.noise_std * rng::normal(&mut rng));
        pose.data_mut()
            .iter_mut()
            .for_each(|x| *x += config.noise_std * rng::normal(&mut rng));
    }
    if config.audio_noise_std > 0.0 {
        audio
            .data_mut()
            .iter_mut()
            .for_each(|x| *x += config.audio_noise_std * rng::normal(&mut rng));
    }
    audio.round_f32();
    let mut seq = MotionSequence::new(style.shape.clone(), expression, pose, config.fps)?.with_meta(SequenceMeta {
        speaker_id: Some(style.speaker_id),
        content_id: Some(script.content_id),
    });
    seq.round_f32();
    Ok((seq, PseudoAudioFeatures::new(audio)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub speaker_id: u32,
    pub content_id: u32,
    pub sequence_path: PathBuf,
    pub audio_path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub audio_dim: usize,
    pub vocab: usize,
    pub partition: RegionPartition,
    pub held_out_speakers: Vec<u32>,
    pub held_out_contents: Vec<u32>,
    pub config: CorpusConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub speaker: usize,
    pub content: usize,
    pub split: Split,
    pub motion: MotionSequence,
    pub audio: PseudoAudioFeatures,
}

/// In-memory corpus; speakers and contents are indexed `0..n`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub styles: Vec<SpeakerStyle>,
    pub scripts: Vec<ContentScript>,
    pub tables: PhonemeTables,
    pub clips: Vec<Clip>,
}

fn split_of(speaker: usize, content: usize, config: &CorpusConfig) -> Split {
    let held_speaker = speaker >= config.n_speakers - config.held_out_speakers;
    let held_content = content >= config.n_contents - config.held_out_contents;
    match (held_speaker, held_content) {
        (true, _) => Split::Test,
        (false, true) => Split::Val,
        (false, false) => Split::Train,
    }
}

impl Corpus {
    /// Speaker-major grid of every (speaker, content) pair. Speakers whose
    /// index is in the last `held_out_speakers` form the test split; seen
    /// speakers on the last `held_out_contents` scripts form validation.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        config.validate_splits()?;
        let tables = PhonemeTables::generate(config);
        let styles = (0..config.n_speakers)
            .map(|s| {
                let mut st = sample_speaker(config.seed.wrapping_mul(1000).wrapping_add(s as u64), config)?;
                st.speaker_id = s as u32;
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        let scripts = (0..config.n_contents)
            .map(|c| ContentScript::generate(c as u32, config))
            .collect::<Result<Vec<_>>>()?;
        let mut clips = Vec::with_capacity(config.n_speakers * config.n_contents);
        for (s, style) in styles.iter().enumerate() {
            for (c, script) in scripts.iter().enumerate() {
                let noise_seed = rng::derive(config.seed, &[0x0153, s as u64, c as u64]);
                let (motion, audio) = render_motion(style, script, &tables, config, noise_seed)?;
                clips.push(Clip {
                    speaker: s,
                    content: c,
                    split: split_of(s, c, config),
                    motion,
                    audio,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            styles,
            scripts,
            tables,
            clips,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Clip)> {
        self.clips.iter().enumerate().filter(move |(_, c)| c.split == split)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split(split).map(|(i, _)| i).collect()
    }

    pub fn clip(&self, speaker: usize, content: usize) -> Option<&Clip> {
        self.clips.iter().find(|c| c.speaker == speaker && c.content == content)
    }

    pub fn manifest(&self) -> CorpusManifest {
        let cfg = &self.config;
        let entries = self
            .clips
            .iter()
            .map(|c| {
                let dir = PathBuf::from(format!("seq_s{:03}_c{:03}", c.speaker, c.content));
                ManifestEntry {
                    speaker_id: c.speaker as u32,
                    content_id: c.content as u32,
                    audio_path: dir.join("audio.f32"),
                    sequence_path: dir,
                    split: c.split,
                }
            })
            .collect();
        CorpusManifest {
            expr_dim: cfg.expr_dim,
            pose_dim: cfg.pose_dim,
            audio_dim: cfg.audio_dim,
            vocab: cfg.vocab,
            partition: cfg.partition.clone(),
            held_out_speakers: ((cfg.n_speakers - cfg.held_out_speakers)..cfg.n_speakers)
                .map(|s| s as u32)
                .collect(),
            held_out_contents: ((cfg.n_contents - cfg.held_out_contents)..cfg.n_contents)
                .map(|s| s as u32)
                .collect(),
            config: cfg.clone(),
            entries,
        }
    }

    /// Writes every clip plus the root `manifest.json`.
    pub fn write(&self, out_dir: &Path) -> Result<CorpusManifest> {
        fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
        let manifest = self.manifest();
        for (clip, entry) in self.clips.iter().zip(&manifest.entries) {
            clip.motion.write_dir(&out_dir.join(&entry.sequence_path))?;
            write_f32(&out_dir.join(&entry.audio_path), clip.audio.features.data())?;
        }
        write_json(&out_dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    /// Loads a corpus directory. Factor tables are regenerated from the
    /// stored config; clip tensors come from disk.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
        let config = manifest.config.clone();
        let mut corpus = Self::generate(&config)?;
        corpus.clips.clear();
        for e in &manifest.entries {
            let motion = MotionSequence::read_dir(&dir.join(&e.sequence_path))?;
            let audio = read_f32(&dir.join(&e.audio_path), motion.len() * manifest.audio_dim)?;
            corpus.clips.push(Clip {
                speaker: e.speaker_id as usize,
                content: e.content_id as usize,
                split: e.split,
                audio: PseudoAudioFeatures::new(Mat::from_vec(motion.len(), manifest.audio_dim, audio))?,
                motion,
            });
        }
        Ok(corpus)
    }

    /// Stable fingerprint of the generating config.
    pub fn fingerprint(&self) -> String {
        crate::config::hash_json(&serde_json::to_value(&self.config).expect("config serializes"))
    }
}

/// Generates and writes a corpus.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest> {
    Corpus::generate(config)?.write(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> CorpusConfig {
        CorpusConfig {
            noise_std: 0.0,
            audio_noise_std: 0.0,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn speaker_sampling_is_deterministic() {
        let cfg = CorpusConfig::default();
        assert_eq!(sample_speaker(42, &cfg).unwrap(), sample_speaker(42, &cfg).unwrap());
    }

    #[test]
    fn distinct_seeds_are_separated() {
        let cfg = CorpusConfig::default();
        for (a, b) in [(0u64, 1u64), (3, 4), (0, 1000), (17, 9000)] {
            let sa = sample_speaker(a, &cfg).unwrap();
            let sb = sample_speaker(b, &cfg).unwrap();
            let gap = sa
                .upper_amplitude
                .iter()
                .zip(&sb.upper_amplitude)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(gap >= cfg.separation - 1e-12, "seeds {a},{b}: gap {gap}");
        }
    }

    #[test]
    fn infeasible_separation_is_rejected() {
        let cfg = CorpusConfig {
            separation: 0.9,
            ..CorpusConfig::default()
        };
        assert!(sample_speaker(0, &cfg).is_err());
    }

    #[test]
    fn scripts_respect_vocab_and_run_lengths() {
        let cfg = CorpusConfig::default();
        for c in 0..10 {
            let s = ContentScript::generate(c, &cfg).unwrap();
            assert_eq!(s.len(), cfg.frames);
            s.validate(cfg.vocab).unwrap();
        }
        let bad = ContentScript {
            content_id: 0,
            phonemes: vec![0, 0, 1, 2, 2],
        };
        assert!(bad.validate(10).is_err());
    }

    #[test]
    fn neutral_style_leaves_pure_semantics() {
        let cfg = quiet();
        let tables = PhonemeTables::generate(&cfg);
        let script = ContentScript::generate(3, &cfg).unwrap();
        let neutral = SpeakerStyle::neutral(&cfg);
        let comp = render_components(&neutral, &script, &tables, &cfg).unwrap();
        let (seq, _) = render_motion(&neutral, &script, &tables, &cfg, 9).unwrap();
        for t in 0..seq.len() {
            for e in 0..cfg.expr_dim {
                let want = comp.semantic.get(t, e) as f32 as f64;
                assert_eq!(seq.expression.get(t, e), want);
            }
            for &u in &cfg.partition.upper {
                assert_eq!(seq.expression.get(t, u), 0.0);
            }
        }
    }

    #[test]
    fn same_script_two_speakers_differ_by_gain_and_offset() {
        let cfg = quiet();
        let tables = PhonemeTables::generate(&cfg);
        let script = ContentScript::generate(1, &cfg).unwrap();
        let (a, b) = (sample_speaker(5, &cfg).unwrap(), sample_speaker(6, &cfg).unwrap());
        let ca = render_components(&a, &script, &tables, &cfg).unwrap();
        let cb = render_components(&b, &script, &tables, &cfg).unwrap();
        for (j, &d) in cfg.partition.lower.iter().enumerate() {
            for t in 0..script.len() {
                let xa = ca.semantic.get(t, d) + ca.style.get(t, d);
                let xb = cb.semantic.get(t, d) + cb.style.get(t, d);
                let ua = (xa - a.offset[d]) / a.lower_gain[j];
                let ub = (xb - b.offset[d]) / b.lower_gain[j];
                assert!((ua - ub).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upper_style_is_identical_across_scripts() {
        let cfg = quiet();
        let tables = PhonemeTables::generate(&cfg);
        let style = sample_speaker(11, &cfg).unwrap();
        let neutral = SpeakerStyle::neutral(&cfg);
        let mut reference: Option<Mat> = None;
        for c in 0..4 {
            let script = ContentScript::generate(c, &cfg).unwrap();
            let (with, _) = render_motion(&style, &script, &tables, &cfg, 0).unwrap();
            let (without, _) = render_motion(&neutral, &script, &tables, &cfg, 0).unwrap();
            let diff = with
                .expression
                .select_cols(&cfg.partition.upper)
                .zip_map(&without.expression.select_cols(&cfg.partition.upper), |a, b| a - b);
            match &reference {
                Some(r) => assert!(r.max_abs_diff(&diff) < 1e-6),
                None => reference = Some(diff),
            }
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    }

    #[test]
    fn lower_dims_track_phonemes_upper_dims_do_not() {
        let cfg = quiet();
        let tables = PhonemeTables::generate(&cfg);
        let script = ContentScript::generate(2, &cfg).unwrap();
        let (seq, _) = render_motion(&SpeakerStyle::neutral(&cfg), &script, &tables, &cfg, 0).unwrap();
        let strength = |dim: usize| -> f64 {
            (0..cfg.vocab)
                .map(|p| {
                    let onehot: Vec<f64> = script.phonemes.iter().map(|&q| (q == p) as u8 as f64).collect();
                    corr(&onehot, &seq.expression.column(dim)).abs()
                })
                .fold(0.0, f64::max)
        };
        for &d in &cfg.partition.lower {
            assert!(strength(d) > 0.0);
        }
        for &d in &cfg.partition.upper {
            assert_eq!(strength(d), 0.0);
        }
    }

    #[test]
    fn mismatched_style_dims_are_rejected() {
        let cfg = quiet();
        let tables = PhonemeTables::generate(&cfg);
        let script = ContentScript::generate(0, &cfg).unwrap();
        let mut style = sample_speaker(0, &cfg).unwrap();
        style.lower_gain.pop();
        assert!(render_motion(&style, &script, &tables, &cfg, 0).is_err());
    }

    #[test]
    fn splits_hold_out_speakers_and_contents() {
        let corpus = Corpus::generate(&CorpusConfig::default()).unwrap();
        assert_eq!(corpus.clips.len(), 80);
        let train: Vec<_> = corpus
            .split(Split::Train)
            .map(|(_, c)| (c.speaker, c.content))
            .collect();
        assert_eq!(train.len(), 48);
        assert!(train.iter().all(|&(s, c)| s < 6 && c < 8));
        assert_eq!(corpus.indices(Split::Val).len(), 12);
        assert_eq!(corpus.indices(Split::Test).len(), 20);
    }

    #[test]
    fn single_speaker_corpus_cannot_hold_out_speakers() {
        let cfg = CorpusConfig {
            n_speakers: 1,
            ..CorpusConfig::default()
        };
        assert!(Corpus::generate(&cfg).is_err());
    }
}
