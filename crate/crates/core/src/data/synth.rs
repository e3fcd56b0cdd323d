//! Synthetic multimodal corpus.
//!
//! Each sample is a three-sentence clip. Phonemes own a latent vector that
//! drives both the lip features (through a fixed per-corpus projection) and a
//! spectral template, so lip frames carry phoneme identity. A clip-level
//! arousal/valence trajectory drives the face features, the mel level
//! (energy) and the pitch contour, and is shared by neighbouring sentences,
//! which makes the context informative about the current sentence's prosody.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ContextSample, FrameRateConfig, SentenceBundle};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const LATENT_DIM: usize = 8;
const FACE_INPUTS: usize = 4;

/// Shapes and length ranges of generated data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub vocab: usize,
    pub d_lip: usize,
    pub d_face: usize,
    pub n_mels: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_frames_per_phoneme: usize,
    pub max_frames_per_phoneme: usize,
    /// Probability that a neighbouring sentence is missing (clip boundary).
    pub p_absent: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_lip: 16,
            d_face: 8,
            n_mels: 80,
            min_phonemes: 4,
            max_phonemes: 60,
            min_frames_per_phoneme: 1,
            max_frames_per_phoneme: 3,
            p_absent: 0.1,
        }
    }
}

impl ShapeConfig {
    /// Short sentences and 20 mel bins, sized for the toy model.
    pub fn toy() -> Self {
        Self { max_phonemes: 12, n_mels: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidShapeConfig(m.to_string()));
        if self.vocab == 0 || self.d_lip == 0 || self.d_face == 0 {
            return bad("vocab, d_lip and d_face must be positive");
        }
        if self.n_mels < 3 {
            return bad("n_mels must be at least 3 (two bins carry voicing and pitch)");
        }
        if self.min_phonemes == 0 || self.max_phonemes < self.min_phonemes {
            return bad("phoneme length range must satisfy 1 <= min <= max");
        }
        if self.min_frames_per_phoneme == 0 || self.max_frames_per_phoneme < self.min_frames_per_phoneme {
            return bad("frames-per-phoneme range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.p_absent) {
            return bad("p_absent must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Where pitch and voicing live inside a mel frame, and how to decode them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchMap {
    pub voicing_bin: usize,
    pub pitch_bin: usize,
    /// A frame is voiced when its voicing bin exceeds this value.
    pub voicing_threshold: f64,
    /// Pitch bin holds `ln(f0 / ref_hz)`.
    pub ref_hz: f64,
}

impl Default for PitchMap {
    fn default() -> Self {
        Self { voicing_bin: 0, pitch_bin: 1, voicing_threshold: 0.5, ref_hz: 100.0 }
    }
}

impl PitchMap {
    pub const VOICED_LEVEL: f64 = 1.0;
    pub const UNVOICED_LEVEL: f64 = 0.0;

    pub fn encode(&self, row: &mut [f64], f0: Option<f64>) {
        match f0 {
            Some(hz) => {
                row[self.voicing_bin] = Self::VOICED_LEVEL;
                row[self.pitch_bin] = (hz / self.ref_hz).ln();
            }
            None => {
                row[self.voicing_bin] = Self::UNVOICED_LEVEL;
                row[self.pitch_bin] = 0.0;
            }
        }
    }

    /// `(voiced, f0_hz)` for one raw mel row; unvoiced frames give 0 Hz.
    pub fn decode(&self, row: &[f64]) -> (bool, f64) {
        if row[self.voicing_bin] > self.voicing_threshold {
            (true, self.ref_hz * row[self.pitch_bin].exp())
        } else {
            (false, 0.0)
        }
    }
}

/// Per-corpus normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mel_mean: Vec<f64>,
    pub mel_std: Vec<f64>,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub log_f0_mean: f64,
    pub log_f0_std: f64,
    pub pitch_map: Option<PitchMap>,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-3))
}

impl CorpusStats {
    /// Statistics over every sentence (contexts included) of `samples`.
    pub fn compute(samples: &[ContextSample], pitch_map: Option<PitchMap>) -> Self {
        let bundles: Vec<&SentenceBundle> = samples
            .iter()
            .flat_map(|s| [s.previous.as_ref(), Some(&s.current), s.following.as_ref()])
            .flatten()
            .collect();
        let n_mels = bundles.first().map_or(0, |b| b.mel.cols());
        let mut mel_mean = Vec::with_capacity(n_mels);
        let mut mel_std = Vec::with_capacity(n_mels);
        for bin in 0..n_mels {
            let (m, s) = mean_std(bundles.iter().flat_map(|b| (0..b.mel.rows()).map(move |r| b.mel[(r, bin)])));
            mel_mean.push(m);
            mel_std.push(s);
        }
        let (energy_mean, energy_std) = mean_std(bundles.iter().flat_map(|b| b.energy.iter().copied()));
        let (log_f0_mean, log_f0_std) =
            mean_std(bundles.iter().flat_map(|b| b.pitch.iter().copied().filter(|&p| p > 0.0).map(f64::ln)));
        Self { mel_mean, mel_std, energy_mean, energy_std, log_f0_mean, log_f0_std, pitch_map }
    }

    pub fn normalize_mel(&self, mel: &Matrix) -> Matrix {
        let mut out = mel.clone();
        for r in 0..out.rows() {
            for (b, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mel_mean[b]) / self.mel_std[b];
            }
        }
        out
    }

    pub fn denormalize_mel(&self, mel: &Matrix) -> Matrix {
        let mut out = mel.clone();
        for r in 0..out.rows() {
            for (b, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.mel_std[b] + self.mel_mean[b];
            }
        }
        out
    }

    pub fn normalize_energy(&self, e: f64) -> f64 {
        (e - self.energy_mean) / self.energy_std
    }

    /// Normalized log-F0; 0 for unvoiced frames (they are masked from the loss).
    pub fn normalize_pitch(&self, hz: f64) -> f64 {
        if hz > 0.0 {
            (hz.ln() - self.log_f0_mean) / self.log_f0_std
        } else {
            0.0
        }
    }

    pub fn denormalize_pitch(&self, z: f64) -> f64 {
        (z * self.log_f0_std + self.log_f0_mean).exp()
    }
}

/// A generated corpus with the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub seed: u64,
    pub frame_cfg: FrameRateConfig,
    pub shape: ShapeConfig,
    pub samples: Vec<ContextSample>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.frame_cfg != self.frame_cfg {
                return Err(Error::InvalidSample(format!("sample {i} uses a different frame config")));
            }
            s.validate(Some(self.shape.vocab)).map_err(|e| Error::InvalidSample(format!("sample {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn sample_id(index: usize) -> String {
        format!("s{index:05}")
    }

    /// Single-sentence view: every sample stripped of its neighbours.
    pub fn without_context(&self) -> Corpus {
        Corpus { samples: self.samples.iter().map(ContextSample::without_context).collect(), ..self.clone() }
    }

    /// Every sentence (neighbours included) as its own context-free sample,
    /// in order previous, current, following per clip.
    pub fn sentences(&self) -> Corpus {
        let samples = self
            .samples
            .iter()
            .flat_map(|s| [s.previous.as_ref(), Some(&s.current), s.following.as_ref()])
            .flatten()
            .map(|b| ContextSample { previous: None, current: b.clone(), following: None, frame_cfg: self.frame_cfg })
            .collect();
        Corpus { samples, ..self.clone() }
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> (Corpus, Corpus) {
        let cut = self.samples.len().saturating_sub(n);
        let head = Corpus { samples: self.samples[..cut].to_vec(), ..self.clone() };
        let tail = Corpus { samples: self.samples[cut..].to_vec(), ..self.clone() };
        (head, tail)
    }
}

/// Fixed random maps shared by every sample of a corpus.
struct Projections {
    phoneme_latent: Matrix,
    lip: Matrix,
    face: Matrix,
    templates: Matrix,
    voiced_phoneme: Vec<bool>,
}

impl Projections {
    fn new(shape: &ShapeConfig, rng: &mut ChaCha8Rng) -> Self {
        let phoneme_latent = Matrix::randn(shape.vocab, LATENT_DIM, 1.0, rng);
        let lip = Matrix::randn(LATENT_DIM, shape.d_lip, 1.0 / (LATENT_DIM as f64).sqrt(), rng);
        let face = Matrix::randn(FACE_INPUTS, shape.d_face, 0.8, rng);
        let mut templates = Matrix::zeros(shape.vocab, shape.n_mels);
        for id in 0..shape.vocab {
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| {
                    let centre = rng.gen_range(0.0..shape.n_mels as f64);
                    let width = rng.gen_range(1.5..6.0) * shape.n_mels as f64 / 80.0 + 1.0;
                    let height = rng.gen_range(1.0..3.0);
                    (centre, width, height)
                })
                .collect();
            for b in 2..shape.n_mels {
                let x = b as f64;
                let v: f64 = bumps.iter().map(|(c, w, h)| h * (-(x - c) * (x - c) / (2.0 * w * w)).exp()).sum();
                templates[(id, b)] = v - 3.0;
            }
        }
        let voiced_phoneme = (0..shape.vocab).map(|id| id % 5 != 0).collect();
        Self { phoneme_latent, lip, face, templates, voiced_phoneme }
    }
}

/// Arousal/valence level of one sentence plus its within-sentence wobble.
struct Affect {
    arousal: f64,
    valence: f64,
    phase: f64,
}

impl Affect {
    fn at(&self, t: f64) -> (f64, f64) {
        let w = 2.0 * PI * t + self.phase;
        (self.arousal + 0.2 * w.sin(), self.valence + 0.2 * (0.7 * w).cos())
    }
}

fn sentence(
    proj: &Projections,
    shape: &ShapeConfig,
    frame: &FrameRateConfig,
    pitch_map: &PitchMap,
    affect: &Affect,
    rng: &mut ChaCha8Rng,
) -> SentenceBundle {
    let n = frame.n();
    let t = rng.gen_range(shape.min_phonemes..=shape.max_phonemes);
    let phonemes: Vec<usize> = (0..t).map(|_| rng.gen_range(0..shape.vocab)).collect();
    let frame_owner: Vec<usize> = phonemes
        .iter()
        .enumerate()
        .flat_map(|(i, _)| {
            let d = rng.gen_range(shape.min_frames_per_phoneme..=shape.max_frames_per_phoneme);
            std::iter::repeat(i).take(d)
        })
        .collect();
    let tv = frame_owner.len();
    let tm = tv * n;

    let mut lip_feats = Matrix::zeros(tv, shape.d_lip);
    let mut face_feats = Matrix::zeros(tv, shape.d_face);
    for (f, &owner) in frame_owner.iter().enumerate() {
        let latent = proj.phoneme_latent.row(phonemes[owner]);
        for j in 0..shape.d_lip {
            let z: f64 = latent.iter().enumerate().map(|(l, v)| v * proj.lip[(l, j)]).sum();
            lip_feats[(f, j)] = z.tanh() + 0.05 * rng.gen_range(-1.0..1.0);
        }
        let (aro, val) = affect.at(f as f64 / tv as f64);
        let inputs = [aro, val, aro * val, 1.0];
        for j in 0..shape.d_face {
            let z: f64 = inputs.iter().enumerate().map(|(l, v)| v * proj.face[(l, j)]).sum();
            face_feats[(f, j)] = z.tanh() + 0.02 * rng.gen_range(-1.0..1.0);
        }
    }

    let mut mel = Matrix::zeros(tm, shape.n_mels);
    let mut voiced = Vec::with_capacity(tm);
    let mut pitch = Vec::with_capacity(tm);
    let mut energy = Vec::with_capacity(tm);
    let ripple_phase = rng.gen_range(0.0..2.0 * PI);
    for r in 0..tm {
        let id = phonemes[frame_owner[r / n]];
        let u = (r as f64 + 0.5) / tm as f64;
        let (aro, val) = affect.at(u);
        let row = mel.row_mut(r);
        for (b, v) in row.iter_mut().enumerate().skip(2) {
            *v = proj.templates[(id, b)] + 0.8 * aro + 0.05 * (0.9 * r as f64 + 0.3 * b as f64 + ripple_phase).sin();
        }
        let f0 = proj.voiced_phoneme[id].then(|| 150.0 * (0.25 * val + 0.05 * (6.0 * PI * u + ripple_phase).sin()).exp());
        pitch_map.encode(row, f0);
        let (v, hz) = pitch_map.decode(row);
        voiced.push(v);
        pitch.push(hz);
        energy.push(row.iter().map(|x| x * x).sum::<f64>().sqrt());
    }

    SentenceBundle { phonemes, lip_feats, face_feats, mel, voiced, pitch, energy }
}

/// Generates `count` clips. Output depends only on the arguments; each
/// sample draws from its own ChaCha stream derived from `(seed, index)`.
pub fn generate_synthetic_corpus(
    seed: u64,
    count: usize,
    frame_cfg: FrameRateConfig,
    shape: ShapeConfig,
) -> Result<Corpus> {
    shape.validate()?;
    if count == 0 {
        return Err(Error::InvalidShapeConfig("corpus must hold at least one sample".into()));
    }
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    let proj = Projections::new(&shape, &mut base);
    let pitch_map = PitchMap::default();

    let samples: Vec<ContextSample> = (0..count)
        .map(|index| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64 + 1);
            let clip_aro = rng.gen_range(-1.0..1.0);
            let clip_val = rng.gen_range(-1.0..1.0);
            let mut affect = || Affect {
                arousal: clip_aro + rng.gen_range(-0.25..0.25),
                valence: clip_val + rng.gen_range(-0.25..0.25),
                phase: rng.gen_range(0.0..2.0 * PI),
            };
            let affects = [affect(), affect(), affect()];
            let has_prev = rng.gen::<f64>() >= shape.p_absent;
            let has_fol = rng.gen::<f64>() >= shape.p_absent;
            let mut make = |a: &Affect| sentence(&proj, &shape, &frame_cfg, &pitch_map, a, &mut rng);
            let previous = has_prev.then(|| make(&affects[0]));
            let current = make(&affects[1]);
            let following = has_fol.then(|| make(&affects[2]));
            ContextSample { previous, current, following, frame_cfg }
        })
        .collect();

    let stats = CorpusStats::compute(&samples, Some(pitch_map));
    Ok(Corpus { seed, frame_cfg, shape, samples, stats })
}
