#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxdub::data::synth::{generate_synthetic_corpus, Corpus, ShapeConfig};
use ctxdub::data::{ContextSample, FrameRateConfig, SentenceBundle};
use ctxdub::model::{Ablation, Model, ModelConfig, Prepared};
use ctxdub::tensor::Matrix;
use ctxdub::training::{loss_and_grads, LossWeights};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect())
}

/// Frame configurations with `n` = 1, 2 and 4.
pub fn frame_for(n: usize) -> FrameRateConfig {
    match n {
        1 => FrameRateConfig::derive(16_000, 640, 25).unwrap(),
        2 => FrameRateConfig::derive(16_000, 320, 25).unwrap(),
        4 => FrameRateConfig::standard(),
        _ => panic!("no test frame config for n={n}"),
    }
}

pub fn micro_shape() -> ShapeConfig {
    ShapeConfig {
        vocab: 10,
        d_lip: 6,
        d_face: 4,
        n_mels: 6,
        min_phonemes: 2,
        max_phonemes: 4,
        min_frames_per_phoneme: 1,
        max_frames_per_phoneme: 2,
        p_absent: 0.2,
    }
}

/// Every dimension at most 16, one FFT block per stack.
pub fn micro_config(shape: &ShapeConfig, n: usize) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_heads: 2,
        ffn_dim: 16,
        descriptors: 3,
        postnet_dim: 8,
        postnet_kernel: 3,
        ..ModelConfig::toy(shape, n)
    }
}

pub fn micro_corpus(seed: u64, count: usize, n: usize) -> Corpus {
    generate_synthetic_corpus(seed, count, frame_for(n), micro_shape()).unwrap()
}

/// A bundle with arbitrary lengths and recognisable contents: every value
/// encodes `(tag, row, col)`.
pub fn tagged_bundle(tag: usize, t_phon: usize, t_frames: usize, n: usize, n_mels: usize) -> SentenceBundle {
    let cell = |r: usize, c: usize| (tag * 1_000_000 + r * 100 + c) as f64;
    let mel = Matrix::from_vec(n * t_frames, n_mels, (0..n * t_frames * n_mels).map(|i| cell(i / n_mels, i % n_mels)).collect());
    SentenceBundle {
        phonemes: (0..t_phon).map(|i| (tag * 7 + i) % 10).collect(),
        lip_feats: Matrix::from_vec(t_frames, 2, (0..t_frames * 2).map(|i| cell(i / 2, i % 2) + 0.5).collect()),
        face_feats: Matrix::from_vec(t_frames, 3, (0..t_frames * 3).map(|i| cell(i / 3, i % 3) + 0.25).collect()),
        mel,
        voiced: (0..n * t_frames).map(|i| (i + tag) % 3 != 0).collect(),
        pitch: (0..n * t_frames).map(|i| 100.0 + (tag * 10 + i) as f64).collect(),
        energy: (0..n * t_frames).map(|i| (tag + i) as f64 * 0.5).collect(),
    }
}

/// Random context sample with arbitrary (not generator-shaped) lengths.
pub fn random_tagged_sample(r: &mut impl Rng, n: usize, max_len: usize) -> ContextSample {
    let has_prev = r.gen_bool(0.8);
    let has_fol = r.gen_bool(0.8);
    let mut bundle = |tag: usize| {
        let t_phon = r.gen_range(1..=max_len);
        let t_frames = r.gen_range(1..=max_len);
        tagged_bundle(tag, t_phon, t_frames, n, 3)
    };
    let previous = has_prev.then(|| bundle(1));
    let current = bundle(2);
    let following = has_fol.then(|| bundle(3));
    ContextSample { previous, current, following, frame_cfg: frame_for(n) }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-5;

pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_param: String,
    pub failures: Vec<String>,
}

/// Central finite differences of the summed loss against backprop for every
/// scalar of every parameter whose name starts with one of `prefixes`.
pub fn audit_gradients(model: &Model, prep: &Prepared, ablation: Ablation, prefixes: &[&str], tol: f64) -> FdReport {
    let weights = LossWeights::default();
    let (_, grads) = loss_and_grads(model, prep, ablation, weights, None).unwrap();
    let mut work = model.clone();
    let mut report = FdReport { checked: 0, worst: 0.0, worst_param: String::new(), failures: Vec::new() };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let shape = model.store.get(id).shape();
        let analytic = grads.get_or_zeros(id, shape);
        for j in 0..analytic.len() {
            let orig = work.store.get(id).data()[j];
            work.store.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = loss_and_grads(&work, prep, ablation, weights, None).unwrap().0.l_sum;
            work.store.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = loss_and_grads(&work, prep, ablation, weights, None).unwrap().0.l_sum;
            work.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic.data()[j], numeric, FD_FLOOR);
            report.checked += 1;
            if e > report.worst {
                report.worst = e;
                report.worst_param = format!("{name}[{j}]");
            }
            if e >= tol {
                report.failures.push(format!("{name}[{j}]: analytic {} numeric {numeric} rel {e:.2e}", analytic.data()[j]));
            }
        }
    }
    report
}

/// Brute-force `softmax(q kᵀ / √d) v` for one head.
pub fn attention_oracle(q: &Matrix, k: &Matrix, v: &Matrix) -> (Matrix, Matrix) {
    let d = q.cols() as f64;
    let mut weights = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let mut scores = Vec::with_capacity(k.rows());
        for j in 0..k.rows() {
            let mut s = 0.0;
            for c in 0..q.cols() {
                s += q[(i, c)] * k[(j, c)];
            }
            scores.push(s / d.sqrt());
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..k.rows() {
            weights.row_mut(i)[j] = (scores[j] - m).exp() / z;
        }
    }
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for i in 0..q.rows() {
        for c in 0..v.cols() {
            let mut s = 0.0;
            for j in 0..k.rows() {
                s += weights[(i, j)] * v[(j, c)];
            }
            out.row_mut(i)[c] = s;
        }
    }
    (out, weights)
}

/// Per-element loops for additive attention:
/// `α̂[i,k] = Σ_d w[d]·tanh(Σ_e q[i,e]·W[e,d] + Σ_e key[k,e]·U[e,d] + b[d])`,
/// softmax over `k`, `H[i] = Σ_k α[i,k]·key[k]`.
pub fn additive_oracle(q: &Matrix, keys: &Matrix, w_a: &Matrix, u_a: &Matrix, b_a: &Matrix, w: &Matrix) -> (Matrix, Matrix) {
    let d = w_a.cols();
    let mut alpha = Matrix::zeros(q.rows(), keys.rows());
    for i in 0..q.rows() {
        let mut scores = vec![0.0; keys.rows()];
        for (kk, score) in scores.iter_mut().enumerate() {
            for dd in 0..d {
                let mut pre = b_a[(0, dd)];
                for e in 0..q.cols() {
                    pre += q[(i, e)] * w_a[(e, dd)] + keys[(kk, e)] * u_a[(e, dd)];
                }
                *score += w[(0, dd)] * pre.tanh();
            }
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for kk in 0..keys.rows() {
            alpha.row_mut(i)[kk] = (scores[kk] - m).exp() / z;
        }
    }
    let mut h = Matrix::zeros(q.rows(), keys.cols());
    for i in 0..q.rows() {
        for c in 0..keys.cols() {
            h.row_mut(i)[c] = (0..keys.rows()).map(|kk| alpha[(i, kk)] * keys[(kk, c)]).sum();
        }
    }
    (h, alpha)
}

pub fn max_row_sum_deviation(m: &Matrix) -> f64 {
    (0..m.rows()).map(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// What a straightforward slicing of the three sentences should produce.
pub struct SelectionOracle {
    pub phonemes: Vec<usize>,
    pub lip: Vec<Vec<f64>>,
    pub face: Vec<Vec<f64>>,
    pub mel: Vec<Vec<f64>>,
    pub voiced: Vec<bool>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// `[prev, cur, fol]` lengths in phonemes, video frames and mel frames.
    pub phoneme_lens: [usize; 3],
    pub frame_lens: [usize; 3],
    pub mel_lens: [usize; 3],
}

/// Frames kept from a neighbour: all of them when every phoneme is kept,
/// otherwise the kept phoneme share of the frames, rounded half up in
/// integer arithmetic and clamped to `[1, frames]`.
pub fn oracle_frames(kept: usize, t_phon: usize, t_frames: usize) -> usize {
    if kept == t_phon {
        t_frames
    } else {
        ((2 * kept * t_frames + t_phon) / (2 * t_phon)).clamp(1, t_frames)
    }
}

pub fn select_oracle(sample: &ContextSample, k: usize, use_prev: bool, use_fol: bool) -> SelectionOracle {
    let n = sample.frame_cfg.n();
    let mut o = SelectionOracle {
        phonemes: vec![],
        lip: vec![],
        face: vec![],
        mel: vec![],
        voiced: vec![],
        pitch: vec![],
        energy: vec![],
        phoneme_lens: [0; 3],
        frame_lens: [0; 3],
        mel_lens: [0; 3],
    };
    let parts = [
        sample.previous.as_ref().filter(|_| use_prev).map(|b| (b, true)),
        Some((&sample.current, false)),
        sample.following.as_ref().filter(|_| use_fol).map(|b| (b, false)),
    ];
    for (slot, part) in parts.iter().enumerate() {
        let Some((b, from_end)) = part else { continue };
        let t_phon = b.phonemes.len();
        let t_frames = b.lip_feats.rows();
        let (kept, frames) = if slot == 1 {
            (t_phon, t_frames)
        } else {
            let kept = k.min(t_phon);
            (kept, oracle_frames(kept, t_phon, t_frames))
        };
        let (p0, f0) = if *from_end { (t_phon - kept, t_frames - frames) } else { (0, 0) };
        for i in p0..p0 + kept {
            o.phonemes.push(b.phonemes[i]);
        }
        for f in f0..f0 + frames {
            o.lip.push(b.lip_feats.row(f).to_vec());
            o.face.push(b.face_feats.row(f).to_vec());
            for m in n * f..n * (f + 1) {
                o.mel.push(b.mel.row(m).to_vec());
                o.voiced.push(b.voiced[m]);
                o.pitch.push(b.pitch[m]);
                o.energy.push(b.energy[m]);
            }
        }
        o.phoneme_lens[slot] = kept;
        o.frame_lens[slot] = frames;
        o.mel_lens[slot] = n * frames;
    }
    o
}

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}
