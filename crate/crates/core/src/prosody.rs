//! Context prosody predictor: arousal/valence features fused with the
//! aligned lip-phoneme sequence by additive attention, feeding energy and
//! pitch predictors.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Ctx, LayerNorm, Linear};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Per-frame scalar track (energy or pitch) with optional voicing.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub values: Vec<f64>,
    pub voiced: Option<Vec<bool>>,
}

impl ProsodyTrack {
    pub fn energy(values: Vec<f64>) -> Self {
        Self { values, voiced: None }
    }

    /// Pitch in Hz; voicing is derived from `values > 0`.
    pub fn pitch(values: Vec<f64>) -> Self {
        let voiced = values.iter().map(|&v| v > 0.0).collect();
        Self { values, voiced: Some(voiced) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_voiced(&self, t: usize) -> bool {
        self.voiced.as_ref().map_or(true, |v| v[t])
    }
}

/// Bahdanau-style scoring `ŵᵀ tanh(W_aᵀ q_i + U_aᵀ k_j + b_a)` followed by a
/// softmax over keys and a weighted sum of the keys.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    /// `W_a`, `D × D`
    pub query_map: ParamId,
    /// `U_a`, `D × D`
    pub key_map: ParamId,
    /// `b_a`, `1 × D`
    pub bias: ParamId,
    /// `w_a`, `1 × D`
    pub score: ParamId,
}

impl AdditiveAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query_map: store.add(format!("{name}.w_a"), xavier(dim, dim, rng)),
            key_map: store.add(format!("{name}.u_a"), xavier(dim, dim, rng)),
            bias: store.add(format!("{name}.b_a"), Matrix::zeros(1, dim)),
            score: store.add(format!("{name}.score"), Matrix::uniform(1, dim, (3.0 / dim as f64).sqrt(), rng)),
        }
    }

    /// Returns `(H, α)` with `H: T_q × D` and `α: T_q × T_k`.
    pub fn forward(&self, cx: &mut Ctx, queries: Var, keys: Var) -> (Var, Var) {
        let wa = cx.p(self.query_map);
        let ua = cx.p(self.key_map);
        let ba = cx.p(self.bias);
        let wv = cx.p(self.score);
        let q = cx.tape.matmul(queries, wa);
        let k = cx.tape.matmul(keys, ua);
        let k = cx.tape.add_row(k, ba);
        let scores = cx.tape.additive_scores(q, k, wv);
        let alpha = cx.tape.softmax_rows(scores);
        (cx.tape.matmul(alpha, keys), alpha)
    }
}

/// `H` and `α` of additive attention on plain matrices.
pub fn fuse_affect(queries: &Matrix, keys: &Matrix, store: &ParamStore, attn: &AdditiveAttention) -> Result<(Matrix, Matrix)> {
    let d = store.get(attn.query_map).rows();
    if queries.cols() != d || keys.cols() != d {
        return Err(Error::DimMismatch(format!(
            "additive attention expects width {d}, got queries {} and keys {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() == 0 {
        return Err(Error::DimMismatch("no keys to attend to".into()));
    }
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, store);
    let q = cx.input(queries.clone());
    let k = cx.input(keys.clone());
    let (h, alpha) = attn.forward(&mut cx, q, k);
    Ok((cx.value(h).clone(), cx.value(alpha).clone()))
}

/// Two rounds of convolution → ReLU → layer norm → dropout, then a linear
/// map to one scalar per frame.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    pub out: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kernel: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv1d::new(store, &format!("{name}.conv1"), dim, dim, kernel, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), dim, dim, kernel, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            out: Linear::new(store, &format!("{name}.out"), dim, 1, true, rng),
            dropout,
        }
    }

    /// `T × 1` predictions at the input rate.
    pub fn forward(&self, cx: &mut Ctx, h: Var) -> Var {
        let mut x = h;
        for (conv, norm) in [(&self.conv1, &self.norm1), (&self.conv2, &self.norm2)] {
            x = conv.forward(cx, x);
            x = cx.tape.relu(x);
            x = norm.forward(cx, x);
            x = cx.dropout(x, self.dropout);
        }
        self.out.forward(cx, x)
    }

    /// Predicts at lip rate and repeats each value `n` times.
    pub fn predict_upsampled(&self, cx: &mut Ctx, h: Var, n: usize) -> Var {
        let y = self.forward(cx, h);
        cx.tape.repeat_rows(y, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CppConfig {
    pub d_face: usize,
    pub dim: usize,
    pub predictor_kernel: usize,
    pub predictor_dropout: f64,
    pub frame_n: usize,
}

#[derive(Debug, Clone)]
pub struct Cpp {
    pub cfg: CppConfig,
    pub arousal_proj: Linear,
    pub valence_proj: Linear,
    pub arousal_attn: AdditiveAttention,
    pub valence_attn: AdditiveAttention,
    pub energy: VariancePredictor,
    pub pitch: VariancePredictor,
}

pub struct CppOutput {
    pub h_aro: Var,
    pub h_val: Var,
    /// `[H_t,aro ⊕ H_t,val]` repeated to mel rate, `T_mel × 2D`.
    pub context: Var,
    /// `T_mel × 1`, normalized energy.
    pub energy: Var,
    /// `T_mel × 1`, normalized log-F0.
    pub pitch: Var,
    pub alpha_aro: Var,
    pub alpha_val: Var,
}

impl Cpp {
    pub fn new(store: &mut ParamStore, cfg: CppConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        Self {
            cfg,
            arousal_proj: Linear::new(store, "cpp.arousal_proj", cfg.d_face, d, true, rng),
            valence_proj: Linear::new(store, "cpp.valence_proj", cfg.d_face, d, true, rng),
            arousal_attn: AdditiveAttention::new(store, "cpp.arousal_attn", d, rng),
            valence_attn: AdditiveAttention::new(store, "cpp.valence_attn", d, rng),
            energy: VariancePredictor::new(store, "cpp.energy", d, cfg.predictor_kernel, cfg.predictor_dropout, rng),
            pitch: VariancePredictor::new(store, "cpp.pitch", d, cfg.predictor_kernel, cfg.predictor_dropout, rng),
        }
    }

    pub fn run(&self, cx: &mut Ctx, face: &Matrix, t_lip_pho: Var) -> Result<CppOutput> {
        let (t_mel, d) = cx.tape.shape(t_lip_pho);
        if face.cols() != self.cfg.d_face {
            return Err(Error::DimMismatch(format!("face width {} != {}", face.cols(), self.cfg.d_face)));
        }
        if d != self.cfg.dim {
            return Err(Error::DimMismatch(format!("lip-phoneme width {d} != {}", self.cfg.dim)));
        }
        if face.rows() * self.cfg.frame_n != t_mel {
            return Err(Error::LengthMismatch(format!(
                "{} face frames x n={} != {t_mel} mel frames",
                face.rows(),
                self.cfg.frame_n
            )));
        }
        let n = self.cfg.frame_n;
        let f = cx.input(face.clone());
        let aro = self.arousal_proj.forward(cx, f);
        let val = self.valence_proj.forward(cx, f);
        let (h_aro, alpha_aro) = self.arousal_attn.forward(cx, aro, t_lip_pho);
        let (h_val, alpha_val) = self.valence_attn.forward(cx, val, t_lip_pho);
        let energy = self.energy.predict_upsampled(cx, h_aro, n);
        let pitch = self.pitch.predict_upsampled(cx, h_val, n);
        let joined = cx.tape.concat_cols(&[h_aro, h_val]);
        let context = cx.tape.repeat_rows(joined, n);
        Ok(CppOutput { h_aro, h_val, context, energy, pitch, alpha_aro, alpha_val })
    }
}
