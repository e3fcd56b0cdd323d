//! Layers built on the [`Tape`]: linear maps, normalization, 1-D
//! convolutions, multi-head self-attention and the feed-forward transformer
//! (FFT) block used by every encoder and decoder stack.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{xavier, ParamId, ParamStore};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape being recorded, the parameters being
/// read, and the dropout stream (absent in evaluation mode).
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    dropout: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        Self { tape, store, dropout: None }
    }

    pub fn train(tape: &'a mut Tape, store: &'a ParamStore, dropout_seed: u64) -> Self {
        Self { tape, store, dropout: Some(ChaCha8Rng::seed_from_u64(dropout_seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.tape.input(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    /// Inverted dropout; identity when `rate == 0` or in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = self.tape.shape(x);
        let keep = 1.0 - rate;
        let mask = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.tape.mul_const(x, Matrix::from_vec(r, c, mask))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(d_in, d_out, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.weight);
        let y = cx.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Length-preserving 1-D convolution over the time axis. The weight is
/// stored unfolded as `(kernel·C_in) × C_out`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel >= 1);
        let bound = (6.0 / ((c_in + c_out) * kernel) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Matrix::uniform(kernel * c_in, c_out, bound, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, c_out)),
            kernel,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let cols = cx.tape.im2col(x, self.kernel, (self.kernel - 1) / 2);
        let w = cx.p(self.weight);
        let b = cx.p(self.bias);
        let y = cx.tape.matmul(cols, w);
        cx.tape.add_row(y, b)
    }
}

/// 1-D transposed convolution with stride `s` that maps `T` input steps to
/// exactly `s·T` output steps. The full output of length `(T-1)·s + kernel`
/// is cropped by `(kernel - s)` rows, `⌊(kernel - s) / 2⌋` of them at the front.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    /// `C_in × (kernel·C_out)`
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub kernel: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        stride: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride >= 1 && kernel >= stride, "transposed conv needs kernel >= stride >= 1");
        let bound = (3.0 / channels as f64).sqrt() * (stride as f64 / kernel as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Matrix::uniform(channels, kernel * channels, bound, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, channels)),
            stride,
            kernel,
        }
    }

    pub fn crop_front(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let t_in = cx.tape.shape(x).0;
        let w = cx.p(self.weight);
        let per_step = cx.tape.matmul(x, w);
        let y = cx.tape.overlap_add(per_step, self.stride, self.kernel, self.crop_front(), t_in * self.stride);
        let b = cx.p(self.bias);
        cx.tape.add_row(y, b)
    }
}

/// Sinusoidal absolute position table, `len × dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            m[(pos, i)] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

pub fn add_positions(cx: &mut Ctx, x: Var) -> Var {
    let (t, d) = cx.tape.shape(x);
    let pe = cx.input(sinusoid_table(t, d));
    cx.tape.add(x, pe)
}

/// Scaled dot-product attention of one head; returns `(context, weights)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d = tape.shape(q).1;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    (tape.matmul(weights, v), weights)
}

#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % n_heads, 0, "model dim {dim} not divisible by {n_heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            n_heads,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let d = cx.tape.shape(x).1;
        let hd = d / self.n_heads;
        let q = self.q.forward(cx, x);
        let k = self.k.forward(cx, x);
        let v = self.v.forward(cx, x);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let qh = cx.tape.slice_cols(q, lo, hi);
            let kh = cx.tape.slice_cols(k, lo, hi);
            let vh = cx.tape.slice_cols(v, lo, hi);
            heads.push(attend(cx.tape, qh, kh, vh).0);
        }
        let joined = if heads.len() == 1 { heads[0] } else { cx.tape.concat_cols(&heads) };
        self.out.forward(cx, joined)
    }
}

/// Shape of one FFT stack.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FftConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub dropout: f64,
}

impl FftConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_blocks == 0 {
            return Err("an FFT stack needs at least one block".into());
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(format!("dim {} not divisible by {} heads", self.dim, self.n_heads));
        }
        if self.ffn_kernel == 0 || self.ffn_dim == 0 {
            return Err("ffn kernel and width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Pre-norm self-attention + convolutional feed-forward, each wrapped in a
/// residual connection.
#[derive(Debug, Clone)]
pub struct FftBlock {
    norm_attn: LayerNorm,
    attn: MultiHeadSelfAttention,
    norm_ffn: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    dropout: f64,
}

impl FftBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FftConfig, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.dim),
            attn: MultiHeadSelfAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.n_heads, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.dim),
            conv1: Conv1d::new(store, &format!("{name}.ffn1"), cfg.dim, cfg.ffn_dim, cfg.ffn_kernel, rng),
            conv2: Conv1d::new(store, &format!("{name}.ffn2"), cfg.ffn_dim, cfg.dim, cfg.ffn_kernel, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let h = self.norm_attn.forward(cx, x);
        let h = self.attn.forward(cx, h);
        let h = cx.dropout(h, self.dropout);
        let x = cx.tape.add(x, h);

        let h = self.norm_ffn.forward(cx, x);
        let h = self.conv1.forward(cx, h);
        let h = cx.tape.relu(h);
        let h = self.conv2.forward(cx, h);
        let h = cx.dropout(h, self.dropout);
        cx.tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct FftStack {
    blocks: Vec<FftBlock>,
    final_norm: LayerNorm,
}

impl FftStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FftConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..cfg.n_blocks).map(|i| FftBlock::new(store, &format!("{name}.block{i}"), cfg, rng)).collect();
        Self { blocks, final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), cfg.dim) }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(cx, h);
        }
        self.final_norm.forward(cx, h)
    }
}
