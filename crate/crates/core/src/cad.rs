//! Context acoustic decoder: mel decoder, double attention over the coarse
//! mel and the masked ground-truth context, and a residual postnet.

use rand::Rng;

use crate::autograd::Var;
use crate::data::{Segment, SegmentBounds};
use crate::error::{Error, Result};
use crate::nn::{add_positions, Conv1d, Ctx, FftConfig, FftStack, Linear};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CadConfig {
    pub n_mels: usize,
    pub decoder: FftConfig,
    /// Number of global descriptors gathered by the double attention block.
    pub descriptors: usize,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_dropout: f64,
}

/// `T_lip,pho ⊕ H_context` (width `3D`) → input projection → FFT stack →
/// linear head to `n_mels`.
#[derive(Debug, Clone)]
pub struct MelDecoder {
    input: Linear,
    stack: FftStack,
    head: Linear,
    in_width: usize,
}

impl MelDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CadConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.decoder.dim;
        Self {
            input: Linear::new(store, &format!("{name}.input"), 3 * d, d, true, rng),
            stack: FftStack::new(store, &format!("{name}.stack"), &cfg.decoder, rng),
            head: Linear::new(store, &format!("{name}.head"), d, cfg.n_mels, true, rng),
            in_width: 3 * d,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, features: Var) -> Result<Var> {
        let w = cx.tape.shape(features).1;
        if w != self.in_width {
            return Err(Error::DimMismatch(format!("decoder input width {w} != {}", self.in_width)));
        }
        let x = self.input.forward(cx, features);
        let x = add_positions(cx, x);
        let x = self.stack.forward(cx, x);
        Ok(self.head.forward(cx, x))
    }
}

/// Gather-distribute attention. Gather: each of `G` descriptors is a
/// softmax-over-positions weighted sum of projected features. Distribute:
/// each position takes a softmax-over-descriptors mixture of them.
#[derive(Debug, Clone)]
pub struct DoubleAttention {
    pub features: Linear,
    pub gather: Linear,
    pub distribute: Linear,
    pub out: Linear,
    in_width: usize,
}

pub struct DoubleAttentionOutput {
    /// `T × D_dab`, after the output projection.
    pub z: Var,
    /// `G × D_dab`
    pub descriptors: Var,
    /// `G × T`, rows sum to one.
    pub gather_weights: Var,
    /// `T × G`, rows sum to one.
    pub distribute_weights: Var,
}

impl DoubleAttention {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, dim: usize, descriptors: usize, rng: &mut impl Rng) -> Self {
        Self {
            features: Linear::new(store, &format!("{name}.features"), in_width, dim, true, rng),
            gather: Linear::new(store, &format!("{name}.gather"), in_width, descriptors, true, rng),
            distribute: Linear::new(store, &format!("{name}.distribute"), in_width, descriptors, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            in_width,
        }
    }

    /// Global descriptors and their gather weights.
    pub fn gather(&self, cx: &mut Ctx, x: Var) -> (Var, Var) {
        let feats = self.features.forward(cx, x);
        let logits = self.gather.forward(cx, x);
        let logits_t = cx.tape.transpose(logits);
        let weights = cx.tape.softmax_rows(logits_t);
        (cx.tape.matmul(weights, feats), weights)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<DoubleAttentionOutput> {
        let w = cx.tape.shape(x).1;
        if w != self.in_width {
            return Err(Error::DimMismatch(format!("double attention input width {w} != {}", self.in_width)));
        }
        let (descriptors, gather_weights) = self.gather(cx, x);
        let logits = self.distribute.forward(cx, x);
        let distribute_weights = cx.tape.softmax_rows(logits);
        let mixed = cx.tape.matmul(distribute_weights, descriptors);
        let z = self.out.forward(cx, mixed);
        Ok(DoubleAttentionOutput { z, descriptors, gather_weights, distribute_weights })
    }
}

/// `Ŷ = F̂ + conv stack(Z ⊕ F̂)`; tanh between layers, linear last layer.
#[derive(Debug, Clone)]
pub struct Postnet {
    pub layers: Vec<Conv1d>,
    dropout: f64,
}

impl Postnet {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, cfg: &CadConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.postnet_layers >= 2, "postnet needs at least two layers");
        let mut layers = Vec::with_capacity(cfg.postnet_layers);
        for i in 0..cfg.postnet_layers {
            let c_in = if i == 0 { in_width } else { cfg.postnet_dim };
            let c_out = if i + 1 == cfg.postnet_layers { cfg.n_mels } else { cfg.postnet_dim };
            layers.push(Conv1d::new(store, &format!("{name}.conv{i}"), c_in, c_out, cfg.postnet_kernel, rng));
        }
        Self { layers, dropout: cfg.postnet_dropout }
    }

    pub fn last(&self) -> &Conv1d {
        self.layers.last().expect("postnet has layers")
    }

    pub fn forward(&self, cx: &mut Ctx, coarse: Var, z: Var) -> Var {
        let mut x = cx.tape.concat_cols(&[z, coarse]);
        let last = self.layers.len() - 1;
        for (i, conv) in self.layers.iter().enumerate() {
            x = conv.forward(cx, x);
            if i < last {
                x = cx.tape.tanh(x);
                x = cx.dropout(x, self.dropout);
            }
        }
        cx.tape.add(coarse, x)
    }
}

#[derive(Debug, Clone)]
pub struct Cad {
    pub cfg: CadConfig,
    pub decoder: MelDecoder,
    pub dab: DoubleAttention,
    pub postnet: Postnet,
}

pub struct CadOutput {
    pub coarse: Var,
    pub refined: Var,
    pub dab: DoubleAttentionOutput,
}

impl Cad {
    pub fn new(store: &mut ParamStore, cfg: CadConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.decoder.dim;
        Self {
            cfg,
            decoder: MelDecoder::new(store, "cad.decoder", &cfg, rng),
            dab: DoubleAttention::new(store, "cad.dab", 2 * cfg.n_mels, d, cfg.descriptors, rng),
            postnet: Postnet::new(store, "cad.postnet", d + cfg.n_mels, &cfg, rng),
        }
    }

    /// `features`: `T_mel × 3D`; `masked`: `{M_prev, MASK, M_fol}`, `T_mel × n_mels`.
    pub fn run(&self, cx: &mut Ctx, features: Var, masked: &Matrix) -> Result<CadOutput> {
        let coarse = self.decoder.forward(cx, features)?;
        let t = cx.tape.shape(coarse).0;
        if masked.shape() != (t, self.cfg.n_mels) {
            return Err(Error::DimMismatch(format!(
                "masked context {:?} does not match coarse mel ({t}, {})",
                masked.shape(),
                self.cfg.n_mels
            )));
        }
        let m = cx.input(masked.clone());
        let x = cx.tape.concat_cols(&[coarse, m]);
        let dab = self.dab.forward(cx, x)?;
        let refined = self.postnet.forward(cx, coarse, dab.z);
        Ok(CadOutput { coarse, refined, dab })
    }
}

/// Rows of the current sentence.
pub fn extract_current(mel: &Matrix, bounds: &SegmentBounds) -> Result<Matrix> {
    let r = bounds.mels(Segment::Current);
    if r.start > r.end || r.end > mel.rows() {
        return Err(Error::BoundsOutOfRange { start: r.start, end: r.end, len: mel.rows() });
    }
    Ok(mel.slice_rows(r.start, r.end))
}
