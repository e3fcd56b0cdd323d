//! The assembled dubbing model: aligner → prosody predictor → acoustic
//! decoder, plus the per-sample preparation that turns a raw context sample
//! into normalized inputs and targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cad::{extract_current, Cad, CadConfig};
use crate::cda::{Cda, CdaConfig};
use crate::data::synth::{CorpusStats, ShapeConfig};
use crate::data::{build_masked_mel_context, select_context, ContextConfig, ContextSample, SelectedContext, MASK_FILL};
use crate::error::{Error, Result};
use crate::nn::{Ctx, FftConfig};
use crate::params::ParamStore;
use crate::prosody::{Cpp, CppConfig};
use crate::tensor::Matrix;

/// Architecture hyperparameters. Every encoder and decoder stack shares the
/// same FFT block shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_lip: usize,
    pub d_face: usize,
    pub n_mels: usize,
    pub frame_n: usize,
    pub dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub dropout: f64,
    pub aligner_heads: usize,
    pub upsample_kernel: usize,
    pub predictor_kernel: usize,
    pub predictor_dropout: f64,
    pub descriptors: usize,
    pub postnet_dim: usize,
    pub postnet_kernel: usize,
    pub postnet_layers: usize,
    pub postnet_dropout: f64,
}

impl ModelConfig {
    /// Small dimensions that train in seconds on one CPU core.
    pub fn toy(shape: &ShapeConfig, frame_n: usize) -> Self {
        Self {
            vocab: shape.vocab,
            d_lip: shape.d_lip,
            d_face: shape.d_face,
            n_mels: shape.n_mels,
            frame_n,
            dim: 16,
            n_heads: 2,
            n_blocks: 1,
            ffn_dim: 32,
            ffn_kernel: 3,
            dropout: 0.0,
            aligner_heads: 2,
            upsample_kernel: 2 * frame_n,
            predictor_kernel: 3,
            predictor_dropout: 0.0,
            descriptors: 8,
            postnet_dim: 16,
            postnet_kernel: 5,
            postnet_layers: 5,
            postnet_dropout: 0.0,
        }
    }

    /// Full-size model: D=256, six FFT blocks per stack, eight heads.
    pub fn paper(shape: &ShapeConfig, frame_n: usize) -> Self {
        Self {
            dim: 256,
            n_heads: 8,
            n_blocks: 6,
            ffn_dim: 1024,
            ffn_kernel: 9,
            dropout: 0.1,
            aligner_heads: 8,
            predictor_dropout: 0.5,
            descriptors: 32,
            postnet_dim: 512,
            postnet_dropout: 0.5,
            ..Self::toy(shape, frame_n)
        }
    }

    pub fn fft(&self) -> FftConfig {
        FftConfig {
            n_blocks: self.n_blocks,
            dim: self.dim,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            ffn_kernel: self.ffn_kernel,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.fft().validate().map_err(Error::InvalidConfig)?;
        for (name, v) in [
            ("vocab", self.vocab),
            ("d_lip", self.d_lip),
            ("d_face", self.d_face),
            ("n_mels", self.n_mels),
            ("frame_n", self.frame_n),
            ("descriptors", self.descriptors),
            ("postnet_dim", self.postnet_dim),
            ("predictor_kernel", self.predictor_kernel),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.aligner_heads == 0 || self.dim % self.aligner_heads != 0 {
            return bad(format!("dim {} not divisible by aligner_heads {}", self.dim, self.aligner_heads));
        }
        if self.upsample_kernel < self.frame_n {
            return bad(format!("upsample_kernel {} must be >= n={}", self.upsample_kernel, self.frame_n));
        }
        if self.postnet_kernel % 2 == 0 || self.predictor_kernel % 2 == 0 {
            return bad("postnet and predictor kernels must be odd".into());
        }
        if self.postnet_layers < 2 {
            return bad("postnet_layers must be at least 2".into());
        }
        for (name, r) in [
            ("dropout", self.dropout),
            ("predictor_dropout", self.predictor_dropout),
            ("postnet_dropout", self.postnet_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name}={r} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn cda(&self) -> CdaConfig {
        CdaConfig {
            vocab: self.vocab,
            d_lip: self.d_lip,
            text_encoder: self.fft(),
            lip_encoder: self.fft(),
            aligner_heads: self.aligner_heads,
            frame_n: self.frame_n,
            upsample_kernel: self.upsample_kernel,
        }
    }

    pub fn cpp(&self) -> CppConfig {
        CppConfig {
            d_face: self.d_face,
            dim: self.dim,
            predictor_kernel: self.predictor_kernel,
            predictor_dropout: self.predictor_dropout,
            frame_n: self.frame_n,
        }
    }

    pub fn cad(&self) -> CadConfig {
        CadConfig {
            n_mels: self.n_mels,
            decoder: self.fft(),
            descriptors: self.descriptors,
            postnet_dim: self.postnet_dim,
            postnet_kernel: self.postnet_kernel,
            postnet_layers: self.postnet_layers,
            postnet_dropout: self.postnet_dropout,
        }
    }
}

/// Component ablations applied at forward time. Dropping a neighbour
/// sentence altogether is a [`ContextConfig`] setting instead.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Neighbour phonemes are withheld from the aligner's text side.
    pub no_cda_context: bool,
    /// Prosody predictor bypassed; its decoder features become zeros.
    pub no_cpp: bool,
    /// Masked mel context replaced by the mask value everywhere.
    pub no_cad_context: bool,
}

/// One sample ready for the model: selected, normalized, with targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Selection with `mel_gt` in normalized log-mel space.
    pub sel: SelectedContext,
    pub masked: Matrix,
    /// Normalized energy, `T_mel × 1`.
    pub energy: Matrix,
    /// Normalized log-F0, `T_mel × 1`; zero on unvoiced frames.
    pub pitch: Matrix,
    pub voiced: Vec<bool>,
}

impl Prepared {
    pub fn new(sample: &ContextSample, ctx: &ContextConfig, stats: &CorpusStats) -> Self {
        let raw = select_context(sample, ctx);
        let sel = raw.with_mel(stats.normalize_mel(&raw.mel_gt));
        let masked = build_masked_mel_context(&sel);
        let energy = Matrix::column(&raw.energy.iter().map(|&e| stats.normalize_energy(e)).collect::<Vec<_>>());
        let pitch = Matrix::column(&raw.pitch.iter().map(|&p| stats.normalize_pitch(p)).collect::<Vec<_>>());
        Self { voiced: raw.voiced.clone(), sel, masked, energy, pitch }
    }

    pub fn n_mel_frames(&self) -> usize {
        self.sel.n_mel_frames()
    }
}

/// Tape handles for one forward pass.
pub struct Forward {
    pub coarse: Var,
    pub refined: Var,
    /// Absent when the prosody predictor is ablated.
    pub energy: Option<Var>,
    pub pitch: Option<Var>,
    pub alignment: Vec<Var>,
    pub alpha_aro: Option<Var>,
    pub alpha_val: Option<Var>,
    pub gather_weights: Var,
    pub distribute_weights: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub cda: Cda,
    pub cpp: Cpp,
    pub cad: Cad,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cda = Cda::new(&mut store, cfg.cda(), &mut rng);
        let cpp = Cpp::new(&mut store, cfg.cpp(), &mut rng);
        let cad = Cad::new(&mut store, cfg.cad(), &mut rng);
        Ok(Self { cfg, store, cda, cpp, cad })
    }

    pub fn forward(&self, cx: &mut Ctx, prep: &Prepared, ablation: Ablation) -> Result<Forward> {
        let sel = &prep.sel;
        if sel.mel_gt.cols() != self.cfg.n_mels {
            return Err(Error::DimMismatch(format!("sample has {} mel bins, model {}", sel.mel_gt.cols(), self.cfg.n_mels)));
        }
        let aligned = self.cda.run(cx, sel, !ablation.no_cda_context)?;
        let t_mel = cx.tape.shape(aligned.t_lip_pho).0;
        if t_mel != sel.n_mel_frames() {
            return Err(Error::LengthMismatch(format!("aligner produced {t_mel} rows for {} mel frames", sel.n_mel_frames())));
        }

        let (context, energy, pitch, alpha_aro, alpha_val) = if ablation.no_cpp {
            let zeros = cx.input(Matrix::zeros(t_mel, 2 * self.cfg.dim));
            (zeros, None, None, None, None)
        } else {
            let p = self.cpp.run(cx, &sel.face, aligned.t_lip_pho)?;
            (p.context, Some(p.energy), Some(p.pitch), Some(p.alpha_aro), Some(p.alpha_val))
        };

        let features = cx.tape.concat_cols(&[aligned.t_lip_pho, context]);
        let masked = if ablation.no_cad_context {
            Matrix::filled(t_mel, self.cfg.n_mels, MASK_FILL)
        } else {
            prep.masked.clone()
        };
        let out = self.cad.run(cx, features, &masked)?;
        Ok(Forward {
            coarse: out.coarse,
            refined: out.refined,
            energy,
            pitch,
            alignment: aligned.attention,
            alpha_aro,
            alpha_val,
            gather_weights: out.dab.gather_weights,
            distribute_weights: out.dab.distribute_weights,
        })
    }

    /// Normalized mel of the current sentence.
    pub fn synthesize(&self, prep: &Prepared, ablation: Ablation) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut cx = Ctx::eval(&mut tape, &self.store);
        let f = self.forward(&mut cx, prep, ablation)?;
        extract_current(cx.value(f.refined), &prep.sel.bounds)
    }
}
