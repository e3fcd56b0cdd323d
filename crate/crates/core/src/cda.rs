//! Context duration aligner: phoneme and lip encoders, cross-modal
//! text-video attention, and transposed-convolution expansion to mel rate.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data::{Segment, SelectedContext};
use crate::error::{Error, Result};
use crate::nn::{add_positions, attend, ConvTranspose1d, Ctx, FftConfig, FftStack, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Cross-modal attention weights, `T_v × T_p`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix(pub Matrix);

impl AlignmentMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn max_row_deviation(&self) -> f64 {
        self.0.row_sums().iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Element-wise mean over heads.
    pub fn mean(heads: &[AlignmentMatrix]) -> AlignmentMatrix {
        let mut acc = heads[0].0.clone();
        for h in &heads[1..] {
            acc.add_assign(&h.0);
        }
        AlignmentMatrix(acc.scale(1.0 / heads.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CdaConfig {
    pub vocab: usize,
    pub d_lip: usize,
    pub text_encoder: FftConfig,
    pub lip_encoder: FftConfig,
    /// 1 gives the plain `softmax(H_lip H_phoᵀ / √d) H_pho` aligner with no
    /// output projection.
    pub aligner_heads: usize,
    pub frame_n: usize,
    pub upsample_kernel: usize,
}

/// Aligner output for one context: lip-rate and mel-rate features plus the
/// per-head attention maps.
pub struct CdaOutput {
    pub h_lip_pho: Var,
    pub t_lip_pho: Var,
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Cda {
    pub cfg: CdaConfig,
    phoneme_embedding: ParamId,
    text_encoder: FftStack,
    lip_proj: Linear,
    lip_encoder: FftStack,
    aligner_out: Option<Linear>,
    pub upsample: ConvTranspose1d,
}

/// Multi-head form of `softmax(H_lip H_phoᵀ / √d_h) H_pho`, applied per
/// column block; returns the concatenated head outputs and the weights.
pub fn cross_modal_attention(tape: &mut Tape, h_lip: Var, h_pho: Var, heads: usize) -> (Var, Vec<Var>) {
    let d = tape.shape(h_lip).1;
    let hd = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (q, kv) = if heads == 1 {
            (h_lip, h_pho)
        } else {
            (tape.slice_cols(h_lip, lo, hi), tape.slice_cols(h_pho, lo, hi))
        };
        let (o, w) = attend(tape, q, kv, kv);
        outs.push(o);
        weights.push(w);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    (joined, weights)
}

/// Parameter-free text-video alignment on plain matrices.
pub fn align_text_video(h_lip: &Matrix, h_pho: &Matrix, heads: usize) -> Result<(Matrix, Vec<AlignmentMatrix>)> {
    if h_lip.cols() != h_pho.cols() {
        return Err(Error::DimMismatch(format!("lip width {} != phoneme width {}", h_lip.cols(), h_pho.cols())));
    }
    if heads == 0 || h_lip.cols() % heads != 0 {
        return Err(Error::DimMismatch(format!("width {} not divisible by {heads} heads", h_lip.cols())));
    }
    if h_pho.rows() == 0 {
        return Err(Error::DimMismatch("no phonemes to attend to".into()));
    }
    let mut tape = Tape::new();
    let l = tape.input(h_lip.clone());
    let p = tape.input(h_pho.clone());
    let (out, weights) = cross_modal_attention(&mut tape, l, p, heads);
    let maps = weights.iter().map(|&w| AlignmentMatrix(tape.value(w).clone())).collect();
    Ok((tape.value(out).clone(), maps))
}

impl Cda {
    pub fn new(store: &mut ParamStore, cfg: CdaConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.text_encoder.dim;
        let phoneme_embedding = store.add("cda.phoneme_embedding", Matrix::randn(cfg.vocab, d, 0.3, rng));
        let text_encoder = FftStack::new(store, "cda.text_encoder", &cfg.text_encoder, rng);
        let lip_proj = Linear::new(store, "cda.lip_proj", cfg.d_lip, d, true, rng);
        let lip_encoder = FftStack::new(store, "cda.lip_encoder", &cfg.lip_encoder, rng);
        let aligner_out = (cfg.aligner_heads > 1).then(|| Linear::new(store, "cda.aligner_out", d, d, true, rng));
        let upsample = ConvTranspose1d::new(store, "cda.upsample", d, cfg.frame_n, cfg.upsample_kernel, rng);
        Self { cfg, phoneme_embedding, text_encoder, lip_proj, lip_encoder, aligner_out, upsample }
    }

    pub fn dim(&self) -> usize {
        self.cfg.text_encoder.dim
    }

    /// `H_pho`, `T_p × D`.
    pub fn encode_phonemes(&self, cx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(Error::UnknownPhonemeId { id, vocab: self.cfg.vocab });
        }
        if ids.is_empty() {
            return Err(Error::DimMismatch("empty phoneme sequence".into()));
        }
        let table = cx.p(self.phoneme_embedding);
        let e = cx.tape.embed(table, ids);
        let e = add_positions(cx, e);
        Ok(self.text_encoder.forward(cx, e))
    }

    /// `H_lip`, `T_v × D`.
    pub fn encode_lips(&self, cx: &mut Ctx, lip: &Matrix) -> Result<Var> {
        if lip.rows() == 0 {
            return Err(Error::DimMismatch("T_v=0: no lip frames".into()));
        }
        if lip.cols() != self.cfg.d_lip {
            return Err(Error::DimMismatch(format!("lip feature width {} != {}", lip.cols(), self.cfg.d_lip)));
        }
        let x = cx.input(lip.clone());
        let x = self.lip_proj.forward(cx, x);
        let x = add_positions(cx, x);
        Ok(self.lip_encoder.forward(cx, x))
    }

    pub fn align(&self, cx: &mut Ctx, h_lip: Var, h_pho: Var) -> (Var, Vec<Var>) {
        let (joined, weights) = cross_modal_attention(cx.tape, h_lip, h_pho, self.cfg.aligner_heads);
        let out = match &self.aligner_out {
            Some(proj) => proj.forward(cx, joined),
            None => joined,
        };
        (out, weights)
    }

    /// `T_lip,pho`, exactly `n·T_v` rows.
    pub fn expand_to_mel(&self, cx: &mut Ctx, h_lip_pho: Var) -> Var {
        self.upsample.forward(cx, h_lip_pho)
    }

    /// Full aligner pass over a concatenated context. With
    /// `text_context == false` the neighbouring phonemes are withheld from
    /// the text side while every lip frame is kept.
    pub fn run(&self, cx: &mut Ctx, sel: &SelectedContext, text_context: bool) -> Result<CdaOutput> {
        if sel.frame_cfg.n() != self.cfg.frame_n {
            return Err(Error::DimMismatch(format!(
                "sample frame ratio n={} but model built for n={}",
                sel.frame_cfg.n(),
                self.cfg.frame_n
            )));
        }
        let ids = if text_context { &sel.phonemes[..] } else { sel.segment_phonemes(Segment::Current) };
        let h_pho = self.encode_phonemes(cx, ids)?;
        let h_lip = self.encode_lips(cx, &sel.lip)?;
        let (h_lip_pho, attention) = self.align(cx, h_lip, h_pho);
        let t_lip_pho = self.expand_to_mel(cx, h_lip_pho);
        Ok(CdaOutput { h_lip_pho, t_lip_pho, attention })
    }
}
