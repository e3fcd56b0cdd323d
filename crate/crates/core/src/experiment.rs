//! Corpus-level synthesis, evaluation and the K sweep, with their
//! tab-separated reports.

use std::fmt::Write as _;

use crate::data::synth::Corpus;
use crate::data::ContextConfig;
use crate::error::{Error, Result};
use crate::metrics::{pitch_from_mel, PitchComparison};
use crate::model::{Ablation, Model, Prepared};
use crate::prosody::ProsodyTrack;
use crate::tensor::Matrix;
use crate::training::{eval_loss_mean, prepare_all, train_two_stage, TrainConfig};

/// Raw-scale mel of the current sentence of sample `index`.
pub fn synthesize_sample(model: &Model, corpus: &Corpus, index: usize, ctx: &ContextConfig, ablation: Ablation) -> Result<Matrix> {
    let sample = corpus
        .samples
        .get(index)
        .ok_or_else(|| Error::InvalidConfig(format!("sample index {index} out of range")))?;
    let prep = Prepared::new(sample, ctx, &corpus.stats);
    Ok(corpus.stats.denormalize_mel(&model.synthesize(&prep, ablation)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    /// NaN when the reference and hypothesis share no voiced frame.
    pub gpe: f64,
    pub ffe: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean_defined(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Means over samples; GPE skips samples where it is undefined.
    pub fn mean(&self) -> (f64, f64) {
        (mean_defined(self.rows.iter().map(|r| r.gpe)), mean_defined(self.rows.iter().map(|r| r.ffe)))
    }

    /// Columns `id gpe ffe`, one row per sample, then a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tgpe\tffe\n");
        for r in &self.rows {
            writeln!(s, "{}\t{:.4}\t{:.4}", r.id, r.gpe, r.ffe).expect("write to string");
        }
        let (g, f) = self.mean();
        writeln!(s, "mean\t{g:.4}\t{f:.4}").expect("write to string");
        s
    }
}

pub fn compare_tracks(reference: &ProsodyTrack, hypothesis: &ProsodyTrack) -> Result<(f64, f64)> {
    let c = PitchComparison::new(reference, hypothesis)?;
    let gpe = match c.gpe() {
        Ok(v) => v,
        Err(Error::NoVoicedOverlap) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((gpe, c.ffe()?))
}

/// GPE/FFE of every sample of `corpus`: the pitch decoded from the
/// synthesized current-sentence mel against the ground-truth track.
pub fn evaluate(model: &Model, corpus: &Corpus, ctx: &ContextConfig, ablation: Ablation) -> Result<EvalReport> {
    let map = corpus.stats.pitch_map.as_ref();
    let mut rows = Vec::with_capacity(corpus.samples.len());
    for (i, sample) in corpus.samples.iter().enumerate() {
        let mel = synthesize_sample(model, corpus, i, ctx, ablation)?;
        let hyp = pitch_from_mel(&mel, map)?;
        let reference = ProsodyTrack::pitch(sample.current.pitch.clone());
        let (gpe, ffe) = compare_tracks(&reference, &hyp)?;
        rows.push(EvalRow { id: Corpus::sample_id(i), gpe, ffe });
    }
    Ok(EvalReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepRow {
    pub k: usize,
    pub gpe: f64,
    pub ffe: f64,
    /// Held-out evaluation loss.
    pub l_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSweepReport {
    pub rows: Vec<KSweepRow>,
}

impl KSweepReport {
    pub const HEADER: &'static str = "k\tgpe\tffe\tl_sum";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            writeln!(s, "{}\t{:.4}\t{:.4}\t{:.6}", r.k, r.gpe, r.ffe, r.l_sum).expect("write to string");
        }
        s
    }
}

/// Trains one model per `K` from the same initialization and evaluates each
/// on `held_out` with that `K`.
#[allow(clippy::too_many_arguments)]
pub fn k_sweep(
    model: &Model,
    train: &Corpus,
    held_out: &Corpus,
    base: &ContextConfig,
    k_list: &[usize],
    cfg: TrainConfig,
    ablation: Ablation,
    two_stage: bool,
) -> Result<KSweepReport> {
    if k_list.is_empty() {
        return Err(Error::InvalidConfig("K list is empty".into()));
    }
    let single = prepare_all(&train.sentences(), base);
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let ctx = ContextConfig { k, ..*base };
        ctx.validate()?;
        let context = prepare_all(train, &ctx);
        let trained = train_two_stage(model.clone(), &single, &context, cfg, ablation, two_stage)?;
        let report = evaluate(&trained.model, held_out, &ctx, ablation)?;
        let (gpe, ffe) = report.mean();
        let l_sum = eval_loss_mean(&trained.model, &prepare_all(held_out, &ctx), ablation)?.l_sum;
        rows.push(KSweepRow { k, gpe, ffe, l_sum });
    }
    Ok(KSweepReport { rows })
}
