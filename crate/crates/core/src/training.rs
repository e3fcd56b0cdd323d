//! Losses, Adam, and the two-stage training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::ContextConfig;
use crate::error::{Error, Result};
use crate::model::{Ablation, Forward, Model, Prepared};
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// The three objectives and their sum, `l_sum = l_energy + l_pitch + l_mel`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_energy: f64,
    pub l_pitch: f64,
    pub l_mel: f64,
    pub l_sum: f64,
}

impl LossBreakdown {
    pub fn new(l_energy: f64, l_pitch: f64, l_mel: f64) -> Self {
        Self { l_energy, l_pitch, l_mel, l_sum: l_energy + l_pitch + l_mel }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_energy, self.l_pitch, self.l_mel, self.l_sum].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(avg(|l| l.l_energy), avg(|l| l.l_pitch), avg(|l| l.l_mel))
    }
}

/// Predicted tracks for [`compute_losses`]. Absent energy/pitch (prosody
/// predictor ablated) contribute zero.
pub struct Predictions<'a> {
    pub energy: Option<&'a [f64]>,
    pub pitch: Option<&'a [f64]>,
    pub mel: &'a Matrix,
}

pub struct Targets<'a> {
    pub energy: &'a [f64],
    pub pitch: &'a [f64],
    pub voiced: &'a [bool],
    pub mel: &'a Matrix,
}

/// Energy MSE, voiced-only pitch MSE and mel MAE over the whole
/// concatenated range.
pub fn compute_losses(pred: &Predictions, target: &Targets) -> Result<LossBreakdown> {
    let t = target.mel.rows();
    if pred.mel.shape() != target.mel.shape() {
        return Err(Error::LengthMismatch(format!("mel {:?} vs target {:?}", pred.mel.shape(), target.mel.shape())));
    }
    for (name, len) in [("energy", target.energy.len()), ("pitch", target.pitch.len()), ("voiced", target.voiced.len())]
        .into_iter()
        .chain(pred.energy.map(|e| ("predicted energy", e.len())))
        .chain(pred.pitch.map(|p| ("predicted pitch", p.len())))
    {
        if len != t {
            return Err(Error::LengthMismatch(format!("{name} has {len} frames, mel has {t}")));
        }
    }
    let l_energy = pred.energy.map_or(0.0, |e| {
        e.iter().zip(target.energy).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.max(1) as f64
    });
    let l_pitch = pred.pitch.map_or(0.0, |p| {
        let voiced = target.voiced.iter().filter(|&&v| v).count();
        if voiced == 0 {
            return 0.0;
        }
        p.iter()
            .zip(target.pitch)
            .zip(target.voiced)
            .filter(|(_, &v)| v)
            .map(|((a, b), _)| (a - b) * (a - b))
            .sum::<f64>()
            / voiced as f64
    });
    let l_mel = if target.mel.is_empty() {
        0.0
    } else {
        pred.mel.data().iter().zip(target.mel.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.mel.len() as f64
    };
    Ok(LossBreakdown::new(l_energy, l_pitch, l_mel))
}

/// Multipliers on the three objectives in the optimized loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub energy: f64,
    pub pitch: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { energy: 1.0, pitch: 1.0, mel: 1.0 }
    }
}

/// Loss nodes recorded on the tape for one forward pass.
pub struct LossVars {
    pub energy: Option<Var>,
    pub pitch: Option<Var>,
    pub mel: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown::new(get(self.energy), get(self.pitch), tape.value(self.mel).item())
    }
}

pub fn loss_on_tape(cx: &mut Ctx, out: &Forward, prep: &Prepared, weights: LossWeights) -> LossVars {
    let all = vec![true; prep.n_mel_frames()];
    let energy = out.energy.map(|e| cx.tape.masked_mse(e, &prep.energy, &all));
    let pitch = out.pitch.map(|p| cx.tape.masked_mse(p, &prep.pitch, &prep.voiced));
    let mel = cx.tape.mean_abs_err(out.refined, &prep.sel.mel_gt);
    let mut total = cx.tape.scale(mel, weights.mel);
    for (v, w) in [(energy, weights.energy), (pitch, weights.pitch)] {
        if let Some(v) = v {
            let s = cx.tape.scale(v, w);
            total = cx.tape.add(total, s);
        }
    }
    LossVars { energy, pitch, mel, total }
}

/// Loss of one sample in evaluation mode.
pub fn eval_loss(model: &Model, prep: &Prepared, ablation: Ablation) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut cx = Ctx::eval(&mut tape, &model.store);
    let out = model.forward(&mut cx, prep, ablation)?;
    let vars = loss_on_tape(&mut cx, &out, prep, LossWeights::default());
    Ok(vars.breakdown(cx.tape))
}

/// Mean evaluation loss over a set of samples.
pub fn eval_loss_mean(model: &Model, preps: &[Prepared], ablation: Ablation) -> Result<LossBreakdown> {
    let items = preps.iter().map(|p| eval_loss(model, p, ablation)).collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&items))
}

/// Loss and parameter gradients of one sample.
pub fn loss_and_grads(
    model: &Model,
    prep: &Prepared,
    ablation: Ablation,
    weights: LossWeights,
    dropout_seed: Option<u64>,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new();
    let mut cx = match dropout_seed {
        Some(seed) => Ctx::train(&mut tape, &model.store, seed),
        None => Ctx::eval(&mut tape, &model.store),
    };
    let out = model.forward(&mut cx, prep, ablation)?;
    let vars = loss_on_tape(&mut cx, &out, prep, weights);
    let grads = tape.backward(vars.total, model.store.len());
    Ok((vars.breakdown(&tape), grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias correction; moments are kept per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g.data()[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g.data()[j] * g.data()[j];
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss_weights: LossWeights,
    /// Write a checkpoint every this many steps (0: only at stage end).
    pub save_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            stage1_steps: 1000,
            stage2_steps: 1000,
            clip_norm: Some(1.0),
            loss_weights: LossWeights::default(),
            save_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && self.batch_size > 0
            && self.clip_norm.map_or(true, |c| c > 0.0)
            && [self.loss_weights.energy, self.loss_weights.pitch, self.loss_weights.mel].iter().all(|&w| w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training settings: {self:?}")))
        }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub stage: u8,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serializes")
    }
}

/// Model, optimizer state and step counter of a run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub ablation: Ablation,
    pub stage: u8,
    pub step: u64,
    pub log: Vec<LossRecord>,
    order: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, ablation: Ablation) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(cfg.adam, &model.store);
        Ok(Self { model, adam, cfg, ablation, stage: 1, step: 0, log: Vec::new(), order: Vec::new() })
    }

    /// Resumes from a checkpoint of a model with the same architecture.
    pub fn from_checkpoint(model: Model, ckpt: &Checkpoint, cfg: TrainConfig, ablation: Ablation) -> Result<Self> {
        let mut t = Self::new(model, cfg, ablation)?;
        ckpt.restore(&mut t.model, Some(&mut t.adam))?;
        t.stage = ckpt.stage;
        t.step = ckpt.step;
        Ok(t)
    }

    /// Starts stage 2 from a stage-1 checkpoint. Every stored parameter
    /// must match the rebuilt model by name and shape.
    pub fn stage2_from(ckpt: &Checkpoint, cfg: TrainConfig, ablation: Ablation) -> Result<Self> {
        if ckpt.stage != 1 {
            return Err(Error::IncompatibleCheckpoint(format!("expected a stage-1 checkpoint, found stage {}", ckpt.stage)));
        }
        let model = ckpt.instantiate()?;
        let mut t = Self::from_checkpoint(model, ckpt, cfg, ablation)?;
        t.begin_stage2();
        Ok(t)
    }

    /// Switches to fine-tuning with context. Parameters and optimizer
    /// moments carry over; the step counter keeps running.
    pub fn begin_stage2(&mut self) {
        self.stage = 2;
        self.order.clear();
    }

    fn batch(&mut self, n_samples: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        while out.len() < self.cfg.batch_size.min(n_samples) {
            if self.order.is_empty() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.step << 8) ^ self.stage as u64);
                self.order = (0..n_samples).collect();
                self.order.shuffle(&mut rng);
            }
            out.push(self.order.pop().expect("refilled above"));
        }
        out
    }

    /// One optimizer step on a batch; returns the batch-mean loss. On a
    /// non-finite loss the parameters are left untouched.
    pub fn train_step(&mut self, data: &[Prepared]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("no training samples".into()));
        }
        let batch = self.batch(data.len());
        let mut total = Gradients::empty(self.model.store.len());
        let mut losses = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            let seed = self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (self.step << 16) ^ slot as u64;
            let (loss, grads) = loss_and_grads(&self.model, &data[i], self.ablation, self.cfg.loss_weights, Some(seed))?;
            losses.push(loss);
            total.accumulate(&grads);
        }
        let loss = LossBreakdown::mean(&losses);
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected { step: self.step + 1 });
        }
        total.scale(1.0 / batch.len() as f64);
        if let Some(c) = self.cfg.clip_norm {
            let norm = total.global_norm();
            if !norm.is_finite() {
                return Err(Error::DivergenceDetected { step: self.step + 1 });
            }
            if norm > c {
                total.scale(c / norm);
            }
        }
        self.adam.step(&mut self.model.store, &total);
        self.step += 1;
        self.log.push(LossRecord { step: self.step, stage: self.stage, loss });
        Ok(loss)
    }

    /// Runs `steps` optimizer steps, calling `on_save` every `save_every`
    /// steps.
    pub fn run(
        &mut self,
        data: &[Prepared],
        steps: u64,
        mut on_save: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            self.train_step(data)?;
            if self.cfg.save_every > 0 && self.step % self.cfg.save_every == 0 {
                on_save(self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, Some(&self.adam), self.stage, self.step, &self.cfg)
    }
}

/// Prepares every sample of a corpus under one context setting.
pub fn prepare_all(corpus: &crate::data::synth::Corpus, ctx: &ContextConfig) -> Vec<Prepared> {
    corpus.samples.iter().map(|s| Prepared::new(s, ctx, &corpus.stats)).collect()
}

/// Stage 1 on single sentences, then stage 2 on context samples (stage 1
/// skipped when `two_stage` is false). Returns the trainer after both.
pub fn train_two_stage(
    model: Model,
    single: &[Prepared],
    context: &[Prepared],
    cfg: TrainConfig,
    ablation: Ablation,
    two_stage: bool,
) -> Result<Trainer> {
    let mut t = Trainer::new(model, cfg, ablation)?;
    if two_stage {
        t.run(single, cfg.stage1_steps, |_| Ok(()))?;
    }
    t.begin_stage2();
    t.run(context, cfg.stage2_steps, |_| Ok(()))?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_predictions_have_zero_loss() {
        let mel = Matrix::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]);
        let e = [0.1, 0.2];
        let p = [0.3, 0.0];
        let v = [true, false];
        let l = compute_losses(
            &Predictions { energy: Some(&e), pitch: Some(&p), mel: &mel },
            &Targets { energy: &e, pitch: &p, voiced: &v, mel: &mel },
        )
        .unwrap();
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn constant_mel_offset_is_unit_mae() {
        let target = Matrix::from_vec(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let pred = target.map(|x| x + 1.0);
        let z = [0.0; 3];
        let l = compute_losses(
            &Predictions { energy: None, pitch: None, mel: &pred },
            &Targets { energy: &z, pitch: &z, voiced: &[true; 3], mel: &target },
        )
        .unwrap();
        assert_eq!(l.l_mel, 1.0);
        assert_eq!(l.l_sum, 1.0);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let mel = Matrix::zeros(2, 1);
        let e = [0.0; 3];
        let r = compute_losses(
            &Predictions { energy: Some(&e), pitch: None, mel: &mel },
            &Targets { energy: &[0.0; 2], pitch: &[0.0; 2], voiced: &[true; 2], mel: &mel },
        );
        assert!(matches!(r, Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &store);
        let mut g = Gradients::empty(1);
        g.set(id, Matrix::from_vec(1, 2, vec![3.0, -0.5]));
        adam.step(&mut store, &g);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }
}
