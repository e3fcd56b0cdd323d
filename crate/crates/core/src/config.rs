//! Run configuration: a preset, optionally overridden by a TOML file whose
//! sections mirror [`RunConfig`].
//!
//! ```toml
//! preset = "toy"            # or "paper"
//! two_stage = true
//! k_list = [10, 20, 30]
//!
//! [data]
//! seed = 7
//! count = 48
//! held_out = 8
//! sr = 16000
//! hs = 160
//! fps = 25
//! [data.shape]
//! n_mels = 20
//!
//! [model]
//! dim = 32
//!
//! [train]
//! batch_size = 4
//! stage1_steps = 300
//! [train.adam]
//! lr = 0.001
//!
//! [context]
//! k = 50
//! use_prev = true
//! use_fol = true
//!
//! [ablation]
//! no_cpp = false
//! ```
//!
//! Any key may be omitted; omitted keys keep the preset value. The model
//! keys `vocab`, `d_lip`, `d_face`, `n_mels` and `frame_n` follow the data
//! section unless set explicitly, in which case they must agree with it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::ShapeConfig;
use crate::data::{ContextConfig, FrameRateConfig};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::training::{AdamConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (expected toy or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    /// Trailing samples reserved for evaluation.
    pub held_out: usize,
    pub sr: u32,
    pub hs: u32,
    pub fps: u32,
    pub shape: ShapeConfig,
}

impl DataConfig {
    pub fn frame(&self) -> Result<FrameRateConfig> {
        FrameRateConfig::derive(self.sr, self.hs, self.fps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub context: ContextConfig,
    pub ablation: Ablation,
    pub two_stage: bool,
    pub k_list: Vec<usize>,
}

const DERIVED_MODEL_KEYS: [&str; 5] = ["vocab", "d_lip", "d_face", "n_mels", "frame_n"];

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let frame = FrameRateConfig::standard();
        let (data, model, train) = match preset {
            Preset::Toy => {
                let shape = ShapeConfig::toy();
                let data = DataConfig { seed: 0, count: 24, held_out: 4, sr: frame.sr, hs: frame.hs, fps: frame.fps, shape };
                let train = TrainConfig {
                    adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
                    batch_size: 4,
                    stage1_steps: 300,
                    stage2_steps: 300,
                    ..TrainConfig::default()
                };
                (data, ModelConfig::toy(&shape, frame.n()), train)
            }
            Preset::Paper => {
                let shape = ShapeConfig::default();
                let data = DataConfig { seed: 0, count: 512, held_out: 64, sr: frame.sr, hs: frame.hs, fps: frame.fps, shape };
                let train = TrainConfig { stage1_steps: 100_000, stage2_steps: 100_000, ..TrainConfig::default() };
                (data, ModelConfig::paper(&shape, frame.n()), train)
            }
        };
        Self {
            preset,
            data,
            model,
            train,
            context: ContextConfig::default(),
            ablation: Ablation::default(),
            two_stage: true,
            k_list: vec![10, 20, 30, 40, 50, 60],
        }
    }

    /// Preset defaults overridden by `text`. The preset is taken from
    /// `preset` when given, else from the file's `preset` key, else toy.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        let preset = match (preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(other)) => return Err(Error::InvalidConfig(format!("preset must be a string, got {other}"))),
            (None, None) => Preset::Toy,
        };
        let base = Self::preset(preset);
        let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
        merge(&mut merged, file.clone());
        merged.insert("preset".into(), toml::Value::String(preset_name(preset).into()));

        let explicit_model = file.get("model").and_then(toml::Value::as_table).cloned().unwrap_or_default();
        let data: DataConfig = merged["data"]
            .clone()
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("[data]: {e}")))?;
        let frame = data.frame()?;
        let derived = [
            data.shape.vocab as i64,
            data.shape.d_lip as i64,
            data.shape.d_face as i64,
            data.shape.n_mels as i64,
            frame.n() as i64,
        ];
        let model = merged.get_mut("model").and_then(toml::Value::as_table_mut).expect("model table");
        for (key, value) in DERIVED_MODEL_KEYS.iter().zip(derived) {
            match explicit_model.get(*key) {
                Some(v) if v.as_integer() != Some(value) => {
                    return Err(Error::InvalidConfig(format!("model.{key} = {v} contradicts the data section ({value})")))
                }
                _ => {
                    model.insert((*key).into(), toml::Value::Integer(value));
                }
            }
        }
        if !explicit_model.contains_key("upsample_kernel") && frame.n() != base.model.frame_n {
            model.insert("upsample_kernel".into(), toml::Value::Integer(2 * frame.n() as i64));
        }
        let cfg: RunConfig =
            toml::Value::Table(merged).try_into().map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Option<Preset>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.shape.validate()?;
        let frame = self.data.frame()?;
        if self.data.count == 0 || self.data.held_out >= self.data.count {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= held_out ({}) < count ({})",
                self.data.held_out, self.data.count
            )));
        }
        self.model.validate()?;
        let m = &self.model;
        let s = &self.data.shape;
        if (m.vocab, m.d_lip, m.d_face, m.n_mels, m.frame_n) != (s.vocab, s.d_lip, s.d_face, s.n_mels, frame.n()) {
            return Err(Error::InvalidConfig("model input sizes disagree with the data section".into()));
        }
        self.train.validate()?;
        self.context.validate()?;
        if self.k_list.iter().any(|&k| k == 0) {
            return Err(Error::InvalidConfig("k_list entries must be at least 1".into()));
        }
        Ok(())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Toy => "toy",
        Preset::Paper => "paper",
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_toy_preset() {
        assert_eq!(RunConfig::from_toml("", None).unwrap(), RunConfig::preset(Preset::Toy));
    }

    #[test]
    fn paper_preset_records_published_sizes() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!((c.model.dim, c.model.n_blocks, c.model.n_heads), (256, 6, 8));
        assert_eq!((c.train.adam.lr, c.train.batch_size, c.context.k), (2e-4, 8, 50));
        c.validate().unwrap();
    }

    #[test]
    fn file_overrides_nested_keys() {
        let c = RunConfig::from_toml("[train.adam]\nlr = 0.01\n[data.shape]\nn_mels = 12\n", None).unwrap();
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.adam.beta2, 0.98);
        assert_eq!(c.model.n_mels, 12);
    }

    #[test]
    fn frame_ratio_flows_into_the_model() {
        let c = RunConfig::from_toml("[data]\nfps = 50\n", None).unwrap();
        assert_eq!((c.model.frame_n, c.model.upsample_kernel), (2, 4));
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "[model]\nn_mels = 7\n",
            "[model]\nbogus = 1\n",
            "preset = \"huge\"\n",
            "[data]\nfps = 30\n",
            "this is not toml",
            "[train]\nbatch_size = 0\n",
        ] {
            assert!(RunConfig::from_toml(text, None).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::preset(Preset::Paper);
        assert_eq!(RunConfig::from_toml(&c.to_toml(), None).unwrap(), c);
    }
}
