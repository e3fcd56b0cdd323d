//! Multimodal samples: per-sentence bundles, context samples, the
//! audio-visual frame-ratio law, context selection and masking.

mod select;
pub mod store;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use select::{build_masked_mel_context, context_extent, select_context, ContextConfig, Segment, SegmentBounds, SelectedContext};

/// Value written over the current sentence in the masked mel context
/// (normalized log-mel space).
pub const MASK_FILL: f64 = 0.0;

/// Audio/video rates and the derived number of mel frames per video frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRateConfig {
    pub sr: u32,
    pub hs: u32,
    pub fps: u32,
    n: u32,
}

impl FrameRateConfig {
    /// `n = (sr / hs) / fps`, which must be a positive integer.
    pub fn derive(sr: u32, hs: u32, fps: u32) -> Result<Self> {
        if sr == 0 || hs == 0 || fps == 0 {
            return Err(Error::InvalidConfig(format!("frame rates must be positive (sr={sr}, hs={hs}, fps={fps})")));
        }
        let denom = hs as u64 * fps as u64;
        if sr as u64 % denom != 0 {
            return Err(Error::NonIntegerRatio(sr as f64 / hs as f64 / fps as f64));
        }
        let n = (sr as u64 / denom) as u32;
        if n == 0 {
            return Err(Error::NonIntegerRatio(sr as f64 / hs as f64 / fps as f64));
        }
        Ok(Self { sr, hs, fps, n })
    }

    /// 16 kHz audio, 25 fps video, hop 160: `n = 4`.
    pub fn standard() -> Self {
        Self::derive(16_000, 160, 25).expect("standard rates are integral")
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn mel_len(&self, video_frames: usize) -> usize {
        self.n() * video_frames
    }

    /// Re-derives `n` after deserialization.
    pub fn validated(self) -> Result<Self> {
        let fresh = Self::derive(self.sr, self.hs, self.fps)?;
        if fresh.n != self.n {
            return Err(Error::InvalidConfig(format!("stored n={} but rates give n={}", self.n, fresh.n)));
        }
        Ok(fresh)
    }
}

pub fn derive_frame_ratio(sr: u32, hs: u32, fps: u32) -> Result<FrameRateConfig> {
    FrameRateConfig::derive(sr, hs, fps)
}

/// Everything known about one sentence of a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBundle {
    pub phonemes: Vec<usize>,
    /// `T_v × D_lip`
    pub lip_feats: Matrix,
    /// `T_v × D_face`
    pub face_feats: Matrix,
    /// `T_mel × n_mels`, raw log-mel.
    pub mel: Matrix,
    pub voiced: Vec<bool>,
    /// Hz, 0 where unvoiced.
    pub pitch: Vec<f64>,
    /// Per-frame L2 norm of the raw mel row.
    pub energy: Vec<f64>,
}

impl SentenceBundle {
    pub fn n_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    pub fn n_frames(&self) -> usize {
        self.lip_feats.rows()
    }

    pub fn n_mels_frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self, frame: &FrameRateConfig, vocab: Option<usize>) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSample(m));
        let tv = self.n_frames();
        if self.phonemes.is_empty() || tv == 0 {
            return bad("sentence has no phonemes or no video frames".into());
        }
        if let Some(v) = vocab {
            if let Some(&id) = self.phonemes.iter().find(|&&id| id >= v) {
                return Err(Error::UnknownPhonemeId { id, vocab: v });
            }
        }
        if self.face_feats.rows() != tv {
            return bad(format!("face frames {} != lip frames {tv}", self.face_feats.rows()));
        }
        let t_mel = self.mel.rows();
        if t_mel != frame.mel_len(tv) {
            return bad(format!("T_mel {t_mel} != n ({}) x T_v ({tv})", frame.n()));
        }
        if self.voiced.len() != t_mel || self.pitch.len() != t_mel || self.energy.len() != t_mel {
            return bad("prosody track lengths differ from T_mel".into());
        }
        for t in 0..t_mel {
            if (self.pitch[t] > 0.0) != self.voiced[t] {
                return bad(format!("frame {t}: pitch {} inconsistent with voicing {}", self.pitch[t], self.voiced[t]));
            }
            if !self.pitch[t].is_finite() || !self.energy[t].is_finite() || self.energy[t] < 0.0 {
                return bad(format!("frame {t}: non-finite or negative prosody value"));
            }
        }
        if !self.mel.all_finite() || !self.lip_feats.all_finite() || !self.face_feats.all_finite() {
            return bad("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Previous, current and following sentences of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample {
    pub previous: Option<SentenceBundle>,
    pub current: SentenceBundle,
    pub following: Option<SentenceBundle>,
    pub frame_cfg: FrameRateConfig,
}

impl ContextSample {
    pub fn validate(&self, vocab: Option<usize>) -> Result<()> {
        let bundles = [self.previous.as_ref(), Some(&self.current), self.following.as_ref()];
        let mut dims = None;
        for b in bundles.into_iter().flatten() {
            b.validate(&self.frame_cfg, vocab)?;
            let d = (b.lip_feats.cols(), b.face_feats.cols(), b.mel.cols());
            match dims {
                None => dims = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::InvalidSample(format!("feature widths differ across sentences: {prev:?} vs {d:?}")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The current sentence alone, as used for single-sentence training.
    pub fn without_context(&self) -> ContextSample {
        ContextSample { previous: None, current: self.current.clone(), following: None, frame_cfg: self.frame_cfg }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_ratio_examples() {
        assert_eq!(derive_frame_ratio(16_000, 160, 25).unwrap().n(), 4);
        assert_eq!(derive_frame_ratio(16_000, 640, 25).unwrap().n(), 1);
        match derive_frame_ratio(16_000, 200, 25) {
            Err(Error::NonIntegerRatio(r)) => assert!((r - 3.2).abs() < 1e-12),
            other => panic!("expected NonIntegerRatio, got {other:?}"),
        }
        assert!(derive_frame_ratio(0, 160, 25).is_err());
        assert!(derive_frame_ratio(16_000, 20_000, 25).is_err());
    }
}
