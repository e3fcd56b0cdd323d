//! Gross pitch error and F0 frame error over pitch/voicing tracks.

use crate::data::synth::PitchMap;
use crate::error::{Error, Result};
use crate::prosody::ProsodyTrack;
use crate::tensor::Matrix;

/// Relative deviation above which a both-voiced frame counts as a gross
/// pitch error. Exactly this deviation is not an error.
pub const GROSS_ERROR_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameClass {
    BothUnvoiced,
    BothVoiced,
    /// Both voiced and off by more than the threshold.
    PitchError,
    VoicingError,
}

/// Frame-by-frame comparison of a hypothesis track against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchComparison {
    pub classes: Vec<FrameClass>,
}

impl PitchComparison {
    pub fn new(reference: &ProsodyTrack, hypothesis: &ProsodyTrack) -> Result<Self> {
        if reference.len() != hypothesis.len() {
            return Err(Error::LengthMismatch(format!(
                "reference has {} frames, hypothesis {}",
                reference.len(),
                hypothesis.len()
            )));
        }
        let classes = (0..reference.len())
            .map(|t| match (reference.is_voiced(t), hypothesis.is_voiced(t)) {
                (false, false) => FrameClass::BothUnvoiced,
                (true, true) => {
                    let r = reference.values[t];
                    if ((hypothesis.values[t] - r) / r).abs() > GROSS_ERROR_THRESHOLD {
                        FrameClass::PitchError
                    } else {
                        FrameClass::BothVoiced
                    }
                }
                _ => FrameClass::VoicingError,
            })
            .collect();
        Ok(Self { classes })
    }

    fn count(&self, f: impl Fn(FrameClass) -> bool) -> usize {
        self.classes.iter().filter(|&&c| f(c)).count()
    }

    pub fn both_voiced(&self) -> usize {
        self.count(|c| matches!(c, FrameClass::BothVoiced | FrameClass::PitchError))
    }

    pub fn pitch_errors(&self) -> usize {
        self.count(|c| c == FrameClass::PitchError)
    }

    pub fn voicing_errors(&self) -> usize {
        self.count(|c| c == FrameClass::VoicingError)
    }

    pub fn gpe(&self) -> Result<f64> {
        match self.both_voiced() {
            0 => Err(Error::NoVoicedOverlap),
            n => Ok(100.0 * self.pitch_errors() as f64 / n as f64),
        }
    }

    pub fn ffe(&self) -> Result<f64> {
        match self.classes.len() {
            0 => Err(Error::EmptyTrack),
            t => Ok(100.0 * (self.voicing_errors() + self.pitch_errors()) as f64 / t as f64),
        }
    }
}

/// Percentage of both-voiced frames whose pitch deviates from the reference
/// by more than 20 %.
pub fn gpe(reference: &ProsodyTrack, hypothesis: &ProsodyTrack) -> Result<f64> {
    PitchComparison::new(reference, hypothesis)?.gpe()
}

/// Percentage of frames with a voicing decision error or a gross pitch error.
pub fn ffe(reference: &ProsodyTrack, hypothesis: &ProsodyTrack) -> Result<f64> {
    PitchComparison::new(reference, hypothesis)?.ffe()
}

/// Decodes the pitch track embedded in a raw (denormalized) mel.
pub fn pitch_from_mel(mel: &Matrix, map: Option<&PitchMap>) -> Result<ProsodyTrack> {
    let map = map.ok_or(Error::MissingPitchMap)?;
    if map.voicing_bin.max(map.pitch_bin) >= mel.cols() {
        return Err(Error::DimMismatch(format!("pitch map bins exceed {} mel bins", mel.cols())));
    }
    let (voiced, values) = (0..mel.rows()).map(|r| map.decode(mel.row(r))).unzip();
    Ok(ProsodyTrack { values, voiced: Some(voiced) })
}
