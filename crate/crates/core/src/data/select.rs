use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{ContextSample, FrameRateConfig, SentenceBundle, MASK_FILL};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// How much of the neighbouring sentences to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    /// Maximum number of phonemes taken from each neighbouring sentence.
    pub k: usize,
    pub use_prev: bool,
    pub use_fol: bool,
}

impl ContextConfig {
    pub fn new(k: usize) -> Result<Self> {
        let cfg = Self { k, use_prev: true, use_fol: true };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("context length K must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { k: 50, use_prev: true, use_fol: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Previous = 0,
    Current = 1,
    Following = 2,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Previous, Segment::Current, Segment::Following];
}

/// Half-open ranges of each segment along the phoneme, video-frame and
/// mel-frame axes of a concatenated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBounds {
    pub phonemes: [Range<usize>; 3],
    pub frames: [Range<usize>; 3],
    pub mels: [Range<usize>; 3],
}

impl SegmentBounds {
    fn from_lengths(p: [usize; 3], f: [usize; 3], m: [usize; 3]) -> Self {
        fn ranges(l: [usize; 3]) -> [Range<usize>; 3] {
            [0..l[0], l[0]..l[0] + l[1], l[0] + l[1]..l[0] + l[1] + l[2]]
        }
        Self { phonemes: ranges(p), frames: ranges(f), mels: ranges(m) }
    }

    pub fn phonemes(&self, s: Segment) -> Range<usize> {
        self.phonemes[s as usize].clone()
    }

    pub fn frames(&self, s: Segment) -> Range<usize> {
        self.frames[s as usize].clone()
    }

    pub fn mels(&self, s: Segment) -> Range<usize> {
        self.mels[s as usize].clone()
    }
}

/// The concatenated `{previous selected, current, following selected}`
/// sequences fed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedContext {
    pub phonemes: Vec<usize>,
    pub lip: Matrix,
    pub face: Matrix,
    /// Ground-truth mels for the whole concatenation.
    pub mel_gt: Matrix,
    pub voiced: Vec<bool>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub bounds: SegmentBounds,
    pub frame_cfg: FrameRateConfig,
}

impl SelectedContext {
    pub fn n_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    pub fn n_frames(&self) -> usize {
        self.lip.rows()
    }

    pub fn n_mel_frames(&self) -> usize {
        self.mel_gt.rows()
    }

    pub fn segment_phonemes(&self, s: Segment) -> &[usize] {
        &self.phonemes[self.bounds.phonemes(s)]
    }

    /// The current sentence as a stand-alone bundle.
    pub fn current_bundle(&self) -> SentenceBundle {
        let f = self.bounds.frames(Segment::Current);
        let m = self.bounds.mels(Segment::Current);
        SentenceBundle {
            phonemes: self.segment_phonemes(Segment::Current).to_vec(),
            lip_feats: self.lip.slice_rows(f.start, f.end),
            face_feats: self.face.slice_rows(f.start, f.end),
            mel: self.mel_gt.slice_rows(m.start, m.end),
            voiced: self.voiced[m.clone()].to_vec(),
            pitch: self.pitch[m.clone()].to_vec(),
            energy: self.energy[m].to_vec(),
        }
    }

    /// Same context with the mel targets replaced (e.g. by their normalized form).
    pub fn with_mel(&self, mel: Matrix) -> SelectedContext {
        assert_eq!(mel.shape(), self.mel_gt.shape(), "replacement mel must keep the shape");
        SelectedContext { mel_gt: mel, ..self.clone() }
    }
}

/// Number of phonemes and video frames kept from a context sentence of
/// `t_phon` phonemes and `t_frames` frames under limit `k`.
///
/// Frames follow the kept phoneme fraction, rounded half up in integer
/// arithmetic and clamped to `[1, t_frames]` whenever at least one phoneme is kept.
pub fn context_extent(t_phon: usize, t_frames: usize, k: usize) -> (usize, usize) {
    let kept = k.min(t_phon);
    if kept == 0 || t_frames == 0 {
        return (kept, 0);
    }
    if kept == t_phon {
        return (kept, t_frames);
    }
    let frames = (2 * kept * t_frames + t_phon) / (2 * t_phon);
    (kept, frames.clamp(1, t_frames))
}

struct Piece<'a> {
    bundle: &'a SentenceBundle,
    phon: Range<usize>,
    frames: Range<usize>,
    mels: Range<usize>,
}

fn tail_piece<'a>(b: &'a SentenceBundle, k: usize, n: usize) -> Piece<'a> {
    let (kp, kf) = context_extent(b.n_phonemes(), b.n_frames(), k);
    let (tp, tf, tm) = (b.n_phonemes(), b.n_frames(), b.n_mels_frames());
    Piece { bundle: b, phon: tp - kp..tp, frames: tf - kf..tf, mels: tm - n * kf..tm }
}

fn head_piece<'a>(b: &'a SentenceBundle, k: usize, n: usize) -> Piece<'a> {
    let (kp, kf) = context_extent(b.n_phonemes(), b.n_frames(), k);
    Piece { bundle: b, phon: 0..kp, frames: 0..kf, mels: 0..n * kf }
}

fn whole_piece(b: &SentenceBundle) -> Piece<'_> {
    Piece { bundle: b, phon: 0..b.n_phonemes(), frames: 0..b.n_frames(), mels: 0..b.n_mels_frames() }
}

/// Keeps the last `K` phonemes of the previous sentence, all of the current
/// one and the first `K` of the following one, with their video and mel
/// frames, and concatenates them.
pub fn select_context(sample: &ContextSample, cfg: &ContextConfig) -> SelectedContext {
    let n = sample.frame_cfg.n();
    let cur = &sample.current;
    let prev = sample.previous.as_ref().filter(|_| cfg.use_prev).map(|b| tail_piece(b, cfg.k, n));
    let fol = sample.following.as_ref().filter(|_| cfg.use_fol).map(|b| head_piece(b, cfg.k, n));
    let pieces: Vec<Option<Piece>> = vec![prev, Some(whole_piece(cur)), fol];

    let lens = |f: fn(&Piece) -> usize| -> [usize; 3] {
        let mut out = [0; 3];
        for (o, p) in out.iter_mut().zip(&pieces) {
            *o = p.as_ref().map_or(0, f);
        }
        out
    };
    let bounds = SegmentBounds::from_lengths(
        lens(|p| p.phon.len()),
        lens(|p| p.frames.len()),
        lens(|p| p.mels.len()),
    );

    let present: Vec<&Piece> = pieces.iter().flatten().collect();
    let rows = |m: fn(&SentenceBundle) -> &Matrix, r: fn(&Piece) -> Range<usize>| -> Matrix {
        let parts: Vec<Matrix> = present.iter().map(|p| m(p.bundle).slice_rows(r(p).start, r(p).end)).collect();
        let refs: Vec<&Matrix> = parts.iter().collect();
        Matrix::concat_rows(&refs, m(cur).cols())
    };

    SelectedContext {
        phonemes: present.iter().flat_map(|p| p.bundle.phonemes[p.phon.clone()].iter().copied()).collect(),
        lip: rows(|b| &b.lip_feats, |p| p.frames.clone()),
        face: rows(|b| &b.face_feats, |p| p.frames.clone()),
        mel_gt: rows(|b| &b.mel, |p| p.mels.clone()),
        voiced: present.iter().flat_map(|p| p.bundle.voiced[p.mels.clone()].iter().copied()).collect(),
        pitch: present.iter().flat_map(|p| p.bundle.pitch[p.mels.clone()].iter().copied()).collect(),
        energy: present.iter().flat_map(|p| p.bundle.energy[p.mels.clone()].iter().copied()).collect(),
        bounds,
        frame_cfg: sample.frame_cfg,
    }
}

/// `{M_prev, MASK, M_fol}`: ground-truth context rows with the current
/// sentence overwritten by [`MASK_FILL`].
pub fn build_masked_mel_context(sel: &SelectedContext) -> Matrix {
    let mut m = sel.mel_gt.clone();
    for r in sel.bounds.mels(Segment::Current) {
        m.row_mut(r).fill(MASK_FILL);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(t: usize, frames_per_phoneme: usize, n: usize, tag: f64) -> SentenceBundle {
        let tv = t * frames_per_phoneme;
        let tm = tv * n;
        SentenceBundle {
            phonemes: (0..t).map(|i| i % 7).collect(),
            lip_feats: Matrix::from_vec(tv, 1, (0..tv).map(|i| tag + i as f64).collect()),
            face_feats: Matrix::from_vec(tv, 1, (0..tv).map(|i| -(tag + i as f64)).collect()),
            mel: Matrix::from_vec(tm, 2, (0..tm * 2).map(|i| tag + i as f64 * 0.5).collect()),
            voiced: vec![true; tm],
            pitch: vec![100.0; tm],
            energy: vec![1.0; tm],
        }
    }

    fn sample(tp: Option<usize>, tc: usize, tf: Option<usize>) -> ContextSample {
        let frame_cfg = FrameRateConfig::standard();
        ContextSample {
            previous: tp.map(|t| bundle(t, 2, 4, 1000.0)),
            current: bundle(tc, 2, 4, 2000.0),
            following: tf.map(|t| bundle(t, 2, 4, 3000.0)),
            frame_cfg,
        }
    }

    #[test]
    fn short_previous_sentence_is_taken_whole() {
        let s = sample(Some(43), 10, None);
        let sel = select_context(&s, &ContextConfig::new(50).unwrap());
        assert_eq!(sel.bounds.phonemes(Segment::Previous), 0..43);
        assert_eq!(sel.segment_phonemes(Segment::Previous), &s.previous.as_ref().unwrap().phonemes[..]);
    }

    #[test]
    fn long_previous_sentence_keeps_last_k() {
        let s = sample(Some(120), 10, None);
        let sel = select_context(&s, &ContextConfig::new(50).unwrap());
        let prev = s.previous.as_ref().unwrap();
        // 1-based 71..=120 is 0-based 70..120
        assert_eq!(sel.segment_phonemes(Segment::Previous), &prev.phonemes[70..120]);
        // 50 of 120 phonemes over 240 frames keeps the last 100 frames.
        assert_eq!(sel.bounds.frames(Segment::Previous).len(), 100);
        assert_eq!(sel.lip.row(0)[0], prev.lip_feats.row(140)[0]);
        assert_eq!(sel.bounds.mels(Segment::Previous).len(), 400);
    }

    #[test]
    fn disabled_contexts_reduce_to_current() {
        let s = sample(Some(12), 9, Some(30));
        let cfg = ContextConfig { k: 50, use_prev: false, use_fol: false };
        let sel = select_context(&s, &cfg);
        assert_eq!(sel.phonemes, s.current.phonemes);
        assert_eq!(sel.lip, s.current.lip_feats);
        assert_eq!(sel.mel_gt, s.current.mel);
        assert!(sel.bounds.phonemes(Segment::Previous).is_empty());
        assert!(sel.bounds.mels(Segment::Following).is_empty());
        assert_eq!(sel.current_bundle(), s.current);
    }

    #[test]
    fn mask_zeroes_current_only() {
        let s = sample(Some(5), 4, Some(6));
        let sel = select_context(&s, &ContextConfig::new(3).unwrap());
        let m = build_masked_mel_context(&sel);
        let cur = sel.bounds.mels(Segment::Current);
        for r in 0..m.rows() {
            if cur.contains(&r) {
                assert!(m.row(r).iter().all(|&v| v == MASK_FILL));
            } else {
                assert_eq!(m.row(r), sel.mel_gt.row(r));
            }
        }
        let alone = select_context(&sample(None, 4, None), &ContextConfig::new(3).unwrap());
        assert!(build_masked_mel_context(&alone).data().iter().all(|&v| v == MASK_FILL));
    }

    #[test]
    fn extent_rounds_and_clamps() {
        assert_eq!(context_extent(10, 20, 50), (10, 20));
        assert_eq!(context_extent(10, 20, 5), (5, 10));
        assert_eq!(context_extent(60, 20, 1), (1, 1));
        assert_eq!(context_extent(8, 5, 3), (3, 2));
        assert_eq!(context_extent(4, 10, 1), (1, 3)); // 2.5 rounds up
    }
}
