//! Seeded synthetic corpora of repeating motifs, one pitch register per label.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::music::{Corpus, Pianoroll, DEFAULT_FRAME_RATE, PITCHES};

/// Generator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub labels: usize,
    pub segments_per_label: usize,
    pub frames: usize,
    /// Frames per motif repetition; onsets fall on multiples of `period / 4`.
    pub period: usize,
    /// Distinct motifs per label.
    pub motifs_per_label: usize,
    /// Lowest pitch of label 0; each later label sits one `register_gap` higher.
    pub base_pitch: usize,
    pub register_gap: usize,
    /// Width of every register in semitones.
    pub register_span: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            labels: 3,
            segments_per_label: 24,
            frames: 64,
            period: 16,
            motifs_per_label: 3,
            base_pitch: 36,
            register_gap: 24,
            register_span: 12,
        }
    }
}

/// `(pitch offset, onset frame, length)` triples within one period.
type Motif = Vec<(usize, usize, usize)>;

fn random_motif<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Motif {
    let step = (cfg.period / 4).max(1);
    let mut notes = Vec::new();
    for beat in 0..4 {
        let voices = if rng.random_bool(0.3) { 2 } else { 1 };
        for _ in 0..voices {
            let pitch = rng.random_range(0..cfg.register_span);
            let len = rng.random_range(1..=step);
            notes.push((pitch, beat * step, len));
        }
    }
    notes
}

/// Builds `labels * segments_per_label` segments, interleaved by label.
pub fn motif_corpus<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Corpus> {
    let top = cfg.base_pitch + (cfg.labels.saturating_sub(1)) * cfg.register_gap + cfg.register_span;
    if cfg.labels == 0 || cfg.period == 0 || cfg.motifs_per_label == 0 || top > PITCHES {
        return Err(Error::Config(format!("synthetic corpus does not fit: {cfg:?}")));
    }
    let motifs: Vec<Vec<Motif>> = (0..cfg.labels)
        .map(|_| (0..cfg.motifs_per_label).map(|_| random_motif(cfg, rng)).collect())
        .collect();
    let names = (0..cfg.labels).map(|i| format!("style{i}")).collect();
    let mut corpus = Corpus::new(names);
    for _ in 0..cfg.segments_per_label {
        for (label, family) in motifs.iter().enumerate() {
            let motif = &family[rng.random_range(0..family.len())];
            let low = cfg.base_pitch + label * cfg.register_gap;
            let mut roll = Pianoroll::new(cfg.frames, DEFAULT_FRAME_RATE)?;
            for rep in 0..cfg.frames.div_ceil(cfg.period) {
                for &(p, onset, len) in motif {
                    for f in rep * cfg.period + onset..(rep * cfg.period + onset + len).min(cfg.frames) {
                        roll.set(low + p, f, true);
                    }
                }
            }
            corpus.push(roll, label)?;
        }
    }
    Ok(corpus)
}
