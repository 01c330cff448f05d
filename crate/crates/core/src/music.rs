//! Timed notes, binary pianorolls, and labelled corpora of fixed-length segments.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PITCHES: usize = 128;
pub const DEFAULT_FRAME_RATE: f64 = 32.0;
/// Velocity assigned to notes recovered from a pianoroll.
pub const GENERATED_VELOCITY: u8 = 80;
/// Default corpus window, in frames.
pub const DEFAULT_SEGMENT_FRAMES: usize = 1408;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoteEvent {
    pub pitch: u8,
    /// Seconds.
    pub onset: f64,
    /// Seconds, strictly positive.
    pub duration: f64,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: f64, duration: f64, velocity: u8) -> Result<Self> {
        let ev = Self {
            pitch,
            onset,
            duration,
            velocity,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch > 127 {
            return Err(Error::Config(format!("pitch {} out of range", self.pitch)));
        }
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(Error::Config(format!("onset {} must be finite and >= 0", self.onset)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config(format!("duration {} must be > 0", self.duration)));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(Error::Config(format!("velocity {} out of 1..=127", self.velocity)));
        }
        Ok(())
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Binary 128 x F grid; row = MIDI pitch, column = time frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pianoroll {
    frames: usize,
    frame_rate: f64,
    cells: Vec<bool>,
}

// Slack for frame-boundary arithmetic so that `k / rate` lands on frame `k`.
const FRAME_EPS: f64 = 1e-9;

impl Pianoroll {
    pub fn new(frames: usize, frame_rate: f64) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("pianoroll needs at least one frame".into()));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(Error::Config(format!("frame rate {frame_rate} must be > 0")));
        }
        Ok(Self {
            frames,
            frame_rate,
            cells: vec![false; PITCHES * frames],
        })
    }

    /// Builds a roll from row-major `[pitch][frame]` cells.
    pub fn from_cells(frames: usize, frame_rate: f64, cells: Vec<bool>) -> Result<Self> {
        let mut roll = Self::new(frames, frame_rate)?;
        if cells.len() != PITCHES * frames {
            return Err(Error::Shape(format!(
                "expected {} cells, got {}",
                PITCHES * frames,
                cells.len()
            )));
        }
        roll.cells = cells;
        Ok(roll)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.frame_rate
    }

    pub fn get(&self, pitch: usize, frame: usize) -> bool {
        self.cells[pitch * self.frames + frame]
    }

    pub fn set(&mut self, pitch: usize, frame: usize, on: bool) {
        self.cells[pitch * self.frames + frame] = on;
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn active_cells(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Cells as 0.0/1.0 in `[pitch][frame]` order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }

    /// Frames `[start, start + len)` as a new roll.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::Shape(format!(
                "slice {start}..{} outside {} frames",
                start + len,
                self.frames
            )));
        }
        let mut out = Self::new(len, self.frame_rate)?;
        for p in 0..PITCHES {
            let src = &self.cells[p * self.frames + start..p * self.frames + start + len];
            out.cells[p * len..(p + 1) * len].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Non-overlapping windows of `len` frames; a shorter tail is dropped.
    pub fn windows(&self, len: usize) -> Result<Vec<Self>> {
        if len == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        (0..self.frames / len).map(|i| self.slice(i * len, len)).collect()
    }

    /// Max-pools along time by `factor` (a trailing partial window is pooled too).
    pub fn max_pool_time(&self, factor: usize) -> Vec<f64> {
        let factor = factor.max(1);
        let out_frames = self.frames.div_ceil(factor);
        let mut out = vec![0.0; PITCHES * out_frames];
        for p in 0..PITCHES {
            for f in 0..self.frames {
                if self.get(p, f) {
                    out[p * out_frames + f / factor] = 1.0;
                }
            }
        }
        out
    }
}

fn frame_index(seconds: f64, rate: f64) -> usize {
    let x = libm::ceil(seconds * rate - FRAME_EPS);
    if x <= 0.0 {
        0
    } else {
        x as usize
    }
}

/// Cell `(p, f)` is on iff a note of pitch `p` sounds at time `f / frame_rate`.
/// Notes past `frame_count` are truncated.
pub fn to_pianoroll(events: &[NoteEvent], frame_rate: f64, frame_count: usize) -> Result<Pianoroll> {
    let mut roll = Pianoroll::new(frame_count, frame_rate)?;
    for ev in events {
        let start = frame_index(ev.onset, frame_rate).min(frame_count);
        let end = frame_index(ev.end(), frame_rate).min(frame_count);
        for f in start..end {
            roll.set(ev.pitch as usize, f, true);
        }
    }
    Ok(roll)
}

/// Each maximal run of on-cells becomes one note at [`GENERATED_VELOCITY`],
/// sorted by onset then pitch.
pub fn from_pianoroll(roll: &Pianoroll) -> Vec<NoteEvent> {
    let rate = roll.frame_rate();
    let mut events = Vec::new();
    for p in 0..PITCHES {
        let mut f = 0;
        while f < roll.frames() {
            if roll.get(p, f) {
                let start = f;
                while f < roll.frames() && roll.get(p, f) {
                    f += 1;
                }
                events.push(NoteEvent {
                    pitch: p as u8,
                    onset: start as f64 / rate,
                    duration: (f - start) as f64 / rate,
                    velocity: GENERATED_VELOCITY,
                });
            } else {
                f += 1;
            }
        }
    }
    sort_events(&mut events);
    events
}

pub fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.duration.total_cmp(&b.duration))
    });
}

/// Labelled fixed-length segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    items: Vec<(Pianoroll, usize)>,
    label_names: Vec<String>,
}

impl Corpus {
    pub fn new(label_names: Vec<String>) -> Self {
        Self {
            items: Vec::new(),
            label_names,
        }
    }

    /// Adds a segment, enforcing a known label and a shared frame count and rate.
    pub fn push(&mut self, roll: Pianoroll, label: usize) -> Result<()> {
        if label >= self.label_names.len() {
            return Err(Error::Config(format!(
                "label {label} out of {} labels",
                self.label_names.len()
            )));
        }
        if let Some((first, _)) = self.items.first() {
            if first.frames() != roll.frames() || first.frame_rate() != roll.frame_rate() {
                return Err(Error::Shape(format!(
                    "segment has {} frames at {} fps, corpus uses {} at {}",
                    roll.frames(),
                    roll.frame_rate(),
                    first.frames(),
                    first.frame_rate()
                )));
            }
        }
        self.items.push((roll, label));
        Ok(())
    }

    /// Windows a whole piece into segments of `segment_frames`; returns how many were added.
    pub fn push_piece(&mut self, roll: &Pianoroll, label: usize, segment_frames: usize) -> Result<usize> {
        let windows = roll.windows(segment_frames)?;
        let n = windows.len();
        for w in windows {
            self.push(w, label)?;
        }
        Ok(n)
    }

    pub fn items(&self) -> &[(Pianoroll, usize)] {
        &self.items
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn segment_frames(&self) -> Option<usize> {
        self.items.first().map(|(r, _)| r.frames())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_names.len()];
        for (_, l) in &self.items {
            counts[*l] += 1;
        }
        counts
    }

    /// Splits into (train, held-out) keeping every `stride`-th item of each label for held-out.
    pub fn split_every(&self, stride: usize) -> (Corpus, Corpus) {
        let mut train = Corpus::new(self.label_names.clone());
        let mut held = Corpus::new(self.label_names.clone());
        let mut seen = vec![0usize; self.label_names.len()];
        for (roll, label) in &self.items {
            let target = if stride > 0 && seen[*label] % stride == stride - 1 {
                &mut held
            } else {
                &mut train
            };
            target.items.push((roll.clone(), *label));
            seen[*label] += 1;
        }
        (train, held)
    }
}
