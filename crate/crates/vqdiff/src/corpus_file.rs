//! Binary corpus of labelled pianoroll segments.
//!
//! Layout, little-endian: magic `VQDC`, version `u32`, frame rate `f64`,
//! segment frames `u32`, label count `u32`, each label as `u32` length plus
//! UTF-8, item count `u32`, then per item a `u32` label and the pianoroll
//! cells bit-packed LSB first in `Pianoroll::cells` order.

use std::path::Path;

use vqdiff_core::music::{Corpus, Pianoroll, PITCHES};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VQDC";
pub const VERSION: u32 = 1;

pub fn encode(corpus: &Corpus, frame_rate: f64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&frame_rate.to_le_bytes());
    let frames = corpus.segment_frames().unwrap_or(0);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.num_labels() as u32).to_le_bytes());
    for name in corpus.label_names() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for (roll, label) in corpus.items() {
        out.extend_from_slice(&(*label as u32).to_le_bytes());
        let mut packed = vec![0u8; roll.cells().len().div_ceil(8)];
        for (i, _) in roll.cells().iter().enumerate().filter(|(_, &on)| on) {
            packed[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&packed);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Returns the corpus and its frame rate.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Corpus, f64), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a VQDC corpus".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported corpus version {version}"));
    }
    let frame_rate = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let frames = r.u32()? as usize;
    let labels = r.u32()? as usize;
    let mut names = Vec::new();
    for _ in 0..labels {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "label name is not UTF-8".to_string())?;
        names.push(name.to_owned());
    }
    let mut corpus = Corpus::new(names);
    let count = r.u32()? as usize;
    let cells = PITCHES * frames;
    for _ in 0..count {
        let label = r.u32()? as usize;
        let packed = r.take(cells.div_ceil(8))?;
        let bits = (0..cells).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        let roll = Pianoroll::from_cells(frames, frame_rate, bits).map_err(|e| e.to_string())?;
        corpus.push(roll, label).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((corpus, frame_rate))
}

pub fn save(path: &Path, corpus: &Corpus, frame_rate: f64) -> Result<()> {
    std::fs::write(path, encode(corpus, frame_rate)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(Corpus, f64)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}
