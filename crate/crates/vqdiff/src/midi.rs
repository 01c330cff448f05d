//! Standard MIDI File reading (formats 0 and 1) and writing (format 0).
//!
//! Notes are paired first-in first-out per `(channel, pitch)`, so two
//! overlapping notes of the same pitch on one channel cannot round-trip
//! unambiguously. Sustain pedal and other controllers are ignored.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;
use vqdiff_core::music::{sort_events, NoteEvent};

/// Tempo assumed before the first tempo meta-event.
pub const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MidiErrorKind {
    #[error("missing MThd header")]
    NotMidi,
    #[error("truncated data")]
    Truncated,
    #[error("unsupported format {0}")]
    UnsupportedFormat(u16),
    #[error("data byte with no running status")]
    RunningStatusUnderflow,
    #[error("variable-length quantity longer than 4 bytes")]
    BadVlq,
    #[error("zero ticks per quarter note")]
    BadDivision,
    #[error("invalid event: {0}")]
    InvalidEvent(&'static str),
    #[error("track of {0} bytes does not fit the length field")]
    TrackTooLong(usize),
}

/// A parse or write failure at byte `offset` of the file.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct MidiError {
    pub kind: MidiErrorKind,
    pub offset: usize,
}

impl MidiError {
    fn at(kind: MidiErrorKind, offset: usize) -> Self {
        Self { kind, offset }
    }
}

/// A recoverable oddity that was skipped during parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MidiWarning {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoChange {
    pub tick: u64,
    pub micros_per_quarter: u32,
}

/// Timing base of a file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Division {
    TicksPerQuarter(u16),
    /// SMPTE frames per second and ticks per frame.
    Smpte { fps: u8, ticks_per_frame: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub format: u16,
    pub division: Division,
    /// Sorted by onset, then pitch.
    pub events: Vec<NoteEvent>,
    pub tempo_map: Vec<TempoChange>,
    pub warnings: Vec<MidiWarning>,
    /// Seconds to the latest end of track, which may lie past the last note.
    pub length: f64,
}

/// Decodes a variable-length quantity at `pos`; returns the value and the next position.
pub fn read_vlq(bytes: &[u8], pos: usize) -> Result<(u32, usize), MidiError> {
    let mut value: u32 = 0;
    for i in 0..4 {
        let b = *bytes
            .get(pos + i)
            .ok_or(MidiError::at(MidiErrorKind::Truncated, pos + i))?;
        value = (value << 7) | u32::from(b & 0x7f);
        if b & 0x80 == 0 {
            return Ok((value, pos + i + 1));
        }
    }
    Err(MidiError::at(MidiErrorKind::BadVlq, pos))
}

/// Encodes `value` (at most 28 bits) as a variable-length quantity.
pub fn write_vlq(mut value: u32, out: &mut Vec<u8>) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl Cursor<'_> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        if self.pos >= self.end {
            return Err(MidiError::at(MidiErrorKind::Truncated, self.pos));
        }
        self.pos += 1;
        Ok(self.bytes[self.pos - 1])
    }

    fn data(&mut self) -> Result<u8, MidiError> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(MidiError::at(MidiErrorKind::InvalidEvent("status byte where data expected"), at));
        }
        Ok(b)
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let (v, next) = read_vlq(&self.bytes[..self.end], self.pos)?;
        self.pos = next;
        Ok(v)
    }

    fn skip(&mut self, n: usize) -> Result<&[u8], MidiError> {
        if self.end - self.pos < n {
            return Err(MidiError::at(MidiErrorKind::Truncated, self.pos));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

/// A note in ticks, before tempo conversion.
struct TickNote {
    pitch: u8,
    velocity: u8,
    start: u64,
    end: u64,
}

fn parse_track(
    c: &mut Cursor<'_>,
    notes: &mut Vec<TickNote>,
    tempos: &mut Vec<TempoChange>,
    warnings: &mut Vec<MidiWarning>,
) -> Result<u64, MidiError> {
    let mut tick: u64 = 0;
    let mut status: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8, usize)>> = HashMap::new();
    while c.pos < c.end {
        tick += u64::from(c.vlq()?);
        let at = c.pos;
        let first = c.u8()?;
        let (st, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let st = status.ok_or(MidiError::at(MidiErrorKind::RunningStatusUnderflow, at))?;
            (st, Some(first))
        };
        match st {
            0xff => {
                status = None;
                let kind = c.u8()?;
                let len = c.vlq()? as usize;
                let payload = c.skip(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let micros = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if micros == 0 {
                            warnings.push(MidiWarning { offset: at, message: "zero tempo ignored".into() });
                        } else {
                            tempos.push(TempoChange { tick, micros_per_quarter: micros });
                        }
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                status = None;
                let len = c.vlq()? as usize;
                c.skip(len)?;
            }
            0xf1..=0xfe => {
                return Err(MidiError::at(MidiErrorKind::InvalidEvent("system message in track"), at));
            }
            _ => {
                status = Some(st);
                let next = |c: &mut Cursor<'_>, pending: &mut Option<u8>| match pending.take() {
                    Some(b) => Ok(b),
                    None => c.data(),
                };
                let mut pending = first_data;
                let channel = st & 0x0f;
                match st & 0xf0 {
                    0x80 | 0x90 => {
                        let key = next(c, &mut pending)?;
                        let vel = next(c, &mut pending)?;
                        let queue = open.entry((channel, key)).or_default();
                        if st & 0xf0 == 0x90 && vel > 0 {
                            queue.push_back((tick, vel, at));
                        } else if let Some((start, velocity, _)) = queue.pop_front() {
                            if tick > start {
                                notes.push(TickNote { pitch: key, velocity, start, end: tick });
                            } else {
                                warnings.push(MidiWarning {
                                    offset: at,
                                    message: format!("zero-length note {key} skipped"),
                                });
                            }
                        } else {
                            warnings.push(MidiWarning {
                                offset: at,
                                message: format!("note-off for pitch {key} without note-on"),
                            });
                        }
                    }
                    0xc0 | 0xd0 => {
                        next(c, &mut pending)?;
                    }
                    _ => {
                        next(c, &mut pending)?;
                        next(c, &mut pending)?;
                    }
                }
            }
        }
    }
    let mut dangling: Vec<_> = open.into_iter().flat_map(|((_, key), q)| q.into_iter().map(move |n| (key, n))).collect();
    dangling.sort_by_key(|&(_, (_, _, offset))| offset);
    for (key, (start, velocity, offset)) in dangling {
        warnings.push(MidiWarning {
            offset,
            message: format!("note {key} never released; closed at end of track"),
        });
        if tick > start {
            notes.push(TickNote { pitch: key, velocity, start, end: tick });
        }
    }
    Ok(tick)
}

/// Converts ticks to seconds under a sorted tempo map.
struct Clock {
    division: Division,
    /// `(tick, seconds at tick, micros per quarter)` segments.
    segments: Vec<(u64, f64, u32)>,
}

impl Clock {
    fn new(division: Division, tempos: &[TempoChange]) -> Self {
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO)];
        for t in tempos {
            let &(tick0, sec0, tempo0) = segments.last().unwrap();
            let sec = sec0 + Self::span(division, t.tick - tick0, tempo0);
            if t.tick == tick0 {
                segments.last_mut().unwrap().2 = t.micros_per_quarter;
            } else {
                segments.push((t.tick, sec, t.micros_per_quarter));
            }
        }
        Self { division, segments }
    }

    fn span(division: Division, ticks: u64, tempo: u32) -> f64 {
        match division {
            Division::TicksPerQuarter(tpq) => ticks as f64 * f64::from(tempo) * 1e-6 / f64::from(tpq),
            Division::Smpte { fps, ticks_per_frame } => {
                ticks as f64 / (f64::from(fps) * f64::from(ticks_per_frame))
            }
        }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, tempo) = self.segments[i];
        s0 + Self::span(self.division, tick - t0, tempo)
    }
}

/// Parses a format 0 or 1 file. All tracks share one tempo map.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    if bytes.len() < 14 || &bytes[..4] != b"MThd" {
        return Err(MidiError::at(MidiErrorKind::NotMidi, 0));
    }
    let header_len = be_u32(&bytes[4..8]) as usize;
    if header_len < 6 {
        return Err(MidiError::at(MidiErrorKind::Truncated, 4));
    }
    let format = be_u16(&bytes[8..10]);
    if format > 1 {
        return Err(MidiError::at(MidiErrorKind::UnsupportedFormat(format), 8));
    }
    let raw_div = be_u16(&bytes[12..14]);
    let division = if raw_div & 0x8000 != 0 {
        let fps = ((raw_div >> 8) as u8 as i8).wrapping_neg() as u8;
        let ticks_per_frame = (raw_div & 0xff) as u8;
        if fps == 0 || ticks_per_frame == 0 {
            return Err(MidiError::at(MidiErrorKind::BadDivision, 12));
        }
        Division::Smpte { fps, ticks_per_frame }
    } else if raw_div == 0 {
        return Err(MidiError::at(MidiErrorKind::BadDivision, 12));
    } else {
        Division::TicksPerQuarter(raw_div)
    };
    let mut pos = 8usize
        .checked_add(header_len)
        .filter(|&p| p <= bytes.len())
        .ok_or(MidiError::at(MidiErrorKind::Truncated, 4))?;

    let mut notes = Vec::new();
    let mut tempos = Vec::new();
    let mut warnings = Vec::new();
    let mut last_tick = 0u64;
    while pos < bytes.len() {
        if bytes.len() - pos < 8 {
            return Err(MidiError::at(MidiErrorKind::Truncated, pos));
        }
        let len = be_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body = pos + 8;
        if bytes.len() - body < len {
            return Err(MidiError::at(MidiErrorKind::Truncated, pos + 4));
        }
        if &bytes[pos..pos + 4] == b"MTrk" {
            let mut c = Cursor { bytes, pos: body, end: body + len };
            last_tick = last_tick.max(parse_track(&mut c, &mut notes, &mut tempos, &mut warnings)?);
        }
        pos = body + len;
    }
    tempos.sort_by_key(|t| t.tick);
    let clock = Clock::new(division, &tempos);
    let mut events: Vec<NoteEvent> = notes
        .iter()
        .map(|n| {
            let onset = clock.seconds(n.start);
            NoteEvent {
                pitch: n.pitch,
                onset,
                duration: clock.seconds(n.end) - onset,
                velocity: n.velocity,
            }
        })
        .collect();
    sort_events(&mut events);
    Ok(ParsedMidi {
        format,
        division,
        events,
        tempo_map: tempos,
        warnings,
        length: clock.seconds(last_tick),
    })
}

/// Writes a single-track format 0 file at a constant tempo, channel 0.
///
/// Note-offs precede note-ons at the same tick so back-to-back repeats of a
/// pitch survive; every note lasts at least one tick. The track ends at
/// `length` seconds or at the last note-off, whichever is later.
pub fn write_midi(events: &[NoteEvent], length: f64, ticks_per_quarter: u16, tempo: u32) -> Result<Vec<u8>, MidiError> {
    if ticks_per_quarter == 0 || ticks_per_quarter & 0x8000 != 0 {
        return Err(MidiError::at(MidiErrorKind::BadDivision, 12));
    }
    let ticks_per_second = f64::from(ticks_per_quarter) * 1e6 / f64::from(tempo.max(1));
    // (tick, order, status, key, velocity); order puts offs first at equal ticks
    let mut timeline: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(events.len() * 2);
    for (i, ev) in events.iter().enumerate() {
        if ev.validate().is_err() {
            return Err(MidiError::at(MidiErrorKind::InvalidEvent("invalid note event"), i));
        }
        let start = (ev.onset * ticks_per_second).round() as u64;
        let end = ((ev.end() * ticks_per_second).round() as u64).max(start + 1);
        timeline.push((start, 1, 0x90, ev.pitch, ev.velocity.clamp(1, 127)));
        timeline.push((end, 0, 0x80, ev.pitch, 0));
    }
    timeline.sort();

    let mut track = Vec::with_capacity(timeline.len() * 4 + 16);
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&tempo.to_be_bytes()[1..]);
    let mut last = 0u64;
    for &(tick, _, status, key, vel) in &timeline {
        let delta = tick - last;
        if delta >= 1 << 28 {
            return Err(MidiError::at(MidiErrorKind::BadVlq, track.len()));
        }
        write_vlq(delta as u32, &mut track);
        track.extend_from_slice(&[status, key, vel]);
        last = tick;
    }
    let end = if length.is_finite() && length > 0.0 {
        ((length * ticks_per_second).round() as u64).max(last)
    } else {
        last
    };
    if end - last >= 1 << 28 {
        return Err(MidiError::at(MidiErrorKind::BadVlq, track.len()));
    }
    write_vlq((end - last) as u32, &mut track);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);
    let len = u32::try_from(track.len()).map_err(|_| MidiError::at(MidiErrorKind::TrackTooLong(track.len()), 18))?;

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(tracks: &[&[u8]], format: u16, tpq: u16) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&tpq.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    #[test]
    fn vlq_examples() {
        assert_eq!(read_vlq(&[0x81, 0x48], 0).unwrap(), (200, 2));
        assert_eq!(read_vlq(&[0x00], 0).unwrap(), (0, 1));
        assert_eq!(read_vlq(&[0xff, 0xff, 0xff, 0x7f], 0).unwrap(), (0x0fff_ffff, 4));
        assert_eq!(read_vlq(&[0x81, 0x81, 0x81, 0x81, 0x01], 0).unwrap_err().kind, MidiErrorKind::BadVlq);
        assert_eq!(read_vlq(&[0x81], 0).unwrap_err(), MidiError::at(MidiErrorKind::Truncated, 1));
        for v in [0, 1, 127, 128, 200, 16_383, 16_384, 0x0fff_ffff] {
            let mut buf = Vec::new();
            write_vlq(v, &mut buf);
            assert_eq!(read_vlq(&buf, 0).unwrap(), (v, buf.len()));
        }
    }

    #[test]
    fn single_note_file() {
        let track = [
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // tempo 500000
            0x00, 0x90, 60, 100, // note on
            0x83, 0x60, 0x80, 60, 0, // 480 ticks later, note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        let parsed = parse_midi(&file(&[&track], 0, 480)).unwrap();
        assert_eq!(parsed.events, vec![NoteEvent { pitch: 60, onset: 0.0, duration: 0.5, velocity: 100 }]);
        assert_eq!(parsed.tempo_map, vec![TempoChange { tick: 0, micros_per_quarter: 500_000 }]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn empty_file_and_running_status() {
        let parsed = parse_midi(&file(&[&[0x00, 0xff, 0x2f, 0x00]], 0, 96)).unwrap();
        assert!(parsed.events.is_empty());

        // running status with velocity-0 note-on as note-off
        let track = [0x00, 0x90, 64, 90, 0x60, 64, 0, 0x00, 67, 80, 0x60, 67, 0];
        let parsed = parse_midi(&file(&[&track], 0, 96)).unwrap();
        assert_eq!(parsed.events.len(), 2);
        assert_eq!(parsed.events[1].onset, 0.5);
        assert_eq!(parsed.events[1].duration, 0.5);

        let bad = [0x00, 60, 100];
        let err = parse_midi(&file(&[&bad], 0, 96)).unwrap_err();
        assert_eq!(err, MidiError::at(MidiErrorKind::RunningStatusUnderflow, 23));
    }

    #[test]
    fn structural_errors_carry_offsets() {
        assert_eq!(parse_midi(b"RIFF....").unwrap_err().kind, MidiErrorKind::NotMidi);
        let f2 = file(&[], 2, 96);
        assert_eq!(parse_midi(&f2).unwrap_err(), MidiError::at(MidiErrorKind::UnsupportedFormat(2), 8));
        let mut cut = file(&[&[0x00, 0x90, 60, 100, 0x10, 0x80, 60, 0]], 0, 96);
        cut.truncate(cut.len() - 3);
        assert_eq!(parse_midi(&cut).unwrap_err(), MidiError::at(MidiErrorKind::Truncated, 18));
        let short_event = file(&[&[0x00, 0x90, 60]], 0, 96);
        assert_eq!(parse_midi(&short_event).unwrap_err().kind, MidiErrorKind::Truncated);
    }

    #[test]
    fn orphan_note_off_is_skipped_with_warning() {
        let track = [0x00, 0x80, 61, 0, 0x00, 0x90, 60, 100, 0x30, 0x80, 60, 0];
        let parsed = parse_midi(&file(&[&track], 0, 96)).unwrap();
        assert_eq!(parsed.events.len(), 1);
        assert_eq!(parsed.warnings.len(), 1);
        assert_eq!(parsed.warnings[0].offset, 23);
    }

    #[test]
    fn format1_tempo_map_applies_to_all_tracks() {
        // tempo doubles speed after one quarter
        let conductor = [
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x60, 0xff, 0x51, 0x03, 0x03, 0xd0, 0x90, 0x00, 0xff, 0x2f, 0x00,
        ];
        let notes = [0x00, 0x90, 60, 100, 0x81, 0x40, 0x80, 60, 0, 0x00, 0xff, 0x2f, 0x00];
        let parsed = parse_midi(&file(&[&conductor, &notes], 1, 96)).unwrap();
        assert_eq!(parsed.tempo_map.len(), 2);
        let ev = parsed.events[0];
        // 96 ticks at 0.5 s/quarter, then 96 ticks at 0.25 s/quarter
        assert!((ev.duration - 0.75).abs() < 1e-12);
    }

    #[test]
    fn write_empty_and_polyphony() {
        let empty = write_midi(&[], 0.0, 480, DEFAULT_TEMPO).unwrap();
        assert!(parse_midi(&empty).unwrap().events.is_empty());
        let chord = vec![
            NoteEvent::new(60, 0.25, 0.5, 80).unwrap(),
            NoteEvent::new(64, 0.25, 0.5, 80).unwrap(),
        ];
        let back = parse_midi(&write_midi(&chord, 0.0, 480, DEFAULT_TEMPO).unwrap()).unwrap();
        assert_eq!(back.events, chord);
    }

    #[test]
    fn track_length_survives_silent_tail() {
        let notes = [NoteEvent::new(60, 0.0, 0.5, 80).unwrap()];
        let parsed = parse_midi(&write_midi(&notes, 2.0, 480, DEFAULT_TEMPO).unwrap()).unwrap();
        assert_eq!(parsed.length, 2.0);
        // a length shorter than the notes is ignored
        let parsed = parse_midi(&write_midi(&notes, 0.1, 480, DEFAULT_TEMPO).unwrap()).unwrap();
        assert_eq!(parsed.length, 0.5);
    }
}
