//! Minimal Standard MIDI File reader and writer.
//!
//! Reading flattens all tracks into grid-quantized notes. Only what the token
//! grid needs is kept: pitch, channel, program, onset and duration in 16th-note
//! steps. Velocities and expressive timing are discarded.

use thiserror::Error;

use crate::tokens::STEPS_PER_BAR;

#[derive(Debug, Error, PartialEq)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("time signature {numerator}/{denominator} rejected: only 4/4 pieces are supported")]
    TimeSignature { numerator: u8, denominator: u32 },
    #[error("unsupported MIDI: {0}")]
    Unsupported(String),
}

fn malformed(offset: usize, reason: impl Into<String>) -> MidiError {
    MidiError::Malformed {
        offset,
        reason: reason.into(),
    }
}

/// A note quantized to the step grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedNote {
    pub pitch: u8,
    pub channel: u8,
    /// Program active on the channel when the note started.
    pub program: u8,
    /// Index of the track chunk the note came from.
    pub track: usize,
    pub onset_step: usize,
    pub duration_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub format: u16,
    /// Notes ordered by onset, then by the order their note-on appeared in the file.
    pub notes: Vec<TimedNote>,
    /// Initial tempo; 120 when the file declares none.
    pub tempo_bpm: f64,
}

impl ParsedMidi {
    /// Step index just after the last sounding note.
    pub fn end_step(&self) -> usize {
        self.notes
            .iter()
            .map(|n| n.onset_step + n.duration_steps)
            .max()
            .unwrap_or(0)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| malformed(self.pos, "unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.bytes.len() {
            return Err(malformed(
                self.pos,
                format!("need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut v: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(malformed(start, "variable-length quantity longer than 4 bytes"))
    }
}

enum Timing {
    Metrical(u16),
    /// Seconds per tick.
    Smpte(f64),
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    On { ch: u8, key: u8, program: u8 },
    Off { ch: u8, key: u8 },
    Tempo(u32),
    End,
}

struct RawEvent {
    tick: u64,
    track: usize,
    seq: usize,
    ev: Ev,
}

/// Parses a format 0 or 1 file and quantizes notes to `steps_per_bar` steps per 4/4 bar.
pub fn parse_midi(bytes: &[u8], steps_per_bar: usize) -> Result<ParsedMidi, MidiError> {
    if steps_per_bar == 0 || !steps_per_bar.is_multiple_of(4) {
        return Err(MidiError::Unsupported(format!(
            "steps_per_bar {steps_per_bar} is not a positive multiple of 4"
        )));
    }
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| malformed(0, "missing MThd"))? != b"MThd" {
        return Err(malformed(0, "missing MThd"));
    }
    let hlen = r.u32()? as usize;
    if hlen < 6 {
        return Err(malformed(4, format!("header length {hlen} < 6")));
    }
    let hstart = r.pos;
    let format = r.u16()?;
    let ntrks = r.u16()? as usize;
    let division = r.u16()?;
    r.pos = hstart + hlen;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("format {format}")));
    }
    let timing = if division & 0x8000 == 0 {
        if division == 0 {
            return Err(malformed(12, "zero ticks per quarter note"));
        }
        Timing::Metrical(division)
    } else {
        let fps = -((division >> 8) as u8 as i8) as f64;
        let tpf = f64::from(division & 0xff);
        if fps <= 0.0 || tpf <= 0.0 {
            return Err(malformed(12, "invalid SMPTE division"));
        }
        Timing::Smpte(1.0 / (fps * tpf))
    };

    let mut events = Vec::new();
    let mut seq = 0usize;
    let mut track = 0usize;
    while track < ntrks {
        if r.pos >= bytes.len() {
            return Err(malformed(
                r.pos,
                format!("expected {ntrks} tracks, found {track}"),
            ));
        }
        let chunk_at = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // alien chunk: skip
            r.take(len)
                .map_err(|_| malformed(chunk_at, "truncated chunk"))?;
            continue;
        }
        let body = r
            .take(len)
            .map_err(|_| malformed(chunk_at, format!("track chunk of {len} bytes truncated")))?;
        parse_track(body, r.pos - len, track, &mut seq, &mut events)?;
        track += 1;
    }

    events.sort_by_key(|e| (e.tick, e.seq));
    let tempo_us = events
        .iter()
        .find_map(|e| match e.ev {
            Ev::Tempo(t) if e.tick == 0 => Some(t),
            _ => None,
        })
        .unwrap_or(500_000);

    // tick -> fractional step
    let steps_per_beat = (steps_per_bar / 4) as f64;
    let tempo_map: Vec<(u64, u32)> = events
        .iter()
        .filter_map(|e| match e.ev {
            Ev::Tempo(t) => Some((e.tick, t)),
            _ => None,
        })
        .collect();
    let to_step = |tick: u64| -> f64 {
        match timing {
            Timing::Metrical(ppq) => tick as f64 * steps_per_beat / f64::from(ppq),
            Timing::Smpte(sec_per_tick) => {
                // integrate beats over the tempo map
                let mut beats = 0.0;
                let mut last_tick = 0u64;
                let mut us_per_beat = 500_000.0;
                for &(t, tempo) in &tempo_map {
                    if t >= tick {
                        break;
                    }
                    beats += (t - last_tick) as f64 * sec_per_tick * 1e6 / us_per_beat;
                    last_tick = t;
                    us_per_beat = f64::from(tempo);
                }
                beats += (tick - last_tick) as f64 * sec_per_tick * 1e6 / us_per_beat;
                beats * steps_per_beat
            }
        }
    };

    // pair note-ons and note-offs first-in first-out per (track, channel, key)
    let mut open: std::collections::HashMap<(usize, u8, u8), std::collections::VecDeque<(u64, u8, usize)>> =
        Default::default();
    let mut closed: Vec<(u64, u64, usize, u8, u8, u8, usize)> = Vec::new();
    let mut track_end = vec![0u64; ntrks];
    for e in &events {
        match e.ev {
            Ev::On { ch, key, program } => open
                .entry((e.track, ch, key))
                .or_default()
                .push_back((e.tick, program, e.seq)),
            Ev::Off { ch, key } => {
                if let Some((start, program, s)) = open
                    .get_mut(&(e.track, ch, key))
                    .and_then(|q| q.pop_front())
                {
                    closed.push((start, e.tick, e.track, ch, key, program, s));
                }
            }
            Ev::End => track_end[e.track] = track_end[e.track].max(e.tick),
            Ev::Tempo(_) => {}
        }
    }
    for ((trk, ch, key), q) in open {
        for (start, program, s) in q {
            let end = track_end[trk].max(start);
            closed.push((start, end, trk, ch, key, program, s));
        }
    }
    closed.sort_by_key(|c| c.6);

    let mut notes: Vec<TimedNote> = closed
        .into_iter()
        .map(|(start, end, trk, ch, key, program, _)| {
            let on = to_step(start);
            let off = to_step(end);
            TimedNote {
                pitch: key,
                channel: ch,
                program,
                track: trk,
                onset_step: on.round() as usize,
                duration_steps: ((off - on).round() as usize).max(1),
            }
        })
        .collect();
    // stable: ties keep file order
    notes.sort_by_key(|n| n.onset_step);

    Ok(ParsedMidi {
        format,
        notes,
        tempo_bpm: 60e6 / f64::from(tempo_us),
    })
}

fn parse_track(
    body: &[u8],
    base: usize,
    track: usize,
    seq: &mut usize,
    out: &mut Vec<RawEvent>,
) -> Result<(), MidiError> {
    let mut r = Reader {
        bytes: body,
        pos: 0,
    };
    let at = |p: usize| base + p;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut programs = [0u8; 16];
    let mut push = |tick: u64, ev: Ev, out: &mut Vec<RawEvent>| {
        out.push(RawEvent {
            tick,
            track,
            seq: *seq,
            ev,
        });
        *seq += 1;
    };
    while r.pos < body.len() {
        let delta = r.vlq().map_err(|e| relocate(e, base))?;
        tick += u64::from(delta);
        let status_at = r.pos;
        let first = r.u8().map_err(|e| relocate(e, base))?;
        match first {
            0xff => {
                let kind = r.u8().map_err(|e| relocate(e, base))?;
                let len = r.vlq().map_err(|e| relocate(e, base))? as usize;
                let data = r.take(len).map_err(|e| relocate(e, base))?;
                match kind {
                    0x2f => {
                        push(tick, Ev::End, out);
                        return Ok(());
                    }
                    0x51 => {
                        if len != 3 {
                            return Err(malformed(at(status_at), "tempo event length != 3"));
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(malformed(at(status_at), "zero tempo"));
                        }
                        push(tick, Ev::Tempo(us), out);
                    }
                    0x58 => {
                        if len < 2 {
                            return Err(malformed(at(status_at), "short time signature"));
                        }
                        let (nn, dd) = (data[0], data[1]);
                        if (nn, dd) != (4, 2) {
                            return Err(MidiError::TimeSignature {
                                numerator: nn,
                                denominator: 1u32.checked_shl(u32::from(dd)).unwrap_or(0),
                            });
                        }
                    }
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = r.vlq().map_err(|e| relocate(e, base))? as usize;
                r.take(len).map_err(|e| relocate(e, base))?;
                running = None;
            }
            0xf1..=0xfe => {
                return Err(malformed(
                    at(status_at),
                    format!("system message 0x{first:02x} inside a file"),
                ))
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8().map_err(|e| relocate(e, base))?)
                } else {
                    let s = running.ok_or_else(|| {
                        malformed(at(status_at), "data byte without running status")
                    })?;
                    (s, first)
                };
                let ch = status & 0x0f;
                let needs_two = !matches!(status & 0xf0, 0xc0 | 0xd0);
                let d2 = if needs_two {
                    r.u8().map_err(|e| relocate(e, base))?
                } else {
                    0
                };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(malformed(at(status_at), "data byte with high bit set"));
                }
                match status & 0xf0 {
                    0x90 if d2 > 0 => push(
                        tick,
                        Ev::On {
                            ch,
                            key: d1,
                            program: programs[ch as usize],
                        },
                        out,
                    ),
                    0x80 | 0x90 => push(tick, Ev::Off { ch, key: d1 }, out),
                    0xc0 => programs[ch as usize] = d1,
                    _ => {}
                }
            }
        }
    }
    // no end-of-track meta: tolerate, close at last tick
    push(tick, Ev::End, out);
    Ok(())
}

fn relocate(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::Malformed { offset, reason } => MidiError::Malformed {
            offset: offset + base,
            reason,
        },
        other => other,
    }
}

/// A note to be written, in grid steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutNote {
    pub pitch: u8,
    pub onset_step: usize,
    pub duration_steps: usize,
}

/// One output track.
#[derive(Debug, Clone)]
pub struct OutTrack {
    pub name: String,
    pub channel: u8,
    pub program: u8,
    pub notes: Vec<OutNote>,
}

pub const EXPORT_PPQ: u16 = 480;

fn write_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (v & 0x7f) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = 0x80 | (v & 0x7f) as u8;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn chunk(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
}

/// Writes a format 1 file: a conductor track (tempo, 4/4) followed by `tracks`.
pub fn write_midi(tracks: &[OutTrack], tempo_bpm: f64, steps_per_bar: usize) -> Vec<u8> {
    let ticks_per_step = u64::from(EXPORT_PPQ) * 4 / steps_per_bar.max(4) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&((tracks.len() + 1) as u16).to_be_bytes());
    out.extend_from_slice(&EXPORT_PPQ.to_be_bytes());

    let us = (60e6 / tempo_bpm).round().clamp(1.0, 16_777_215.0) as u32;
    let mut conductor = Vec::new();
    write_vlq(&mut conductor, 0);
    conductor.extend_from_slice(&[0xff, 0x51, 0x03]);
    conductor.extend_from_slice(&us.to_be_bytes()[1..]);
    write_vlq(&mut conductor, 0);
    conductor.extend_from_slice(&[0xff, 0x58, 0x04, 4, 2, 24, 8]);
    write_vlq(&mut conductor, 0);
    conductor.extend_from_slice(&[0xff, 0x2f, 0x00]);
    chunk(&mut out, &conductor);

    for t in tracks {
        let mut body = Vec::new();
        write_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x03]);
        write_vlq(&mut body, t.name.len() as u32);
        body.extend_from_slice(t.name.as_bytes());
        write_vlq(&mut body, 0);
        body.extend_from_slice(&[0xc0 | t.channel, t.program]);
        // (tick, is_on, key); offs sort before ons at the same tick
        let mut evs: Vec<(u64, bool, u8)> = Vec::with_capacity(2 * t.notes.len());
        for n in &t.notes {
            let on = n.onset_step as u64 * ticks_per_step;
            evs.push((on, true, n.pitch));
            evs.push((on + n.duration_steps as u64 * ticks_per_step, false, n.pitch));
        }
        evs.sort_by_key(|&(tick, on, key)| (tick, on, key));
        let mut last = 0u64;
        for (tick, on, key) in evs {
            write_vlq(&mut body, (tick - last) as u32);
            last = tick;
            if on {
                body.extend_from_slice(&[0x90 | t.channel, key, 100]);
            } else {
                body.extend_from_slice(&[0x80 | t.channel, key, 0]);
            }
        }
        write_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);
        chunk(&mut out, &body);
    }
    out
}

/// Default quantization used throughout the crate.
pub fn parse_midi_default(bytes: &[u8]) -> Result<ParsedMidi, MidiError> {
    parse_midi(bytes, STEPS_PER_BAR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(format: u16, ppq: u16, tracks: &[Vec<u8>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&ppq.to_be_bytes());
        for t in tracks {
            chunk(&mut out, t);
        }
        out
    }

    #[test]
    fn single_quarter_note() {
        // tempo 120 bpm, C4 quarter at tick 0, 480 ppq
        let track = vec![
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // tempo 500000
            0x00, 0x90, 60, 100, //
            0x83, 0x60, 0x80, 60, 0, // delta 480
            0x00, 0xff, 0x2f, 0x00,
        ];
        let p = parse_midi(&smf(0, 480, &[track]), 16).unwrap();
        assert_eq!(p.notes.len(), 1);
        let n = &p.notes[0];
        assert_eq!((n.pitch, n.onset_step, n.duration_steps), (60, 0, 4));
        assert!((p.tempo_bpm - 120.0).abs() < 1e-9);
    }

    #[test]
    fn empty_track_list() {
        let p = parse_midi(&smf(1, 480, &[]), 16).unwrap();
        assert!(p.notes.is_empty());
    }

    #[test]
    fn rejects_three_four() {
        let track = vec![0x00, 0xff, 0x58, 0x04, 3, 2, 24, 8, 0x00, 0xff, 0x2f, 0x00];
        let err = parse_midi(&smf(0, 480, &[track]), 16).unwrap_err();
        assert_eq!(
            err,
            MidiError::TimeSignature {
                numerator: 3,
                denominator: 4
            }
        );
    }

    #[test]
    fn malformed_reports_offset() {
        let mut bytes = smf(0, 480, &[vec![0x00, 0x90, 60, 100, 0x00, 0xff, 0x2f, 0x00]]);
        bytes.truncate(bytes.len() - 3);
        match parse_midi(&bytes, 16).unwrap_err() {
            MidiError::Malformed { offset, .. } => assert_eq!(offset, 14),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            parse_midi(b"RIFF....", 16),
            Err(MidiError::Malformed { offset: 0, .. })
        ));
    }

    #[test]
    fn running_status_and_zero_velocity_off() {
        let track = vec![
            0x00, 0x90, 60, 100, // on
            0x78, 62, 100, // running: delta 120, on 62
            0x78, 60, 0, // running: off 60 (vel 0)
            0x78, 62, 0, 0x00, 0xff, 0x2f, 0x00,
        ];
        let p = parse_midi(&smf(0, 480, &[track]), 16).unwrap();
        let got: Vec<_> = p
            .notes
            .iter()
            .map(|n| (n.pitch, n.onset_step, n.duration_steps))
            .collect();
        assert_eq!(got, vec![(60, 0, 2), (62, 1, 2)]);
    }

    #[test]
    fn smpte_timing_uses_tempo() {
        // 25 fps x 40 ticks per frame = 1000 ticks/s; 120 bpm -> 8 steps/s
        let division = ((-25i8 as u8 as u16) << 8) | 40;
        let track = vec![
            0x00, 0x90, 60, 100, //
            0x87, 0x68, 0x80, 60, 0, // delta 1000 ticks = 1 s
            0x00, 0xff, 0x2f, 0x00,
        ];
        let p = parse_midi(&smf(0, division, &[track]), 16).unwrap();
        assert_eq!(p.notes[0].duration_steps, 8);
    }

    #[test]
    fn writer_output_parses_back() {
        let t = OutTrack {
            name: "melody".into(),
            channel: 0,
            program: 0,
            notes: vec![
                OutNote {
                    pitch: 60,
                    onset_step: 0,
                    duration_steps: 1,
                },
                OutNote {
                    pitch: 60,
                    onset_step: 1,
                    duration_steps: 3,
                },
            ],
        };
        let bytes = write_midi(&[t], 97.0, 16);
        let p = parse_midi(&bytes, 16).unwrap();
        let got: Vec<_> = p
            .notes
            .iter()
            .map(|n| (n.pitch, n.onset_step, n.duration_steps, n.track))
            .collect();
        assert_eq!(got, vec![(60, 0, 1, 1), (60, 1, 3, 1)]);
        assert!((p.tempo_bpm - 97.0).abs() < 1e-3);
    }
}
