//! Synthetic pieces, MIDI files and images for tests, benchmarks and demos.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::extract::{extract_melody, extract_trio, ProgramMap};
use crate::midi::{write_midi, OutNote, OutTrack, TimedNote};
use crate::tokens::{DrumVocab, Layout, TokenSequence, STEPS_PER_BAR};

fn note(pitch: u8, onset: usize, dur: usize, channel: u8, program: u8, track: usize) -> TimedNote {
    TimedNote {
        pitch,
        channel,
        program,
        track,
        onset_step: onset,
        duration_steps: dur,
    }
}

/// Melody tokens for `(onset, duration, pitch)` triples.
pub fn melody(notes: &[(usize, usize, u8)], steps: usize) -> TokenSequence {
    let timed: Vec<TimedNote> = notes
        .iter()
        .map(|&(o, d, p)| note(p, o, d, 0, 0, 0))
        .collect();
    extract_melody(&timed, steps).0
}

/// A memorization fixture: each piece repeats a one-bar motif with a fixed
/// number of onsets (cycling 3..=12), and no two pieces share a pitch at the
/// same position within the bar.
pub fn overfit_fixture(pieces: usize, bars: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: Vec<BTreeSet<u8>> = vec![BTreeSet::new(); STEPS_PER_BAR];
    let steps = bars * STEPS_PER_BAR;
    let mut out = Vec::with_capacity(pieces);
    for i in 0..pieces {
        let density = 3 + i % 10;
        let mut phases: Vec<usize> = (0..STEPS_PER_BAR).collect();
        phases.shuffle(&mut rng);
        let mut phases = phases[..density].to_vec();
        phases.sort_unstable();
        let mut motif = Vec::with_capacity(density);
        for (j, &ph) in phases.iter().enumerate() {
            let next = if j + 1 < density {
                phases[j + 1]
            } else {
                phases[0] + STEPS_PER_BAR
            };
            let free: Vec<u8> = (36..=100u8).filter(|p| !used[ph].contains(p)).collect();
            let free = if free.is_empty() {
                (21..=108u8).filter(|p| !used[ph].contains(p)).collect()
            } else {
                free
            };
            let pitch = *free.choose(&mut rng).expect("pitch space exhausted");
            used[ph].insert(pitch);
            let dur = rng.random_range(1..=next - ph);
            motif.push((ph, dur, pitch));
        }
        let notes: Vec<(usize, usize, u8)> = (0..bars)
            .flat_map(|b| {
                motif
                    .iter()
                    .map(move |&(ph, d, p)| (b * STEPS_PER_BAR + ph, d, p))
            })
            .collect();
        out.push(melody(&notes, steps));
    }
    out
}

/// Random-walk melody with mixed note values and occasional rests.
pub fn random_melody_notes<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> Vec<(usize, usize, u8)> {
    const VALUES: [usize; 7] = [1, 2, 2, 4, 4, 4, 8];
    let steps = bars * STEPS_PER_BAR;
    let mut notes = Vec::new();
    let mut pitch: i32 = rng.random_range(55..80);
    let mut t = 0;
    while t < steps {
        let d = VALUES[rng.random_range(0..VALUES.len())].min(steps - t);
        if rng.random::<f64>() < 0.12 {
            t += d;
            continue;
        }
        pitch = (pitch + rng.random_range(-4..=4)).clamp(45, 90);
        notes.push((t, d, pitch as u8));
        t += d;
    }
    notes
}

pub fn random_melody<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> TokenSequence {
    melody(&random_melody_notes(rng, bars), bars * STEPS_PER_BAR)
}

pub fn melody_corpus(n: usize, bars: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_melody(&mut rng, bars)).collect()
}

fn bass_notes<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> Vec<(usize, usize, u8)> {
    let mut notes = Vec::new();
    for b in 0..bars {
        let root = rng.random_range(36..48);
        for beat in 0..4 {
            if rng.random::<f64>() < 0.8 {
                let p = root + [0, 7, 12, 7][beat];
                notes.push((b * STEPS_PER_BAR + beat * 4, rng.random_range(2..=4), p));
            }
        }
    }
    notes
}

fn drum_hits<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> Vec<(usize, u8)> {
    let mut hits = Vec::new();
    for b in 0..bars {
        for s in 0..STEPS_PER_BAR {
            let t = b * STEPS_PER_BAR + s;
            if s % 2 == 0 {
                hits.push((t, 42));
            }
            if s % 8 == 0 {
                hits.push((t, 36));
            }
            if s % 8 == 4 {
                hits.push((t, 38));
            }
            if rng.random::<f64>() < 0.05 {
                let extra = DrumVocab::EXPORT_NOTES[rng.random_range(0..9)];
                hits.push((t, extra));
            }
        }
    }
    hits
}

pub fn random_trio<R: Rng + ?Sized>(rng: &mut R, bars: usize) -> TokenSequence {
    let steps = bars * STEPS_PER_BAR;
    let mut timed: Vec<TimedNote> = random_melody_notes(rng, bars)
        .into_iter()
        .map(|(o, d, p)| note(p, o, d, 0, 0, 0))
        .collect();
    timed.extend(
        bass_notes(rng, bars)
            .into_iter()
            .map(|(o, d, p)| note(p, o, d, 1, 33, 1)),
    );
    timed.extend(
        drum_hits(rng, bars)
            .into_iter()
            .map(|(o, p)| note(p, o, 1, 9, 0, 2)),
    );
    timed.sort_by_key(|n| n.onset_step);
    extract_trio(&timed, &ProgramMap::default(), steps)
        .expect("all roles present")
        .0
}

/// A multi-track MIDI file with chords in the lead, a bass line and drums, for
/// exercising the tokenizer.
pub fn random_midi_file(seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bars = rng.random_range(16..40);
    let mut lead: Vec<OutNote> = Vec::new();
    for (o, d, p) in random_melody_notes(&mut rng, bars) {
        lead.push(OutNote {
            pitch: p,
            onset_step: o,
            duration_steps: d,
        });
        if rng.random::<f64>() < 0.2 {
            lead.push(OutNote {
                pitch: p - rng.random_range(3..8),
                onset_step: o,
                duration_steps: d + rng.random_range(0..3),
            });
        }
    }
    let bass = bass_notes(&mut rng, bars)
        .into_iter()
        .map(|(o, d, p)| OutNote {
            pitch: p,
            onset_step: o,
            duration_steps: d,
        })
        .collect();
    let drums = drum_hits(&mut rng, bars)
        .into_iter()
        .map(|(o, p)| OutNote {
            pitch: p,
            onset_step: o,
            duration_steps: 1,
        })
        .collect();
    let tempo = rng.random_range(70.0..160.0);
    write_midi(
        &[
            OutTrack {
                name: "lead".into(),
                channel: 0,
                program: rng.random_range(0..32),
                notes: lead,
            },
            OutTrack {
                name: "bass".into(),
                channel: 1,
                program: 33,
                notes: bass,
            },
            OutTrack {
                name: "drums".into(),
                channel: 9,
                program: 0,
                notes: drums,
            },
        ],
        tempo,
        STEPS_PER_BAR,
    )
}

/// White-on-black line drawing (a single wavy stroke three pixels thick) for
/// the confounder.
pub fn sketch_image(width: u32, height: u32) -> image::GrayImage {
    let mut img = image::GrayImage::new(width, height);
    let h = height as f64;
    for x in 0..width {
        let u = x as f64 / width as f64 * std::f64::consts::TAU;
        let y = 0.5 * h + 0.25 * h * (3.0 * u).sin() + 0.15 * h * (11.0 * u + 1.0).cos();
        let y = y.round() as i64;
        for dy in -1..=1 {
            let r = (y + dy).clamp(0, height as i64 - 1) as u32;
            img.put_pixel(x, r, image::Luma([255]));
        }
    }
    img
}

pub fn layout_sample<R: Rng + ?Sized>(layout: Layout, rng: &mut R, bars: usize) -> TokenSequence {
    match layout {
        Layout::Melody => random_melody(rng, bars),
        Layout::Trio => random_trio(rng, bars),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::PitchVocab;

    #[test]
    fn fixture_pieces_are_distinguishable_by_any_pitch() {
        let f = overfit_fixture(100, 16, 7);
        assert_eq!(f.len(), 100);
        let mut owner = std::collections::HashMap::new();
        for (i, p) in f.iter().enumerate() {
            assert_eq!(p.steps(), 256);
            for s in 0..p.steps() {
                let v = p.get(s, 0);
                if PitchVocab::is_onset(v) {
                    let prev = owner.insert((s % 16, v), i);
                    assert!(prev.is_none() || prev == Some(i));
                }
            }
            let onsets = (0..16).filter(|&s| PitchVocab::is_onset(p.get(s, 0))).count();
            assert_eq!(onsets, 3 + i % 10);
        }
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(random_midi_file(4), random_midi_file(4));
        assert_eq!(melody_corpus(3, 8, 1), melody_corpus(3, 8, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trio = random_trio(&mut rng, 16);
        assert_eq!(trio.tracks(), 3);
        assert_eq!(trio.steps(), 256);
    }
}
