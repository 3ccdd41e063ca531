//! Boolean `steps x tracks` grids marking absorbed (regenerable) positions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenSequence;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("mask is {mask_steps}x{mask_tracks}, piece is {steps}x{tracks}")]
    Shape {
        mask_steps: usize,
        mask_tracks: usize,
        steps: usize,
        tracks: usize,
    },
    #[error("run [{start}, {start}+{len}) exceeds {steps} steps on track {track}")]
    RunOutOfBounds {
        track: usize,
        start: usize,
        len: usize,
        steps: usize,
    },
    #[error("malformed mask JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPattern {
    steps: usize,
    tracks: usize,
    cells: Vec<bool>,
}

impl MaskPattern {
    pub fn none(steps: usize, tracks: usize) -> Self {
        Self {
            steps,
            tracks,
            cells: vec![false; steps * tracks],
        }
    }

    pub fn all(steps: usize, tracks: usize) -> Self {
        Self {
            steps,
            tracks,
            cells: vec![true; steps * tracks],
        }
    }

    /// Steps `[start, end)` on every track.
    pub fn span(steps: usize, tracks: usize, start: usize, end: usize) -> Self {
        let mut m = Self::none(steps, tracks);
        for s in start..end.min(steps) {
            for t in 0..tracks {
                m.set(s, t, true);
            }
        }
        m
    }

    /// The middle half of the piece on every track; steps `[256, 768)` of a 1024-step piece.
    pub fn central(steps: usize, tracks: usize) -> Self {
        Self::span(steps, tracks, steps / 4, steps - steps / 4)
    }

    /// Whole tracks.
    pub fn tracks_only(steps: usize, tracks: usize, selected: &[usize]) -> Self {
        let mut m = Self::none(steps, tracks);
        for s in 0..steps {
            for &t in selected {
                m.set(s, t, true);
            }
        }
        m
    }

    /// Positions currently holding a mask id.
    pub fn of_sequence(seq: &TokenSequence) -> Self {
        let mut m = Self::none(seq.steps(), seq.tracks());
        for s in 0..seq.steps() {
            for t in 0..seq.tracks() {
                m.set(s, t, seq.is_mask(s, t));
            }
        }
        m
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tracks(&self) -> usize {
        self.tracks
    }

    #[inline]
    pub fn get(&self, step: usize, track: usize) -> bool {
        self.cells[step * self.tracks + track]
    }

    #[inline]
    pub fn set(&mut self, step: usize, track: usize, v: bool) {
        self.cells[step * self.tracks + track] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn union(&self, other: &MaskPattern) -> MaskPattern {
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| *a || *b)
            .collect();
        MaskPattern { cells, ..*self }
    }

    pub fn check_shape(&self, seq: &TokenSequence) -> Result<(), MaskError> {
        if self.steps != seq.steps() || self.tracks != seq.tracks() {
            return Err(MaskError::Shape {
                mask_steps: self.steps,
                mask_tracks: self.tracks,
                steps: seq.steps(),
                tracks: seq.tracks(),
            });
        }
        Ok(())
    }

    /// Copy of `seq` with every selected position replaced by its mask id.
    pub fn apply(&self, seq: &TokenSequence) -> Result<TokenSequence, MaskError> {
        self.check_shape(seq)?;
        let mut out = seq.clone();
        for s in 0..self.steps {
            for t in 0..self.tracks {
                if self.get(s, t) {
                    out.set(s, t, seq.kinds()[t].mask_id());
                }
            }
        }
        Ok(out)
    }

    /// Run-length form: per track, `[start, length]` of each masked run.
    pub fn to_runs(&self) -> MaskRuns {
        let tracks = (0..self.tracks)
            .map(|t| {
                let mut runs = Vec::new();
                let mut s = 0;
                while s < self.steps {
                    if self.get(s, t) {
                        let start = s;
                        while s < self.steps && self.get(s, t) {
                            s += 1;
                        }
                        runs.push([start, s - start]);
                    } else {
                        s += 1;
                    }
                }
                runs
            })
            .collect();
        MaskRuns {
            steps: self.steps,
            tracks,
        }
    }

    pub fn from_runs(runs: &MaskRuns) -> Result<Self, MaskError> {
        let mut m = Self::none(runs.steps, runs.tracks.len());
        for (t, track) in runs.tracks.iter().enumerate() {
            for &[start, len] in track {
                if start + len > runs.steps {
                    return Err(MaskError::RunOutOfBounds {
                        track: t,
                        start,
                        len,
                        steps: runs.steps,
                    });
                }
                for s in start..start + len {
                    m.set(s, t, true);
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_runs()).expect("plain data")
    }

    pub fn from_json(json: &str) -> Result<Self, MaskError> {
        let runs: MaskRuns = serde_json::from_str(json).map_err(|e| MaskError::Json(e.to_string()))?;
        Self::from_runs(&runs)
    }
}

/// JSON wire form of a [`MaskPattern`]: `{"steps": 1024, "tracks": [[[256, 512]], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRuns {
    pub steps: usize,
    pub tracks: Vec<Vec<[usize; 2]>>,
}

impl Serialize for MaskPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_runs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let runs = MaskRuns::deserialize(d)?;
        MaskPattern::from_runs(&runs).map_err(serde::de::Error::custom)
    }
}
