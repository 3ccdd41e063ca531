//! Reverse process: repeatedly predict `x_0`, then commit each still-masked
//! position with probability `1/t` while `t` counts down to 1.
//!
//! Unconditional sampling, infilling and accompaniment differ only in which
//! positions start masked.

use std::ops::ControlFlow;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{softmax64, Denoiser};
use crate::mask::{MaskError, MaskPattern};
use crate::tokens::{TokenSequence, TrackKind};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("need at least one reverse step")]
    NoSteps,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("positions marked regenerable must hold the mask id and no others may (step {step}, track {track})")]
    InitMismatch { step: usize, track: usize },
    #[error("denoiser rejected input: {0}")]
    Denoiser(String),
    #[error("accompaniment needs a multi-track piece and a non-empty subset of its tracks")]
    BadTracks,
    #[error("infilling the central window needs {want} steps, piece has {got}")]
    Length { want: usize, got: usize },
    #[error("guidance rejected input: {0}")]
    Guidance(String),
    #[error("input contains mask tokens")]
    MaskedInput,
    #[error("cancelled after {completed} of {total} steps")]
    Cancelled {
        completed: usize,
        total: usize,
        partial: TokenSequence,
    },
}

/// A position fixed during one reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub step: u32,
    pub track: u8,
    pub token: u16,
}

/// One message of the sampler trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 0 for the first reverse step.
    pub step_index: usize,
    /// Countdown index; commits happened with probability `1/t`.
    pub t: usize,
    pub remaining_masks: usize,
    pub commits: Vec<Commit>,
    /// Full grid every [`SNAPSHOT_EVERY`] steps and on the last step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Vec<u16>>,
}

pub const SNAPSHOT_EVERY: usize = 32;

impl TraceStep {
    pub fn apply(&self, x: &mut TokenSequence) {
        for c in &self.commits {
            x.set(c.step as usize, c.track as usize, c.token);
        }
    }
}

/// Rebuilds the final piece from the starting grid and a complete trace.
pub fn replay(init: &TokenSequence, trace: &[TraceStep]) -> TokenSequence {
    let mut x = init.clone();
    for step in trace {
        step.apply(&mut x);
    }
    x
}

/// Per-position `x_0` distributions handed to guidance. Rows exist only for
/// positions that are still masked.
#[derive(Debug, Clone)]
pub struct ProbGrid {
    pub steps: usize,
    pub kinds: Vec<TrackKind>,
    rows: Vec<Option<Vec<f64>>>,
}

/// A grid with no rows filled in.
pub fn empty_grid(x: &TokenSequence) -> ProbGrid {
    ProbGrid {
        steps: x.steps(),
        kinds: x.kinds().to_vec(),
        rows: vec![None; x.steps() * x.tracks()],
    }
}

impl ProbGrid {
    pub fn slot_mut(&mut self, step: usize, track: usize) -> &mut Option<Vec<f64>> {
        &mut self.rows[step * self.kinds.len() + track]
    }

    pub fn row(&self, step: usize, track: usize) -> Option<&[f64]> {
        self.rows[step * self.kinds.len() + track].as_deref()
    }

    pub fn row_mut(&mut self, step: usize, track: usize) -> Option<&mut Vec<f64>> {
        self.rows[step * self.kinds.len() + track].as_mut()
    }
}

/// Algorithm-level hook that reshapes the `x_0` distributions before sampling.
pub trait Guidance {
    /// Modifies masked rows of `probs` in place. Returns how many rows fell back
    /// to the unguided distribution.
    fn adjust(&self, x_t: &TokenSequence, probs: &mut ProbGrid) -> usize;

    /// Rejects pieces the guidance cannot score.
    fn check(&self, _x: &TokenSequence) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub piece: TokenSequence,
    /// Rows whose guided distribution was degenerate.
    pub guidance_fallbacks: usize,
}

/// Runs `steps` reverse steps from `init`, regenerating positions where
/// `pattern` is set. `observer` sees every step and may cancel.
pub fn sample<R, O>(
    denoiser: &dyn Denoiser,
    init: &TokenSequence,
    pattern: &MaskPattern,
    steps: usize,
    guidance: Option<&dyn Guidance>,
    rng: &mut R,
    mut observer: O,
) -> Result<SampleOutcome, SampleError>
where
    R: Rng + ?Sized,
    O: FnMut(&TraceStep, &TokenSequence) -> ControlFlow<()>,
{
    if steps == 0 {
        return Err(SampleError::NoSteps);
    }
    pattern.check_shape(init)?;
    for s in 0..init.steps() {
        for k in 0..init.tracks() {
            if pattern.get(s, k) != init.is_mask(s, k) {
                return Err(SampleError::InitMismatch { step: s, track: k });
            }
        }
    }
    let mut x = init.clone();
    let mut masked: Vec<(usize, usize)> = (0..x.steps())
        .flat_map(|s| (0..x.tracks()).map(move |k| (s, k)))
        .filter(|&(s, k)| pattern.get(s, k))
        .collect();
    if masked.is_empty() {
        return Ok(SampleOutcome {
            piece: x,
            guidance_fallbacks: 0,
        });
    }
    denoiser.validate(&x).map_err(SampleError::Denoiser)?;
    if let Some(g) = guidance {
        g.check(&x).map_err(SampleError::Guidance)?;
    }

    let mut fallbacks = 0;
    for (i, t) in (1..=steps).rev().enumerate() {
        let logits = denoiser.logits(&x);
        let guided = guidance.map(|g| {
            let mut grid = empty_grid(&x);
            for &(s, k) in &masked {
                *grid.slot_mut(s, k) = Some(logits.probs(s, k));
            }
            fallbacks += g.adjust(&x, &mut grid);
            grid
        });
        let commit_p = 1.0 / t as f64;
        let mut commits = Vec::new();
        let mut still = Vec::with_capacity(masked.len());
        for &(s, k) in &masked {
            if rng.random::<f64>() >= commit_p {
                still.push((s, k));
                continue;
            }
            let u: f64 = rng.random();
            let token = match &guided {
                Some(grid) => draw(grid.row(s, k).expect("masked row"), u),
                None => draw(&softmax64(logits.row(s, k)), u),
            } as u16;
            x.set(s, k, token);
            commits.push(Commit {
                step: s as u32,
                track: k as u8,
                token,
            });
        }
        masked = still;
        let last = t == 1;
        let msg = TraceStep {
            step_index: i,
            t,
            remaining_masks: masked.len(),
            commits,
            snapshot: ((i + 1) % SNAPSHOT_EVERY == 0 || last).then(|| x.values().to_vec()),
        };
        if observer(&msg, &x).is_break() && !last {
            return Err(SampleError::Cancelled {
                completed: i + 1,
                total: steps,
                partial: x,
            });
        }
    }
    debug_assert!(masked.is_empty());
    Ok(SampleOutcome {
        piece: x,
        guidance_fallbacks: fallbacks,
    })
}

/// Inverse-CDF draw; `u` in `[0, 1)`.
fn draw(p: &[f64], u: f64) -> usize {
    let total: f64 = p.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > 0.0 {
            acc += v;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}

fn no_observer(_: &TraceStep, _: &TokenSequence) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

/// Unconditional generation of a whole piece.
pub fn generate<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    kinds: Vec<TrackKind>,
    length: usize,
    steps: usize,
    rng: &mut R,
) -> Result<TokenSequence, SampleError> {
    let init = TokenSequence::all_masked(kinds, length, crate::tokens::STEPS_PER_BAR);
    let pattern = MaskPattern::all(length, init.tracks());
    Ok(sample(denoiser, &init, &pattern, steps, None, rng, no_observer)?.piece)
}

/// Regenerates the positions selected by `pattern`, keeping the rest.
pub fn infill<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    piece: &TokenSequence,
    pattern: &MaskPattern,
    steps: usize,
    rng: &mut R,
) -> Result<TokenSequence, SampleError> {
    if piece.has_masks() {
        return Err(SampleError::MaskedInput);
    }
    let init = pattern.apply(piece)?;
    Ok(sample(denoiser, &init, pattern, steps, None, rng, no_observer)?.piece)
}

/// Regenerates the middle half (`[256, 768)` of a 1024-step piece) on all tracks.
pub fn infill_central<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    piece: &TokenSequence,
    steps: usize,
    rng: &mut R,
) -> Result<TokenSequence, SampleError> {
    if piece.steps() != 1024 {
        return Err(SampleError::Length {
            want: 1024,
            got: piece.steps(),
        });
    }
    let pattern = MaskPattern::central(piece.steps(), piece.tracks());
    infill(denoiser, piece, &pattern, steps, rng)
}

/// Regenerates whole tracks of a multi-track piece.
pub fn accompany<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    piece: &TokenSequence,
    tracks: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<TokenSequence, SampleError> {
    if piece.tracks() < 2 || tracks.is_empty() || tracks.iter().any(|&k| k >= piece.tracks()) {
        return Err(SampleError::BadTracks);
    }
    let pattern = MaskPattern::tracks_only(piece.steps(), piece.tracks(), tracks);
    infill(denoiser, piece, &pattern, steps, rng)
}

/// Test denoiser that always predicts a fixed piece with certainty.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub target: TokenSequence,
}

impl Denoiser for OracleDenoiser {
    fn logits(&self, x_t: &TokenSequence) -> crate::diffusion::Logits<f32> {
        let vocab = x_t.kinds().iter().map(|k| k.vocab_size() as usize).collect();
        let mut l = crate::diffusion::Logits::<f32>::zeros(x_t.steps(), vocab);
        for s in 0..x_t.steps() {
            for k in 0..x_t.tracks() {
                let row = l.row_mut(s, k);
                row.fill(-1e9);
                row[self.target.get(s, k) as usize] = 0.0;
            }
        }
        l
    }

    fn validate(&self, x_t: &TokenSequence) -> Result<(), String> {
        if x_t.steps() == self.target.steps() && x_t.kinds() == self.target.kinds() {
            Ok(())
        } else {
            Err("shape differs from oracle target".into())
        }
    }
}

/// Test denoiser with uniform predictions.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformDenoiser;

impl Denoiser for UniformDenoiser {
    fn logits(&self, x_t: &TokenSequence) -> crate::diffusion::Logits<f32> {
        let vocab = x_t.kinds().iter().map(|k| k.vocab_size() as usize).collect();
        crate::diffusion::Logits::zeros(x_t.steps(), vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::tokens::Layout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trio() -> TokenSequence {
        synth::random_trio(&mut ChaCha8Rng::seed_from_u64(5), 4)
    }

    #[test]
    fn oracle_recovers_target() {
        let x0 = trio();
        let oracle = OracleDenoiser { target: x0.clone() };
        for steps in [1, 4, 64] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let out = generate(&oracle, x0.kinds().to_vec(), x0.steps(), steps, &mut rng).unwrap();
                assert_eq!(out, x0);
            }
        }
    }

    #[test]
    fn context_is_preserved_and_masks_vanish() {
        let x0 = trio();
        let mut pattern = MaskPattern::span(x0.steps(), 3, 10, 40);
        pattern.set(50, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = infill(&UniformDenoiser, &x0, &pattern, 16, &mut rng).unwrap();
        assert!(!out.has_masks());
        for s in 0..x0.steps() {
            for k in 0..3 {
                if !pattern.get(s, k) {
                    assert_eq!(out.get(s, k), x0.get(s, k));
                }
            }
        }
    }

    #[test]
    fn empty_pattern_returns_input() {
        let x0 = trio();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = infill(&UniformDenoiser, &x0, &MaskPattern::none(x0.steps(), 3), 8, &mut rng).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn errors() {
        let x0 = trio();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = MaskPattern::all(x0.steps(), 3);
        assert_eq!(
            infill(&UniformDenoiser, &x0, &all, 0, &mut rng).unwrap_err(),
            SampleError::NoSteps
        );
        let wrong = MaskPattern::all(x0.steps() + 1, 3);
        assert!(matches!(
            infill(&UniformDenoiser, &x0, &wrong, 4, &mut rng),
            Err(SampleError::Mask(_))
        ));
        let melody = TokenSequence::silence(Layout::Melody, 64);
        assert_eq!(
            accompany(&UniformDenoiser, &melody, &[0], 4, &mut rng).unwrap_err(),
            SampleError::BadTracks
        );
        assert!(matches!(
            infill_central(&UniformDenoiser, &x0, 4, &mut rng),
            Err(SampleError::Length { .. })
        ));
        let init = x0.clone();
        assert!(matches!(
            sample(&UniformDenoiser, &init, &all, 4, None, &mut rng, no_observer),
            Err(SampleError::InitMismatch { .. })
        ));
    }

    #[test]
    fn accompaniment_keeps_other_tracks() {
        let x0 = trio();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = accompany(&UniformDenoiser, &x0, &[1], 8, &mut rng).unwrap();
        for s in 0..x0.steps() {
            assert_eq!(out.get(s, 0), x0.get(s, 0));
            assert_eq!(out.get(s, 2), x0.get(s, 2));
        }
    }

    #[test]
    fn trace_replays_and_shrinks() {
        let x0 = TokenSequence::silence(Layout::Trio, 64);
        let init = TokenSequence::all_masked(x0.kinds().to_vec(), 64, 16);
        let pattern = MaskPattern::all(64, 3);
        let mut trace = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = sample(&UniformDenoiser, &init, &pattern, 40, None, &mut rng, |m, _| {
            trace.push(m.clone());
            ControlFlow::Continue(())
        })
        .unwrap();
        assert_eq!(trace.len(), 40);
        assert_eq!(replay(&init, &trace), out.piece);
        assert!(trace.windows(2).all(|w| w[1].remaining_masks <= w[0].remaining_masks));
        assert_eq!(trace.last().unwrap().remaining_masks, 0);
        assert!(trace[31].snapshot.is_some() && trace[30].snapshot.is_none());
        assert_eq!(trace[39].snapshot.as_deref(), Some(out.piece.values()));
    }

    #[test]
    fn cancellation_returns_partial() {
        let init = TokenSequence::all_masked(Layout::Melody.kinds(), 64, 16);
        let pattern = MaskPattern::all(64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample(&UniformDenoiser, &init, &pattern, 50, None, &mut rng, |m, _| {
            if m.step_index == 4 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, SampleError::Cancelled { completed: 5, total: 50, .. }));
    }

    #[test]
    fn commit_counts_follow_one_over_t() {
        // At the first of 8 steps each of 256 masks commits with probability 1/8.
        let init = TokenSequence::all_masked(Layout::Melody.kinds(), 256, 16);
        let pattern = MaskPattern::all(256, 1);
        let n = 400;
        let mut total = 0.0;
        for seed in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut first = None;
            let _ = sample(&UniformDenoiser, &init, &pattern, 8, None, &mut rng, |m, _| {
                first.get_or_insert(m.commits.len());
                ControlFlow::Break(())
            });
            total += first.unwrap() as f64;
        }
        let mean = total / n as f64;
        let sd = (256.0 * 0.125 * 0.875 / n as f64).sqrt();
        assert!((mean - 32.0).abs() < 3.0 * sd, "{mean}");
    }

    #[test]
    fn deterministic_under_seed() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            generate(&UniformDenoiser, Layout::Trio.kinds(), 32, 8, &mut rng).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn draw_handles_edges() {
        assert_eq!(draw(&[0.0, 1.0, 0.0], 0.999_999), 1);
        assert_eq!(draw(&[0.5, 0.5], 0.0), 0);
        assert_eq!(draw(&[0.5, 0.5], 0.5), 1);
    }
}
