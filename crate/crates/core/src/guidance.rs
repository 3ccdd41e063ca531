//! Classifier guidance toward per-measure note densities.
//!
//! A small feed-forward network maps the 16 per-step onset probabilities of a
//! measure to its onset count. During sampling the squared error to the target
//! is differentiated with respect to the `x_0` probabilities and subtracted,
//! scaled, from the pitch-token mass of still-masked positions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{Guidance, ProbGrid};
use crate::tokens::{PitchVocab, TokenSequence, TrackKind, STEPS_PER_BAR};

const HIDDEN: usize = 32;
/// Required fraction of held-out measures predicted within one onset.
pub const VALIDATION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("density classifier has not passed validation")]
    Unvalidated,
    #[error("classifier validation accuracy {0:.3} below the required threshold")]
    ValidationFailed(f64),
    #[error("no measures to train on")]
    NoData,
    #[error("guidance scale must be finite and non-negative")]
    Scale,
    #[error("{targets} targets for {bars} bars")]
    Targets { targets: usize, bars: usize },
    #[error("track {0} is not a pitched track")]
    Track(usize),
}

pub type Features = [f64; STEPS_PER_BAR];

/// Onset indicators of every full measure of a pitched track.
pub fn measure_features(seq: &TokenSequence, track: usize) -> Vec<(Features, f64)> {
    (0..seq.steps() / STEPS_PER_BAR)
        .map(|b| {
            let mut f = [0.0; STEPS_PER_BAR];
            for (i, v) in f.iter_mut().enumerate() {
                *v = f64::from(u8::from(PitchVocab::is_onset(
                    seq.get(b * STEPS_PER_BAR + i, track),
                )));
            }
            let count = f.iter().sum();
            (f, count)
        })
        .collect()
}

/// Onsets per measure of a pitched track.
pub fn measure_densities(seq: &TokenSequence, track: usize) -> Vec<usize> {
    measure_features(seq, track)
        .into_iter()
        .map(|(_, c)| c as usize)
        .collect()
}

/// `16 -> 32 (tanh) -> 1` regressor of onset count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityClassifier {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    /// Held-out ±1 accuracy once validation has passed.
    validated: Option<f64>,
}

impl DensityClassifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (1.0 / STEPS_PER_BAR as f64).sqrt()).expect("valid");
        let n2 = Normal::new(0.0, (1.0 / HIDDEN as f64).sqrt()).expect("valid");
        Self {
            w1: (0..STEPS_PER_BAR * HIDDEN).map(|_| n1.sample(&mut rng)).collect(),
            b1: vec![0.0; HIDDEN],
            w2: (0..HIDDEN).map(|_| n2.sample(&mut rng)).collect(),
            b2: 0.0,
            validated: None,
        }
    }

    fn hidden(&self, f: &Features) -> [f64; HIDDEN] {
        let mut h = [0.0; HIDDEN];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut z = self.b1[j];
            for (i, fi) in f.iter().enumerate() {
                z += fi * self.w1[i * HIDDEN + j];
            }
            *hj = z.tanh();
        }
        h
    }

    pub fn predict(&self, f: &Features) -> f64 {
        let h = self.hidden(f);
        self.b2 + h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Prediction and its gradient with respect to the features.
    pub fn predict_grad(&self, f: &Features) -> (f64, Features) {
        let h = self.hidden(f);
        let y = self.b2 + h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
        let mut g = [0.0; STEPS_PER_BAR];
        for (i, gi) in g.iter_mut().enumerate() {
            for j in 0..HIDDEN {
                *gi += self.w2[j] * (1.0 - h[j] * h[j]) * self.w1[i * HIDDEN + j];
            }
        }
        (y, g)
    }

    /// Mean-squared-error fit with Adam.
    pub fn fit(data: &[(Features, f64)], epochs: usize, seed: u64) -> Result<Self, GuidanceError> {
        if data.is_empty() {
            return Err(GuidanceError::NoData);
        }
        let mut model = Self::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let n_params = model.w1.len() + model.b1.len() + model.w2.len() + 1;
        let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
        let (lr, b1, b2, eps) = (3e-3, 0.9, 0.999, 1e-8);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = 32;
        let mut step = 0i32;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut grad = vec![0.0; n_params];
                for &idx in chunk {
                    let (f, target) = &data[idx];
                    let h = model.hidden(f);
                    let y = model.b2 + h.iter().zip(&model.w2).map(|(a, b)| a * b).sum::<f64>();
                    let dy = 2.0 * (y - target) / chunk.len() as f64;
                    let (gw1, rest) = grad.split_at_mut(model.w1.len());
                    let (gb1, rest) = rest.split_at_mut(HIDDEN);
                    let (gw2, gb2) = rest.split_at_mut(HIDDEN);
                    gb2[0] += dy;
                    for j in 0..HIDDEN {
                        gw2[j] += dy * h[j];
                        let dz = dy * model.w2[j] * (1.0 - h[j] * h[j]);
                        gb1[j] += dz;
                        for (i, fi) in f.iter().enumerate() {
                            gw1[i * HIDDEN + j] += dz * fi;
                        }
                    }
                }
                step += 1;
                let c1 = 1.0 - f64::powi(b1, step);
                let c2 = 1.0 - f64::powi(b2, step);
                let params = model
                    .w1
                    .iter_mut()
                    .chain(model.b1.iter_mut())
                    .chain(model.w2.iter_mut())
                    .chain(std::iter::once(&mut model.b2));
                for (((p, g), mi), vi) in params.zip(&grad).zip(&mut m).zip(&mut v) {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        Ok(model)
    }

    /// Fraction of measures whose rounded prediction is within one onset.
    pub fn accuracy_within_one(&self, data: &[(Features, f64)]) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let ok = data
            .iter()
            .filter(|(f, c)| (self.predict(f).round() - c).abs() <= 1.0)
            .count();
        ok as f64 / data.len() as f64
    }

    /// Marks the classifier usable when it reaches the threshold on held-out data.
    pub fn validate(&mut self, held_out: &[(Features, f64)]) -> Result<f64, GuidanceError> {
        if held_out.is_empty() {
            return Err(GuidanceError::NoData);
        }
        let acc = self.accuracy_within_one(held_out);
        if acc >= VALIDATION_THRESHOLD {
            self.validated = Some(acc);
            Ok(acc)
        } else {
            self.validated = None;
            Err(GuidanceError::ValidationFailed(acc))
        }
    }

    pub fn validated(&self) -> Option<f64> {
        self.validated
    }

    /// Trains on the measures of `pieces`, validating on a held-out fifth.
    pub fn train_on(
        pieces: &[TokenSequence],
        track: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<Self, GuidanceError> {
        let mut data: Vec<(Features, f64)> = pieces
            .iter()
            .flat_map(|p| measure_features(p, track))
            .collect();
        data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = data.len() - data.len() / 5;
        let (train, held) = data.split_at(split);
        let mut c = Self::fit(train, epochs, seed)?;
        c.validate(held)?;
        Ok(c)
    }
}

/// Expected onset indicator per step of one pitched track: the pitch-token mass
/// of masked rows, the one-hot value elsewhere.
fn soft_onsets(x_t: &TokenSequence, probs: &ProbGrid, track: usize) -> Vec<f64> {
    (0..x_t.steps())
        .map(|s| match probs.row(s, track) {
            Some(p) => p[..PitchVocab::NOTE_OFF as usize].iter().sum(),
            None => f64::from(u8::from(PitchVocab::is_onset(x_t.get(s, track)))),
        })
        .collect()
}

/// Density guidance for one track.
#[derive(Debug, Clone)]
pub struct DensityGuidance {
    classifier: DensityClassifier,
    targets: Vec<f64>,
    scale: f64,
    track: usize,
}

impl DensityGuidance {
    pub fn new(
        classifier: DensityClassifier,
        targets: Vec<f64>,
        scale: f64,
        track: usize,
    ) -> Result<Self, GuidanceError> {
        if classifier.validated.is_none() {
            return Err(GuidanceError::Unvalidated);
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(GuidanceError::Scale);
        }
        Ok(Self {
            classifier,
            targets,
            scale,
            track,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check(&self, x_t: &TokenSequence) -> Result<(), GuidanceError> {
        if x_t.kinds().get(self.track) != Some(&TrackKind::Pitch) {
            return Err(GuidanceError::Track(self.track));
        }
        let bars = x_t.steps() / STEPS_PER_BAR;
        if self.targets.len() != bars {
            return Err(GuidanceError::Targets {
                targets: self.targets.len(),
                bars,
            });
        }
        Ok(())
    }

    /// Squared error summed over measures and its gradient with respect to the
    /// expected onset indicator of each step.
    pub fn loss_grad(&self, x_t: &TokenSequence, probs: &ProbGrid) -> Result<(f64, Vec<f64>), GuidanceError> {
        self.check(x_t)?;
        let onsets = soft_onsets(x_t, probs, self.track);
        let mut loss = 0.0;
        let mut grad = vec![0.0; x_t.steps()];
        for (b, target) in self.targets.iter().enumerate() {
            let span = b * STEPS_PER_BAR..(b + 1) * STEPS_PER_BAR;
            let f: Features = onsets[span.clone()].try_into().expect("one measure");
            let (y, g) = self.classifier.predict_grad(&f);
            loss += (y - target) * (y - target);
            for (dst, gi) in grad[span].iter_mut().zip(g) {
                *dst = 2.0 * (y - target) * gi;
            }
        }
        Ok((loss, grad))
    }

    /// Loss as a function of the probability grid alone, for gradient checks.
    pub fn loss(&self, x_t: &TokenSequence, probs: &ProbGrid) -> Result<f64, GuidanceError> {
        self.loss_grad(x_t, probs).map(|(l, _)| l)
    }
}

impl Guidance for DensityGuidance {
    fn adjust(&self, x_t: &TokenSequence, probs: &mut ProbGrid) -> usize {
        if self.scale == 0.0 {
            return 0;
        }
        let (_, grad) = self
            .loss_grad(x_t, probs)
            .expect("guidance shape checked before sampling");
        let mut fallbacks = 0;
        for (s, g) in grad.iter().enumerate() {
            let Some(row) = probs.row_mut(s, self.track) else {
                continue;
            };
            let original = row.clone();
            for p in &mut row[..PitchVocab::NOTE_OFF as usize] {
                *p -= self.scale * g;
            }
            if !repair(row) {
                *row = original;
                fallbacks += 1;
            }
        }
        fallbacks
    }

    fn check(&self, x: &TokenSequence) -> Result<(), String> {
        DensityGuidance::check(self, x).map_err(|e| e.to_string())
    }
}

/// Clips negatives and renormalizes; false when nothing positive remains.
pub fn repair(row: &mut [f64]) -> bool {
    let mut total = 0.0;
    for p in row.iter_mut() {
        if !(*p > 0.0) {
            *p = 0.0;
        }
        total += *p;
    }
    if !(total > 0.0 && total.is_finite()) {
        return false;
    }
    for p in row.iter_mut() {
        *p /= total;
    }
    true
}

/// Per-measure hit rates of `pieces` against `targets`.
pub fn density_hits(pieces: &[(TokenSequence, Vec<f64>)], track: usize) -> (f64, f64, f64) {
    let (mut exact, mut near, mut total, mut err) = (0usize, 0usize, 0usize, 0.0);
    for (p, targets) in pieces {
        for (d, t) in measure_densities(p, track).into_iter().zip(targets) {
            let diff = (d as f64 - t).abs();
            exact += usize::from(diff < 0.5);
            near += usize::from(diff <= 1.0);
            err += d as f64 - t;
            total += 1;
        }
    }
    let n = total.max(1) as f64;
    (exact as f64 / n, near as f64 / n, err / n)
}

/// Draws a random probability grid row set for tests and demos.
pub fn random_grid<R: Rng + ?Sized>(x_t: &TokenSequence, rng: &mut R) -> ProbGrid {
    let mut grid = crate::sampler::empty_grid(x_t);
    for s in 0..x_t.steps() {
        for k in 0..x_t.tracks() {
            if x_t.is_mask(s, k) {
                let n = x_t.kinds()[k].vocab_size() as usize;
                let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
                *grid.slot_mut(s, k) = Some(row);
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::tokens::Layout;

    fn trained() -> DensityClassifier {
        let corpus = synth::melody_corpus(60, 16, 3);
        DensityClassifier::train_on(&corpus, 0, 60, 1).unwrap()
    }

    #[test]
    fn classifier_validates_on_real_measures() {
        let c = trained();
        assert!(c.validated().unwrap() >= VALIDATION_THRESHOLD);
        let silent = [0.0; STEPS_PER_BAR];
        assert!(c.predict(&silent).abs() < 0.75, "{}", c.predict(&silent));
    }

    #[test]
    fn unvalidated_classifier_is_refused() {
        let c = DensityClassifier::new(0);
        assert_eq!(
            DensityGuidance::new(c, vec![4.0; 16], 1.0, 0).unwrap_err(),
            GuidanceError::Unvalidated
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = trained();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = synth::random_melody(&mut rng, 4);
        let pattern = crate::mask::MaskPattern::span(64, 1, 8, 40);
        let x_t = pattern.apply(&base).unwrap();
        let g = DensityGuidance::new(c, vec![5.0, 2.0, 9.0, 4.0], 1.0, 0).unwrap();
        let mut grid = random_grid(&x_t, &mut rng);
        let (_, grad) = g.loss_grad(&x_t, &grid).unwrap();
        for s in 8..40 {
            for v in [0usize, 40, 87, 88, 89] {
                let h = 1e-6;
                let orig = grid.row(s, 0).unwrap()[v];
                grid.row_mut(s, 0).unwrap()[v] = orig + h;
                let up = g.loss(&x_t, &grid).unwrap();
                grid.row_mut(s, 0).unwrap()[v] = orig - h;
                let down = g.loss(&x_t, &grid).unwrap();
                grid.row_mut(s, 0).unwrap()[v] = orig;
                let fd = (up - down) / (2.0 * h);
                let analytic = if v < 88 { grad[s] } else { 0.0 };
                let rel = (fd - analytic).abs() / (fd.abs() + analytic.abs()).max(1e-8);
                assert!(rel < 1e-4, "step {s} token {v}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn true_density_is_near_minimal() {
        let c = trained();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let piece = synth::random_melody(&mut rng, 4);
        let truth: Vec<f64> = measure_densities(&piece, 0).iter().map(|&d| d as f64).collect();
        let grid = crate::sampler::empty_grid(&piece);
        let exact = DensityGuidance::new(c.clone(), truth.clone(), 1.0, 0).unwrap();
        let off = DensityGuidance::new(c, truth.iter().map(|t| t + 3.0).collect(), 1.0, 0).unwrap();
        assert!(exact.loss(&piece, &grid).unwrap() < off.loss(&piece, &grid).unwrap());
        assert!(exact.loss(&piece, &grid).unwrap() < 4.0 * 0.5 * 0.5);
    }

    #[test]
    fn repair_semantics() {
        let mut r = vec![0.5, -0.2, 0.5];
        assert!(repair(&mut r));
        assert_eq!(r, vec![0.5, 0.0, 0.5]);
        let mut z = vec![-1.0, 0.0];
        assert!(!repair(&mut z));
    }

    #[test]
    fn wrong_target_length_is_reported() {
        let c = trained();
        let g = DensityGuidance::new(c, vec![4.0; 3], 1.0, 0).unwrap();
        let x = TokenSequence::all_masked(Layout::Melody.kinds(), 64, 16);
        let grid = crate::sampler::empty_grid(&x);
        assert_eq!(
            g.loss(&x, &grid).unwrap_err(),
            GuidanceError::Targets { targets: 3, bars: 4 }
        );
    }
}
