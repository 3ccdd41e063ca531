//! Absorbing-state forward process, posterior, ELBO diagnostics and the
//! reweighted training objective.
//!
//! Each category either stays put or jumps to the mask state. The per-step jump
//! probability `1 / (T - t + 1)` makes the cumulative masking probability after
//! `t` steps exactly `t / T`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::MaskPattern;
use crate::scalar::Scalar;
use crate::tokens::TokenSequence;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },
    #[error("clean sequence contains mask tokens")]
    MaskedInput,
    #[error("x_t = {x_t} cannot arise from x_0 = {x0} under the forward process")]
    ImpossiblePair { x_t: usize, x0: usize },
    #[error("logits/sequence/mask shapes disagree")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `max(0, (T - t - 1) / T)`
    #[default]
    Reweighted,
    /// Weight 1 at every timestep (ablation).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    #[serde(default)]
    pub weighting: LossWeighting,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::new(1024)
    }
}

impl DiffusionSchedule {
    pub fn new(timesteps: usize) -> Self {
        assert!(timesteps >= 1);
        Self {
            timesteps,
            weighting: LossWeighting::Reweighted,
        }
    }

    /// Probability that a token is masked after `t` forward steps.
    pub fn mask_prob(&self, t: usize) -> f64 {
        t as f64 / self.timesteps as f64
    }

    /// Probability that an unmasked token is absorbed at step `t`.
    pub fn step_mask_prob(&self, t: usize) -> f64 {
        1.0 / (self.timesteps - t + 1) as f64
    }

    pub fn loss_weight(&self, t: usize) -> f64 {
        match self.weighting {
            LossWeighting::Reweighted => {
                let tt = self.timesteps as f64;
                ((tt - t as f64 - 1.0) / tt).max(0.0)
            }
            LossWeighting::Uniform => 1.0,
        }
    }

    pub fn check(&self, t: usize, lo: usize) -> Result<(), DiffusionError> {
        if t < lo || t > self.timesteps {
            return Err(DiffusionError::Timestep {
                t,
                lo,
                hi: self.timesteps,
            });
        }
        Ok(())
    }

    /// Uniform draw from `{1, ..., T}`.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.timesteps)
    }
}

/// Entry `[i][j]` of an absorbing kernel over `vocab + 1` states whose
/// off-diagonal mass `p` moves to the mask state (index `vocab`).
#[inline]
fn absorbing_entry(vocab: usize, p: f64, i: usize, j: usize) -> f64 {
    if i == vocab {
        f64::from(u8::from(j == vocab))
    } else if j == i {
        1.0 - p
    } else if j == vocab {
        p
    } else {
        0.0
    }
}

/// Dense row-stochastic matrix, `[i][j] = q(next = j | current = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    states: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(states: usize) -> Self {
        let mut data = vec![0.0; states * states];
        for i in 0..states {
            data[i * states + i] = 1.0;
        }
        Self { states, data }
    }

    pub fn from_fn(states: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..states * states)
            .map(|idx| f(idx / states, idx % states))
            .collect();
        Self { states, data }
    }

    /// Single-step kernel `Q_t` over `vocab` categories plus the mask.
    pub fn absorbing_step(vocab: usize, schedule: &DiffusionSchedule, t: usize) -> Self {
        let p = schedule.step_mask_prob(t);
        Self::from_fn(vocab + 1, |i, j| absorbing_entry(vocab, p, i, j))
    }

    pub fn states(&self) -> usize {
        self.states
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.states + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.states..(i + 1) * self.states]
    }

    /// `self @ next`: apply `self`, then `next`.
    pub fn then(&self, next: &TransitionMatrix) -> TransitionMatrix {
        assert_eq!(self.states, next.states);
        let n = self.states;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for l in 0..n {
                let a = self.data[i * n + l];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * next.data[l * n + j];
                }
            }
        }
        TransitionMatrix { states: n, data }
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.states)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Closed-form `Q̄_t = Q_1 ... Q_t` of the absorbing process: diagonal `1 - t/T`
/// on non-mask states, mask column `t/T`.
pub fn cumulative_matrix(
    schedule: &DiffusionSchedule,
    vocab: usize,
    t: usize,
) -> Result<TransitionMatrix, DiffusionError> {
    schedule.check(t, 0)?;
    let p = schedule.mask_prob(t);
    Ok(TransitionMatrix::from_fn(vocab + 1, |i, j| {
        absorbing_entry(vocab, p, i, j)
    }))
}

/// `q(x_{t-1} | x_t, x_0)` from explicit kernels:
/// `(x_t Q_t^T ∘ x_0 Q̄_{t-1}) / (x_0 Q̄_t x_t^T)`.
pub fn posterior_with(
    step: &TransitionMatrix,
    cum_prev: &TransitionMatrix,
    cum: &TransitionMatrix,
    x_t: usize,
    x0: usize,
) -> Result<Vec<f64>, DiffusionError> {
    let denom = cum.get(x0, x_t);
    if denom <= 0.0 {
        return Err(DiffusionError::ImpossiblePair { x_t, x0 });
    }
    Ok((0..step.states())
        .map(|j| step.get(j, x_t) * cum_prev.get(x0, j) / denom)
        .collect())
}

/// Absorbing-process posterior over `vocab + 1` states without building matrices.
pub fn posterior(
    x_t: usize,
    x0: usize,
    t: usize,
    schedule: &DiffusionSchedule,
    vocab: usize,
) -> Result<Vec<f64>, DiffusionError> {
    schedule.check(t, 1)?;
    let beta = schedule.step_mask_prob(t);
    let prev = schedule.mask_prob(t - 1);
    let cum = schedule.mask_prob(t);
    let denom = absorbing_entry(vocab, cum, x0, x_t);
    if denom <= 0.0 {
        return Err(DiffusionError::ImpossiblePair { x_t, x0 });
    }
    Ok((0..=vocab)
        .map(|j| absorbing_entry(vocab, beta, j, x_t) * absorbing_entry(vocab, prev, x0, j) / denom)
        .collect())
}

/// A clean sequence and its corruption at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub x0: TokenSequence,
    pub xt: TokenSequence,
    pub t: usize,
    pub mask: MaskPattern,
}

/// Masks each token independently with probability `t / T`.
pub fn q_sample<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Corrupted, DiffusionError> {
    let all: Vec<usize> = (0..x0.tracks()).collect();
    q_sample_tracks(x0, t, schedule, &all, rng)
}

/// Like [`q_sample`] but only positions on `tracks` can be absorbed.
pub fn q_sample_tracks<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: usize,
    schedule: &DiffusionSchedule,
    tracks: &[usize],
    rng: &mut R,
) -> Result<Corrupted, DiffusionError> {
    schedule.check(t, 1)?;
    if x0.has_masks() {
        return Err(DiffusionError::MaskedInput);
    }
    let p = schedule.mask_prob(t);
    let mut active = vec![false; x0.tracks()];
    for &k in tracks {
        active[k] = true;
    }
    let mut xt = x0.clone();
    let mut mask = MaskPattern::none(x0.steps(), x0.tracks());
    for s in 0..x0.steps() {
        for (k, kind) in x0.kinds().iter().enumerate() {
            if active[k] && rng.random::<f64>() < p {
                xt.set(s, k, kind.mask_id());
                mask.set(s, k, true);
            }
        }
    }
    Ok(Corrupted {
        x0: x0.clone(),
        xt,
        t,
        mask,
    })
}

/// Non-empty track subset, uniform over all `2^n - 1` choices.
pub fn sample_track_subset<R: Rng + ?Sized>(tracks: usize, rng: &mut R) -> Vec<usize> {
    let bits = rng.random_range(1..(1u32 << tracks));
    (0..tracks).filter(|k| bits & (1 << k) != 0).collect()
}

/// Unnormalized scores over the clean vocabulary of each track, per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    steps: usize,
    vocab: Vec<usize>,
    data: Vec<Vec<F>>,
}

impl<F: Scalar> Logits<F> {
    pub fn zeros(steps: usize, vocab: Vec<usize>) -> Self {
        let data = vocab.iter().map(|v| vec![F::zero(); steps * v]).collect();
        Self { steps, vocab, data }
    }

    pub fn from_blocks(steps: usize, vocab: Vec<usize>, data: Vec<Vec<F>>) -> Self {
        assert_eq!(vocab.len(), data.len());
        for (v, d) in vocab.iter().zip(&data) {
            assert_eq!(d.len(), steps * v);
        }
        Self { steps, vocab, data }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tracks(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self, track: usize) -> usize {
        self.vocab[track]
    }

    pub fn vocabs(&self) -> &[usize] {
        &self.vocab
    }

    pub fn block(&self, track: usize) -> &[F] {
        &self.data[track]
    }

    pub fn block_mut(&mut self, track: usize) -> &mut [F] {
        &mut self.data[track]
    }

    pub fn into_blocks(self) -> Vec<Vec<F>> {
        self.data
    }

    pub fn row(&self, step: usize, track: usize) -> &[F] {
        let v = self.vocab[track];
        &self.data[track][step * v..(step + 1) * v]
    }

    pub fn row_mut(&mut self, step: usize, track: usize) -> &mut [F] {
        let v = self.vocab[track];
        &mut self.data[track][step * v..(step + 1) * v]
    }

    /// Softmax of one row in f64.
    pub fn probs(&self, step: usize, track: usize) -> Vec<f64> {
        softmax64(self.row(step, track))
    }

    pub fn argmax(&self, step: usize, track: usize) -> usize {
        let row = self.row(step, track);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn matches(&self, seq: &TokenSequence) -> bool {
        self.steps == seq.steps()
            && self.vocab.len() == seq.tracks()
            && self
                .vocab
                .iter()
                .zip(seq.kinds())
                .all(|(v, k)| *v == k.vocab_size() as usize)
    }
}

pub fn softmax64<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

fn log_softmax_at<F: Scalar>(row: &[F], idx: usize) -> f64 {
    let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    row[idx].f64() - lse
}

/// A network estimating `p(x_0 | x_t)`.
pub trait Denoiser: Sync {
    /// Logits over the clean vocabulary of every track; the mask class is never predicted.
    fn logits(&self, x_t: &TokenSequence) -> Logits<f32>;

    /// Rejects inputs [`Denoiser::logits`] cannot handle.
    fn validate(&self, _x_t: &TokenSequence) -> Result<(), String> {
        Ok(())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn logits(&self, x_t: &TokenSequence) -> Logits<f32> {
        (**self).logits(x_t)
    }

    fn validate(&self, x_t: &TokenSequence) -> Result<(), String> {
        (**self).validate(x_t)
    }
}

impl<D: Denoiser + ?Sized + Send> Denoiser for Box<D> {
    fn logits(&self, x_t: &TokenSequence) -> Logits<f32> {
        (**self).logits(x_t)
    }

    fn validate(&self, x_t: &TokenSequence) -> Result<(), String> {
        (**self).validate(x_t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    /// Timestep drawn for the transition term.
    pub t: usize,
    pub x_t: TokenSequence,
    pub x_1: TokenSequence,
    /// `L_T = KL(q(x_T | x_0) || p(x_T))`
    pub prior: f64,
    /// `L_{t-1} = KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t))`
    pub transition: f64,
    /// `L_0 = -log p(x_0 | x_1)`
    pub reconstruction: f64,
}

/// Single-sample estimate of the ELBO terms for diagnostics.
pub fn elbo_terms<R: Rng + ?Sized>(
    x0: &TokenSequence,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<ElboTerms, DiffusionError> {
    if schedule.timesteps < 2 {
        return Err(DiffusionError::Timestep {
            t: schedule.timesteps,
            lo: 2,
            hi: usize::MAX,
        });
    }
    let t = rng.random_range(2..=schedule.timesteps);
    let x_t = q_sample(x0, t, schedule, rng)?.xt;
    let x_1 = q_sample(x0, 1, schedule, rng)?.xt;
    let transition = elbo_transition(x0, &x_t, t, denoiser, schedule)?;
    let reconstruction = elbo_reconstruction(x0, &x_1, denoiser)?;
    let prior = elbo_prior(x0, schedule)?;
    Ok(ElboTerms {
        t,
        x_t,
        x_1,
        prior,
        transition,
        reconstruction,
    })
}

/// `L_T`; zero for the absorbing process since `x_T` is all-mask.
pub fn elbo_prior(x0: &TokenSequence, schedule: &DiffusionSchedule) -> Result<f64, DiffusionError> {
    let mut total = 0.0;
    for s in 0..x0.steps() {
        for (k, kind) in x0.kinds().iter().enumerate() {
            let vocab = kind.vocab_size() as usize;
            let cum = schedule.mask_prob(schedule.timesteps);
            let x = x0.get(s, k) as usize;
            for j in 0..=vocab {
                let q = absorbing_entry(vocab, cum, x, j);
                if q > 0.0 {
                    let p = f64::from(u8::from(j == vocab));
                    total += q * (q / p).ln();
                }
            }
        }
    }
    Ok(total)
}

/// `L_{t-1}` at a given corruption `x_t`.
pub fn elbo_transition(
    x0: &TokenSequence,
    x_t: &TokenSequence,
    t: usize,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
) -> Result<f64, DiffusionError> {
    schedule.check(t, 2)?;
    let logits = denoiser.logits(x_t);
    if !logits.matches(x0) {
        return Err(DiffusionError::Shape);
    }
    let mut total = 0.0;
    for s in 0..x0.steps() {
        for (k, kind) in x0.kinds().iter().enumerate() {
            let vocab = kind.vocab_size() as usize;
            let xt = x_t.get(s, k) as usize;
            let q = posterior(xt, x0.get(s, k) as usize, t, schedule, vocab)?;
            let p = model_step(&logits.probs(s, k), xt, t, schedule, vocab);
            total += kl(&q, &p);
        }
    }
    Ok(total)
}

/// `L_0` at a given corruption `x_1`: only absorbed positions carry a cost.
pub fn elbo_reconstruction(
    x0: &TokenSequence,
    x_1: &TokenSequence,
    denoiser: &dyn Denoiser,
) -> Result<f64, DiffusionError> {
    let logits = denoiser.logits(x_1);
    if !logits.matches(x0) {
        return Err(DiffusionError::Shape);
    }
    let mut total = 0.0;
    for s in 0..x0.steps() {
        for k in 0..x0.tracks() {
            if x_1.is_mask(s, k) {
                total -= log_softmax_at(logits.row(s, k), x0.get(s, k) as usize);
            }
        }
    }
    Ok(total)
}

/// `p(x_{t-1} | x_t) = Σ_{x_0} q(x_{t-1} | x_t, x_0) p(x_0 | x_t)` restricted to
/// the `x_0` consistent with `x_t`.
fn model_step(
    p_x0: &[f64],
    x_t: usize,
    t: usize,
    schedule: &DiffusionSchedule,
    vocab: usize,
) -> Vec<f64> {
    let cum = schedule.mask_prob(t);
    let mut out = vec![0.0; vocab + 1];
    let mut norm = 0.0;
    for (x0, &w) in p_x0.iter().enumerate() {
        if w == 0.0 || absorbing_entry(vocab, cum, x0, x_t) == 0.0 {
            continue;
        }
        let q = posterior(x_t, x0, t, schedule, vocab).expect("consistent pair");
        for (o, qv) in out.iter_mut().zip(q) {
            *o += w * qv;
        }
        norm += w;
    }
    for o in &mut out {
        *o /= norm;
    }
    out
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qv, _)| **qv > 0.0)
        .map(|(qv, pv)| qv * (qv / pv).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub weight: f64,
    pub masked: usize,
    /// No position was masked; the loss is zero and carries no signal.
    pub empty: bool,
}

fn check_loss_inputs<F: Scalar>(
    x0: &TokenSequence,
    logits: &Logits<F>,
    mask: &MaskPattern,
) -> Result<(), DiffusionError> {
    if !logits.matches(x0) || mask.check_shape(x0).is_err() {
        return Err(DiffusionError::Shape);
    }
    if x0.has_masks() {
        return Err(DiffusionError::MaskedInput);
    }
    Ok(())
}

/// `w(t) · Σ_{masked} -log softmax(logits)[x_0]`.
pub fn training_loss<F: Scalar>(
    x0: &TokenSequence,
    logits: &Logits<F>,
    mask: &MaskPattern,
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<LossValue, DiffusionError> {
    check_loss_inputs(x0, logits, mask)?;
    schedule.check(t, 1)?;
    let weight = schedule.loss_weight(t);
    let mut ce = 0.0;
    let mut masked = 0;
    for s in 0..x0.steps() {
        for k in 0..x0.tracks() {
            if mask.get(s, k) {
                masked += 1;
                ce -= log_softmax_at(logits.row(s, k), x0.get(s, k) as usize);
            }
        }
    }
    Ok(LossValue {
        loss: if masked == 0 { 0.0 } else { weight * ce },
        weight,
        masked,
        empty: masked == 0,
    })
}

/// [`training_loss`] and its gradient with respect to the logits, scaled by `scale`.
pub fn training_loss_grad<F: Scalar>(
    x0: &TokenSequence,
    logits: &Logits<F>,
    mask: &MaskPattern,
    t: usize,
    schedule: &DiffusionSchedule,
    scale: f64,
) -> Result<(LossValue, Logits<F>), DiffusionError> {
    let value = training_loss(x0, logits, mask, t, schedule)?;
    let mut grad = Logits::zeros(logits.steps(), logits.vocabs().to_vec());
    let w = value.weight * scale;
    if w != 0.0 {
        for s in 0..x0.steps() {
            for k in 0..x0.tracks() {
                if !mask.get(s, k) {
                    continue;
                }
                let p = logits.probs(s, k);
                let target = x0.get(s, k) as usize;
                for (j, (g, pj)) in grad.row_mut(s, k).iter_mut().zip(p).enumerate() {
                    let d = if j == target { pj - 1.0 } else { pj };
                    *g = F::of(w * d);
                }
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{Layout, TrackKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat_seq(k: u16, values: Vec<u16>) -> TokenSequence {
        let n = values.len();
        TokenSequence::from_values(vec![TrackKind::Categorical(k)], n, n, values).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = DiffusionSchedule::new(1024);
        assert_eq!(s.mask_prob(0), 0.0);
        assert_eq!(s.mask_prob(1024), 1.0);
        assert!((1..=1024).all(|t| s.mask_prob(t) >= s.mask_prob(t - 1)));
        assert_eq!(s.loss_weight(1023), 0.0);
        assert_eq!(s.loss_weight(1024), 0.0);
        assert_eq!(s.loss_weight(1), 1022.0 / 1024.0);
    }

    #[test]
    fn full_timestep_masks_everything() {
        let s = DiffusionSchedule::new(16);
        let x0 = TokenSequence::silence(Layout::Trio, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = q_sample(&x0, 16, &s, &mut rng).unwrap();
        assert_eq!(c.mask.count(), 64 * 3);
        assert_eq!(c.xt.mask_count(), 64 * 3);
    }

    #[test]
    fn q_sample_rejects_bad_inputs() {
        let s = DiffusionSchedule::new(16);
        let x0 = TokenSequence::silence(Layout::Melody, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            q_sample(&x0, 0, &s, &mut rng),
            Err(DiffusionError::Timestep { .. })
        ));
        assert!(q_sample(&x0, 17, &s, &mut rng).is_err());
        let masked = TokenSequence::all_masked(Layout::Melody.kinds(), 16, 16);
        assert_eq!(
            q_sample(&masked, 3, &s, &mut rng).unwrap_err(),
            DiffusionError::MaskedInput
        );
    }

    #[test]
    fn corruption_agrees_with_x0_off_mask() {
        let s = DiffusionSchedule::new(8);
        let x0 = cat_seq(5, (0..64).map(|i| (i % 5) as u16).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = q_sample(&x0, 5, &s, &mut rng).unwrap();
        for i in 0..64 {
            if c.mask.get(i, 0) {
                assert_eq!(c.xt.get(i, 0), 5);
            } else {
                assert_eq!(c.xt.get(i, 0), x0.get(i, 0));
            }
        }
    }

    #[test]
    fn track_subset_masking() {
        let s = DiffusionSchedule::new(4);
        let x0 = TokenSequence::silence(Layout::Trio, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = q_sample_tracks(&x0, 4, &s, &[1], &mut rng).unwrap();
        assert_eq!(c.mask.count(), 32);
        assert!((0..32).all(|i| c.mask.get(i, 1) && !c.mask.get(i, 0) && !c.mask.get(i, 2)));
        for _ in 0..50 {
            let sub = sample_track_subset(3, &mut rng);
            assert!(!sub.is_empty() && sub.len() <= 3);
        }
    }

    #[test]
    fn cumulative_closed_form() {
        let s = DiffusionSchedule::new(4);
        let q = cumulative_matrix(&s, 3, 2).unwrap();
        for i in 0..3 {
            assert_eq!(q.get(i, i), 0.5);
            assert_eq!(q.get(i, 3), 0.5);
        }
        assert_eq!(q.get(3, 3), 1.0);
        assert_eq!(
            cumulative_matrix(&s, 3, 1).unwrap(),
            TransitionMatrix::absorbing_step(3, &s, 1)
        );
    }

    #[test]
    fn posterior_cases() {
        let s = DiffusionSchedule::new(4);
        let p = posterior(2, 2, 3, &s, 4).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let p = posterior(4, 1, 2, &s, 4).unwrap();
        assert!((p[1] - 0.5).abs() < 1e-12 && (p[4] - 0.5).abs() < 1e-12);
        assert_eq!(
            posterior(3, 1, 2, &s, 4).unwrap_err(),
            DiffusionError::ImpossiblePair { x_t: 3, x0: 1 }
        );
    }

    #[test]
    fn posterior_matches_matrix_route() {
        let s = DiffusionSchedule::new(6);
        let k = 3;
        for t in 1..=6 {
            let step = TransitionMatrix::absorbing_step(k, &s, t);
            let prev = cumulative_matrix(&s, k, t - 1).unwrap();
            let cum = cumulative_matrix(&s, k, t).unwrap();
            for x0 in 0..k {
                for xt in [x0, k] {
                    if xt == x0 && t == 6 {
                        assert!(posterior(xt, x0, t, &s, k).is_err());
                        continue;
                    }
                    let a = posterior(xt, x0, t, &s, k).unwrap();
                    let b = posterior_with(&step, &prev, &cum, xt, x0).unwrap();
                    for (u, v) in a.iter().zip(&b) {
                        assert!((u - v).abs() < 1e-14);
                    }
                }
            }
        }
    }

    struct OneHot(TokenSequence);

    impl Denoiser for OneHot {
        fn logits(&self, x_t: &TokenSequence) -> Logits<f32> {
            let vocab = x_t.kinds().iter().map(|k| k.vocab_size() as usize).collect();
            let mut l = Logits::zeros(x_t.steps(), vocab);
            for s in 0..x_t.steps() {
                for k in 0..x_t.tracks() {
                    let row = l.row_mut(s, k);
                    row.fill(-1e4);
                    row[self.0.get(s, k) as usize] = 0.0;
                }
            }
            l
        }
    }

    #[test]
    fn perfect_denoiser_has_zero_transition_term() {
        let s = DiffusionSchedule::new(32);
        let x0 = cat_seq(4, vec![0, 3, 1, 2, 2, 0, 1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e = elbo_terms(&x0, &OneHot(x0.clone()), &s, &mut rng).unwrap();
            assert!(e.transition.abs() < 1e-9, "{e:?}");
            assert!(e.reconstruction.abs() < 1e-9);
            assert_eq!(e.prior, 0.0);
        }
    }

    #[test]
    fn loss_examples() {
        let s = DiffusionSchedule::new(1024);
        let x0 = cat_seq(90, vec![7]);
        let mask = MaskPattern::all(1, 1);
        let uniform = Logits::<f64>::zeros(1, vec![90]);
        let v = training_loss(&x0, &uniform, &mask, 1, &s).unwrap();
        assert!((v.loss - 1022.0 / 1024.0 * 90f64.ln()).abs() < 1e-12);
        assert_eq!(training_loss(&x0, &uniform, &mask, 1023, &s).unwrap().loss, 0.0);

        let mut sharp = Logits::<f64>::zeros(1, vec![90]);
        sharp.row_mut(0, 0)[7] = 50.0;
        assert!(training_loss(&x0, &sharp, &mask, 1, &s).unwrap().loss < 1e-18);

        let none = MaskPattern::none(1, 1);
        let v = training_loss(&x0, &uniform, &none, 5, &s).unwrap();
        assert!(v.empty && v.loss == 0.0);
    }

    #[test]
    fn loss_ignores_unmasked_logits() {
        let s = DiffusionSchedule::new(64);
        let x0 = cat_seq(6, vec![1, 2, 3, 4]);
        let mut mask = MaskPattern::none(4, 1);
        mask.set(1, 0, true);
        mask.set(3, 0, true);
        let mut l = Logits::<f64>::zeros(4, vec![6]);
        let base = training_loss(&x0, &l, &mask, 10, &s).unwrap().loss;
        l.row_mut(0, 0)[3] = 17.0;
        l.row_mut(2, 0)[0] = -4.0;
        assert_eq!(training_loss(&x0, &l, &mask, 10, &s).unwrap().loss, base);
        let (_, g) = training_loss_grad(&x0, &l, &mask, 10, &s, 1.0).unwrap();
        assert!(g.row(0, 0).iter().chain(g.row(2, 0)).all(|v| *v == 0.0));
    }
}
