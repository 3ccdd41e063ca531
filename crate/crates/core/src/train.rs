//! Training loop: sample a batch, corrupt each example at a random timestep,
//! run the network and take an Adam step on the reweighted loss.
//!
//! Every example draws from its own RNG stream keyed by `(seed, step, slot)`, so
//! a run is reproducible from its seed and resumes exactly from a checkpoint.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::diffusion::{
    q_sample_tracks, sample_track_subset, training_loss_grad, DiffusionError, DiffusionSchedule,
};
use crate::nn::{Adam, DenoiserConfig, Model, ModelError};
use crate::tokens::TokenSequence;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub masked: usize,
    pub wallclock: f64,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ step) ^ slot))
}

pub struct Trainer {
    pub model: Model<f32>,
    pub opt: Adam,
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(
        config: DenoiserConfig,
        schedule: DiffusionSchedule,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = stream(seed, u64::MAX, 0);
        let model = Model::init(config, &mut rng)?;
        let opt = Adam::new(model.config().learning_rate, model.param_count());
        Ok(Self {
            model,
            opt,
            schedule,
            seed,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        let model = Model::from_params(ck.config, ck.params)?;
        Ok(Self {
            model,
            opt: ck.adam,
            schedule: ck.schedule,
            seed: ck.seed,
            step: ck.step,
            started: Instant::now(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            schedule: self.schedule,
            params: self.model.params().to_vec(),
            adam: self.opt.clone(),
            step: self.step,
            seed: self.seed,
        }
    }

    /// One optimizer step on a batch drawn from `corpus`.
    pub fn train_step(&mut self, corpus: &[TokenSequence]) -> Result<StepStats, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let batch = self.model.config().batch_size;
        let tracks = self.model.config().tracks.len();
        let mut pick = stream(self.seed, self.step, u64::MAX);
        let mut grad = vec![0.0f32; self.model.param_count()];
        let mut loss = 0.0;
        let mut masked = 0;
        for slot in 0..batch {
            let x0 = &corpus[pick.random_range(0..corpus.len())];
            let mut rng = stream(self.seed, self.step, slot as u64);
            let t = self.schedule.sample_t(&mut rng);
            let subset = if tracks > 1 {
                sample_track_subset(tracks, &mut rng)
            } else {
                vec![0]
            };
            let c = q_sample_tracks(x0, t, &self.schedule, &subset, &mut rng)?;
            let (logits, cache) = self.model.forward_cached(&c.xt)?;
            let (value, dl) =
                training_loss_grad(x0, &logits, &c.mask, t, &self.schedule, 1.0 / batch as f64)?;
            loss += value.loss / batch as f64;
            masked += value.masked;
            if value.weight > 0.0 && !value.empty {
                self.model.backward(&cache, &dl, &mut grad);
            }
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step: self.step });
        }
        self.opt.update(self.model.params_mut(), &grad);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr: self.opt.lr,
            masked,
            wallclock: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs `steps` optimizer steps, writing one JSON line per step to `log`.
    pub fn run(
        &mut self,
        corpus: &[TokenSequence],
        steps: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<f64>, TrainError> {
        let mut curve = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let stats = self.train_step(corpus)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &stats).map_err(std::io::Error::other)?;
                w.write_all(b"\n")?;
            }
            curve.push(stats.loss);
        }
        Ok(curve)
    }
}

/// Argmax accuracy on masked positions under the training corruption, `rounds`
/// corruptions per piece with uniformly drawn timesteps.
pub fn masked_accuracy(
    model: &Model<f32>,
    corpus: &[TokenSequence],
    schedule: &DiffusionSchedule,
    rounds: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let tracks = model.config().tracks.len();
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, x0) in corpus.iter().enumerate() {
        for r in 0..rounds {
            let mut rng = stream(seed, i as u64, r as u64);
            let t = schedule.sample_t(&mut rng);
            let subset = if tracks > 1 {
                sample_track_subset(tracks, &mut rng)
            } else {
                vec![0]
            };
            let c = q_sample_tracks(x0, t, schedule, &subset, &mut rng)?;
            let logits = model.forward(&c.xt)?;
            for s in 0..x0.steps() {
                for k in 0..tracks {
                    if c.mask.get(s, k) {
                        total += 1;
                        hit += usize::from(logits.argmax(s, k) == x0.get(s, k) as usize);
                    }
                }
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Means over consecutive non-overlapping windows of `width` steps.
pub fn smoothed(curve: &[f64], width: usize) -> Vec<f64> {
    curve
        .chunks_exact(width)
        .map(|c| c.iter().sum::<f64>() / width as f64)
        .collect()
}
