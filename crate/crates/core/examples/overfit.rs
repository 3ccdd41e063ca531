//! Trains the desk model on the memorization fixture and reports progress.
//!
//! `cargo run --release -p unmask-core --example overfit -- [steps] [eval_every] [lr] [batch] [checkpoint] [resume]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unmask_core::checkpoint::Checkpoint;
use unmask_core::diffusion::{q_sample, DiffusionSchedule};
use unmask_core::nn::DenoiserConfig;
use unmask_core::synth::overfit_fixture;
use unmask_core::tokens::{Layout, TokenSequence};
use unmask_core::nn::Model;
use unmask_core::train::{masked_accuracy, Trainer};

/// Masked accuracy with every piece corrupted at the same timestep.
fn accuracy_at(model: &Model<f32>, corpus: &[TokenSequence], schedule: &DiffusionSchedule, t: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    let (mut hit, mut total) = (0, 0);
    for x0 in corpus {
        let c = q_sample(x0, t, schedule, &mut rng).expect("valid t");
        let logits = model.forward(&c.xt).expect("forward");
        for s in 0..x0.steps() {
            if c.mask.get(s, 0) {
                total += 1;
                hit += usize::from(logits.argmax(s, 0) == x0.get(s, 0) as usize);
            }
        }
    }
    hit as f64 / total.max(1) as f64
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).map_or(d, |a| a.parse().expect("number"));
    let steps = arg(0, 2000.0) as u64;
    let every = arg(1, 250.0) as u64;
    let mut config = DenoiserConfig::desk(Layout::Melody);
    config.learning_rate = arg(2, config.learning_rate);
    config.batch_size = arg(3, config.batch_size as f64) as usize;
    let corpus = overfit_fixture(100, 16, 1);
    let schedule = DiffusionSchedule::new(256);
    let mut trainer = match args.get(5) {
        Some(path) => {
            let ck = Checkpoint::load(std::path::Path::new(path)).expect("load checkpoint");
            Trainer::from_checkpoint(ck).expect("checkpoint")
        }
        None => Trainer::new(config, schedule, 1).expect("config"),
    };
    let start = Instant::now();
    let mut window = 0.0;
    let first = trainer.step + 1;
    for step in first..first + steps {
        window += trainer.train_step(&corpus).expect("finite loss").loss;
        if step % every == 0 {
            let acc = masked_accuracy(&trainer.model, &corpus, &schedule, 1, 99).expect("eval");
            let by_t: Vec<String> = [64, 128, 192, 232, 248]
                .iter()
                .map(|&t| format!("{:.3}", accuracy_at(&trainer.model, &corpus, &schedule, t)))
                .collect();
            println!(
                "step {step:>6}  loss {:.4}  acc {acc:.4}  by t {}  {:.1}s",
                window / every as f64,
                by_t.join(" "),
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
    }
    if let Some(path) = args.get(4) {
        trainer.checkpoint().save(std::path::Path::new(path)).expect("save checkpoint");
    }
}
