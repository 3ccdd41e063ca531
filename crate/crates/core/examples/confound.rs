//! Anneals a synthetic sketch toward a random melody and prints the report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unmask_core::confounder::{anneal, image_to_notes, AnnealerConfig};
use unmask_core::synth;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let reference = synth::melody_corpus(1, 64, 21).remove(0);
    let img = synth::sketch_image(1024, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = image_to_notes(&img, 127, &mut rng).expect("sketch has ink");
    let arg = |i: usize| std::env::args().nth(i).and_then(|s| s.parse::<u32>().ok());
    let mut cfg = AnnealerConfig { seed, ..AnnealerConfig::default() };
    if let Some(iterations) = arg(2) {
        cfg.iterations = u64::from(iterations);
    }
    if let Some(p) = arg(3) {
        cfg.envelope_penalty = (p > 0).then_some(f64::from(p) / 100.0);
    }
    let t = std::time::Instant::now();
    let out = anneal(start, &reference, &cfg).expect("anneal");
    println!("{}", out.report.table("forged"));
    println!("{:?}\n{:?}", out.report.pitch, out.report.duration);
    println!(
        "converged {} iterations {} accepted {} objective {:.5} anchored {:.3} T0 {:.3e} {:.1}s",
        out.converged,
        out.iterations,
        out.accepted,
        out.objective,
        out.score.anchored_fraction(2, 2),
        out.initial_temperature,
        t.elapsed().as_secs_f64()
    );
}
