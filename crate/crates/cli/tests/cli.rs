//! End-to-end runs of the `unmask` binary on tiny models.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use serde_json::Value;
use tempfile::TempDir;

use unmask_core::mask::MaskPattern;
use unmask_core::nn::DenoiserConfig;
use unmask_core::synth::{layout_sample, melody_corpus, random_midi_file, sketch_image};
use unmask_core::tokens::{load_sequences, save_sequences, Layout};

fn unmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unmask"))
        .args(args)
        .output()
        .expect("spawn unmask")
}

fn ok(args: &[&str]) -> Value {
    let out = unmask(args);
    assert!(
        out.status.success(),
        "unmask {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 1024-step melody corpus and a briefly trained tiny model over it.
struct Fixture {
    dir: TempDir,
    corpus: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.tok");
        save_sequences(&corpus, &melody_corpus(3, 64, 5)).unwrap();
        let config = DenoiserConfig {
            seq_len: 1024,
            token_embed_dim: 8,
            summary_dim: 16,
            conv_stride: 4,
            n_layers: 1,
            n_heads: 2,
            batch_size: 2,
            ..DenoiserConfig::desk(Layout::Melody)
        };
        let config_path = dir.path().join("tiny.json");
        std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
        let ckpt = dir.path().join("tiny.ckpt");
        let v = ok(&[
            "train",
            "--config",
            s(&config_path),
            "--corpus",
            s(&corpus),
            "--steps",
            "3",
            "--timesteps",
            "64",
            "--out",
            s(&ckpt),
        ]);
        assert_eq!(v["steps"], 3);
        Self { dir, corpus, ckpt }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn sample_one_step_leaves_no_masks_and_is_reproducible() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.tok"), f.path("b.tok"));
    for out in [&a, &b] {
        let v = ok(&["sample", "--ckpt", s(&f.ckpt), "--n", "2", "--steps", "1", "--seed", "9", "--out", s(out)]);
        assert_eq!(v["pieces"], 2);
    }
    let pieces = load_sequences(&a).unwrap();
    assert!(pieces.iter().all(|p| !p.has_masks() && p.steps() == 1024));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn central_infill_preserves_outer_quarters() {
    let f = Fixture::new();
    let out = f.path("infilled.tok");
    let midi = f.path("midi");
    let v = ok(&[
        "infill", "--ckpt", s(&f.ckpt), "--in", s(&f.corpus), "--mask", "central512", "--steps", "16",
        "--out", s(&out), "--midi-dir", s(&midi),
    ]);
    assert_eq!(v["regenerated_tokens"], 3 * 512);
    let before = load_sequences(&f.corpus).unwrap();
    let after = load_sequences(&out).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert!(!y.has_masks());
        for step in (0..256).chain(768..1024) {
            assert_eq!(x.get(step, 0), y.get(step, 0), "step {step}");
        }
    }
    assert_eq!(std::fs::read_dir(&midi).unwrap().count(), 3);
}

#[test]
fn inline_mask_pattern_touches_only_marked_cells() {
    let f = Fixture::new();
    let pattern = MaskPattern::span(1024, 1, 100, 140);
    let out = f.path("spot.tok");
    ok(&["infill", "--ckpt", s(&f.ckpt), "--in", s(&f.corpus), "--mask", &pattern.to_json(), "--out", s(&out)]);
    let before = load_sequences(&f.corpus).unwrap();
    let after = load_sequences(&out).unwrap();
    for (x, y) in before.iter().zip(&after) {
        for step in (0..100).chain(140..1024) {
            assert_eq!(x.get(step, 0), y.get(step, 0));
        }
    }
}

#[test]
fn evaluate_against_itself_scores_one() {
    let f = Fixture::new();
    let v = ok(&["evaluate", "--set", s(&f.corpus), "--ground-truth", s(&f.corpus)]);
    for key in ["pitch_consistency", "pitch_variance", "duration_consistency", "duration_variance"] {
        assert_eq!(v["scores"][key].as_f64(), Some(1.0), "{key}");
    }
}

#[test]
fn failures_exit_nonzero_with_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = unmask(&["sample", "--ckpt", s(&missing), "--out", s(&dir.path().join("x.tok"))]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.ckpt"));
    assert!(!err["error"]["causes"].as_array().unwrap().is_empty());

    let out = unmask(&["sample", "--no-such-flag"]);
    assert!(!out.status.success());

    let corpus = dir.path().join("c.tok");
    save_sequences(&corpus, &melody_corpus(1, 16, 1)).unwrap();
    let out = unmask(&["infill", "--ckpt", s(&missing), "--in", s(&corpus), "--mask", "{\"steps\":", "--out", "o"]);
    assert!(!out.status.success());
}

#[test]
fn tokenize_writes_sequences_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let midi = dir.path().join("midi");
    std::fs::create_dir(&midi).unwrap();
    for seed in 0..4 {
        std::fs::write(midi.join(format!("{seed}.mid")), random_midi_file(seed)).unwrap();
    }
    std::fs::write(midi.join("broken.mid"), b"MThd\0\0").unwrap();
    let out = dir.path().join("trio.tok");
    let v = ok(&["tokenize", s(&midi), "--mode", "trio", "--out", s(&out)]);
    assert_eq!(v["files"], 5);
    assert!(v["rejected"].as_u64().unwrap() >= 1);
    let manifest: Value =
        serde_json::from_slice(&std::fs::read(v["manifest"].as_str().unwrap()).unwrap()).unwrap();
    assert!(manifest.is_object());
    let seqs = load_sequences(&out).unwrap();
    assert_eq!(seqs.len() as u64, v["sequences"].as_u64().unwrap());
}

#[test]
fn confound_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("sketch.png");
    sketch_image(1024, 48).save(&image).unwrap();
    let reference = dir.path().join("ref.tok");
    save_sequences(&reference, &melody_corpus(1, 64, 21)).unwrap();
    let out_dir = dir.path().join("out");
    let v = ok(&[
        "confound", "--image", s(&image), "--reference", s(&reference), "--iterations", "20000",
        "--out-dir", s(&out_dir),
    ]);
    for name in ["forged.mid", "comparison.png", "trace.jsonl", "report.json"] {
        assert!(out_dir.join(name).exists(), "{name}");
    }
    assert!(v["anchored_within_2"].as_f64().unwrap() >= 0.7);
}

#[test]
fn guide_trains_classifier_and_samples() {
    let f = Fixture::new();
    let real = f.path("real.tok");
    save_sequences(&real, &melody_corpus(40, 16, 2)).unwrap();
    let classifier = f.path("density.json");
    let out = f.path("guided.tok");
    let v = ok(&[
        "guide", "--ckpt", s(&f.ckpt), "--corpus", s(&real), "--save-classifier", s(&classifier),
        "--density", "6", "--steps", "8", "--n", "2", "--out", s(&out),
    ]);
    assert_eq!(v["pieces"], 2);
    assert!(classifier.exists());
    let again = f.path("again.tok");
    ok(&[
        "guide", "--ckpt", s(&f.ckpt), "--classifier", s(&classifier), "--density", "6", "--steps", "8",
        "--n", "2", "--out", s(&again),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
    assert!(load_sequences(&out).unwrap().iter().all(|p| !p.has_masks()));
}

#[test]
fn accompany_keeps_the_melody() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let trios: Vec<_> = (0..2).map(|_| layout_sample(Layout::Trio, &mut rng, 16)).collect();
    let corpus = dir.path().join("trio.tok");
    save_sequences(&corpus, &trios).unwrap();
    let config = DenoiserConfig {
        token_embed_dim: 8,
        summary_dim: 16,
        n_layers: 1,
        n_heads: 2,
        batch_size: 2,
        ..DenoiserConfig::desk(Layout::Trio)
    };
    let config_path = dir.path().join("trio.json");
    std::fs::write(&config_path, serde_json::to_string(&config).unwrap()).unwrap();
    let ckpt = dir.path().join("trio.ckpt");
    ok(&["train", "--config", s(&config_path), "--corpus", s(&corpus), "--steps", "2", "--timesteps", "32", "--out", s(&ckpt)]);
    let out = dir.path().join("acc.tok");
    ok(&["accompany", "--ckpt", s(&ckpt), "--in", s(&corpus), "--tracks", "1,2", "--out", s(&out)]);
    for (x, y) in trios.iter().zip(load_sequences(&out).unwrap()) {
        assert!(!y.has_masks());
        assert!(x.track(0).eq(y.track(0)));
    }
    let bad = unmask(&["accompany", "--ckpt", s(&ckpt), "--in", s(&corpus), "--tracks", "5", "--out", s(&out)]);
    assert!(!bad.status.success());
}
