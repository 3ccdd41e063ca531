//! One function per subcommand. Each writes its artifacts to the named files
//! and returns a JSON summary for standard output.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use unmask_core::checkpoint::Checkpoint;
use unmask_core::confounder::{anneal, image_to_notes, render_comparison, AnnealerConfig};
use unmask_core::diffusion::DiffusionSchedule;
use unmask_core::extract::{export_midi, ingest_dir};
use unmask_core::guidance::{density_hits, measure_densities, DensityClassifier, DensityGuidance};
use unmask_core::mask::MaskPattern;
use unmask_core::metrics::evaluate;
use unmask_core::midi::{write_midi, OutNote, OutTrack};
use unmask_core::nn::{DenoiserConfig, Model};
use unmask_core::sampler::{self, generate, infill, infill_central};
use unmask_core::tokens::{load_sequences, save_sequences, Layout, TokenSequence, TrackKind, STEPS_PER_BAR};
use unmask_core::train::{stream, Trainer};

pub const DEFAULT_TEMPO: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Melody,
    Trio,
}

impl From<Mode> for Layout {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Melody => Layout::Melody,
            Mode::Trio => Layout::Trio,
        }
    }
}

/// A checkpoint with its model ready for inference.
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub model: Model<f32>,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let checkpoint =
        Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = Model::from_params(checkpoint.config.clone(), checkpoint.params.clone())
        .with_context(|| format!("checkpoint {}", path.display()))?;
    Ok(LoadedModel { checkpoint, model })
}

pub fn load_pieces(path: &Path) -> Result<Vec<TokenSequence>> {
    load_sequences(path).with_context(|| format!("reading token file {}", path.display()))
}

fn save_pieces(path: &Path, pieces: &[TokenSequence]) -> Result<()> {
    save_sequences(path, pieces).with_context(|| format!("writing token file {}", path.display()))
}

/// Writes `<dir>/<stem>-<i>.mid` for every piece.
fn write_midis(dir: &Path, stem: &str, pieces: &[TokenSequence]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let path = dir.join(format!("{stem}-{i:03}.mid"));
            fs::write(&path, export_midi(p, DEFAULT_TEMPO)?)
                .with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect()
}

fn check_piece_fits(piece: &TokenSequence, config: &DenoiserConfig) -> Result<()> {
    if piece.kinds() != config.tracks.as_slice() || piece.steps() != config.seq_len {
        bail!(
            "piece has {} tracks x {} steps, model expects {} tracks x {} steps",
            piece.tracks(),
            piece.steps(),
            config.tracks.len(),
            config.seq_len
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    /// Directory searched recursively for .mid/.midi files.
    pub midi_dir: PathBuf,
    #[arg(long, value_enum, default_value = "melody")]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
    /// Steps per sequence window.
    #[arg(long, default_value_t = 256)]
    pub steps: usize,
    /// Per-file manifest; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

pub fn tokenize(a: &TokenizeArgs) -> Result<Value> {
    if a.steps == 0 || !a.steps.is_multiple_of(STEPS_PER_BAR) {
        bail!("--steps must be a positive multiple of {STEPS_PER_BAR}");
    }
    let (seqs, manifest) = ingest_dir(&a.midi_dir, a.mode.into(), a.steps)
        .with_context(|| format!("reading {}", a.midi_dir.display()))?;
    save_pieces(&a.out, &seqs)?;
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.manifest.json", a.out.display())));
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)
        .with_context(|| format!("writing {}", manifest_path.display()))?;
    let accepted = manifest.entries.iter().filter(|e| e.accepted).count();
    Ok(json!({
        "command": "tokenize",
        "files": manifest.entries.len(),
        "accepted": accepted,
        "rejected": manifest.entries.len() - accepted,
        "sequences": seqs.len(),
        "out": a.out,
        "manifest": manifest_path,
    }))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `desk`, `full`, or a JSON model config file.
    #[arg(long, default_value = "desk")]
    pub config: String,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Diffusion timesteps T.
    #[arg(long, default_value_t = 1024)]
    pub timesteps: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON metrics; defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn model_config(spec: &str, layout: Layout) -> Result<DenoiserConfig> {
    let config = match spec {
        "desk" => DenoiserConfig::desk(layout),
        "full" => DenoiserConfig::full(layout),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {path}"))?
        }
    };
    config.validate()?;
    Ok(config)
}

pub fn train(a: &TrainArgs) -> Result<Value> {
    let corpus = load_pieces(&a.corpus)?;
    let first = corpus.first().ok_or_else(|| anyhow!("corpus {} is empty", a.corpus.display()))?;
    let layout = first
        .layout()
        .ok_or_else(|| anyhow!("corpus has an unsupported track layout"))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::from_checkpoint(ck)?
        }
        None => {
            let mut config = model_config(&a.config, layout)?;
            if let Some(lr) = a.learning_rate {
                config.learning_rate = lr;
            }
            if let Some(b) = a.batch_size {
                config.batch_size = b;
            }
            Trainer::new(config, DiffusionSchedule::new(a.timesteps), a.seed)?
        }
    };
    for p in &corpus {
        check_piece_fits(p, trainer.model.config()).context("corpus does not match the model")?;
    }
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.jsonl", a.out.display())));
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let curve = trainer.run(&corpus, a.steps, Some(&mut log))?;
    drop(log);
    trainer
        .checkpoint()
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    Ok(json!({
        "command": "train",
        "steps": trainer.step,
        "params": trainer.model.param_count(),
        "final_loss": curve.last(),
        "mean_loss_last_100": if tail.is_empty() { None } else { Some(tail.iter().sum::<f64>() / tail.len() as f64) },
        "out": a.out,
        "log": log_path,
    }))
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Reverse steps; defaults to the checkpoint's T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one MIDI file per piece here.
    #[arg(long)]
    pub midi_dir: Option<PathBuf>,
}

fn finish_pieces(command: &str, out: &Path, midi_dir: Option<&Path>, pieces: &[TokenSequence], extra: Value) -> Result<Value> {
    save_pieces(out, pieces)?;
    let midis = match midi_dir {
        Some(dir) => write_midis(dir, command, pieces)?,
        None => Vec::new(),
    };
    let mut v = json!({
        "command": command,
        "pieces": pieces.len(),
        "out": out,
        "midi": midis,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    Ok(v)
}

pub fn sample(a: &SampleArgs) -> Result<Value> {
    let m = load_model(&a.ckpt)?;
    let steps = a.steps.unwrap_or(m.checkpoint.schedule.timesteps);
    let cfg = m.model.config();
    let pieces = (0..a.n)
        .map(|i| {
            let mut rng = stream(a.seed, i as u64, 0);
            generate(&m.model, cfg.tracks.clone(), cfg.seq_len, steps, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    finish_pieces("sample", &a.out, a.midi_dir.as_deref(), &pieces, json!({ "steps": steps }))
}

#[derive(Debug, Args)]
pub struct InfillArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Token file; every piece in it is infilled.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `central512`, a MaskPattern JSON file, or inline MaskPattern JSON.
    #[arg(long)]
    pub mask: String,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub midi_dir: Option<PathBuf>,
}

pub fn parse_mask(spec: &str) -> Result<Option<MaskPattern>> {
    if spec == "central512" {
        return Ok(None);
    }
    let text = if spec.trim_start().starts_with('{') {
        spec.to_string()
    } else {
        fs::read_to_string(spec).with_context(|| format!("reading mask file {spec}"))?
    };
    Ok(Some(MaskPattern::from_json(&text).context("malformed mask")?))
}

pub fn infill_cmd(a: &InfillArgs) -> Result<Value> {
    let m = load_model(&a.ckpt)?;
    let pieces = load_pieces(&a.input)?;
    let mask = parse_mask(&a.mask)?;
    let steps = a.steps.unwrap_or(m.checkpoint.schedule.timesteps);
    let mut regenerated = 0;
    let out = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            check_piece_fits(p, m.model.config())?;
            let mut rng = stream(a.seed, i as u64, 0);
            Ok(match &mask {
                None => {
                    regenerated += 512 * p.tracks();
                    infill_central(&m.model, p, steps, &mut rng)?
                }
                Some(pattern) => {
                    regenerated += pattern.count();
                    infill(&m.model, p, pattern, steps, &mut rng)?
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish_pieces(
        "infill",
        &a.out,
        a.midi_dir.as_deref(),
        &out,
        json!({ "steps": steps, "regenerated_tokens": regenerated }),
    )
}

#[derive(Debug, Args)]
pub struct AccompanyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Comma-separated track indices to generate (0 melody, 1 bass, 2 drums).
    #[arg(long, value_delimiter = ',', required = true)]
    pub tracks: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub midi_dir: Option<PathBuf>,
}

pub fn accompany(a: &AccompanyArgs) -> Result<Value> {
    let m = load_model(&a.ckpt)?;
    let pieces = load_pieces(&a.input)?;
    let steps = a.steps.unwrap_or(m.checkpoint.schedule.timesteps);
    let out = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| {
            check_piece_fits(p, m.model.config())?;
            let mut rng = stream(a.seed, i as u64, 0);
            Ok(sampler::accompany(&m.model, p, &a.tracks, steps, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    finish_pieces(
        "accompany",
        &a.out,
        a.midi_dir.as_deref(),
        &out,
        json!({ "steps": steps, "tracks": a.tracks }),
    )
}

#[derive(Debug, Args)]
pub struct GuideArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Onsets per measure: one value for every bar or one per bar, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub density: Vec<f64>,
    #[arg(long, default_value_t = 4.0)]
    pub scale: f64,
    /// Trained classifier JSON.
    #[arg(long, conflicts_with = "corpus")]
    pub classifier: Option<PathBuf>,
    /// Token corpus of real pieces to train the classifier on.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Where to store a classifier trained from `--corpus`.
    #[arg(long)]
    pub save_classifier: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// Pitched track the density refers to.
    #[arg(long, default_value_t = 0)]
    pub track: usize,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub midi_dir: Option<PathBuf>,
}

pub fn load_classifier(
    classifier: Option<&Path>,
    corpus: Option<&Path>,
    track: usize,
    epochs: usize,
    seed: u64,
) -> Result<DensityClassifier> {
    match (classifier, corpus) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        (None, Some(path)) => {
            let pieces = load_pieces(path)?;
            Ok(DensityClassifier::train_on(&pieces, track, epochs, seed)?)
        }
        (None, None) => bail!("guidance needs --classifier or --corpus"),
    }
}

/// Expands one target to every bar or checks the per-bar list length.
pub fn density_targets(density: &[f64], bars: usize) -> Result<Vec<f64>> {
    match density.len() {
        1 => Ok(vec![density[0]; bars]),
        n if n == bars => Ok(density.to_vec()),
        n => bail!("{n} density targets for a {bars}-bar piece"),
    }
}

pub fn guide(a: &GuideArgs) -> Result<Value> {
    let m = load_model(&a.ckpt)?;
    let cfg = m.model.config().clone();
    let classifier = load_classifier(a.classifier.as_deref(), a.corpus.as_deref(), a.track, a.epochs, a.seed)?;
    if let Some(path) = &a.save_classifier {
        fs::write(path, serde_json::to_vec_pretty(&classifier)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let bars = cfg.seq_len / STEPS_PER_BAR;
    let targets = density_targets(&a.density, bars)?;
    let guidance = DensityGuidance::new(classifier.clone(), targets.clone(), a.scale, a.track)?;
    let steps = a.steps.unwrap_or(m.checkpoint.schedule.timesteps);
    let init = TokenSequence::all_masked(cfg.tracks.clone(), cfg.seq_len, STEPS_PER_BAR);
    let pattern = MaskPattern::all(cfg.seq_len, cfg.tracks.len());
    let mut fallbacks = 0;
    let mut pieces = Vec::new();
    for i in 0..a.n {
        let mut rng = stream(a.seed, i as u64, 0);
        let out = sampler::sample(&m.model, &init, &pattern, steps, Some(&guidance), &mut rng, |_, _| {
            std::ops::ControlFlow::Continue(())
        })?;
        fallbacks += out.guidance_fallbacks;
        pieces.push(out.piece);
    }
    let scored: Vec<(TokenSequence, Vec<f64>)> = pieces.iter().map(|p| (p.clone(), targets.clone())).collect();
    let (exact, within_one, mean_error) = density_hits(&scored, a.track);
    let densities: Vec<Vec<usize>> = pieces.iter().map(|p| measure_densities(p, a.track)).collect();
    finish_pieces(
        "guide",
        &a.out,
        a.midi_dir.as_deref(),
        &pieces,
        json!({
            "steps": steps,
            "scale": a.scale,
            "classifier_held_out_within_one": classifier.validated(),
            "exact_hit": exact,
            "within_one": within_one,
            "mean_error": mean_error,
            "guidance_fallbacks": fallbacks,
            "densities": densities,
        }),
    )
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub set: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<Value> {
    let set = load_pieces(&a.set)?;
    let gt = load_pieces(&a.ground_truth)?;
    let report = evaluate(&set, &gt)?;
    let v = json!({
        "command": "evaluate",
        "scores": {
            "pitch_consistency": report.pitch.consistency,
            "pitch_variance": report.pitch.variance,
            "duration_consistency": report.duration.consistency,
            "duration_variance": report.duration.variance,
        },
        "report": report,
    });
    if let Some(path) = &a.out {
        fs::write(path, serde_json::to_vec_pretty(&v)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(v)
}

#[derive(Debug, Args)]
pub struct ConfoundArgs {
    /// PNG or PNM image; bright pixels are ink.
    #[arg(long)]
    pub image: PathBuf,
    /// Token file holding the reference piece.
    #[arg(long)]
    pub reference: PathBuf,
    /// Which piece of the reference file to use.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 127)]
    pub threshold: u8,
    #[arg(long, default_value_t = 200_000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Soft envelope: objective cost per fraction of notes outside +/-2. Hard when absent.
    #[arg(long)]
    pub envelope_penalty: Option<f64>,
    /// Receives forged.mid, comparison.png, report.json and trace.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn confound(a: &ConfoundArgs) -> Result<Value> {
    let image = image::open(&a.image)
        .with_context(|| format!("reading image {}", a.image.display()))?
        .to_luma8();
    let refs = load_pieces(&a.reference)?;
    let reference = refs
        .get(a.index)
        .ok_or_else(|| anyhow!("reference file has {} pieces, no index {}", refs.len(), a.index))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let start = image_to_notes(&image, a.threshold, &mut rng)?;
    let cfg = AnnealerConfig {
        iterations: a.iterations,
        seed: a.seed,
        envelope_penalty: a.envelope_penalty,
        ..AnnealerConfig::default()
    };
    let out = anneal(start, reference, &cfg)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let notes: Vec<OutNote> = out
        .score
        .note_events()
        .iter()
        .map(|n| OutNote {
            pitch: n.pitch,
            onset_step: n.onset_step,
            duration_steps: n.duration_steps,
        })
        .collect();
    let midi_path = a.out_dir.join("forged.mid");
    let track = OutTrack {
        name: "forged".into(),
        channel: 0,
        program: 0,
        notes,
    };
    fs::write(&midi_path, write_midi(&[track], DEFAULT_TEMPO, STEPS_PER_BAR))?;
    let png_path = a.out_dir.join("comparison.png");
    render_comparison(&image, &out.score, reference)?
        .save(&png_path)
        .with_context(|| format!("writing {}", png_path.display()))?;
    let trace_path = a.out_dir.join("trace.jsonl");
    let mut trace = String::new();
    for p in &out.trace {
        trace.push_str(&serde_json::to_string(p)?);
        trace.push('\n');
    }
    fs::write(&trace_path, trace)?;
    let report_path = a.out_dir.join("report.json");
    let summary = json!({
        "command": "confound",
        "converged": out.converged,
        "iterations": out.iterations,
        "accepted": out.accepted,
        "objective": out.objective,
        "scores": out.report.scores(),
        "anchored_within_2": out.score.anchored_fraction(2, 2),
        "notes": out.score.notes.len(),
        "report": out.report,
        "midi": midi_path,
        "comparison": png_path,
        "trace": trace_path,
    });
    fs::write(&report_path, serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Pitched-track layout check used by the service for guidance jobs.
pub fn is_pitched(kinds: &[TrackKind], track: usize) -> bool {
    kinds.get(track) == Some(&TrackKind::Pitch)
}
