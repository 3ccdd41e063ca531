//! Metric confounding: notes sampled from an image are annealed until their
//! self-similarity statistics match a reference piece while staying close to
//! the picture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{pitched_notes, NoteEvent};
use crate::metrics::{
    self, compare, note_windows, overlap_area, overlap_stats, MetricsError,
    OverlapStats, SelfSimilarityReport, WindowStats,
};
use crate::tokens::{TokenSequence, STEPS_PER_BAR};

#[derive(Debug, Error, PartialEq)]
pub enum ConfoundError {
    #[error("image has no pixels above the threshold")]
    EmptyImage,
    #[error("image is {0} rows tall; at most 128 fit the MIDI range")]
    TooTall(u32),
    #[error("invalid annealer config: {0}")]
    Config(&'static str),
    #[error("no forged notes")]
    NoNotes,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("forged notes produce no adjacent window pairs")]
    TooShort,
}

/// A forged note and where it was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgedNote {
    pub row: u32,
    pub column: u32,
    pub duration: u32,
    pub origin_row: u32,
    pub origin_duration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub width: u32,
    pub height: u32,
    pub threshold: u8,
    /// Pitch of the bottom row.
    pub base_pitch: u8,
    pub notes: Vec<ForgedNote>,
}

impl ImageScore {
    pub fn pitch_of_row(&self, row: u32) -> u8 {
        (u32::from(self.base_pitch) + self.height - 1 - row) as u8
    }

    pub fn bars(&self) -> usize {
        (self.width as usize).div_ceil(STEPS_PER_BAR)
    }

    pub fn note_events(&self) -> Vec<NoteEvent> {
        self.notes
            .iter()
            .map(|n| NoteEvent {
                pitch: self.pitch_of_row(n.row),
                onset_step: n.column as usize,
                duration_steps: n.duration as usize,
                track: 0,
            })
            .collect()
    }

    /// Fraction of notes within `rows` rows and `columns` end columns of their origin.
    pub fn anchored_fraction(&self, rows: u32, columns: u32) -> f64 {
        if self.notes.is_empty() {
            return 0.0;
        }
        let ok = self
            .notes
            .iter()
            .filter(|n| {
                n.row.abs_diff(n.origin_row) <= rows && n.duration.abs_diff(n.origin_duration) <= columns
            })
            .count();
        ok as f64 / self.notes.len() as f64
    }
}

/// Samples one note per column, uniformly among the column's pixels brighter
/// than `threshold`. Row 0 is the top (highest pitch).
pub fn image_to_notes<R: Rng + ?Sized>(
    image: &image::GrayImage,
    threshold: u8,
    rng: &mut R,
) -> Result<ImageScore, ConfoundError> {
    let (width, height) = image.dimensions();
    if height > 128 {
        return Err(ConfoundError::TooTall(height));
    }
    let base_pitch = if height >= 128 { 0 } else { (60 - (height / 2) as i32).max(0) as u8 };
    let mut notes = Vec::new();
    for c in 0..width {
        let ink: Vec<u32> = (0..height)
            .filter(|&r| image.get_pixel(c, r).0[0] > threshold)
            .collect();
        if ink.is_empty() {
            continue;
        }
        let row = ink[rng.random_range(0..ink.len())];
        notes.push(ForgedNote {
            row,
            column: c,
            duration: 1,
            origin_row: row,
            origin_duration: 1,
        });
    }
    if notes.is_empty() {
        return Err(ConfoundError::EmptyImage);
    }
    Ok(ImageScore {
        width,
        height,
        threshold,
        base_pitch,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealerConfig {
    pub iterations: u64,
    /// `None` calibrates so about half of early uphill moves are accepted.
    pub initial_temperature: Option<f64>,
    /// Geometric cooling ends at this temperature after `iterations` steps.
    pub final_temperature: f64,
    pub pitch_sigma: f64,
    pub duration_sigma: f64,
    /// Weights of pitch consistency, pitch variance, duration consistency,
    /// duration variance.
    pub weights: [f64; 4],
    /// Allowed distance of a note from its origin in rows and end columns.
    pub envelope: (u32, u32),
    /// Objective cost per unit fraction of notes outside the envelope. `None`
    /// rejects every proposal that leaves it.
    pub envelope_penalty: Option<f64>,
    /// Proposals never move a note further than this (rows, end columns).
    pub max_shift: (u32, u32),
    /// Every score at or above this counts as converged.
    pub target_score: f64,
    /// Stop once every distance is at most this.
    pub stop_distance: f64,
    pub seed: u64,
    pub trace_every: u64,
}

impl Default for AnnealerConfig {
    fn default() -> Self {
        Self {
            iterations: 200_000,
            initial_temperature: None,
            final_temperature: 1e-5,
            pitch_sigma: 1.0,
            duration_sigma: 1.0,
            weights: [1.0; 4],
            envelope: (2, 2),
            envelope_penalty: None,
            max_shift: (12, 12),
            target_score: 0.98,
            stop_distance: 0.01,
            seed: 0,
            trace_every: 1000,
        }
    }
}

impl AnnealerConfig {
    fn validate(&self) -> Result<(), ConfoundError> {
        if !(self.final_temperature > 0.0) {
            return Err(ConfoundError::Config("final temperature must be positive"));
        }
        if matches!(self.initial_temperature, Some(t) if !(t > 0.0)) {
            return Err(ConfoundError::Config("temperature must be positive"));
        }
        if matches!(self.envelope_penalty, Some(p) if !(p >= 0.0)) {
            return Err(ConfoundError::Config("negative envelope penalty"));
        }
        if self.pitch_sigma < 0.0 || self.duration_sigma < 0.0 {
            return Err(ConfoundError::Config("negative proposal scale"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub temperature: f64,
    pub current: f64,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealOutcome {
    pub score: ImageScore,
    pub objective: f64,
    pub distances: [f64; 4],
    pub report: SelfSimilarityReport,
    pub converged: bool,
    pub iterations: u64,
    pub accepted: u64,
    pub initial_temperature: f64,
    pub trace: Vec<TracePoint>,
}

/// Window state of a forged score. Onsets never move, so window membership is
/// fixed and only the windows holding a changed note are refitted.
struct Forgery<'a> {
    score: ImageScore,
    members: Vec<Vec<usize>>,
    note_windows: Vec<Vec<usize>>,
    windows: Vec<Option<WindowStats>>,
    pair_oa: Vec<Option<(f64, f64)>>,
    gt: &'a OverlapStats,
    weights: [f64; 4],
    envelope: (u32, u32),
    penalty: f64,
    outside: usize,
}

impl<'a> Forgery<'a> {
    fn new(score: ImageScore, gt: &'a OverlapStats, cfg: &AnnealerConfig) -> Result<Self, ConfoundError> {
        let bars = score.bars();
        let n_windows = metrics::window_count(bars);
        let mut members = vec![Vec::new(); n_windows];
        let mut note_windows = vec![Vec::new(); score.notes.len()];
        for (i, n) in score.notes.iter().enumerate() {
            for (w, m) in members.iter_mut().enumerate() {
                let start = w * metrics::HOP_BARS * STEPS_PER_BAR;
                let end = start + metrics::WINDOW_BARS * STEPS_PER_BAR;
                if (start..end).contains(&(n.column as usize)) {
                    m.push(i);
                    note_windows[i].push(w);
                }
            }
        }
        let mut f = Self {
            windows: note_windows_of(&score),
            score,
            members,
            note_windows,
            pair_oa: vec![None; n_windows.saturating_sub(1)],
            gt,
            weights: cfg.weights,
            envelope: cfg.envelope,
            penalty: cfg.envelope_penalty.unwrap_or(0.0),
            outside: 0,
        };
        f.outside = f.score.notes.iter().filter(|n| !f.inside(n)).count();
        for p in 0..f.pair_oa.len() {
            f.refresh_pair(p);
        }
        if f.pair_oa.iter().all(Option::is_none) {
            return Err(ConfoundError::TooShort);
        }
        Ok(f)
    }

    fn refresh_pair(&mut self, p: usize) {
        self.pair_oa[p] = match (&self.windows[p], &self.windows[p + 1]) {
            (Some(a), Some(b)) => Some((
                overlap_area(a.pitch, b.pitch),
                overlap_area(a.duration, b.duration),
            )),
            _ => None,
        };
    }

    fn refit_window(&mut self, w: usize) {
        let events = self.score.note_events();
        let inside: Vec<NoteEvent> = self.members[w].iter().map(|&i| events[i]).collect();
        self.windows[w] = note_windows_single(&inside, w);
    }

    fn inside(&self, n: &ForgedNote) -> bool {
        n.row.abs_diff(n.origin_row) <= self.envelope.0
            && n.duration.abs_diff(n.origin_duration) <= self.envelope.1
    }

    fn apply(&mut self, i: usize, row: u32, duration: u32) {
        if !self.inside(&self.score.notes[i]) {
            self.outside -= 1;
        }
        self.score.notes[i].row = row;
        self.score.notes[i].duration = duration;
        if !self.inside(&self.score.notes[i]) {
            self.outside += 1;
        }
        let ws = self.note_windows[i].clone();
        for &w in &ws {
            self.refit_window(w);
        }
        let mut pairs: Vec<usize> = ws
            .iter()
            .flat_map(|&w| [w.checked_sub(1), Some(w)])
            .flatten()
            .filter(|&p| p < self.pair_oa.len())
            .collect();
        pairs.dedup();
        for p in pairs {
            self.refresh_pair(p);
        }
    }

    fn stats(&self) -> OverlapStats {
        let pairs: Vec<(f64, f64)> = self.pair_oa.iter().flatten().copied().collect();
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let d: Vec<f64> = pairs.iter().map(|x| x.1).collect();
        OverlapStats {
            pitch: metrics::mean_var(&p),
            duration: metrics::mean_var(&d),
            pairs: pairs.len(),
        }
    }

    fn distances(&self) -> [f64; 4] {
        distances(&self.stats(), self.gt)
    }

    fn objective(&self) -> f64 {
        let fit: f64 = self
            .distances()
            .iter()
            .zip(&self.weights)
            .map(|(d, w)| d * w)
            .sum();
        fit + self.penalty * self.outside as f64 / self.score.notes.len() as f64
    }
}

fn distances(s: &OverlapStats, gt: &OverlapStats) -> [f64; 4] {
    let rel = |x: f64, r: f64| (x - r).abs() / r;
    [
        rel(s.pitch.0, gt.pitch.0),
        rel(s.pitch.1, gt.pitch.1),
        rel(s.duration.0, gt.duration.0),
        rel(s.duration.1, gt.duration.1),
    ]
}

fn note_windows_of(score: &ImageScore) -> Vec<Option<WindowStats>> {
    note_windows(&score.note_events(), score.bars())
}

/// Stats of window `w` given exactly its member notes.
fn note_windows_single(inside: &[NoteEvent], w: usize) -> Option<WindowStats> {
    if inside.is_empty() {
        return None;
    }
    Some(WindowStats {
        index: w,
        start_bar: w * metrics::HOP_BARS,
        pitch: metrics::fit(inside.iter().map(|n| f64::from(n.pitch))),
        duration: metrics::fit(inside.iter().map(|n| n.duration_steps as f64)),
        note_count: inside.len(),
    })
}

/// A candidate move: note index and its new row and duration.
fn propose<R: Rng + ?Sized>(
    f: &Forgery<'_>,
    cfg: &AnnealerConfig,
    pitch: &Normal<f64>,
    dur: &Normal<f64>,
    rng: &mut R,
) -> Option<(usize, u32, u32)> {
    let i = rng.random_range(0..f.score.notes.len());
    let n = f.score.notes[i];
    let mode = rng.random_range(0..3);
    let dr = if mode != 1 { pitch.sample(rng).round() as i64 } else { 0 };
    let dd = if mode != 0 { dur.sample(rng).round() as i64 } else { 0 };
    let row = i64::from(n.row) + dr;
    let duration = i64::from(n.duration) + dd;
    if row < 0 || row >= i64::from(f.score.height) || duration < 1 {
        return None;
    }
    let (row, duration) = (row as u32, duration as u32);
    let (er, ec) = match cfg.envelope_penalty {
        None => cfg.envelope,
        Some(_) => cfg.max_shift,
    };
    if row.abs_diff(n.origin_row) > er || duration.abs_diff(n.origin_duration) > ec {
        return None;
    }
    (row != n.row || duration != n.duration).then_some((i, row, duration))
}

/// Simulated annealing of `start` toward the statistics of `reference`.
pub fn anneal(
    start: ImageScore,
    reference: &TokenSequence,
    cfg: &AnnealerConfig,
) -> Result<AnnealOutcome, ConfoundError> {
    cfg.validate()?;
    if start.notes.is_empty() {
        return Err(ConfoundError::NoNotes);
    }
    let gt = overlap_stats(std::slice::from_ref(reference), "reference")?;
    if gt.pitch.0 == 0.0 || gt.pitch.1 == 0.0 || gt.duration.0 == 0.0 || gt.duration.1 == 0.0 {
        return Err(MetricsError::Degenerate { quantity: "reference" }.into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pitch = Normal::new(0.0, cfg.pitch_sigma).map_err(|_| ConfoundError::Config("pitch sigma"))?;
    let dur = Normal::new(0.0, cfg.duration_sigma).map_err(|_| ConfoundError::Config("duration sigma"))?;

    let mut cur = Forgery::new(start, &gt, cfg)?;
    let mut cur_obj = cur.objective();
    let done = |f: &Forgery<'_>| f.distances().iter().all(|d| *d <= cfg.stop_distance);

    let temperature0 = match cfg.initial_temperature {
        Some(t) => t,
        None => calibrate(&mut cur, cur_obj, cfg, &pitch, &dur, &mut rng),
    };
    let mut temperature = temperature0;
    let cooling = if cfg.iterations == 0 || cfg.final_temperature >= temperature0 {
        1.0
    } else {
        (cfg.final_temperature / temperature0).powf(1.0 / cfg.iterations as f64)
    };
    let mut best = cur.score.clone();
    let mut best_obj = cur_obj;
    let mut trace = vec![TracePoint {
        iteration: 0,
        temperature,
        current: cur_obj,
        best: best_obj,
    }];
    let mut accepted = 0;
    let mut iterations = 0;
    while iterations < cfg.iterations && !done(&cur) {
        iterations += 1;
        if let Some((i, row, duration)) = propose(&cur, cfg, &pitch, &dur, &mut rng) {
            let old = cur.score.notes[i];
            cur.apply(i, row, duration);
            let obj = cur.objective();
            let delta = obj - cur_obj;
            if delta < 0.0 || rng.random::<f64>() < (-delta / temperature).exp() {
                cur_obj = obj;
                accepted += 1;
                if obj < best_obj {
                    best_obj = obj;
                    best = cur.score.clone();
                }
            } else {
                cur.apply(i, old.row, old.duration);
            }
        }
        temperature *= cooling;
        if iterations % cfg.trace_every.max(1) == 0 {
            trace.push(TracePoint {
                iteration: iterations,
                temperature,
                current: cur_obj,
                best: best_obj,
            });
        }
    }
    trace.push(TracePoint {
        iteration: iterations,
        temperature,
        current: cur_obj,
        best: best_obj,
    });

    let stats = metrics::overlap_stats_of_notes(&best.note_events(), best.bars())
        .ok_or(ConfoundError::TooShort)?;
    let report = compare(&stats, &gt)?;
    let d = distances(&stats, &gt);
    let objective = d.iter().zip(&cfg.weights).map(|(a, b)| a * b).sum();
    Ok(AnnealOutcome {
        converged: report.min_score() >= cfg.target_score,
        score: best,
        objective,
        distances: d,
        report,
        iterations,
        accepted,
        initial_temperature: temperature0,
        trace,
    })
}

/// Temperature at which the median uphill move of 500 trial proposals is
/// accepted with probability one half.
fn calibrate<R: Rng + ?Sized>(
    f: &mut Forgery<'_>,
    obj: f64,
    cfg: &AnnealerConfig,
    pitch: &Normal<f64>,
    dur: &Normal<f64>,
    rng: &mut R,
) -> f64 {
    let mut uphill = Vec::new();
    for _ in 0..500 {
        if let Some((i, row, duration)) = propose(f, cfg, pitch, dur, rng) {
            let old = f.score.notes[i];
            f.apply(i, row, duration);
            let d = f.objective() - obj;
            f.apply(i, old.row, old.duration);
            if d > 0.0 {
                uphill.push(d);
            }
        }
    }
    if uphill.is_empty() {
        return 1e-3;
    }
    uphill.sort_by(f64::total_cmp);
    uphill[uphill.len() / 2] / std::f64::consts::LN_2
}

/// Recomputes an outcome's report with the metrics module alone.
pub fn verify(outcome: &AnnealOutcome, reference: &TokenSequence) -> Result<SelfSimilarityReport, ConfoundError> {
    let stats = metrics::overlap_stats_of_notes(&outcome.score.note_events(), outcome.score.bars())
        .ok_or(ConfoundError::TooShort)?;
    let gt = overlap_stats(std::slice::from_ref(reference), "reference")?;
    Ok(compare(&stats, &gt)?)
}

const PANEL_GAP: u32 = 4;

fn roll(notes: &[NoteEvent], width: u32, lo: u8, hi: u8, img: &mut image::RgbImage, top: u32, color: [u8; 3]) {
    let rows = u32::from(hi - lo) + 1;
    for n in notes {
        if n.pitch < lo || n.pitch > hi {
            continue;
        }
        let y = top + rows - 1 - u32::from(n.pitch - lo);
        for x in n.onset_step..n.onset_step + n.duration_steps {
            if (x as u32) < width {
                img.put_pixel(x as u32, y, image::Rgb(color));
            }
        }
    }
}

/// Three stacked panels: the image, the forged piano roll and the reference
/// piano roll.
pub fn render_comparison(
    image: &image::GrayImage,
    forged: &ImageScore,
    reference: &TokenSequence,
) -> Result<image::RgbImage, ConfoundError> {
    if forged.notes.is_empty() {
        return Err(ConfoundError::NoNotes);
    }
    let forged_notes = forged.note_events();
    let ref_notes: Vec<NoteEvent> = pitched_notes(reference).into_iter().flatten().collect();
    let all = forged_notes.iter().chain(&ref_notes);
    let lo = all.clone().map(|n| n.pitch).min().unwrap_or(0);
    let hi = all.map(|n| n.pitch).max().unwrap_or(127);
    let rows = u32::from(hi - lo) + 1;
    let width = image.width().max(reference.steps() as u32);
    let height = image.height() + 2 * rows + 2 * PANEL_GAP;
    let mut out = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    for (x, y, p) in image.enumerate_pixels() {
        let v = if p.0[0] > forged.threshold { 0 } else { 255 };
        out.put_pixel(x, y, image::Rgb([v, v, v]));
    }
    let mid = image.height() + PANEL_GAP;
    roll(&forged_notes, width, lo, hi, &mut out, mid, [200, 30, 30]);
    roll(&ref_notes, width, lo, hi, &mut out, mid + rows + PANEL_GAP, [30, 30, 200]);
    Ok(out)
}
