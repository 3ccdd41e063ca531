//! Framewise self-similarity: Gaussians fitted to pitch and duration in 4-bar
//! windows (hop 2 bars), overlap areas of adjacent windows, and the
//! Consistency/Variance distances of their statistics to a ground-truth set.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::extract::{decode_pitch_track, NoteEvent};
use crate::tokens::{TokenSequence, TrackKind, STEPS_PER_BAR};

/// Lower bound on window variances.
pub const VAR_FLOOR: f64 = 1e-4;
pub const WINDOW_BARS: usize = 4;
pub const HOP_BARS: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{which} set has no adjacent window pairs")]
    NoPairs { which: &'static str },
    #[error("ground-truth {quantity} statistic is zero")]
    Degenerate { quantity: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd();
        (-0.5 * z * z).exp() / (self.sd() * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// `P(X < x)`
    fn below(&self, x: f64) -> f64 {
        0.5 * erfc(-(x - self.mean) / (self.sd() * std::f64::consts::SQRT_2))
    }

    /// `P(X > x)`
    fn above(&self, x: f64) -> f64 {
        0.5 * erfc((x - self.mean) / (self.sd() * std::f64::consts::SQRT_2))
    }
}

/// Area under `min(pdf_a, pdf_b)`.
pub fn overlap_area(a: Gaussian, b: Gaussian) -> f64 {
    // Order so the result does not depend on argument order.
    let (a, b) = if (a.var, a.mean) <= (b.var, b.mean) {
        (a, b)
    } else {
        (b, a)
    };
    let (sa, sb) = (a.sd(), b.sd());
    if (sa - sb).abs() <= 1e-12 * sa.max(sb) {
        let d = (a.mean - b.mean).abs();
        if d == 0.0 {
            return 1.0;
        }
        let s = 0.5 * (sa + sb);
        return erfc(d / (2.0 * s * std::f64::consts::SQRT_2)).clamp(0.0, 1.0);
    }
    // (x-μa)²/σa² - (x-μb)²/σb² = 2 ln(σb/σa), with a the narrower.
    let (va, vb) = (a.var, b.var);
    let qa = 1.0 / va - 1.0 / vb;
    let qb = -2.0 * (a.mean / va - b.mean / vb);
    let qc = a.mean * a.mean / va - b.mean * b.mean / vb - 2.0 * (sb / sa).ln();
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0).sqrt();
    let q = -0.5 * (qb + qb.signum() * disc);
    let (r1, r2) = if q == 0.0 {
        let r = (-qc / qa).max(0.0).sqrt();
        (-r, r)
    } else {
        let x1 = q / qa;
        let x2 = qc / q;
        (x1.min(x2), x1.max(x2))
    };
    // Outside [r1, r2] the narrow density is the smaller one.
    let tails = a.below(r1) + a.above(r2);
    let middle = 1.0 - b.below(r1) - b.above(r2);
    (tails + middle).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub index: usize,
    pub start_bar: usize,
    pub pitch: Gaussian,
    pub duration: Gaussian,
    pub note_count: usize,
}

/// Mean and floored population variance.
pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Gaussian {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Gaussian::new(mean, var.max(VAR_FLOOR))
}

pub fn window_count(bars: usize) -> usize {
    if bars < WINDOW_BARS {
        0
    } else {
        (bars - WINDOW_BARS) / HOP_BARS + 1
    }
}

/// Statistics of every window of one note list; `None` marks an empty window.
pub fn note_windows(notes: &[NoteEvent], bars: usize) -> Vec<Option<WindowStats>> {
    (0..window_count(bars))
        .map(|w| {
            let start = w * HOP_BARS * STEPS_PER_BAR;
            let end = start + WINDOW_BARS * STEPS_PER_BAR;
            let inside: Vec<&NoteEvent> = notes
                .iter()
                .filter(|n| (start..end).contains(&n.onset_step))
                .collect();
            if inside.is_empty() {
                return None;
            }
            Some(WindowStats {
                index: w,
                start_bar: w * HOP_BARS,
                pitch: fit(inside.iter().map(|n| f64::from(n.pitch))),
                duration: fit(inside.iter().map(|n| n.duration_steps as f64)),
                note_count: inside.len(),
            })
        })
        .collect()
}

/// Windows of every pitched track of `seq`; drum tracks are skipped.
pub fn window_stats(seq: &TokenSequence) -> Vec<Vec<Option<WindowStats>>> {
    let bars = seq.steps() / STEPS_PER_BAR;
    seq.kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == TrackKind::Pitch)
        .map(|(i, _)| note_windows(&decode_pitch_track(seq, i), bars))
        .collect()
}

/// Overlap areas of adjacent non-empty windows: `(pitch, duration)` per pair.
pub fn adjacent_overlaps(windows: &[Option<WindowStats>]) -> Vec<(f64, f64)> {
    windows
        .windows(2)
        .filter_map(|w| match (&w[0], &w[1]) {
            (Some(a), Some(b)) => Some((
                overlap_area(a.pitch, b.pitch),
                overlap_area(a.duration, b.duration),
            )),
            _ => None,
        })
        .collect()
}

fn set_overlaps(set: &[TokenSequence]) -> (Vec<f64>, Vec<f64>) {
    let mut pitch = Vec::new();
    let mut dur = Vec::new();
    for seq in set {
        for track in window_stats(seq) {
            for (p, d) in adjacent_overlaps(&track) {
                pitch.push(p);
                dur.push(d);
            }
        }
    }
    (pitch, dur)
}

/// Neumaier summation over sorted values, so the result does not depend on
/// the order of pieces.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in values.iter() {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = stable_sum(&mut values.to_vec()) / n;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (mean, stable_sum(&mut sq) / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityReport {
    pub mean_oa: f64,
    pub var_oa: f64,
    pub mean_gt: f64,
    pub var_gt: f64,
    pub consistency: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfSimilarityReport {
    pub pitch: QuantityReport,
    pub duration: QuantityReport,
    pub pairs: usize,
    pub gt_pairs: usize,
}

/// `max(0, 1 - |x - ref| / ref)`
pub fn relative_score(x: f64, reference: f64) -> f64 {
    (1.0 - (x - reference).abs() / reference).max(0.0)
}

/// Overlap-area statistics of a set, used as the ground-truth side of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub pitch: (f64, f64),
    pub duration: (f64, f64),
    pub pairs: usize,
}

pub fn overlap_stats(set: &[TokenSequence], which: &'static str) -> Result<OverlapStats, MetricsError> {
    let (p, d) = set_overlaps(set);
    if p.is_empty() {
        return Err(MetricsError::NoPairs { which });
    }
    Ok(OverlapStats {
        pitch: mean_var(&p),
        duration: mean_var(&d),
        pairs: p.len(),
    })
}

/// Overlap-area statistics of a single note list; `None` without adjacent pairs.
pub fn overlap_stats_of_notes(notes: &[NoteEvent], bars: usize) -> Option<OverlapStats> {
    let pairs = adjacent_overlaps(&note_windows(notes, bars));
    if pairs.is_empty() {
        return None;
    }
    let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    let d: Vec<f64> = pairs.iter().map(|x| x.1).collect();
    Some(OverlapStats {
        pitch: mean_var(&p),
        duration: mean_var(&d),
        pairs: pairs.len(),
    })
}

pub fn compare(stats: &OverlapStats, gt: &OverlapStats) -> Result<SelfSimilarityReport, MetricsError> {
    let q = |(m, v): (f64, f64), (mg, vg): (f64, f64), name| {
        if mg == 0.0 || vg == 0.0 {
            return Err(MetricsError::Degenerate { quantity: name });
        }
        Ok(QuantityReport {
            mean_oa: m,
            var_oa: v,
            mean_gt: mg,
            var_gt: vg,
            consistency: relative_score(m, mg),
            variance: relative_score(v, vg),
        })
    };
    Ok(SelfSimilarityReport {
        pitch: q(stats.pitch, gt.pitch, "pitch")?,
        duration: q(stats.duration, gt.duration, "duration")?,
        pairs: stats.pairs,
        gt_pairs: gt.pairs,
    })
}

pub fn evaluate(set: &[TokenSequence], ground_truth: &[TokenSequence]) -> Result<SelfSimilarityReport, MetricsError> {
    compare(&overlap_stats(set, "evaluated")?, &overlap_stats(ground_truth, "ground-truth")?)
}

impl SelfSimilarityReport {
    pub fn scores(&self) -> [f64; 4] {
        [
            self.pitch.consistency,
            self.pitch.variance,
            self.duration.consistency,
            self.duration.variance,
        ]
    }

    pub fn min_score(&self) -> f64 {
        self.scores().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Aligned table: one row, pitch then duration, Consistency then Variance.
    pub fn table(&self, label: &str) -> String {
        let [pc, pv, dc, dv] = self.scores();
        format!(
            "{:<20} {:>12} {:>12} {:>12} {:>12}\n{:<20} {:>12} {:>12} {:>12} {:>12}\n{:<20} {:>12.2} {:>12.2} {:>12.2} {:>12.2}\n",
            "", "Pitch", "", "Duration", "",
            "Setting", "Consistency", "Variance", "Consistency", "Variance",
            label, pc, pv, dc, dv
        )
    }
}
