//! Objective comparison of a generated region with the original.
//!
//! Seven features per region: three scalars (pitch count, note count, pitch
//! range) and four histograms (chroma, pitch interval, duration, onset
//! interval). Scalars are compared by `|gen - ori| / ori`, histograms by
//! `sum((gen - ori)^2) / sum(ori^2)`, both on raw counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::song::{QuantizedNote, MAX_DURATION};

/// Pitch intervals are clamped to `-MAX_INTERVAL..=MAX_INTERVAL` semitones.
pub const MAX_INTERVAL: i32 = 24;
/// Onset intervals are clamped to `0..=MAX_ONSET_INTERVAL` steps.
pub const MAX_ONSET_INTERVAL: u32 = 16;
pub const FEATURE_COUNT: usize = 7;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "pitch number",
    "note number",
    "pitch range",
    "chroma histogram",
    "pitch interval hist.",
    "duration histogram",
    "onset interval hist.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub pitch_number: u32,
    pub note_number: u32,
    pub pitch_range: u32,
    pub chroma_hist: Vec<f64>,
    /// Index `i` counts intervals of `i - 24` semitones.
    pub pitch_interval_hist: Vec<f64>,
    /// Index `i` counts durations of `i + 1` steps.
    pub duration_hist: Vec<f64>,
    pub onset_interval_hist: Vec<f64>,
}

/// Features of a note region. Consecutive notes follow onset order, ties
/// broken by ascending pitch.
pub fn compute_features(notes: &[QuantizedNote]) -> FeatureVector {
    let mut sorted = notes.to_vec();
    sorted.sort_by_key(|n| (n.onset, n.pitch));
    let mut pitches: Vec<u8> = sorted.iter().map(|n| n.pitch).collect();
    let range = match (pitches.iter().min(), pitches.iter().max()) {
        (Some(&lo), Some(&hi)) => (hi - lo) as u32,
        _ => 0,
    };
    let mut chroma = vec![0.0; 12];
    let mut interval = vec![0.0; (2 * MAX_INTERVAL + 1) as usize];
    let mut duration = vec![0.0; MAX_DURATION as usize];
    let mut onset = vec![0.0; (MAX_ONSET_INTERVAL + 1) as usize];
    for n in &sorted {
        chroma[n.pitch_class() as usize] += 1.0;
        duration[(n.duration.clamp(1, MAX_DURATION) - 1) as usize] += 1.0;
    }
    for w in sorted.windows(2) {
        let step = (w[1].pitch as i32 - w[0].pitch as i32).clamp(-MAX_INTERVAL, MAX_INTERVAL);
        interval[(step + MAX_INTERVAL) as usize] += 1.0;
        onset[(w[1].onset - w[0].onset).min(MAX_ONSET_INTERVAL) as usize] += 1.0;
    }
    pitches.sort_unstable();
    pitches.dedup();
    FeatureVector {
        pitch_number: pitches.len() as u32,
        note_number: sorted.len() as u32,
        pitch_range: range,
        chroma_hist: chroma,
        pitch_interval_hist: interval,
        duration_hist: duration,
        onset_interval_hist: onset,
    }
}

pub fn diff_scalar(gen: f64, ori: f64) -> f64 {
    if ori == 0.0 {
        if gen == 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        (gen - ori).abs() / ori
    }
}

pub fn diff_hist(gen: &[f64], ori: &[f64]) -> f64 {
    let denom: f64 = ori.iter().map(|x| x * x).sum();
    if denom == 0.0 {
        return if gen.iter().all(|&x| x == 0.0) { 0.0 } else { 1.0 };
    }
    let num: f64 = gen.iter().zip(ori).map(|(g, o)| (g - o) * (g - o)).sum();
    num / denom
}

/// The seven differences, in [`FEATURE_NAMES`] order.
pub fn feature_differences(gen: &FeatureVector, ori: &FeatureVector) -> [f64; FEATURE_COUNT] {
    [
        diff_scalar(gen.pitch_number as f64, ori.pitch_number as f64),
        diff_scalar(gen.note_number as f64, ori.note_number as f64),
        diff_scalar(gen.pitch_range as f64, ori.pitch_range as f64),
        diff_hist(&gen.chroma_hist, &ori.chroma_hist),
        diff_hist(&gen.pitch_interval_hist, &ori.pitch_interval_hist),
        diff_hist(&gen.duration_hist, &ori.duration_hist),
        diff_hist(&gen.onset_interval_hist, &ori.onset_interval_hist),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Melody,
    Bass,
    Accompaniment,
    Bar,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Melody, Category::Bass, Category::Accompaniment, Category::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Category::Melody => "melody",
            Category::Bass => "bass",
            Category::Accompaniment => "accompaniment",
            Category::Bar => "bar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPair {
    pub generated: Vec<QuantizedNote>,
    pub original: Vec<QuantizedNote>,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDiff {
    pub category: Category,
    pub differences: [f64; FEATURE_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub count: usize,
    pub mean: [f64; FEATURE_COUNT],
    /// Population standard deviation.
    pub std: [f64; FEATURE_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_example: Vec<ExampleDiff>,
    pub aggregate: BTreeMap<Category, CategoryStats>,
}

/// Mean and population std of `values`, summed in sorted order so the
/// result does not depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    sq.sort_by(f64::total_cmp);
    (mean, (sq.iter().sum::<f64>() / n).sqrt())
}

pub fn aggregate(per_example: &[ExampleDiff]) -> BTreeMap<Category, CategoryStats> {
    let mut out = BTreeMap::new();
    for cat in Category::ALL {
        let rows: Vec<&ExampleDiff> = per_example.iter().filter(|e| e.category == cat).collect();
        if rows.is_empty() {
            continue;
        }
        let mut stats = CategoryStats {
            count: rows.len(),
            mean: [0.0; FEATURE_COUNT],
            std: [0.0; FEATURE_COUNT],
        };
        for f in 0..FEATURE_COUNT {
            let values: Vec<f64> = rows.iter().map(|r| r.differences[f]).collect();
            (stats.mean[f], stats.std[f]) = mean_std(&values);
        }
        out.insert(cat, stats);
    }
    out
}

pub fn evaluate_corpus(pairs: &[RegionPair]) -> MetricReport {
    let per_example: Vec<ExampleDiff> = pairs
        .par_iter()
        .map(|p| ExampleDiff {
            category: p.category,
            differences: feature_differences(&compute_features(&p.generated), &compute_features(&p.original)),
        })
        .collect();
    let aggregate = aggregate(&per_example);
    MetricReport {
        per_example,
        aggregate,
    }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn is_all_zero(&self) -> bool {
        self.aggregate
            .values()
            .all(|s| s.mean.iter().chain(&s.std).all(|&x| x == 0.0))
    }
}

/// Fixed-width table: one row per feature, a mean and a std column per
/// category. With several reports each cell lists their values joined by
/// " / " in the order given (e.g. without / with controls).
pub fn render_table(reports: &[&MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# differences to the original (pitch intervals clamped to +/-{MAX_INTERVAL} semitones, onset intervals to 0..{MAX_ONSET_INTERVAL} steps)"
    );
    let cell_width = 8 * reports.len().max(1) + 3 * (reports.len().max(1) - 1);
    let _ = write!(out, "{:<22}", "feature");
    for cat in Category::ALL {
        let _ = write!(out, " | {:^w$}", format!("{} mean", cat.name()), w = cell_width);
        let _ = write!(out, " | {:^w$}", format!("{} std", cat.name()), w = cell_width);
    }
    out.push('\n');
    let cell = |vals: Vec<Option<f64>>| {
        vals.into_iter()
            .map(|v| v.map_or("-".to_string(), |x| format!("{x:.4}")))
            .collect::<Vec<_>>()
            .join(" / ")
    };
    for (f, name) in FEATURE_NAMES.iter().enumerate() {
        let _ = write!(out, "{name:<22}");
        for cat in Category::ALL {
            let means = reports.iter().map(|r| r.aggregate.get(&cat).map(|s| s.mean[f])).collect();
            let stds = reports.iter().map(|r| r.aggregate.get(&cat).map(|s| s.std[f])).collect();
            let _ = write!(out, " | {:>w$}", cell(means), w = cell_width);
            let _ = write!(out, " | {:>w$}", cell(stds), w = cell_width);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_note_features() {
        let notes = [
            QuantizedNote::new(60, 0, 4),
            QuantizedNote::new(64, 4, 4),
            QuantizedNote::new(67, 8, 8),
        ];
        let f = compute_features(&notes);
        assert_eq!((f.pitch_number, f.note_number, f.pitch_range), (3, 3, 7));
        assert_eq!(f.pitch_interval_hist[24 + 4], 1.0);
        assert_eq!(f.pitch_interval_hist[24 + 3], 1.0);
        assert_eq!(f.pitch_interval_hist.iter().sum::<f64>(), 2.0);
        assert_eq!(f.onset_interval_hist[4], 2.0);
        assert_eq!(f.duration_hist[3], 2.0);
        assert_eq!(f.duration_hist[7], 1.0);
    }

    #[test]
    fn empty_region_is_zero() {
        let f = compute_features(&[]);
        assert_eq!((f.pitch_number, f.note_number, f.pitch_range), (0, 0, 0));
        assert!(f.chroma_hist.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn difference_guards() {
        assert_eq!(diff_scalar(5.0, 5.0), 0.0);
        assert_eq!(diff_scalar(3.0, 4.0), 0.25);
        assert_eq!(diff_scalar(2.0, 0.0), 1.0);
        assert_eq!(diff_scalar(0.0, 0.0), 0.0);
        let ori = [1.0, 2.0, 0.0];
        assert_eq!(diff_hist(&ori, &ori), 0.0);
        assert_eq!(diff_hist(&[2.0, 4.0, 0.0], &ori), 1.0);
        assert_eq!(diff_hist(&[1.0, 0.0, 0.0], &[0.0; 3]), 1.0);
        assert_eq!(diff_hist(&[0.0; 3], &[0.0; 3]), 0.0);
    }

    #[test]
    fn single_pair_stats() {
        let pair = RegionPair {
            generated: vec![QuantizedNote::new(60, 0, 4)],
            original: vec![QuantizedNote::new(60, 0, 4), QuantizedNote::new(62, 4, 4)],
            category: Category::Bass,
        };
        let r = evaluate_corpus(std::slice::from_ref(&pair));
        let s = &r.aggregate[&Category::Bass];
        assert_eq!(s.std, [0.0; FEATURE_COUNT]);
        assert_eq!(s.mean, r.per_example[0].differences);
        assert_eq!(s.mean[1], 0.5);
        assert!(render_table(&[&r]).contains("bass mean"));
    }
}
