//! Spiral-array pitch geometry, key finding and bar-level tonal tension.
//!
//! Pitch classes sit on a helix indexed by their position on the line of
//! fifths: index `k` maps to `(r sin(kπ/2), r cos(kπ/2), k h)`. Chords and
//! keys are weighted centres of their constituent points.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::song::{QuantizedNote, QuantizedSong};

/// Calibration of the helix and of the chord/key centre weights.
pub mod constants {
    /// Helix radius.
    pub const RADIUS: f64 = 1.0;
    /// Rise per step along the line of fifths, `sqrt(2/15)`.
    pub const HEIGHT: f64 = 0.365_148_371_670_110_7;
    /// Weights of root, fifth and third in a chord centre, and of tonic,
    /// dominant and subdominant chords in a key centre.
    pub const WEIGHTS: [f64; 3] = [0.536, 0.274, 0.19];
    /// Share of the major dominant chord in a minor key centre.
    pub const MINOR_DOMINANT_ALPHA: f64 = 0.75;
    /// Share of the minor subdominant chord in a minor key centre.
    pub const MINOR_SUBDOMINANT_BETA: f64 = 0.75;
    /// Lowest line-of-fifths index of the default pitch-class window (E flat),
    /// so the window spans E flat .. G sharp.
    pub const DEFAULT_WINDOW_LOW: i32 = -3;
}

use constants::*;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpiralPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl SpiralPoint {
    pub const ORIGIN: SpiralPoint = SpiralPoint {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(self, other: SpiralPoint) -> f64 {
        (self - other).norm()
    }
}

impl Add for SpiralPoint {
    type Output = SpiralPoint;
    fn add(self, o: SpiralPoint) -> SpiralPoint {
        SpiralPoint::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for SpiralPoint {
    type Output = SpiralPoint;
    fn sub(self, o: SpiralPoint) -> SpiralPoint {
        SpiralPoint::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for SpiralPoint {
    type Output = SpiralPoint;
    fn mul(self, s: f64) -> SpiralPoint {
        SpiralPoint::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Position of the pitch class with line-of-fifths index `k` (C = 0, G = 1,
/// F = -1, ...).
pub fn pitch_to_spiral(k: i32) -> SpiralPoint {
    // k mod 4 picks the quarter turn exactly; avoids sin/cos rounding.
    let (x, y) = match k.rem_euclid(4) {
        0 => (0.0, 1.0),
        1 => (1.0, 0.0),
        2 => (0.0, -1.0),
        _ => (-1.0, 0.0),
    };
    SpiralPoint::new(RADIUS * x, RADIUS * y, k as f64 * HEIGHT)
}

/// Twelve consecutive line-of-fifths indices `low..=low + 11`; resolves each
/// pitch class to exactly one spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifthsWindow {
    pub low: i32,
}

impl Default for FifthsWindow {
    fn default() -> Self {
        Self {
            low: DEFAULT_WINDOW_LOW,
        }
    }
}

impl FifthsWindow {
    /// Line-of-fifths index of a pitch class (0 = C .. 11 = B).
    pub fn index(self, pitch_class: u8) -> i32 {
        // 7 is its own inverse mod 12, so k ≡ 7·pc.
        let k0 = (7 * pitch_class as i32).rem_euclid(12);
        self.low + (k0 - self.low).rem_euclid(12)
    }

    pub fn position(self, pitch_class: u8) -> SpiralPoint {
        pitch_to_spiral(self.index(pitch_class))
    }
}

fn major_chord(k: i32) -> SpiralPoint {
    pitch_to_spiral(k) * WEIGHTS[0] + pitch_to_spiral(k + 1) * WEIGHTS[1] + pitch_to_spiral(k + 4) * WEIGHTS[2]
}

fn minor_chord(k: i32) -> SpiralPoint {
    pitch_to_spiral(k) * WEIGHTS[0] + pitch_to_spiral(k + 1) * WEIGHTS[1] + pitch_to_spiral(k - 3) * WEIGHTS[2]
}

/// Centre of the major key whose tonic has fifths index `k`.
pub fn major_key_position(k: i32) -> SpiralPoint {
    major_chord(k) * WEIGHTS[0] + major_chord(k + 1) * WEIGHTS[1] + major_chord(k - 1) * WEIGHTS[2]
}

/// Centre of the minor key whose tonic has fifths index `k`.
pub fn minor_key_position(k: i32) -> SpiralPoint {
    let a = MINOR_DOMINANT_ALPHA;
    let b = MINOR_SUBDOMINANT_BETA;
    let dominant = major_chord(k + 1) * a + minor_chord(k + 1) * (1.0 - a);
    let subdominant = minor_chord(k - 1) * b + major_chord(k - 1) * (1.0 - b);
    minor_chord(k) * WEIGHTS[0] + dominant * WEIGHTS[1] + subdominant * WEIGHTS[2]
}

/// Krumhansl-Kessler probe-tone profiles, tonic first.
pub const MAJOR_PROFILE: [f64; 12] = [
    6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88,
];
pub const MINOR_PROFILE: [f64; 12] = [
    6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17,
];

const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("cannot detect a key: the song has no notes")]
    NoNotes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEstimate {
    /// 0..=11 major keys on C..B, 12..=23 minor keys on C..B.
    pub key_index: u8,
    pub key_position: SpiralPoint,
    /// Pitch-class spelling window centred on the key.
    pub window: FifthsWindow,
}

impl KeyEstimate {
    pub fn from_index(key_index: u8) -> Self {
        assert!(key_index < 24, "key index {key_index} out of range");
        let tonic = key_index % 12;
        let minor = key_index >= 12;
        // The relative major's tonic, spelled within Db..F#.
        let relative_major = if minor { (tonic + 3) % 12 } else { tonic };
        let rel = FifthsWindow { low: -5 }.index(relative_major);
        let (position, window) = if minor {
            (minor_key_position(rel + 3), FifthsWindow { low: rel - 3 })
        } else {
            (major_key_position(rel), FifthsWindow { low: rel - 3 })
        };
        Self {
            key_index,
            key_position: position,
            window,
        }
    }

    pub fn tonic(&self) -> u8 {
        self.key_index % 12
    }

    pub fn is_minor(&self) -> bool {
        self.key_index >= 12
    }

    pub fn name(&self) -> String {
        let mode = if self.is_minor() { "minor" } else { "major" };
        format!("{} {mode}", PITCH_NAMES[self.tonic() as usize])
    }
}

fn pearson(a: &[f64; 12], b: &[f64; 12]) -> f64 {
    let ma = a.iter().sum::<f64>() / 12.0;
    let mb = b.iter().sum::<f64>() / 12.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..12 {
        let (da, db) = (a[i] - ma, b[i] - mb);
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Duration-weighted pitch-class histogram.
pub fn pitch_class_histogram<'a>(notes: impl IntoIterator<Item = &'a QuantizedNote>) -> [f64; 12] {
    let mut h = [0.0; 12];
    for n in notes {
        h[n.pitch_class() as usize] += n.duration as f64;
    }
    h
}

/// Correlation of a histogram with each of the 24 rotated key profiles.
pub fn key_correlations(histogram: &[f64; 12]) -> [f64; 24] {
    let mut out = [0.0; 24];
    for (key, slot) in out.iter_mut().enumerate() {
        let profile = if key < 12 { &MAJOR_PROFILE } else { &MINOR_PROFILE };
        let tonic = key % 12;
        let rotated: [f64; 12] = std::array::from_fn(|pc| profile[(pc + 12 - tonic) % 12]);
        *slot = pearson(histogram, &rotated);
    }
    out
}

/// Krumhansl-Schmuckler key finding; ties go to the lower key index.
pub fn detect_key_from_notes<'a>(
    notes: impl IntoIterator<Item = &'a QuantizedNote>,
) -> Result<KeyEstimate, KeyError> {
    let mut count = 0usize;
    let histogram = pitch_class_histogram(notes.into_iter().inspect(|_| count += 1));
    if count == 0 {
        return Err(KeyError::NoNotes);
    }
    let corr = key_correlations(&histogram);
    let mut best = 0usize;
    for k in 1..24 {
        if corr[k] > corr[best] {
            best = k;
        }
    }
    Ok(KeyEstimate::from_index(best as u8))
}

pub fn detect_key(song: &QuantizedSong) -> Result<KeyEstimate, KeyError> {
    detect_key_from_notes(song.all_notes())
}

/// Distance from the (unweighted) centroid of the bar's notes to the key
/// centre; 0 for an empty bar.
pub fn tensile_strain(bar_notes: &[QuantizedNote], key: &KeyEstimate) -> f64 {
    if bar_notes.is_empty() {
        return 0.0;
    }
    let sum = bar_notes
        .iter()
        .fold(SpiralPoint::ORIGIN, |acc, n| acc + key.window.position(n.pitch_class()));
    let centroid = sum * (1.0 / bar_notes.len() as f64);
    centroid.distance(key.key_position)
}

/// Largest pairwise spiral distance among the bar's pitch classes, spelled in
/// the default window.
pub fn cloud_diameter(bar_notes: &[QuantizedNote]) -> f64 {
    cloud_diameter_in(bar_notes, FifthsWindow::default())
}

pub fn cloud_diameter_in(bar_notes: &[QuantizedNote], window: FifthsWindow) -> f64 {
    let mut indices: Vec<i32> = bar_notes.iter().map(|n| window.index(n.pitch_class())).collect();
    indices.sort_unstable();
    indices.dedup();
    cloud_diameter_of_indices(&indices)
}

pub fn cloud_diameter_of_indices(indices: &[i32]) -> f64 {
    let mut best = 0.0f64;
    for (i, &a) in indices.iter().enumerate() {
        for &b in &indices[i + 1..] {
            best = best.max(pitch_to_spiral(a).distance(pitch_to_spiral(b)));
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarTension {
    pub tensile_strain: f64,
    pub cloud_diameter: f64,
    pub note_count: usize,
}

/// Tension of every bar, measured against the song-level key.
pub fn bar_tensions(song: &QuantizedSong, key: &KeyEstimate) -> Vec<BarTension> {
    (0..song.bars)
        .map(|bar| {
            let notes = song.bar_notes(bar);
            BarTension {
                tensile_strain: tensile_strain(&notes, key),
                cloud_diameter: cloud_diameter_in(&notes, key.window),
                note_count: notes.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn notes(pitches: &[u8]) -> Vec<QuantizedNote> {
        pitches
            .iter()
            .enumerate()
            .map(|(i, &p)| QuantizedNote::new(p, i as u32, 1))
            .collect()
    }

    #[test]
    fn helix_points() {
        assert_eq!(pitch_to_spiral(0), SpiralPoint::new(0.0, 1.0, 0.0));
        let h = (2.0f64 / 15.0).sqrt();
        assert!((HEIGHT - h).abs() < 1e-16);
        let g = pitch_to_spiral(1);
        assert_eq!((g.x, g.y), (1.0, 0.0));
        assert!((g.z - h).abs() < 1e-15);
        let f = pitch_to_spiral(-1);
        assert_eq!((f.x, f.y), (-1.0, 0.0));
        assert!((f.z + h).abs() < 1e-15);
        // Formula check against trigonometry.
        for k in -15..=15 {
            let p = pitch_to_spiral(k);
            let a = k as f64 * std::f64::consts::FRAC_PI_2;
            assert!((p.x - a.sin()).abs() < 1e-12 && (p.y - a.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn default_window_spans_e_flat_to_g_sharp() {
        let w = FifthsWindow::default();
        let idx: Vec<i32> = (0..12).map(|pc| w.index(pc)).collect();
        assert_eq!(idx, vec![0, 7, 2, -3, 4, -1, 6, 1, 8, 3, -2, 5]);
    }

    #[test]
    fn c_major_triad_is_c_major() {
        let k = detect_key_from_notes(&notes(&[60, 64, 67, 72, 76, 79])).unwrap();
        assert_eq!(k.key_index, 0);
        let up = detect_key_from_notes(&notes(&[62, 66, 69, 74, 78, 81])).unwrap();
        assert_eq!(up.key_index, 2);
        assert_eq!(detect_key_from_notes(&[]).unwrap_err(), KeyError::NoNotes);
    }

    #[test]
    fn single_pitch_key_is_stable() {
        let a = notes(&[69, 69, 69]);
        let first = detect_key_from_notes(&a).unwrap().key_index;
        for _ in 0..5 {
            assert_eq!(detect_key_from_notes(&a).unwrap().key_index, first);
        }
    }

    #[test]
    fn diameter_cases() {
        assert_eq!(cloud_diameter(&notes(&[60])), 0.0);
        assert_eq!(cloud_diameter(&notes(&[60, 72])), 0.0);
        let cg = cloud_diameter(&notes(&[60, 67]));
        assert!((cg - (2.0 + 2.0 / 15.0f64).sqrt()).abs() < 1e-12);
        let c_fsharp = cloud_diameter(&notes(&[60, 66]));
        // Brute force: k = 0 and k = 6 are opposite on the circle.
        let brute = (4.0 + 36.0 * 2.0 / 15.0f64).sqrt();
        assert!((c_fsharp - brute).abs() < 1e-12);
        assert!(c_fsharp > cg);
    }

    #[test]
    fn strain_is_zero_for_empty_bar() {
        let key = KeyEstimate::from_index(0);
        assert_eq!(tensile_strain(&[], &key), 0.0);
    }

    #[test]
    fn minor_key_windows_follow_relative_major() {
        let a_minor = KeyEstimate::from_index(21);
        assert_eq!(a_minor.window, FifthsWindow::default());
        assert_eq!(a_minor.name(), "A minor");
        let b_major = KeyEstimate::from_index(11);
        assert_eq!(b_major.window.index(3), 9); // D sharp
    }
}
