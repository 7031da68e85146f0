//! Control features and their token bins.
//!
//! Track-level rates (density, occupation, polyphony) are measured over the
//! whole window; tension (strain, diameter) is measured per bar against the
//! song-level key. All bin boundaries come from a [`Calibration`], which can
//! be loaded from JSON so that dataset-derived boundaries replace the
//! defaults without code changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::song::{sounding_counts, QuantizedNote, QuantizedSong};
use crate::spiral::{self, KeyError, KeyEstimate};

pub const RATE_BINS: usize = 10;
pub const TENSION_BINS: usize = 12;
pub const TEMPO_BINS: usize = 7;
pub const KEY_BINS: usize = 24;

/// Tempo written back for each tempo bin when decoding tokens.
pub const TEMPO_REPRESENTATIVE_BPM: [f64; TEMPO_BINS] = [50.0, 70.0, 90.0, 110.0, 130.0, 150.0, 170.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("track {track} spans zero time steps")]
    EmptyTrack { track: usize },
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("invalid calibration: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackStats {
    pub number_note: u32,
    pub timesteps_total: u32,
    pub timesteps_any_note: u32,
    pub timesteps_poly_note: u32,
}

impl TrackStats {
    pub fn from_notes(notes: &[QuantizedNote], total_steps: u32) -> Self {
        let counts = sounding_counts(notes, total_steps);
        Self {
            number_note: notes.len() as u32,
            timesteps_total: total_steps,
            timesteps_any_note: counts.iter().filter(|&&c| c >= 1).count() as u32,
            timesteps_poly_note: counts.iter().filter(|&&c| c >= 2).count() as u32,
        }
    }
}

pub fn track_density(stats: &TrackStats) -> Result<f64, ControlError> {
    if stats.timesteps_total == 0 {
        return Err(ControlError::EmptyTrack { track: 0 });
    }
    Ok(stats.number_note as f64 / stats.timesteps_total as f64)
}

pub fn track_occupation(stats: &TrackStats) -> Result<f64, ControlError> {
    if stats.timesteps_total == 0 {
        return Err(ControlError::EmptyTrack { track: 0 });
    }
    Ok(stats.timesteps_any_note as f64 / stats.timesteps_total as f64)
}

/// Share of sounding steps that have two or more notes; 0 for a silent track.
pub fn track_polyphony(stats: &TrackStats) -> f64 {
    if stats.timesteps_any_note == 0 {
        0.0
    } else {
        stats.timesteps_poly_note as f64 / stats.timesteps_any_note as f64
    }
}

/// Ascending bin boundaries. A value's bin is the number of boundaries that
/// are `<=` it, so `n` boundaries give `n + 1` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rate_bins: Vec<f64>,
    /// Density has its own table because it is unbounded above 1 for chordal
    /// tracks; falls back to `rate_bins` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_bins: Option<Vec<f64>>,
    pub tension_bins: Vec<f64>,
    pub tempo_bins: Vec<f64>,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            rate_bins: (1..RATE_BINS).map(|k| k as f64 / 10.0).collect(),
            density_bins: Some(vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5]),
            tension_bins: (1..TENSION_BINS).map(|k| k as f64 * 0.2).collect(),
            tempo_bins: vec![60.0, 80.0, 100.0, 120.0, 140.0, 160.0],
        }
    }
}

fn bin_with(bounds: &[f64], value: f64) -> u8 {
    bounds.iter().take_while(|&&b| b <= value).count() as u8
}

impl Calibration {
    pub fn from_json(text: &str) -> Result<Self, ControlError> {
        let cal: Calibration = serde_json::from_str(text).map_err(|e| ControlError::Calibration(e.to_string()))?;
        cal.check()?;
        Ok(cal)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("calibration serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check(&self) -> Result<(), ControlError> {
        let tables: [(&str, &[f64], usize); 4] = [
            ("rate_bins", &self.rate_bins, RATE_BINS),
            ("density_bins", self.density_bins.as_deref().unwrap_or(&self.rate_bins), RATE_BINS),
            ("tension_bins", &self.tension_bins, TENSION_BINS),
            ("tempo_bins", &self.tempo_bins, TEMPO_BINS),
        ];
        for (name, bounds, bins) in tables {
            if bounds.len() != bins - 1 {
                return Err(ControlError::Calibration(format!(
                    "{name} needs {} boundaries, got {}",
                    bins - 1,
                    bounds.len()
                )));
            }
            if bounds.windows(2).any(|w| w[0] >= w[1]) || bounds.iter().any(|b| !b.is_finite()) {
                return Err(ControlError::Calibration(format!("{name} must be finite and strictly ascending")));
            }
        }
        Ok(())
    }

    pub fn bin_rate(&self, value: f64) -> u8 {
        bin_with(&self.rate_bins, value)
    }

    pub fn bin_density(&self, value: f64) -> u8 {
        bin_with(self.density_bins.as_deref().unwrap_or(&self.rate_bins), value)
    }

    pub fn bin_tension(&self, value: f64) -> u8 {
        bin_with(&self.tension_bins, value)
    }

    pub fn bin_tempo(&self, bpm: f64) -> u8 {
        bin_with(&self.tempo_bins, bpm)
    }
}

pub fn bin_rate(value: f64) -> u8 {
    Calibration::default().bin_rate(value)
}

pub fn bin_tension(value: f64) -> u8 {
    Calibration::default().bin_tension(value)
}

pub fn bin_tempo(bpm: f64) -> u8 {
    Calibration::default().bin_tempo(bpm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackControls {
    pub density: u8,
    pub occupation: u8,
    pub polyphony: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BarControls {
    pub strain: u8,
    pub diameter: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlSet {
    pub key_bin: u8,
    pub tempo_bin: u8,
    pub tracks: Vec<TrackControls>,
    pub bars: Vec<BarControls>,
}

/// Unbinned feature values behind a [`ControlSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlValues {
    pub key: KeyEstimate,
    pub tempo_bpm: f64,
    pub track_stats: Vec<TrackStats>,
    pub density: Vec<f64>,
    pub occupation: Vec<f64>,
    pub polyphony: Vec<f64>,
    pub tension: Vec<spiral::BarTension>,
}

impl ControlValues {
    pub fn bin(&self, cal: &Calibration) -> ControlSet {
        ControlSet {
            key_bin: self.key.key_index,
            tempo_bin: cal.bin_tempo(self.tempo_bpm),
            tracks: (0..self.track_stats.len())
                .map(|t| TrackControls {
                    density: cal.bin_density(self.density[t]),
                    occupation: cal.bin_rate(self.occupation[t]),
                    polyphony: cal.bin_rate(self.polyphony[t]),
                })
                .collect(),
            bars: self
                .tension
                .iter()
                .map(|b| BarControls {
                    strain: cal.bin_tension(b.tensile_strain),
                    diameter: cal.bin_tension(b.cloud_diameter),
                })
                .collect(),
        }
    }
}

/// Raw control values with an explicit key (used when the song may be
/// silent, e.g. after an infill that produced no notes).
pub fn control_values_with_key(song: &QuantizedSong, key: KeyEstimate) -> Result<ControlValues, ControlError> {
    let total = song.total_steps();
    let mut stats = Vec::with_capacity(song.tracks.len());
    let (mut density, mut occupation, mut polyphony) = (vec![], vec![], vec![]);
    for (i, track) in song.tracks.iter().enumerate() {
        let s = TrackStats::from_notes(&track.notes, total);
        density.push(track_density(&s).map_err(|_| ControlError::EmptyTrack { track: i })?);
        occupation.push(track_occupation(&s).map_err(|_| ControlError::EmptyTrack { track: i })?);
        polyphony.push(track_polyphony(&s));
        stats.push(s);
    }
    Ok(ControlValues {
        key,
        tempo_bpm: song.tempo_bpm,
        track_stats: stats,
        density,
        occupation,
        polyphony,
        tension: spiral::bar_tensions(song, &key),
    })
}

pub fn control_values(song: &QuantizedSong) -> Result<ControlValues, ControlError> {
    let key = spiral::detect_key(song)?;
    control_values_with_key(song, key)
}

pub fn compute_control_set(song: &QuantizedSong) -> Result<ControlSet, ControlError> {
    compute_control_set_with(song, &Calibration::default())
}

pub fn compute_control_set_with(song: &QuantizedSong, cal: &Calibration) -> Result<ControlSet, ControlError> {
    Ok(control_values(song)?.bin(cal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(notes: u32, total: u32) -> TrackStats {
        TrackStats {
            number_note: notes,
            timesteps_total: total,
            ..Default::default()
        }
    }

    #[test]
    fn density_cases() {
        assert_eq!(track_density(&stats(0, 32)).unwrap(), 0.0);
        assert_eq!(track_density(&stats(6, 32)).unwrap(), 0.1875);
        assert_eq!(track_density(&stats(64, 32)).unwrap(), 2.0);
        assert!(track_density(&stats(1, 0)).is_err());
    }

    #[test]
    fn rate_bins() {
        assert_eq!(bin_rate(0.875), 8);
        assert_eq!(bin_rate(1.0), 9);
        assert_eq!(bin_rate(0.0), 0);
        assert_eq!(bin_rate(0.3), 3);
        assert_eq!(bin_rate(7.0), 9);
    }

    #[test]
    fn tension_and_tempo_bins() {
        assert_eq!(bin_tension(0.0), 0);
        assert_eq!(bin_tension(0.5), 2);
        assert_eq!(bin_tension(5.0), 11);
        assert_eq!(bin_tempo(72.0), 1);
        assert_eq!(bin_tempo(120.0), 4);
        assert_eq!(bin_tempo(200.0), 6);
        for (bin, bpm) in TEMPO_REPRESENTATIVE_BPM.iter().enumerate() {
            assert_eq!(bin_tempo(*bpm) as usize, bin);
        }
    }

    #[test]
    fn polyphony_counts_two_or_more() {
        let chord = [
            QuantizedNote::new(60, 0, 4),
            QuantizedNote::new(64, 0, 4),
            QuantizedNote::new(67, 4, 4),
        ];
        let s = TrackStats::from_notes(&chord, 16);
        assert_eq!((s.timesteps_any_note, s.timesteps_poly_note), (8, 4));
        assert_eq!(track_polyphony(&s), 0.5);
        assert_eq!(track_polyphony(&TrackStats::from_notes(&[], 16)), 0.0);
    }

    #[test]
    fn calibration_json_round_trip() {
        let cal = Calibration::default();
        let back = Calibration::from_json(&cal.to_json()).unwrap();
        assert_eq!(cal, back);
        assert_eq!(cal.hash(), back.hash());
        let bad = r#"{"rate_bins":[0.5],"tension_bins":[],"tempo_bins":[]}"#;
        assert!(Calibration::from_json(bad).is_err());
        let no_density = r#"{"rate_bins":[0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9],
            "tension_bins":[0.2,0.4,0.6,0.8,1.0,1.2,1.4,1.6,1.8,2.0,2.2],
            "tempo_bins":[60,80,100,120,140,160]}"#;
        let cal = Calibration::from_json(no_density).unwrap();
        assert_eq!(cal.bin_density(0.25), 2);
    }
}
