//! Grid-quantized song model shared by every stage of the pipeline.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_PITCH: u8 = 21;
pub const MAX_PITCH: u8 = 108;
pub const MIN_DURATION: u32 = 1;
pub const MAX_DURATION: u32 = 32;
pub const MAX_BARS: u32 = 16;
pub const MAX_TRACKS: usize = 3;
/// Grid resolution: one step is a sixteenth note.
pub const STEPS_PER_QUARTER: u32 = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SongError {
    #[error("song must have between 1 and {MAX_BARS} bars, got {0}")]
    BarCount(u32),
    #[error("song must have 2 or 3 tracks, got {0}")]
    TrackCount(usize),
    #[error("track {index} has role {role:?}; tracks must be ordered melody, bass, accompaniment")]
    TrackOrder { index: usize, role: Role },
    #[error("tempo must be positive and finite, got {0}")]
    Tempo(f64),
    #[error("track {track}: pitch {pitch} outside [{MIN_PITCH}, {MAX_PITCH}]")]
    Pitch { track: usize, pitch: u8 },
    #[error("track {track}: duration {duration} outside [{MIN_DURATION}, {MAX_DURATION}]")]
    Duration { track: usize, duration: u32 },
    #[error("track {track}: note at step {onset} (+{duration}) runs past the song end at step {end}")]
    OutsideGrid {
        track: usize,
        onset: u32,
        duration: u32,
        end: u32,
    },
    #[error("track {track}: notes are not sorted by (onset, duration, pitch)")]
    Unsorted { track: usize },
    #[error("track {track}: pitch {pitch} overlaps itself at step {onset}")]
    Overlap { track: usize, pitch: u8, onset: u32 },
}

/// Supported metres.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeSignature {
    #[serde(rename = "4/4")]
    FourFour,
    #[serde(rename = "3/4")]
    ThreeFour,
    #[serde(rename = "2/4")]
    TwoFour,
    #[serde(rename = "6/8")]
    SixEight,
}

impl TimeSignature {
    pub const ALL: [TimeSignature; 4] = [
        TimeSignature::FourFour,
        TimeSignature::ThreeFour,
        TimeSignature::TwoFour,
        TimeSignature::SixEight,
    ];

    pub fn steps_per_bar(self) -> u32 {
        match self {
            TimeSignature::FourFour => 16,
            TimeSignature::ThreeFour => 12,
            TimeSignature::TwoFour => 8,
            TimeSignature::SixEight => 12,
        }
    }

    pub fn fraction(self) -> (u8, u8) {
        match self {
            TimeSignature::FourFour => (4, 4),
            TimeSignature::ThreeFour => (3, 4),
            TimeSignature::TwoFour => (2, 4),
            TimeSignature::SixEight => (6, 8),
        }
    }

    pub fn from_fraction(numerator: u8, denominator: u8) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|ts| ts.fraction() == (numerator, denominator))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_minority(self) -> bool {
        self != TimeSignature::FourFour
    }
}

impl fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (n, d) = self.fraction();
        write!(f, "{n}/{d}")
    }
}

impl FromStr for TimeSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, d) = s
            .split_once('/')
            .ok_or_else(|| format!("not a time signature: {s}"))?;
        let n: u8 = n.parse().map_err(|_| format!("not a time signature: {s}"))?;
        let d: u8 = d.parse().map_err(|_| format!("not a time signature: {s}"))?;
        Self::from_fraction(n, d).ok_or_else(|| format!("unsupported time signature: {s}"))
    }
}

/// Role of a track; the discriminant is the track index used in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Melody = 0,
    Bass = 1,
    Accompaniment = 2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Melody, Role::Bass, Role::Accompaniment];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Role> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Melody => "melody",
            Role::Bass => "bass",
            Role::Accompaniment => "accompaniment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantizedNote {
    pub pitch: u8,
    /// Onset in sixteenth-note steps from the start of the song.
    pub onset: u32,
    /// Length in steps, 1..=32.
    pub duration: u32,
}

impl QuantizedNote {
    pub fn new(pitch: u8, onset: u32, duration: u32) -> Self {
        Self {
            pitch,
            onset,
            duration,
        }
    }

    pub fn end(&self) -> u32 {
        self.onset + self.duration
    }

    pub fn pitch_class(&self) -> u8 {
        self.pitch % 12
    }

    fn sort_key(&self) -> (u32, u32, u8) {
        (self.onset, self.duration, self.pitch)
    }
}

impl Ord for QuantizedNote {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for QuantizedNote {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedTrack {
    pub role: Role,
    /// General MIDI program number.
    pub instrument: u8,
    /// Sorted by (onset, duration, pitch).
    pub notes: Vec<QuantizedNote>,
}

impl QuantizedTrack {
    pub fn new(role: Role, instrument: u8, mut notes: Vec<QuantizedNote>) -> Self {
        notes.sort();
        Self {
            role,
            instrument,
            notes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedSong {
    pub time_signature: TimeSignature,
    pub tempo_bpm: f64,
    pub bars: u32,
    /// Melody and bass, optionally followed by accompaniment, in role order.
    pub tracks: Vec<QuantizedTrack>,
}

impl QuantizedSong {
    pub fn steps_per_bar(&self) -> u32 {
        self.time_signature.steps_per_bar()
    }

    pub fn total_steps(&self) -> u32 {
        self.bars * self.steps_per_bar()
    }

    pub fn track(&self, role: Role) -> Option<&QuantizedTrack> {
        self.tracks.iter().find(|t| t.role == role)
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    pub fn all_notes(&self) -> impl Iterator<Item = &QuantizedNote> {
        self.tracks.iter().flat_map(|t| t.notes.iter())
    }

    /// Notes of every track whose onset falls in `bar`.
    pub fn bar_notes(&self, bar: u32) -> Vec<QuantizedNote> {
        let spb = self.steps_per_bar();
        let (lo, hi) = (bar * spb, (bar + 1) * spb);
        let mut notes: Vec<_> = self
            .all_notes()
            .filter(|n| n.onset >= lo && n.onset < hi)
            .copied()
            .collect();
        notes.sort();
        notes
    }

    /// Notes of one track whose onset falls in `bar`.
    pub fn track_bar_notes(&self, track: usize, bar: u32) -> Vec<QuantizedNote> {
        let spb = self.steps_per_bar();
        let (lo, hi) = (bar * spb, (bar + 1) * spb);
        self.tracks
            .get(track)
            .map(|t| {
                t.notes
                    .iter()
                    .filter(|n| n.onset >= lo && n.onset < hi)
                    .copied()
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), SongError> {
        if self.bars == 0 || self.bars > MAX_BARS {
            return Err(SongError::BarCount(self.bars));
        }
        if !(2..=MAX_TRACKS).contains(&self.tracks.len()) {
            return Err(SongError::TrackCount(self.tracks.len()));
        }
        if !(self.tempo_bpm.is_finite() && self.tempo_bpm > 0.0) {
            return Err(SongError::Tempo(self.tempo_bpm));
        }
        let end = self.total_steps();
        for (index, track) in self.tracks.iter().enumerate() {
            if track.role.index() != index {
                return Err(SongError::TrackOrder {
                    index,
                    role: track.role,
                });
            }
            for note in &track.notes {
                if !(MIN_PITCH..=MAX_PITCH).contains(&note.pitch) {
                    return Err(SongError::Pitch {
                        track: index,
                        pitch: note.pitch,
                    });
                }
                if !(MIN_DURATION..=MAX_DURATION).contains(&note.duration) {
                    return Err(SongError::Duration {
                        track: index,
                        duration: note.duration,
                    });
                }
                if note.end() > end {
                    return Err(SongError::OutsideGrid {
                        track: index,
                        onset: note.onset,
                        duration: note.duration,
                        end,
                    });
                }
            }
            if track.notes.windows(2).any(|w| w[0] > w[1]) {
                return Err(SongError::Unsorted { track: index });
            }
            let mut last_end = [None::<u32>; 128];
            let mut by_onset = track.notes.clone();
            by_onset.sort_by_key(|n| (n.onset, n.pitch));
            for note in &by_onset {
                if let Some(prev_end) = last_end[note.pitch as usize] {
                    if note.onset < prev_end {
                        return Err(SongError::Overlap {
                            track: index,
                            pitch: note.pitch,
                            onset: note.onset,
                        });
                    }
                }
                last_end[note.pitch as usize] = Some(note.end());
            }
        }
        Ok(())
    }

    /// Shift every pitch by `semitones`; `None` if any note would leave the
    /// piano range.
    pub fn transpose(&self, semitones: i32) -> Option<QuantizedSong> {
        let mut out = self.clone();
        for track in &mut out.tracks {
            for note in &mut track.notes {
                let p = note.pitch as i32 + semitones;
                if p < MIN_PITCH as i32 || p > MAX_PITCH as i32 {
                    return None;
                }
                note.pitch = p as u8;
            }
            track.notes.sort();
        }
        Some(out)
    }

    /// Bars `start..start + count` as a standalone song. Notes sounding past
    /// the slice end are shortened to fit.
    pub fn slice_bars(&self, start: u32, count: u32) -> QuantizedSong {
        let spb = self.steps_per_bar();
        let (lo, hi) = (start * spb, (start + count) * spb);
        let tracks = self
            .tracks
            .iter()
            .map(|t| {
                let notes = t
                    .notes
                    .iter()
                    .filter(|n| n.onset >= lo && n.onset < hi)
                    .map(|n| QuantizedNote {
                        pitch: n.pitch,
                        onset: n.onset - lo,
                        duration: n.duration.min(hi - n.onset),
                    })
                    .collect();
                QuantizedTrack::new(t.role, t.instrument, notes)
            })
            .collect();
        QuantizedSong {
            time_signature: self.time_signature,
            tempo_bpm: self.tempo_bpm,
            bars: count,
            tracks,
        }
    }

    pub fn pitch_bounds(&self) -> Option<(u8, u8)> {
        let min = self.all_notes().map(|n| n.pitch).min()?;
        let max = self.all_notes().map(|n| n.pitch).max()?;
        Some((min, max))
    }
}

/// Bring a note list into the form a MIDI reader would produce: sorted, no
/// exact duplicates, and a re-struck pitch cuts the previous note short.
/// Durations are clamped to `[1, 32]` and to `total_steps`; notes starting at
/// or after `total_steps` are dropped.
pub fn normalize_notes(notes: &mut Vec<QuantizedNote>, total_steps: u32) {
    notes.retain(|n| n.onset < total_steps);
    for n in notes.iter_mut() {
        n.duration = n
            .duration
            .clamp(MIN_DURATION, MAX_DURATION)
            .min(total_steps - n.onset);
    }
    // Same pitch and onset: keep the longest.
    notes.sort_by_key(|n| (n.pitch, n.onset, std::cmp::Reverse(n.duration)));
    notes.dedup_by_key(|n| (n.pitch, n.onset));
    for i in 1..notes.len() {
        let (prev, cur) = (notes[i - 1], notes[i]);
        if prev.pitch == cur.pitch && prev.end() > cur.onset {
            notes[i - 1].duration = cur.onset - prev.onset;
        }
    }
    notes.sort();
}

/// Number of notes sounding at each grid step.
pub fn sounding_counts(notes: &[QuantizedNote], total_steps: u32) -> Vec<u32> {
    let mut counts = vec![0u32; total_steps as usize];
    for n in notes {
        let lo = n.onset.min(total_steps) as usize;
        let hi = n.end().min(total_steps) as usize;
        for c in &mut counts[lo..hi] {
            *c += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn song(notes: Vec<QuantizedNote>) -> QuantizedSong {
        QuantizedSong {
            time_signature: TimeSignature::FourFour,
            tempo_bpm: 120.0,
            bars: 2,
            tracks: vec![
                QuantizedTrack::new(Role::Melody, 0, notes),
                QuantizedTrack::new(Role::Bass, 32, vec![]),
            ],
        }
    }

    #[test]
    fn steps_per_bar_by_metre() {
        let spb: Vec<u32> = TimeSignature::ALL.iter().map(|t| t.steps_per_bar()).collect();
        assert_eq!(spb, vec![16, 12, 8, 12]);
        assert_eq!("6/8".parse::<TimeSignature>().unwrap(), TimeSignature::SixEight);
        assert!("5/4".parse::<TimeSignature>().is_err());
    }

    #[test]
    fn validate_rejects_out_of_grid_and_overlaps() {
        assert!(song(vec![QuantizedNote::new(60, 0, 4)]).validate().is_ok());
        assert!(matches!(
            song(vec![QuantizedNote::new(60, 30, 4)]).validate(),
            Err(SongError::OutsideGrid { .. })
        ));
        assert!(matches!(
            song(vec![QuantizedNote::new(60, 0, 8), QuantizedNote::new(60, 4, 2)]).validate(),
            Err(SongError::Overlap { .. })
        ));
        assert!(matches!(
            song(vec![QuantizedNote::new(120, 0, 8)]).validate(),
            Err(SongError::Pitch { .. })
        ));
    }

    #[test]
    fn normalize_truncates_restruck_pitch() {
        let mut notes = vec![
            QuantizedNote::new(60, 0, 8),
            QuantizedNote::new(60, 4, 2),
            QuantizedNote::new(60, 4, 6),
            QuantizedNote::new(64, 30, 40),
        ];
        normalize_notes(&mut notes, 32);
        assert_eq!(
            notes,
            vec![
                QuantizedNote::new(60, 0, 4),
                QuantizedNote::new(60, 4, 6),
                QuantizedNote::new(64, 30, 2),
            ]
        );
    }

    #[test]
    fn slice_shortens_notes_at_the_boundary() {
        let s = song(vec![QuantizedNote::new(60, 12, 8), QuantizedNote::new(62, 20, 4)]);
        let first = s.slice_bars(0, 1);
        assert_eq!(first.tracks[0].notes, vec![QuantizedNote::new(60, 12, 4)]);
        let second = s.slice_bars(1, 1);
        assert_eq!(second.tracks[0].notes, vec![QuantizedNote::new(62, 4, 4)]);
    }
}
