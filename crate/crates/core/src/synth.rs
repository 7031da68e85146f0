//! Songs for tests, benchmarks and demos: a fixed two-bar reference piece
//! and seeded random valid songs.

use rand::Rng;

use crate::song::{
    normalize_notes, QuantizedNote, QuantizedSong, QuantizedTrack, Role, TimeSignature, MAX_DURATION, MAX_PITCH,
    MIN_PITCH,
};

/// Two bars of 4/4 at 110 bpm: melody (piano), bass (acoustic bass) and
/// string-ensemble accompaniment.
pub fn reference_song() -> QuantizedSong {
    let n = QuantizedNote::new;
    let melody = vec![
        n(79, 0, 4),
        n(76, 4, 4),
        n(74, 8, 6),
        n(69, 16, 4),
        n(71, 20, 4),
        n(72, 24, 6),
    ];
    let bass = vec![n(45, 0, 8), n(41, 8, 8), n(43, 16, 8), n(48, 24, 8)];
    let accompaniment = vec![
        n(64, 0, 8),
        n(67, 0, 8),
        n(60, 0, 16),
        n(65, 8, 8),
        n(59, 16, 8),
        n(65, 16, 8),
        n(67, 16, 8),
        n(60, 24, 8),
        n(64, 24, 8),
    ];
    QuantizedSong {
        time_signature: TimeSignature::FourFour,
        tempo_bpm: 110.0,
        bars: 2,
        tracks: vec![
            QuantizedTrack::new(Role::Melody, 0, melody),
            QuantizedTrack::new(Role::Bass, 32, bass),
            QuantizedTrack::new(Role::Accompaniment, 48, accompaniment),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub min_bars: u32,
    pub max_bars: u32,
    /// Upper bound on notes per track per bar.
    pub max_notes_per_bar: u32,
    /// Chance that a track gets chords rather than single notes.
    pub chord_probability: f64,
    pub metres: &'static [TimeSignature],
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            min_bars: 1,
            max_bars: 16,
            max_notes_per_bar: 6,
            chord_probability: 0.3,
            metres: &TimeSignature::ALL,
        }
    }
}

fn role_range(role: Role) -> (u8, u8) {
    match role {
        Role::Melody => (60, 96),
        Role::Bass => (28, 55),
        Role::Accompaniment => (48, 84),
    }
}

/// A random song that passes `validate` and has at least one note.
pub fn random_song(rng: &mut impl Rng, opts: &SynthOptions) -> QuantizedSong {
    let time_signature = opts.metres[rng.random_range(0..opts.metres.len())];
    let bars = rng.random_range(opts.min_bars..=opts.max_bars);
    let spb = time_signature.steps_per_bar();
    let total = bars * spb;
    let n_tracks = rng.random_range(2..=3);
    let mut tracks = Vec::with_capacity(n_tracks);
    for role in Role::ALL.into_iter().take(n_tracks) {
        let (lo, hi) = role_range(role);
        let chords = rng.random_bool(opts.chord_probability);
        let mut notes = Vec::new();
        for bar in 0..bars {
            for _ in 0..rng.random_range(0..=opts.max_notes_per_bar) {
                let onset = bar * spb + rng.random_range(0..spb);
                let duration = rng.random_range(1..=MAX_DURATION.min(total - onset));
                let pitch = rng.random_range(lo..=hi);
                notes.push(QuantizedNote::new(pitch, onset, duration));
                if chords {
                    for interval in [3u8, 7] {
                        if rng.random_bool(0.6) {
                            let p = (pitch + interval).min(MAX_PITCH);
                            notes.push(QuantizedNote::new(p, onset, duration));
                        }
                    }
                }
            }
        }
        normalize_notes(&mut notes, total);
        let instrument = rng.random_range(0..128u8);
        tracks.push(QuantizedTrack::new(role, instrument, notes));
    }
    if tracks.iter().all(|t| t.notes.is_empty()) {
        let pitch = rng.random_range(MIN_PITCH + 39..=MIN_PITCH + 60);
        tracks[0].notes.push(QuantizedNote::new(pitch, 0, 1));
    }
    let tempo_bpm = rng.random_range(40.0..200.0);
    let song = QuantizedSong {
        time_signature,
        tempo_bpm,
        bars,
        tracks,
    };
    debug_assert!(song.validate().is_ok());
    song
}

/// A random song whose tempo is the representative value of its bin, so it
/// survives a token round trip unchanged.
pub fn random_song_binned_tempo(rng: &mut impl Rng, opts: &SynthOptions) -> QuantizedSong {
    let mut s = random_song(rng, opts);
    let bin = crate::controls::bin_tempo(s.tempo_bpm) as usize;
    s.tempo_bpm = crate::controls::TEMPO_REPRESENTATIVE_BPM[bin];
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_song_is_valid() {
        reference_song().validate().unwrap();
        assert_eq!(reference_song().note_count(), 19);
    }

    #[test]
    fn random_songs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let s = random_song(&mut rng, &SynthOptions::default());
            s.validate().unwrap();
            assert!(s.note_count() > 0);
        }
    }
}
