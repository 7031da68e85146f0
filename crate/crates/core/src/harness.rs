//! Infill evaluation over a set of songs: mask a region per category, let a
//! generator fill it, and compare the notes inside the masked cells.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{decode_tokens, encode_song, EncodeError, GrammarError, TokenSequence};
use crate::controls::{compute_control_set, ControlError};
use crate::masking::{mask_cells, MaskError, MaskedExample};
use crate::metrics::{evaluate_corpus, Category, MetricReport, RegionPair};
use crate::model::ModelParams;
use crate::sampler::{sample_infill, SampleConfig, SampleError};
use crate::song::{QuantizedNote, QuantizedSong};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Controls(#[from] ControlError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Anything that can fill the masks of an example.
pub trait Generator: Sync {
    fn name(&self) -> &str;
    /// Returns the complete infilled sequence. `original` is the unmasked
    /// sequence, available for reference generators.
    fn infill(&self, masked: &MaskedExample, original: &TokenSequence, seed: u64) -> Result<TokenSequence, HarnessError>;
}

/// Returns the original music unchanged; every difference is zero.
pub struct OriginalGenerator;

impl Generator for OriginalGenerator {
    fn name(&self) -> &str {
        "original"
    }

    fn infill(&self, _: &MaskedExample, original: &TokenSequence, _: u64) -> Result<TokenSequence, HarnessError> {
        Ok(original.clone())
    }
}

pub struct ModelGenerator<'a> {
    pub params: &'a ModelParams<f32>,
    pub temperature: f64,
}

impl Generator for ModelGenerator<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn infill(&self, masked: &MaskedExample, _: &TokenSequence, seed: u64) -> Result<TokenSequence, HarnessError> {
        let cfg = SampleConfig {
            temperature: self.temperature,
            seed,
            ..SampleConfig::default()
        };
        Ok(sample_infill(self.params, masked, &cfg)?.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// Songs drawn from the test set; all of them if larger than the set.
    pub n: usize,
    pub seed: u64,
    pub with_controls: bool,
}

/// The cells masked for `category`, or `None` when the song lacks the track.
pub fn category_cells(category: Category, bars: u32, tracks: usize, rng: &mut impl Rng) -> Option<Vec<(u32, usize)>> {
    let track_cells = |t: usize| (t < tracks).then(|| (0..bars).map(|b| (b, t)).collect());
    match category {
        Category::Melody => track_cells(0),
        Category::Bass => track_cells(1),
        Category::Accompaniment => track_cells(2),
        Category::Bar => {
            let bar = rng.random_range(0..bars);
            Some((0..tracks).map(|t| (bar, t)).collect())
        }
    }
}

/// Notes of `song` starting inside the given cells.
pub fn region_notes(song: &QuantizedSong, cells: &[(u32, usize)]) -> Vec<QuantizedNote> {
    let mut notes: Vec<QuantizedNote> = cells
        .iter()
        .filter(|&&(_, t)| t < song.tracks.len())
        .flat_map(|&(b, t)| song.track_bar_notes(t, b))
        .collect();
    notes.sort();
    notes
}

/// Indices of the evaluated songs, a seeded sample without replacement.
pub fn select_songs(total: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

fn song_pairs(
    song: &QuantizedSong,
    generator: &dyn Generator,
    with_controls: bool,
    seed: u64,
) -> Result<Vec<RegionPair>, HarnessError> {
    let controls = if with_controls {
        Some(compute_control_set(song)?)
    } else {
        None
    };
    let original = encode_song(song, controls.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = vec![];
    for category in Category::ALL {
        let Some(cells) = category_cells(category, song.bars, song.tracks.len(), &mut rng) else {
            continue;
        };
        let masked = mask_cells(&original, &cells)?;
        let filled = generator.infill(&masked, &original, rng.random())?;
        let generated = decode_tokens(&filled)?;
        pairs.push(RegionPair {
            generated: region_notes(&generated, &cells),
            original: region_notes(song, &cells),
            category,
        });
    }
    Ok(pairs)
}

/// Region pairs for every selected song and category, in song order.
pub fn collect_pairs(
    songs: &[QuantizedSong],
    generator: &dyn Generator,
    cfg: &EvalConfig,
) -> Result<Vec<RegionPair>, HarnessError> {
    let chosen = select_songs(songs.len(), cfg.n, cfg.seed);
    let per_song = chosen
        .par_iter()
        .map(|&i| song_pairs(&songs[i], generator, cfg.with_controls, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_song.into_iter().flatten().collect())
}

pub fn evaluate(songs: &[QuantizedSong], generator: &dyn Generator, cfg: &EvalConfig) -> Result<MetricReport, HarnessError> {
    Ok(evaluate_corpus(&collect_pairs(songs, generator, cfg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_song, reference_song, SynthOptions};

    #[test]
    fn original_generator_scores_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut songs: Vec<_> = (0..6).map(|_| random_song(&mut rng, &SynthOptions::default())).collect();
        songs.push(reference_song());
        for with_controls in [false, true] {
            let cfg = EvalConfig { n: 10, seed: 3, with_controls };
            let report = evaluate(&songs, &OriginalGenerator, &cfg).unwrap();
            assert!(report.is_all_zero());
            assert!(report.per_example.len() >= 3 * songs.len());
        }
    }

    #[test]
    fn selection_is_seeded_and_distinct() {
        let a = select_songs(100, 10, 4);
        assert_eq!(a, select_songs(100, 10, 4));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(select_songs(5, 10, 4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn accompaniment_skipped_for_two_tracks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(category_cells(Category::Accompaniment, 4, 2, &mut rng).is_none());
        assert_eq!(category_cells(Category::Bass, 2, 2, &mut rng), Some(vec![(0, 1), (1, 1)]));
    }
}
