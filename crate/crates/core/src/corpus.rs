//! Training corpus construction: filter MIDI files, cut 8-bar windows,
//! transpose under-represented material, tokenize with and without controls
//! and split by source song.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_song, TokenSequence};
use crate::controls::{compute_control_set_with, Calibration};
use crate::masking::{finetune_mask, pretrain_mask, FinetuneMode, MaskedExample};
use crate::midi::read_song;
use crate::song::QuantizedSong;
use crate::spiral::detect_key;

pub const WINDOW_BARS: u32 = 8;
/// Train, validation and test shares of the source songs.
pub const SPLIT_RATIO: [f64; 3] = [0.8, 0.1, 0.1];
pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];
pub const VARIANTS: [&str; 2] = ["with_controls", "without_controls"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct MidiFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// `.mid`/`.midi` files directly inside `dir`, sorted by name.
pub fn read_midi_dir(dir: &Path) -> Result<Vec<MidiFile>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(MidiFile { name, bytes })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSong {
    pub name: String,
    pub song: QuantizedSong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub name: String,
    pub reason: String,
}

/// Keep files that parse and have both a melody and a bass track.
pub fn filter_songs(files: &[MidiFile]) -> (Vec<SourceSong>, Vec<Rejection>) {
    let results: Vec<_> = files
        .par_iter()
        .map(|f| match read_song(&f.bytes) {
            Ok((song, _)) => Ok(SourceSong {
                name: f.name.clone(),
                song,
            }),
            Err(e) => Err(Rejection {
                name: f.name.clone(),
                reason: e.to_string(),
            }),
        })
        .collect();
    let mut accepted = vec![];
    let mut rejected = vec![];
    for r in results {
        match r {
            Ok(s) => accepted.push(s),
            Err(r) => rejected.push(r),
        }
    }
    info!("accepted {} of {} files", accepted.len(), files.len());
    (accepted, rejected)
}

/// One training window and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub source: usize,
    pub start_bar: u32,
    /// Transposition in semitones applied to the source material.
    pub shift: i32,
    pub song: QuantizedSong,
}

/// Every 8-bar stretch of the song, starting at each bar.
pub fn window_slices(song: &QuantizedSong) -> Vec<QuantizedSong> {
    if song.bars < WINDOW_BARS {
        return vec![];
    }
    (0..=song.bars - WINDOW_BARS)
        .map(|start| song.slice_bars(start, WINDOW_BARS))
        .collect()
}

/// Windows in a minority metre or a minor key come back with their 11
/// transpositions; others come back alone. A shift of `+s` that would leave
/// the piano range is replaced by `s - 12`; if both fail the shift is skipped.
pub fn augment(window: &Window) -> Vec<Window> {
    let minor = detect_key(&window.song).is_ok_and(|k| k.is_minor());
    let mut out = vec![window.clone()];
    if !(window.song.time_signature.is_minority() || minor) {
        return out;
    }
    for s in 1..=11 {
        let shifted = window
            .song
            .transpose(s)
            .map(|song| (s, song))
            .or_else(|| window.song.transpose(s - 12).map(|song| (s - 12, song)));
        if let Some((shift, song)) = shifted {
            out.push(Window {
                shift: window.shift + shift,
                song,
                ..window.clone()
            });
        }
    }
    out
}

/// Seeded song-level partition into train, validation and test indices.
pub fn split_songs(count: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (count as f64 * SPLIT_RATIO[0]).round() as usize;
    let n_valid = ((count as f64 * SPLIT_RATIO[1]).round() as usize).min(count - n_train);
    let mut parts = [
        idx[..n_train].to_vec(),
        idx[n_train..n_train + n_valid].to_vec(),
        idx[n_train + n_valid..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    fn from_array(a: [usize; 3]) -> Self {
        Self {
            train: a[0],
            valid: a[1],
            test: a[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub files: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub songs: SplitCounts,
    pub windows: SplitCounts,
    /// Windows dropped because controls could not be computed (no notes).
    pub skipped_windows: usize,
    /// Masked examples per variant.
    pub examples: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitNames {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub window_bars: u32,
    pub calibration_hash: String,
    pub counts: Counts,
    pub split: SplitNames,
    pub rejected: Vec<Rejection>,
}

/// Deterministic per-item seed.
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A window tokenized both ways.
struct Encoded {
    with: TokenSequence,
    without: TokenSequence,
}

fn encode_window(w: &Window, cal: &Calibration) -> Option<Encoded> {
    let controls = compute_control_set_with(&w.song, cal).ok()?;
    Some(Encoded {
        with: encode_song(&w.song, Some(&controls)).ok()?,
        without: encode_song(&w.song, None).ok()?,
    })
}

/// One pretraining example and one finetuning example per window, the
/// finetuning mode cycling through all three.
fn examples_for(seq: &TokenSequence, seed: u64, index: usize) -> Vec<MaskedExample> {
    let mut out = vec![pretrain_mask(seq, seed)];
    let mode = FinetuneMode::ALL[index % FinetuneMode::ALL.len()];
    if let Ok(ex) = finetune_mask(seq, mode, seed.rotate_left(17)) {
        out.push(ex);
    }
    out
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for line in lines {
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Window, augment, tokenize and split `songs`, writing
/// `out/manifest.json` and `out/{with_controls,without_controls}/{split}.{tokens,jsonl}`.
pub fn build_dataset(
    songs: &[SourceSong],
    rejected: &[Rejection],
    seed: u64,
    cal: &Calibration,
    out: &Path,
) -> Result<Manifest, CorpusError> {
    let parts = split_songs(songs.len(), seed);
    let mut windows_per_split = [0usize; 3];
    let mut examples_per_split = [0usize; 3];
    let mut skipped = 0;
    for v in VARIANTS {
        let dir = out.join(v);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for (split, members) in parts.iter().enumerate() {
        let windows: Vec<Window> = members
            .par_iter()
            .flat_map_iter(|&source| {
                window_slices(&songs[source].song)
                    .into_iter()
                    .enumerate()
                    .flat_map(move |(start, song)| {
                        augment(&Window {
                            source,
                            start_bar: start as u32,
                            shift: 0,
                            song,
                        })
                    })
            })
            .collect();
        let encoded: Vec<Option<Encoded>> = windows.par_iter().map(|w| encode_window(w, cal)).collect();
        skipped += encoded.iter().filter(|e| e.is_none()).count();
        let encoded: Vec<Encoded> = encoded.into_iter().flatten().collect();
        windows_per_split[split] = encoded.len();

        for (variant, pick) in VARIANTS.iter().zip([
            (|e: &Encoded| &e.with) as fn(&Encoded) -> &TokenSequence,
            |e: &Encoded| &e.without,
        ]) {
            let dir = out.join(variant);
            let name = SPLIT_NAMES[split];
            write_lines(&dir.join(format!("{name}.tokens")), encoded.iter().map(|e| pick(e).to_text()))?;
            let examples: Vec<MaskedExample> = encoded
                .par_iter()
                .enumerate()
                .flat_map_iter(|(i, e)| examples_for(pick(e), derive_seed(seed, split as u64, i as u64), i))
                .collect();
            examples_per_split[split] = examples.len();
            write_lines(
                &dir.join(format!("{name}.jsonl")),
                examples.iter().map(|ex| serde_json::to_string(ex).expect("example serializes")),
            )?;
        }
    }
    let names = |i: usize| parts[i].iter().map(|&s| songs[s].name.clone()).collect();
    let manifest = Manifest {
        seed,
        window_bars: WINDOW_BARS,
        calibration_hash: cal.hash(),
        counts: Counts {
            files: songs.len() + rejected.len(),
            accepted: songs.len(),
            rejected: rejected.len(),
            songs: SplitCounts::from_array(parts.each_ref().map(Vec::len)),
            windows: SplitCounts::from_array(windows_per_split),
            skipped_windows: skipped,
            examples: SplitCounts::from_array(examples_per_split),
        },
        split: SplitNames {
            train: names(0),
            valid: names(1),
            test: names(2),
        },
        rejected: rejected.to_vec(),
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Read masked examples from a JSON-lines shard.
pub fn read_examples(path: &Path) -> Result<Vec<MaskedExample>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = vec![];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
