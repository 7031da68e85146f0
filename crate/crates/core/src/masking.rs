//! Span masking for pretraining and cell masking for finetuning.
//!
//! Every masked span is replaced by a single `mask` token in the encoder
//! input. The decoder reconstructs the spans in order: for each span the
//! decoder input is `mask` followed by the span tokens, and the target is the
//! span tokens followed by `eos`, so position `t` of the input predicts
//! position `t` of the target.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_layout, GrammarError, Token, TokenSequence};

/// Largest share of tokens a pretraining example may mask.
pub const PRETRAIN_MASK_FRACTION: f64 = 0.15;
/// Span lengths and their sampling weights (3:1:2 = 2:1:1).
pub const SPAN_LENGTHS: [(usize, f64); 3] = [(3, 0.5), (1, 0.25), (2, 0.25)];
pub const MAX_SPAN: usize = 3;
pub const MIN_PRETRAIN_LEN: usize = 8;
pub const RANDOM_CELL_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    PretrainSpan,
    BarTrack,
}

/// Tokens `u..=v` of the original sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub u: usize,
    pub v: usize,
    pub kind: SpanKind,
}

impl MaskSpan {
    pub fn len(&self) -> usize {
        self.v - self.u + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    BarAllTracks,
    TrackAllBars,
    RandomCells,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 3] = [
        FinetuneMode::BarAllTracks,
        FinetuneMode::TrackAllBars,
        FinetuneMode::RandomCells,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::BarAllTracks => "bar_all_tracks",
            FinetuneMode::TrackAllBars => "track_all_bars",
            FinetuneMode::RandomCells => "random_cells",
        }
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FinetuneMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MaskError::UnknownMode(s.to_string()))
    }
}

/// How an example was produced; stored with each shard line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Pretrain,
    BarAllTracks,
    TrackAllBars,
    RandomCells,
    Cells,
}

impl From<FinetuneMode> for MaskMode {
    fn from(m: FinetuneMode) -> Self {
        match m {
            FinetuneMode::BarAllTracks => MaskMode::BarAllTracks,
            FinetuneMode::TrackAllBars => MaskMode::TrackAllBars,
            FinetuneMode::RandomCells => MaskMode::RandomCells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("spans overlap or are out of order at span {0}")]
    Overlap(usize),
    #[error("span {0} lies outside the sequence")]
    OutOfRange(usize),
    #[error("no cell at bar {bar}, track {track}")]
    NoSuchCell { bar: u32, track: usize },
    #[error("unknown masking mode {0:?}")]
    UnknownMode(String),
    #[error("{masks} mask tokens but {segments} segments")]
    SegmentCount { masks: usize, segments: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub encoder_input: TokenSequence,
    pub decoder_input: TokenSequence,
    pub decoder_target: TokenSequence,
    pub spans: Vec<MaskSpan>,
    pub mode: MaskMode,
}

fn check_spans(len: usize, spans: &[MaskSpan]) -> Result<(), MaskError> {
    for (i, s) in spans.iter().enumerate() {
        if s.u > s.v || s.v >= len {
            return Err(MaskError::OutOfRange(i));
        }
        if i > 0 && s.u <= spans[i - 1].v {
            return Err(MaskError::Overlap(i));
        }
    }
    Ok(())
}

/// The original with each span collapsed into one `mask` token.
pub fn apply_spans(original: &[Token], spans: &[MaskSpan]) -> Result<Vec<Token>, MaskError> {
    check_spans(original.len(), spans)?;
    let mut out = Vec::with_capacity(original.len());
    let mut next = 0;
    for s in spans {
        out.extend_from_slice(&original[next..s.u]);
        out.push(Token::Mask);
        next = s.v + 1;
    }
    out.extend_from_slice(&original[next..]);
    Ok(out)
}

pub fn build_decoder_pair(original: &[Token], spans: &[MaskSpan]) -> Result<(Vec<Token>, Vec<Token>), MaskError> {
    check_spans(original.len(), spans)?;
    let mut input = Vec::new();
    let mut target = Vec::new();
    for s in spans {
        let body = &original[s.u..=s.v];
        input.push(Token::Mask);
        input.extend_from_slice(body);
        target.extend_from_slice(body);
        target.push(Token::Eos);
    }
    Ok((input, target))
}

/// Split a decoder target into its segments, dropping the `eos` markers. A
/// trailing segment without `eos` is kept.
pub fn target_segments(target: &[Token]) -> Vec<Vec<Token>> {
    let mut out = vec![];
    let mut cur = vec![];
    for &t in target {
        if t == Token::Eos {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(t);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Replace the i-th `mask` of the encoder input by the i-th segment.
pub fn splice(encoder_input: &[Token], segments: &[Vec<Token>]) -> Result<Vec<Token>, MaskError> {
    let masks = encoder_input.iter().filter(|&&t| t == Token::Mask).count();
    if masks != segments.len() {
        return Err(MaskError::SegmentCount {
            masks,
            segments: segments.len(),
        });
    }
    let mut out = Vec::with_capacity(encoder_input.len() + segments.iter().map(Vec::len).sum::<usize>());
    let mut seg = segments.iter();
    for &t in encoder_input {
        if t == Token::Mask {
            out.extend_from_slice(seg.next().expect("counted"));
        } else {
            out.push(t);
        }
    }
    Ok(out)
}

fn example(seq: &TokenSequence, spans: Vec<MaskSpan>, mode: MaskMode) -> Result<MaskedExample, MaskError> {
    let encoder = apply_spans(&seq.tokens, &spans)?;
    let (input, target) = build_decoder_pair(&seq.tokens, &spans)?;
    let wrap = |tokens| TokenSequence {
        tokens,
        with_controls: seq.with_controls,
    };
    Ok(MaskedExample {
        encoder_input: wrap(encoder),
        decoder_input: wrap(input),
        decoder_target: wrap(target),
        spans,
        mode,
    })
}

fn draw_span_length(rng: &mut impl Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (len, p) in SPAN_LENGTHS {
        acc += p;
        if x < acc {
            return len;
        }
    }
    SPAN_LENGTHS[SPAN_LENGTHS.len() - 1].0
}

/// Pretraining spans: lengths drawn from {3, 1, 2} at 2:1:1, placed uniformly
/// among free, non-adjacent positions after the header, while at least a
/// full-length span of the 15% budget remains.
pub fn pretrain_spans(seq: &TokenSequence, seed: u64) -> Vec<MaskSpan> {
    let n = seq.tokens.len();
    let Some(first_bar) = seq.tokens.iter().position(|&t| t == Token::Bar) else {
        return vec![];
    };
    if n < MIN_PRETRAIN_LEN {
        return vec![];
    }
    let budget = (PRETRAIN_MASK_FRACTION * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Free means neither masked nor touching a masked token.
    let mut blocked = vec![false; n];
    let mut spans = vec![];
    let mut masked = 0;
    while budget - masked >= MAX_SPAN {
        let len = draw_span_length(&mut rng);
        if n < first_bar + len {
            break;
        }
        let starts: Vec<usize> = (first_bar..=n - len)
            .filter(|&s| !blocked[s..s + len].iter().any(|&b| b))
            .collect();
        let Some(&u) = starts.choose(&mut rng) else {
            break;
        };
        let v = u + len - 1;
        for b in &mut blocked[u.saturating_sub(1)..(v + 2).min(n)] {
            *b = true;
        }
        spans.push(MaskSpan {
            u,
            v,
            kind: SpanKind::PretrainSpan,
        });
        masked += len;
    }
    spans.sort_by_key(|s| s.u);
    spans
}

pub fn pretrain_mask(seq: &TokenSequence, seed: u64) -> MaskedExample {
    let spans = pretrain_spans(seq, seed);
    example(seq, spans, MaskMode::Pretrain).expect("generated spans are ordered and disjoint")
}

/// Chosen `(bar, track)` cells for a finetuning mode.
pub fn finetune_cells(bars: u32, tracks: usize, mode: FinetuneMode, seed: u64) -> Vec<(u32, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<(u32, usize)> = (0..bars).flat_map(|b| (0..tracks).map(move |t| (b, t))).collect();
    match mode {
        FinetuneMode::BarAllTracks => {
            let bar = rng.random_range(0..bars);
            (0..tracks).map(|t| (bar, t)).collect()
        }
        FinetuneMode::TrackAllBars => {
            let track = rng.random_range(0..tracks);
            (0..bars).map(|b| (b, track)).collect()
        }
        FinetuneMode::RandomCells => loop {
            let pick: Vec<(u32, usize)> = all
                .iter()
                .copied()
                .filter(|_| rng.random_bool(RANDOM_CELL_PROBABILITY))
                .collect();
            if !pick.is_empty() && pick.len() < all.len() {
                break pick;
            }
        },
    }
}

pub fn finetune_mask(seq: &TokenSequence, mode: FinetuneMode, seed: u64) -> Result<MaskedExample, MaskError> {
    let layout = parse_layout(seq)?;
    let cells = finetune_cells(layout.bars(), layout.n_tracks, mode, seed);
    mask_cells_with_mode(seq, &cells, mode.into())
}

/// Mask an explicit set of `(bar, track)` cells; an empty set gives an
/// example with no masks.
pub fn mask_cells(seq: &TokenSequence, cells: &[(u32, usize)]) -> Result<MaskedExample, MaskError> {
    mask_cells_with_mode(seq, cells, MaskMode::Cells)
}

fn mask_cells_with_mode(seq: &TokenSequence, cells: &[(u32, usize)], mode: MaskMode) -> Result<MaskedExample, MaskError> {
    let layout = parse_layout(seq)?;
    let mut spans = cells
        .iter()
        .map(|&(bar, track)| {
            let cell = (track < layout.n_tracks)
                .then(|| layout.cell(bar, track))
                .flatten()
                .ok_or(MaskError::NoSuchCell { bar, track })?;
            Ok(MaskSpan {
                u: cell.start,
                v: cell.end - 1,
                kind: SpanKind::BarTrack,
            })
        })
        .collect::<Result<Vec<_>, MaskError>>()?;
    spans.sort_by_key(|s| s.u);
    spans.dedup();
    example(seq, spans, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> Vec<Token> {
        TokenSequence::parse(text).unwrap().tokens
    }

    #[test]
    fn single_token_span_layout() {
        let original = toks("bar track_0 e_0 p_60 n_4");
        let spans = [MaskSpan {
            u: 3,
            v: 3,
            kind: SpanKind::PretrainSpan,
        }];
        let (input, target) = build_decoder_pair(&original, &spans).unwrap();
        assert_eq!(input, toks("mask p_60"));
        assert_eq!(target, toks("p_60 eos"));
        assert_eq!(build_decoder_pair(&original, &[]).unwrap(), (vec![], vec![]));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let original = toks("bar track_0 e_0 p_60 n_4");
        let a = MaskSpan {
            u: 1,
            v: 2,
            kind: SpanKind::PretrainSpan,
        };
        let b = MaskSpan { u: 2, v: 3, ..a };
        assert_eq!(build_decoder_pair(&original, &[a, b]), Err(MaskError::Overlap(1)));
        assert_eq!(build_decoder_pair(&original, &[b, a]), Err(MaskError::Overlap(1)));
    }

    #[test]
    fn track_all_bars_masks_one_track() {
        let seq = TokenSequence::parse(
            "4/4 t_3 i_0 i_1 i_2 bar track_0 e_0 p_60 n_4 track_1 track_2 bar track_0 track_1 e_0 p_40 n_16 track_2",
        )
        .unwrap();
        for seed in 0..20 {
            let ex = finetune_mask(&seq, FinetuneMode::TrackAllBars, seed).unwrap();
            assert_eq!(ex.spans.len(), 2);
            let tracks: Vec<Token> = ex.spans.iter().map(|s| seq.tokens[s.u]).collect();
            assert_eq!(tracks[0], tracks[1]);
            assert_eq!(ex.encoder_input.tokens.iter().filter(|&&t| t == Token::Mask).count(), 2);
        }
    }

    #[test]
    fn random_cells_never_all_or_none() {
        for seed in 0..200 {
            let cells = finetune_cells(2, 2, FinetuneMode::RandomCells, seed);
            assert!(!cells.is_empty() && cells.len() < 4);
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in FinetuneMode::ALL {
            assert_eq!(m.name().parse::<FinetuneMode>().unwrap(), m);
        }
        assert!("sideways".parse::<FinetuneMode>().is_err());
    }
}
