//! Grammar-constrained infilling.
//!
//! Each `mask` in the encoder input stands for one track of one bar. The
//! decoder fills the masks in order; at every step only tokens allowed by
//! the track grammar `track_k (e_* p_*+ n_*)* eos` may be chosen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_layout, GrammarError, Token, TokenSequence, EOS_ID, MASK_ID, VOCAB_SIZE};
use crate::masking::{splice, MaskError, MaskedExample};
use crate::model::{IncrementalDecoder, ModelError, ModelParams, Real};
use crate::song::{MAX_DURATION, MAX_PITCH, MIN_PITCH};

/// Hard limit on tokens per generated segment (eos excluded).
pub const SEGMENT_CAP: usize = 256;
/// Offset added to excluded logits in compatibility mode.
pub const EXCLUDED_LOGIT_OFFSET: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Start,
    AfterTrack,
    AfterPosition,
    AfterPitch,
    AfterDuration,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarState {
    pub expected_track: u8,
    pub phase: Phase,
    pub current_position: Option<u8>,
    pub last_pitch: Option<u8>,
    pub steps_per_bar: u32,
    /// Absolute step of the bar's first position.
    pub bar_start: u32,
    /// Song length in steps; durations may not run past it.
    pub total_steps: u32,
}

impl GrammarState {
    pub fn new(track: u8, bar: u32, steps_per_bar: u32, bars: u32) -> Self {
        Self {
            expected_track: track,
            phase: Phase::Start,
            current_position: None,
            last_pitch: None,
            steps_per_bar,
            bar_start: bar * steps_per_bar,
            total_steps: bars * steps_per_bar,
        }
    }

    /// In the middle of a position/pitch group.
    pub fn in_group(&self) -> bool {
        matches!(self.phase, Phase::AfterPosition | Phase::AfterPitch)
    }

    pub fn segment_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn positions_from(&self, from: u8, out: &mut Vec<Token>) {
        out.extend((from as u32..self.steps_per_bar).map(|p| Token::Position(p as u8)));
    }

    fn max_duration(&self) -> u32 {
        let onset = self.bar_start + self.current_position.unwrap_or(0) as u32;
        MAX_DURATION.min(self.total_steps - onset)
    }

    pub fn advance(&mut self, token: Token) -> Result<(), Token> {
        if !allowed_next(self).contains(&token) {
            return Err(token);
        }
        match token {
            Token::Track(_) => self.phase = Phase::AfterTrack,
            Token::Position(p) => {
                self.current_position = Some(p);
                self.last_pitch = None;
                self.phase = Phase::AfterPosition;
            }
            Token::Pitch(p) => {
                self.last_pitch = Some(p);
                self.phase = Phase::AfterPitch;
            }
            Token::Duration(_) => {
                self.last_pitch = None;
                self.phase = Phase::AfterDuration;
            }
            Token::Eos => self.phase = Phase::Done,
            _ => unreachable!("allowed set holds no other tokens"),
        }
        Ok(())
    }
}

/// Tokens permitted after the state's history, in id order.
pub fn allowed_next(state: &GrammarState) -> Vec<Token> {
    let mut out = Vec::new();
    match state.phase {
        Phase::Start => out.push(Token::Track(state.expected_track)),
        Phase::AfterTrack => {
            state.positions_from(0, &mut out);
            out.push(Token::Eos);
        }
        Phase::AfterPosition => out.extend((MIN_PITCH..=MAX_PITCH).map(Token::Pitch)),
        Phase::AfterPitch => {
            let from = state.last_pitch.map_or(MIN_PITCH, |p| p + 1);
            out.extend((from..=MAX_PITCH).map(Token::Pitch));
            out.extend((1..=state.max_duration()).map(|d| Token::Duration(d as u8)));
        }
        Phase::AfterDuration => {
            state.positions_from(state.current_position.unwrap_or(0), &mut out);
            out.push(Token::Eos);
        }
        Phase::Done => {}
    }
    out
}

pub fn allowed_mask(state: &GrammarState) -> [bool; VOCAB_SIZE] {
    let mut m = [false; VOCAB_SIZE];
    for t in allowed_next(state) {
        m[t.id() as usize] = true;
    }
    m
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("encoder input is not a masked song: {0}")]
    Encoder(String),
    #[error("infilled sequence failed validation: {0}")]
    Grammar(#[from] GrammarError),
    #[error("temperature must be finite and nonnegative, got {0}")]
    Temperature(f64),
}

/// A source of next-token logits, fed one token at a time.
pub trait NextTokenModel {
    fn next_logits(&mut self, token: u32) -> Result<Vec<f64>, SampleError>;
    /// How many more tokens can be fed.
    fn remaining(&self) -> usize;
}

impl<R: Real> NextTokenModel for IncrementalDecoder<'_, R> {
    fn next_logits(&mut self, token: u32) -> Result<Vec<f64>, SampleError> {
        Ok(self.step(token)?.iter().map(|x| x.as_f64()).collect())
    }

    fn remaining(&self) -> usize {
        self.capacity() - self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// 0 selects the most likely allowed token.
    pub temperature: f64,
    pub seed: u64,
    /// Penalise excluded tokens by a fixed offset instead of removing them.
    pub compat_offset: bool,
    pub segment_cap: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            seed: 0,
            compat_offset: false,
            segment_cap: SEGMENT_CAP,
        }
    }
}

/// Sampling distribution over the vocabulary for one step.
pub fn step_distribution(logits: &[f64], allowed: &[bool; VOCAB_SIZE], temperature: f64, compat_offset: bool) -> Vec<f64> {
    let adjusted: Vec<Option<f64>> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| match (allowed[i], compat_offset) {
            (true, _) => Some(l),
            (false, true) => Some(l + EXCLUDED_LOGIT_OFFSET),
            (false, false) => None,
        })
        .collect();
    let mut probs = vec![0.0; logits.len()];
    if temperature == 0.0 {
        let best = argmax_allowed(logits, allowed);
        probs[best] = 1.0;
        return probs;
    }
    let max = adjusted.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for (p, a) in probs.iter_mut().zip(&adjusted) {
        if let Some(l) = a {
            *p = ((l - max) / temperature).exp();
            sum += *p;
        }
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

fn argmax_allowed(logits: &[f64], allowed: &[bool; VOCAB_SIZE]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &l) in logits.iter().enumerate() {
        if allowed[i] && best.is_none_or(|b| l > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("allowed set is never empty")
}

fn choose(logits: &[f64], state: &GrammarState, cfg: &SampleConfig, rng: &mut ChaCha8Rng) -> Token {
    let allowed = allowed_mask(state);
    let probs = step_distribution(logits, &allowed, cfg.temperature, cfg.compat_offset);
    let x: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = None;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if p > 0.0 && x < acc {
            pick = Some(i);
            break;
        }
    }
    // Rounding can leave `x` past the last bucket; an excluded pick under the
    // compatibility offset (probability below 1e-40) falls back likewise.
    let id = match pick {
        Some(i) if allowed[i] => i,
        _ => argmax_allowed(logits, &allowed),
    };
    Token::from_id(id as u32).expect("vocabulary id")
}

/// Where each mask sits: `(bar, track)`.
pub fn masked_cells(encoder_input: &[Token]) -> Result<(Vec<(u32, u8)>, u32, u32), SampleError> {
    let spb = match encoder_input.first() {
        Some(Token::TimeSig(ts)) => ts.steps_per_bar(),
        _ => return Err(SampleError::Encoder("missing time signature".into())),
    };
    let bars = encoder_input.iter().filter(|&&t| t == Token::Bar).count() as u32;
    let mut cells = vec![];
    let mut bar: Option<u32> = None;
    let mut cell = 0u8;
    for &t in encoder_input {
        match t {
            Token::Bar => {
                bar = Some(bar.map_or(0, |b| b + 1));
                cell = 0;
            }
            Token::Track(_) => cell += 1,
            Token::Mask => {
                let b = bar.ok_or_else(|| SampleError::Encoder("mask before the first bar".into()))?;
                cells.push((b, cell));
                cell += 1;
            }
            _ => {}
        }
    }
    Ok((cells, spb, bars))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillResult {
    pub tokens: TokenSequence,
    /// Generated segments without `eos`, one per mask.
    pub segments: Vec<Vec<Token>>,
    /// Some segment hit the length cap and was closed early.
    pub truncated: bool,
}

/// Drop a trailing incomplete position/pitch group.
fn close_group(segment: &mut Vec<Token>) {
    if let Some(i) = segment.iter().rposition(|t| matches!(t, Token::Position(_))) {
        if !segment[i..].iter().any(|t| matches!(t, Token::Duration(_))) {
            segment.truncate(i);
        }
    }
}

pub fn sample_with(
    model: &mut dyn NextTokenModel,
    encoder_input: &TokenSequence,
    cfg: &SampleConfig,
) -> Result<InfillResult, SampleError> {
    if !(cfg.temperature.is_finite() && cfg.temperature >= 0.0) {
        return Err(SampleError::Temperature(cfg.temperature));
    }
    let (cells, spb, bars) = masked_cells(&encoder_input.tokens)?;
    // Each mask must stand for a whole track cell: with empty cells in
    // place of the masks the sequence has to parse.
    let empty: Vec<Vec<Token>> = cells.iter().map(|&(_, t)| vec![Token::Track(t)]).collect();
    let probe = TokenSequence {
        tokens: splice(&encoder_input.tokens, &empty)?,
        with_controls: encoder_input.with_controls,
    };
    parse_layout(&probe).map_err(|e| SampleError::Encoder(format!("masks must replace whole track cells ({e})")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut segments = Vec::with_capacity(cells.len());
    let mut truncated = false;
    for &(bar, track) in &cells {
        let mut state = GrammarState::new(track, bar, spb, bars);
        let mut segment = Vec::new();
        let mut feed = MASK_ID;
        loop {
            if segment.len() >= cfg.segment_cap || model.remaining() == 0 {
                truncated = true;
                close_group(&mut segment);
                if segment.is_empty() {
                    segment.push(Token::Track(track));
                }
                break;
            }
            let logits = model.next_logits(feed)?;
            let token = choose(&logits, &state, cfg, &mut rng);
            state.advance(token).expect("chosen from the allowed set");
            if token == Token::Eos {
                break;
            }
            segment.push(token);
            feed = token.id();
        }
        debug_assert!(feed != EOS_ID);
        segments.push(segment);
    }
    let spliced = TokenSequence {
        tokens: splice(&encoder_input.tokens, &segments)?,
        with_controls: encoder_input.with_controls,
    };
    parse_layout(&spliced)?;
    Ok(InfillResult {
        tokens: spliced,
        segments,
        truncated,
    })
}

pub fn sample_infill<R: Real>(
    params: &ModelParams<R>,
    masked: &MaskedExample,
    cfg: &SampleConfig,
) -> Result<InfillResult, SampleError> {
    let mut decoder = IncrementalDecoder::new(params, &masked.encoder_input.ids())?;
    sample_with(&mut decoder, &masked.encoder_input, cfg)
}
