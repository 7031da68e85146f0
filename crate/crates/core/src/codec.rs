//! The 360-token vocabulary, song <-> token conversion and grammar checking.
//!
//! A sequence is a header followed by bars:
//!
//! ```text
//! <metre> t_* [k_* d_*xT o_*xT y_*xT] i_*xT
//! ( bar [s_* a_*] ( track_k ( e_* p_*+ n_* )* ){T} )+
//! ```
//!
//! where `T` is the number of tracks and the bracketed parts are present only
//! in sequences with controls.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::controls::{BarControls, ControlSet, TrackControls, TEMPO_REPRESENTATIVE_BPM};
use crate::song::{
    normalize_notes, QuantizedNote, QuantizedSong, QuantizedTrack, Role, SongError, TimeSignature, MAX_BARS,
    MAX_DURATION, MAX_PITCH, MAX_TRACKS, MIN_PITCH,
};

pub const POSITION_COUNT: usize = 16;
pub const PITCH_COUNT: usize = 88;
pub const DURATION_COUNT: usize = 32;
pub const INSTRUMENT_COUNT: usize = 128;
pub const VOCAB_SIZE: usize = 360;

const POSITION_BASE: u32 = 0;
const PITCH_BASE: u32 = POSITION_BASE + POSITION_COUNT as u32;
const DURATION_BASE: u32 = PITCH_BASE + PITCH_COUNT as u32;
const BAR_ID: u32 = DURATION_BASE + DURATION_COUNT as u32;
const TRACK_BASE: u32 = BAR_ID + 1;
const METRE_BASE: u32 = TRACK_BASE + MAX_TRACKS as u32;
const TEMPO_BASE: u32 = METRE_BASE + 4;
const INSTRUMENT_BASE: u32 = TEMPO_BASE + 7;
const KEY_BASE: u32 = INSTRUMENT_BASE + INSTRUMENT_COUNT as u32;
const STRAIN_BASE: u32 = KEY_BASE + 24;
const DIAMETER_BASE: u32 = STRAIN_BASE + 12;
const DENSITY_BASE: u32 = DIAMETER_BASE + 12;
const POLYPHONY_BASE: u32 = DENSITY_BASE + 10;
const OCCUPATION_BASE: u32 = POLYPHONY_BASE + 10;
pub const MASK_ID: u32 = OCCUPATION_BASE + 10;
pub const PAD_ID: u32 = MASK_ID + 1;
pub const EOS_ID: u32 = PAD_ID + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    /// Onset within the bar, `e_0..e_15`.
    Position(u8),
    /// MIDI pitch, `p_21..p_108`.
    Pitch(u8),
    /// Length in steps, `n_1..n_32`.
    Duration(u8),
    Bar,
    Track(u8),
    TimeSig(TimeSignature),
    Tempo(u8),
    Instrument(u8),
    Key(u8),
    Strain(u8),
    Diameter(u8),
    Density(u8),
    Polyphony(u8),
    Occupation(u8),
    Mask,
    Pad,
    Eos,
}

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Position(p) => POSITION_BASE + p as u32,
            Token::Pitch(p) => PITCH_BASE + (p - MIN_PITCH) as u32,
            Token::Duration(d) => DURATION_BASE + d as u32 - 1,
            Token::Bar => BAR_ID,
            Token::Track(k) => TRACK_BASE + k as u32,
            Token::TimeSig(ts) => METRE_BASE + ts.index() as u32,
            Token::Tempo(b) => TEMPO_BASE + b as u32,
            Token::Instrument(i) => INSTRUMENT_BASE + i as u32,
            Token::Key(k) => KEY_BASE + k as u32,
            Token::Strain(b) => STRAIN_BASE + b as u32,
            Token::Diameter(b) => DIAMETER_BASE + b as u32,
            Token::Density(b) => DENSITY_BASE + b as u32,
            Token::Polyphony(b) => POLYPHONY_BASE + b as u32,
            Token::Occupation(b) => OCCUPATION_BASE + b as u32,
            Token::Mask => MASK_ID,
            Token::Pad => PAD_ID,
            Token::Eos => EOS_ID,
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        let t = match id {
            _ if id < PITCH_BASE => Token::Position((id - POSITION_BASE) as u8),
            _ if id < DURATION_BASE => Token::Pitch((id - PITCH_BASE) as u8 + MIN_PITCH),
            _ if id < BAR_ID => Token::Duration((id - DURATION_BASE + 1) as u8),
            BAR_ID => Token::Bar,
            _ if id < METRE_BASE => Token::Track((id - TRACK_BASE) as u8),
            _ if id < TEMPO_BASE => Token::TimeSig(TimeSignature::ALL[(id - METRE_BASE) as usize]),
            _ if id < INSTRUMENT_BASE => Token::Tempo((id - TEMPO_BASE) as u8),
            _ if id < KEY_BASE => Token::Instrument((id - INSTRUMENT_BASE) as u8),
            _ if id < STRAIN_BASE => Token::Key((id - KEY_BASE) as u8),
            _ if id < DIAMETER_BASE => Token::Strain((id - STRAIN_BASE) as u8),
            _ if id < DENSITY_BASE => Token::Diameter((id - DIAMETER_BASE) as u8),
            _ if id < POLYPHONY_BASE => Token::Density((id - DENSITY_BASE) as u8),
            _ if id < OCCUPATION_BASE => Token::Polyphony((id - POLYPHONY_BASE) as u8),
            _ if id < MASK_ID => Token::Occupation((id - OCCUPATION_BASE) as u8),
            MASK_ID => Token::Mask,
            PAD_ID => Token::Pad,
            EOS_ID => Token::Eos,
            _ => return None,
        };
        Some(t)
    }

    pub fn category(self) -> &'static str {
        match self {
            Token::Position(_) => "position",
            Token::Pitch(_) => "pitch",
            Token::Duration(_) => "duration",
            Token::Bar | Token::Track(_) => "structure",
            Token::TimeSig(_) => "time_signature",
            Token::Tempo(_) => "tempo",
            Token::Instrument(_) => "instrument",
            Token::Key(_) => "key",
            Token::Strain(_) => "tensile_strain",
            Token::Diameter(_) => "cloud_diameter",
            Token::Density(_) => "density",
            Token::Polyphony(_) => "polyphony",
            Token::Occupation(_) => "occupation",
            Token::Mask | Token::Pad | Token::Eos => "model",
        }
    }

    pub fn is_control(self) -> bool {
        matches!(
            self,
            Token::Key(_)
                | Token::Strain(_)
                | Token::Diameter(_)
                | Token::Density(_)
                | Token::Polyphony(_)
                | Token::Occupation(_)
        )
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Position(p) => write!(f, "e_{p}"),
            Token::Pitch(p) => write!(f, "p_{p}"),
            Token::Duration(d) => write!(f, "n_{d}"),
            Token::Bar => f.write_str("bar"),
            Token::Track(k) => write!(f, "track_{k}"),
            Token::TimeSig(ts) => write!(f, "{ts}"),
            Token::Tempo(b) => write!(f, "t_{b}"),
            Token::Instrument(i) => write!(f, "i_{i}"),
            Token::Key(k) => write!(f, "k_{k}"),
            Token::Strain(b) => write!(f, "s_{b}"),
            Token::Diameter(b) => write!(f, "a_{b}"),
            Token::Density(b) => write!(f, "d_{b}"),
            Token::Polyphony(b) => write!(f, "y_{b}"),
            Token::Occupation(b) => write!(f, "o_{b}"),
            Token::Mask => f.write_str("mask"),
            Token::Pad => f.write_str("pad"),
            Token::Eos => f.write_str("eos"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown token {text:?}")]
pub struct UnknownToken {
    pub text: String,
}

impl FromStr for Token {
    type Err = UnknownToken;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || UnknownToken { text: s.to_string() };
        match s {
            "bar" => return Ok(Token::Bar),
            "mask" => return Ok(Token::Mask),
            "pad" => return Ok(Token::Pad),
            "eos" => return Ok(Token::Eos),
            _ => {}
        }
        if let Ok(ts) = s.parse::<TimeSignature>() {
            return Ok(ts_token(ts));
        }
        let (prefix, value) = s.rsplit_once('_').ok_or_else(unknown)?;
        let v: u8 = value.parse().map_err(|_| unknown())?;
        if value != v.to_string() {
            return Err(unknown());
        }
        let (token, ok) = match prefix {
            "e" => (Token::Position(v), (v as usize) < POSITION_COUNT),
            "p" => (Token::Pitch(v), (MIN_PITCH..=MAX_PITCH).contains(&v)),
            "n" => (Token::Duration(v), (1..=MAX_DURATION as u8).contains(&v)),
            "track" => (Token::Track(v), (v as usize) < MAX_TRACKS),
            "t" => (Token::Tempo(v), v < 7),
            "i" => (Token::Instrument(v), (v as usize) < INSTRUMENT_COUNT),
            "k" => (Token::Key(v), v < 24),
            "s" => (Token::Strain(v), v < 12),
            "a" => (Token::Diameter(v), v < 12),
            "d" => (Token::Density(v), v < 10),
            "y" => (Token::Polyphony(v), v < 10),
            "o" => (Token::Occupation(v), v < 10),
            _ => return Err(unknown()),
        };
        if ok {
            Ok(token)
        } else {
            Err(unknown())
        }
    }
}

fn ts_token(ts: TimeSignature) -> Token {
    Token::TimeSig(ts)
}

/// Immutable token <-> id table.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    ids: HashMap<Token, u32>,
}

pub fn build_vocab() -> Vocabulary {
    let tokens: Vec<Token> = (0..VOCAB_SIZE as u32)
        .map(|id| Token::from_id(id).expect("id in range"))
        .collect();
    let ids = tokens.iter().enumerate().map(|(i, &t)| (t, i as u32)).collect();
    Vocabulary { tokens, ids }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: Token) -> u32 {
        self.ids[&token]
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Token count per category, in table order.
    pub fn category_counts(&self) -> Vec<(&'static str, usize)> {
        let mut out: Vec<(&'static str, usize)> = Vec::new();
        for t in &self.tokens {
            match out.last_mut() {
                Some((cat, n)) if *cat == t.category() => *n += 1,
                _ => out.push((t.category(), 1)),
            }
        }
        out
    }

    /// `{token text: id}` as JSON.
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), serde_json::Value::from(i)))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocabulary serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub with_controls: bool,
}

impl TokenSequence {
    /// Wraps tokens, inferring the controls flag from the header (a key token
    /// right after tempo).
    pub fn new(tokens: Vec<Token>) -> Self {
        let with_controls = matches!(tokens.get(2), Some(Token::Key(_)));
        Self { tokens, with_controls }
    }

    /// Tokens separated by whitespace and/or commas.
    pub fn parse(text: &str) -> Result<Self, UnknownToken> {
        let tokens = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Token>, _>>()?;
        Ok(Self::new(tokens))
    }

    pub fn from_ids(ids: &[u32]) -> Option<Self> {
        ids.iter()
            .map(|&i| Token::from_id(i))
            .collect::<Option<Vec<_>>>()
            .map(Self::new)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&t.to_string());
        }
        s
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Serialize for TokenSequence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for TokenSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        TokenSequence::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Song(#[from] SongError),
    #[error("control set has {got} {what}, song has {expected}")]
    ControlShape {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

pub fn encode_song(song: &QuantizedSong, controls: Option<&ControlSet>) -> Result<TokenSequence, EncodeError> {
    song.validate()?;
    let n_tracks = song.tracks.len();
    if let Some(c) = controls {
        if c.tracks.len() != n_tracks {
            return Err(EncodeError::ControlShape {
                what: "tracks",
                got: c.tracks.len(),
                expected: n_tracks,
            });
        }
        if c.bars.len() != song.bars as usize {
            return Err(EncodeError::ControlShape {
                what: "bars",
                got: c.bars.len(),
                expected: song.bars as usize,
            });
        }
    }
    let tempo_bin = match controls {
        Some(c) => c.tempo_bin,
        None => crate::controls::bin_tempo(song.tempo_bpm),
    };
    let mut out = vec![Token::TimeSig(song.time_signature), Token::Tempo(tempo_bin)];
    if let Some(c) = controls {
        out.push(Token::Key(c.key_bin));
        out.extend(c.tracks.iter().map(|t| Token::Density(t.density)));
        out.extend(c.tracks.iter().map(|t| Token::Occupation(t.occupation)));
        out.extend(c.tracks.iter().map(|t| Token::Polyphony(t.polyphony)));
    }
    out.extend(song.tracks.iter().map(|t| Token::Instrument(t.instrument)));

    let spb = song.steps_per_bar();
    for bar in 0..song.bars {
        out.push(Token::Bar);
        if let Some(c) = controls {
            let b = c.bars[bar as usize];
            out.push(Token::Strain(b.strain));
            out.push(Token::Diameter(b.diameter));
        }
        for (k, _) in song.tracks.iter().enumerate() {
            out.push(Token::Track(k as u8));
            encode_cell(&song.track_bar_notes(k, bar), bar * spb, &mut out);
        }
    }
    Ok(TokenSequence {
        tokens: out,
        with_controls: controls.is_some(),
    })
}

/// The control bins carried by a grammar-valid sequence, or `None` for a
/// sequence without controls.
pub fn read_controls(seq: &TokenSequence) -> Option<ControlSet> {
    let key_bin = match seq.tokens.get(2) {
        Some(Token::Key(k)) => *k,
        _ => return None,
    };
    let tempo_bin = match seq.tokens.get(1) {
        Some(Token::Tempo(t)) => *t,
        _ => return None,
    };
    let (mut d, mut o, mut y, mut s, mut a) = (vec![], vec![], vec![], vec![], vec![]);
    for t in &seq.tokens {
        match *t {
            Token::Density(v) => d.push(v),
            Token::Occupation(v) => o.push(v),
            Token::Polyphony(v) => y.push(v),
            Token::Strain(v) => s.push(v),
            Token::Diameter(v) => a.push(v),
            _ => {}
        }
    }
    if d.len() != o.len() || d.len() != y.len() || s.len() != a.len() {
        return None;
    }
    Some(ControlSet {
        key_bin,
        tempo_bin,
        tracks: (0..d.len())
            .map(|i| TrackControls {
                density: d[i],
                occupation: o[i],
                polyphony: y[i],
            })
            .collect(),
        bars: s
            .iter()
            .zip(&a)
            .map(|(&strain, &diameter)| BarControls { strain, diameter })
            .collect(),
    })
}

/// Rewrite the control tokens of a sequence in place, leaving every other
/// token untouched. The sequence must already carry controls of the same
/// shape.
pub fn replace_controls(seq: &TokenSequence, controls: &ControlSet) -> Result<TokenSequence, EncodeError> {
    let current = read_controls(seq).ok_or(EncodeError::ControlShape {
        what: "control headers",
        got: 0,
        expected: 1,
    })?;
    for (what, got, expected) in [
        ("tracks", controls.tracks.len(), current.tracks.len()),
        ("bars", controls.bars.len(), current.bars.len()),
    ] {
        if got != expected {
            return Err(EncodeError::ControlShape { what, got, expected });
        }
    }
    let (mut d, mut o, mut y, mut s, mut a) = (0, 0, 0, 0, 0);
    let tokens = seq
        .tokens
        .iter()
        .map(|&t| match t {
            Token::Tempo(_) => Token::Tempo(controls.tempo_bin),
            Token::Key(_) => Token::Key(controls.key_bin),
            Token::Density(_) => {
                d += 1;
                Token::Density(controls.tracks[d - 1].density)
            }
            Token::Occupation(_) => {
                o += 1;
                Token::Occupation(controls.tracks[o - 1].occupation)
            }
            Token::Polyphony(_) => {
                y += 1;
                Token::Polyphony(controls.tracks[y - 1].polyphony)
            }
            Token::Strain(_) => {
                s += 1;
                Token::Strain(controls.bars[s - 1].strain)
            }
            Token::Diameter(_) => {
                a += 1;
                Token::Diameter(controls.bars[a - 1].diameter)
            }
            other => other,
        })
        .collect();
    Ok(TokenSequence {
        tokens,
        with_controls: true,
    })
}

/// Position/pitch/duration groups for notes already in canonical order.
fn encode_cell(notes: &[QuantizedNote], bar_start: u32, out: &mut Vec<Token>) {
    let mut i = 0;
    while i < notes.len() {
        let head = notes[i];
        out.push(Token::Position((head.onset - bar_start) as u8));
        let mut j = i;
        while j < notes.len() && notes[j].onset == head.onset && notes[j].duration == head.duration {
            out.push(Token::Pitch(notes[j].pitch));
            j += 1;
        }
        out.push(Token::Duration(head.duration as u8));
        i = j;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("grammar violation at token {index}: {reason}")]
pub struct GrammarError {
    /// Index of the first offending token (the sequence length if it ended
    /// early).
    pub index: usize,
    pub reason: String,
}

fn violation(index: usize, reason: impl Into<String>) -> GrammarError {
    GrammarError {
        index,
        reason: reason.into(),
    }
}

/// Token index range `start..end` of one track within one bar, starting at
/// its track token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub bar: u32,
    pub track: usize,
    pub start: usize,
    pub end: usize,
}

/// Where everything sits in a grammatical sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub time_signature: TimeSignature,
    pub tempo_bin: u8,
    pub n_tracks: usize,
    pub instruments: Vec<u8>,
    /// Index of the first `bar` token.
    pub body_start: usize,
    /// Indices of the `bar` tokens.
    pub bar_starts: Vec<usize>,
    /// Cells in sequence order (bar-major).
    pub cells: Vec<Cell>,
    /// Decoded notes of each track with absolute onsets.
    pub notes: Vec<Vec<QuantizedNote>>,
}

impl Layout {
    pub fn bars(&self) -> u32 {
        self.bar_starts.len() as u32
    }

    pub fn cell(&self, bar: u32, track: usize) -> Option<Cell> {
        self.cells.get(bar as usize * self.n_tracks + track).copied()
    }
}

struct Cursor<'a> {
    tokens: &'a [Token],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<Token> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self, what: &str) -> Result<Token, GrammarError> {
        let t = self
            .peek()
            .ok_or_else(|| violation(self.pos, format!("sequence ended, expected {what}")))?;
        self.pos += 1;
        Ok(t)
    }

    fn fail(&self, what: &str) -> GrammarError {
        match self.tokens.get(self.pos) {
            Some(t) => violation(self.pos, format!("expected {what}, found {t}")),
            None => violation(self.pos, format!("sequence ended, expected {what}")),
        }
    }

    /// Consume a run of tokens matching `pick`.
    fn run(&mut self, pick: impl Fn(Token) -> Option<u8>) -> Vec<u8> {
        let mut out = vec![];
        while let Some(v) = self.peek().and_then(&pick) {
            out.push(v);
            self.pos += 1;
        }
        out
    }
}

/// Parse a full song sequence, checking every grammar rule.
pub fn parse_layout(seq: &TokenSequence) -> Result<Layout, GrammarError> {
    let tokens = &seq.tokens;
    let mut c = Cursor { tokens, pos: 0 };
    let time_signature = match c.peek() {
        Some(Token::TimeSig(ts)) => ts,
        _ => return Err(c.fail("time signature")),
    };
    c.pos += 1;
    let tempo_bin = match c.peek() {
        Some(Token::Tempo(b)) => b,
        _ => return Err(c.fail("tempo")),
    };
    c.pos += 1;

    let n_tracks;
    if seq.with_controls {
        if !matches!(c.peek(), Some(Token::Key(_))) {
            return Err(c.fail("key"));
        }
        c.pos += 1;
        let start = c.pos;
        let densities = c.run(|t| match t {
            Token::Density(v) => Some(v),
            _ => None,
        });
        n_tracks = densities.len();
        if !(2..=MAX_TRACKS).contains(&n_tracks) {
            return Err(violation(start + n_tracks.min(MAX_TRACKS), "expected 2 or 3 density tokens"));
        }
        for (what, pick) in [
            ("occupation", (|t| matches!(t, Token::Occupation(_))) as fn(Token) -> bool),
            ("polyphony", |t| matches!(t, Token::Polyphony(_))),
        ] {
            for _ in 0..n_tracks {
                match c.peek() {
                    Some(t) if pick(t) => c.pos += 1,
                    _ => return Err(c.fail(what)),
                }
            }
        }
    } else {
        let mut i = c.pos;
        while matches!(tokens.get(i), Some(Token::Instrument(_))) {
            i += 1;
        }
        n_tracks = i - c.pos;
        if !(2..=MAX_TRACKS).contains(&n_tracks) {
            return Err(violation(c.pos + n_tracks.min(MAX_TRACKS), "expected 2 or 3 instrument tokens"));
        }
    }
    let mut instruments = Vec::with_capacity(n_tracks);
    for _ in 0..n_tracks {
        match c.peek() {
            Some(Token::Instrument(i)) => instruments.push(i),
            _ => return Err(c.fail("instrument")),
        }
        c.pos += 1;
    }

    let body_start = c.pos;
    let bars = tokens[body_start..].iter().filter(|t| **t == Token::Bar).count() as u32;
    if bars == 0 {
        return Err(c.fail("bar"));
    }
    if bars > MAX_BARS {
        let idx = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Token::Bar)
            .nth(MAX_BARS as usize)
            .map(|(i, _)| i)
            .unwrap_or(tokens.len());
        return Err(violation(idx, format!("more than {MAX_BARS} bars")));
    }
    let spb = time_signature.steps_per_bar();
    let total = bars * spb;
    let mut notes = vec![Vec::new(); n_tracks];
    let mut cells = Vec::with_capacity(bars as usize * n_tracks);
    let mut bar_starts = Vec::with_capacity(bars as usize);

    for bar in 0..bars {
        if c.peek() != Some(Token::Bar) {
            return Err(c.fail("bar"));
        }
        bar_starts.push(c.pos);
        c.pos += 1;
        if seq.with_controls {
            if !matches!(c.peek(), Some(Token::Strain(_))) {
                return Err(c.fail("tensile strain"));
            }
            c.pos += 1;
            if !matches!(c.peek(), Some(Token::Diameter(_))) {
                return Err(c.fail("cloud diameter"));
            }
            c.pos += 1;
        }
        for (track, track_notes) in notes.iter_mut().enumerate() {
            let start = c.pos;
            if c.peek() != Some(Token::Track(track as u8)) {
                return Err(c.fail(&format!("track_{track}")));
            }
            c.pos += 1;
            parse_cell(&mut c, bar * spb, spb, total, track_notes)?;
            cells.push(Cell {
                bar,
                track,
                start,
                end: c.pos,
            });
        }
    }
    if c.pos != tokens.len() {
        return Err(c.fail("end of sequence"));
    }
    Ok(Layout {
        time_signature,
        tempo_bin,
        n_tracks,
        instruments,
        body_start,
        bar_starts,
        cells,
        notes,
    })
}

/// `(e_* p_*+ n_*)*` with nondecreasing positions, ascending pitches within a
/// group and notes ending inside the song.
fn parse_cell(
    c: &mut Cursor<'_>,
    bar_start: u32,
    spb: u32,
    total: u32,
    out: &mut Vec<QuantizedNote>,
) -> Result<(), GrammarError> {
    let mut last_pos = 0u32;
    while let Some(Token::Position(p)) = c.peek() {
        let p = p as u32;
        if p >= spb {
            return Err(violation(c.pos, format!("position e_{p} outside a {spb}-step bar")));
        }
        if p < last_pos {
            return Err(violation(c.pos, format!("position e_{p} before e_{last_pos}")));
        }
        last_pos = p;
        c.pos += 1;
        let mut pitches: Vec<u8> = Vec::new();
        loop {
            match c.next("pitch or duration")? {
                Token::Pitch(q) => {
                    if pitches.last().is_some_and(|&prev| q <= prev) {
                        return Err(violation(c.pos - 1, "pitches in a group must ascend"));
                    }
                    pitches.push(q);
                }
                Token::Duration(d) if !pitches.is_empty() => {
                    let onset = bar_start + p;
                    if onset + d as u32 > total {
                        return Err(violation(c.pos - 1, format!("n_{d} runs past the end of the song")));
                    }
                    out.extend(pitches.iter().map(|&q| QuantizedNote::new(q, onset, d as u32)));
                    break;
                }
                t => {
                    let what = if pitches.is_empty() { "pitch" } else { "pitch or duration" };
                    return Err(violation(c.pos - 1, format!("expected {what}, found {t}")));
                }
            }
        }
    }
    Ok(())
}

pub fn validate_grammar(seq: &TokenSequence) -> Result<(), GrammarError> {
    parse_layout(seq).map(|_| ())
}

/// Rebuild the song. Tempo becomes the representative value of its bin and
/// overlapping same-pitch notes are cut the way a MIDI reader would.
pub fn decode_tokens(seq: &TokenSequence) -> Result<QuantizedSong, GrammarError> {
    let layout = parse_layout(seq)?;
    Ok(song_from_layout(layout))
}

pub fn song_from_layout(layout: Layout) -> QuantizedSong {
    let total = layout.bars() * layout.time_signature.steps_per_bar();
    let tracks = layout
        .notes
        .into_iter()
        .enumerate()
        .map(|(k, mut notes)| {
            normalize_notes(&mut notes, total);
            QuantizedTrack::new(Role::from_index(k).expect("track index"), layout.instruments[k], notes)
        })
        .collect();
    QuantizedSong {
        time_signature: layout.time_signature,
        tempo_bpm: TEMPO_REPRESENTATIVE_BPM[layout.tempo_bin as usize],
        bars: layout.bar_starts.len() as u32,
        tracks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(text: &str) -> TokenSequence {
        TokenSequence::parse(text).unwrap()
    }

    #[test]
    fn vocab_size_and_ids() {
        let v = build_vocab();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.id(Token::Mask), 357);
        assert_eq!(v.id(Token::Eos), 359);
        for id in 0..VOCAB_SIZE as u32 {
            let t = v.token(id).unwrap();
            assert_eq!(v.id(t), id);
            assert_eq!(t.to_string().parse::<Token>().unwrap(), t);
        }
        assert!(Token::from_id(360).is_none());
    }

    #[test]
    fn token_text_rejects_out_of_range() {
        for bad in ["p_20", "p_109", "n_0", "n_33", "e_16", "track_3", "t_7", "k_24", "s_12", "o_10", "x_1", "p_060"] {
            assert!(bad.parse::<Token>().is_err(), "{bad}");
        }
    }

    #[test]
    fn shared_duration_group() {
        let s = seq("4/4 t_3 i_0 i_32 bar track_0 e_0 p_60 p_67 n_10 track_1");
        let song = decode_tokens(&s).unwrap();
        assert_eq!(
            song.tracks[0].notes,
            vec![QuantizedNote::new(60, 0, 10), QuantizedNote::new(67, 0, 10)]
        );
    }

    #[test]
    fn violations_point_at_first_bad_token() {
        let missing_pos = seq("4/4 t_3 i_0 i_32 bar track_0 p_60 n_4 track_1");
        assert_eq!(validate_grammar(&missing_pos).unwrap_err().index, 6);
        let backwards = seq("4/4 t_3 i_0 i_32 bar track_0 e_8 p_60 n_4 e_4 p_62 n_4 track_1");
        assert_eq!(validate_grammar(&backwards).unwrap_err().index, 9);
        let wide = seq("2/4 t_3 i_0 i_32 bar track_0 e_8 p_60 n_4 track_1");
        assert_eq!(validate_grammar(&wide).unwrap_err().index, 6);
        let descending = seq("4/4 t_3 i_0 i_32 bar track_0 e_0 p_64 p_60 n_4 track_1");
        assert_eq!(validate_grammar(&descending).unwrap_err().index, 8);
        let truncated = seq("4/4 t_3 i_0 i_32 bar track_0 e_0 p_64");
        assert_eq!(validate_grammar(&truncated).unwrap_err().index, 8);
        let overrun = seq("4/4 t_3 i_0 i_32 bar track_0 e_12 p_64 n_8 track_1");
        assert_eq!(validate_grammar(&overrun).unwrap_err().index, 8);
        let track_order = seq("4/4 t_3 i_0 i_32 bar track_1 track_0");
        assert_eq!(validate_grammar(&track_order).unwrap_err().index, 5);
    }

    #[test]
    fn empty_cells_and_text_round_trip() {
        let s = seq("3/4 t_0 i_5 i_6 i_7 bar track_0 track_1 track_2 bar track_0 track_1 e_3 p_40 n_2 track_2");
        let layout = parse_layout(&s).unwrap();
        assert_eq!(layout.cells.len(), 6);
        assert_eq!(layout.cell(1, 1).unwrap().end - layout.cell(1, 1).unwrap().start, 4);
        assert_eq!(TokenSequence::parse(&s.to_text()).unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<TokenSequence>(&json).unwrap(), s);
    }
}
