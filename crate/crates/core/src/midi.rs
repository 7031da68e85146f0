//! Standard MIDI File input and output.
//!
//! [`parse_midi`] resolves note-on/note-off pairs into tick-level notes,
//! [`quantize`] snaps them to the sixteenth-note grid and assigns track roles
//! via [`classify_tracks`], and [`write_midi`] produces a type 1 file that
//! reads back to the same [`QuantizedSong`].

use std::collections::BTreeMap;

use log::warn;
use thiserror::Error;

use crate::song::{
    normalize_notes, sounding_counts, QuantizedNote, QuantizedSong, QuantizedTrack, Role,
    SongError, TimeSignature, MAX_BARS, MAX_DURATION, MAX_PITCH, MIN_PITCH, STEPS_PER_QUARTER,
};

/// Resolution of every file we write.
pub const WRITE_TICKS_PER_QUARTER: u16 = 480;
const DRUM_CHANNEL: u8 = 9;
const WRITE_VELOCITY: u8 = 100;
const DEFAULT_TEMPO_US: u32 = 500_000;
/// Tracks whose polyphony rate is below this count as monophonic.
const MONOPHONIC_POLYPHONY_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MidiError {
    #[error("malformed MIDI at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported MIDI: {0}")]
    Unsupported(String),
    #[error("unsupported metre {numerator}/{denominator}")]
    UnsupportedMetre { numerator: u8, denominator: u8 },
    #[error("song has no notes")]
    NoNotes,
    #[error("unfilterable song: {0}")]
    Unfilterable(String),
    #[error(transparent)]
    Song(#[from] SongError),
}

fn malformed(offset: usize, reason: impl Into<String>) -> MidiError {
    MidiError::Malformed {
        offset,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawNote {
    pub pitch: u8,
    pub start: u64,
    pub duration: u64,
}

/// Notes of one channel within one track chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTrack {
    pub chunk: usize,
    pub channel: u8,
    /// First program change seen on the channel, 0 if none.
    pub program: u8,
    pub name: Option<String>,
    pub notes: Vec<RawNote>,
}

impl RawTrack {
    pub fn is_drum(&self) -> bool {
        self.channel == DRUM_CHANNEL
    }

    pub fn mean_pitch(&self) -> f64 {
        if self.notes.is_empty() {
            return 0.0;
        }
        self.notes.iter().map(|n| n.pitch as f64).sum::<f64>() / self.notes.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSong {
    pub format: u16,
    pub ticks_per_quarter: u16,
    /// First tempo event in the file, if any.
    pub tempo_us_per_quarter: Option<u32>,
    /// First time-signature event as (numerator, denominator).
    pub time_signature: Option<(u8, u8)>,
    /// Latest end-of-track tick over all chunks.
    pub end_tick: u64,
    pub tracks: Vec<RawTrack>,
    /// Note-ons that were still open at the end of their track and were
    /// closed there.
    pub unmatched_note_ons: usize,
}

impl RawSong {
    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|t| t.notes.len()).sum()
    }

    pub fn tempo_bpm(&self) -> f64 {
        60_000_000.0 / self.tempo_us_per_quarter.unwrap_or(DEFAULT_TEMPO_US) as f64
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(malformed(self.pos, format!("expected {n} more bytes")));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.bytes(1)?[0])
    }

    fn peek(&self) -> Result<u8, MidiError> {
        self.data
            .get(self.pos)
            .copied()
            .ok_or_else(|| malformed(self.pos, "unexpected end of data"))
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(malformed(start, "variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Default)]
struct ChannelNotes {
    program: Option<u8>,
    open: BTreeMap<u8, u64>,
    notes: Vec<RawNote>,
    seen: bool,
}

impl ChannelNotes {
    fn close(&mut self, pitch: u8, tick: u64) {
        if let Some(start) = self.open.remove(&pitch) {
            if tick > start {
                self.notes.push(RawNote {
                    pitch,
                    start,
                    duration: tick - start,
                });
            }
        }
    }
}

/// Parse an SMF type 0 or 1 byte stream.
pub fn parse_midi(bytes: &[u8]) -> Result<RawSong, MidiError> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).map_err(|_| malformed(0, "missing MThd header"))? != b"MThd" {
        return Err(malformed(0, "missing MThd header"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(malformed(4, format!("header length {header_len} < 6")));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.bytes(header_len - (r.pos - header_start))?;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(malformed(12, "zero ticks per quarter note"));
    }

    let mut song = RawSong {
        format,
        ticks_per_quarter: division,
        tempo_us_per_quarter: None,
        time_signature: None,
        end_tick: 0,
        tracks: Vec::new(),
        unmatched_note_ons: 0,
    };
    // (tick, chunk) of the earliest tempo / time-signature event so far.
    let mut tempo_at: Option<(u64, usize)> = None;
    let mut ts_at: Option<(u64, usize)> = None;

    let mut chunk = 0usize;
    while r.remaining() > 0 && chunk < ntracks as usize {
        let chunk_offset = r.pos;
        let id = r.bytes(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // Unknown chunk types are skipped, as SMF readers must.
            r.bytes(len)?;
            continue;
        }
        if r.remaining() < len {
            return Err(malformed(
                chunk_offset,
                format!("track chunk length {len} exceeds file"),
            ));
        }
        let end = r.pos + len;
        let mut channels: BTreeMap<u8, ChannelNotes> = BTreeMap::new();
        let mut name: Option<String> = None;
        let mut tick = 0u64;
        let mut running: Option<u8> = None;

        while r.pos < end {
            tick += r.vlq()? as u64;
            let event_offset = r.pos;
            let mut status = r.peek()?;
            if status < 0x80 {
                status = running.ok_or_else(|| malformed(event_offset, "data byte without running status"))?;
            } else {
                r.pos += 1;
            }
            match status {
                0x80..=0xef => {
                    running = Some(status);
                    let channel = status & 0x0f;
                    let kind = status & 0xf0;
                    let a = r.u8()?;
                    if a > 0x7f {
                        return Err(malformed(r.pos - 1, "data byte with high bit set"));
                    }
                    let b = if matches!(kind, 0xc0 | 0xd0) { 0 } else { r.u8()? };
                    let ch = channels.entry(channel).or_default();
                    match kind {
                        0x90 if b > 0 => {
                            ch.seen = true;
                            // A re-struck pitch closes the sounding note.
                            ch.close(a, tick);
                            ch.open.insert(a, tick);
                        }
                        0x80 | 0x90 => ch.close(a, tick),
                        0xc0 => {
                            ch.program.get_or_insert(a);
                        }
                        _ => {}
                    }
                }
                0xf0 | 0xf7 => {
                    running = None;
                    let n = r.vlq()? as usize;
                    r.bytes(n)?;
                }
                0xff => {
                    running = None;
                    let kind = r.u8()?;
                    let n = r.vlq()? as usize;
                    let data_offset = r.pos;
                    let data = r.bytes(n)?;
                    match kind {
                        0x51 => {
                            if n != 3 {
                                return Err(malformed(data_offset, "tempo event must have 3 bytes"));
                            }
                            let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            if us > 0 && tempo_at.is_none_or(|at| (tick, chunk) < at) {
                                tempo_at = Some((tick, chunk));
                                song.tempo_us_per_quarter = Some(us);
                            }
                        }
                        0x58 => {
                            if n < 2 {
                                return Err(malformed(data_offset, "time signature event too short"));
                            }
                            if ts_at.is_none_or(|at| (tick, chunk) < at) {
                                ts_at = Some((tick, chunk));
                                let den = 1u32.checked_shl(data[1] as u32).unwrap_or(0);
                                song.time_signature = Some((data[0], den.min(255) as u8));
                            }
                        }
                        0x03 => {
                            name.get_or_insert_with(|| String::from_utf8_lossy(data).trim().to_string());
                        }
                        0x2f => {
                            r.pos = end;
                        }
                        _ => {}
                    }
                }
                _ => return Err(malformed(event_offset, format!("invalid status byte {status:#04x}"))),
            }
        }
        if r.pos != end {
            return Err(malformed(end, "event runs past the end of its track chunk"));
        }
        song.end_tick = song.end_tick.max(tick);
        for (channel, mut ch) in channels {
            let pending: Vec<u8> = ch.open.keys().copied().collect();
            if !pending.is_empty() {
                warn!("track chunk {chunk}, channel {channel}: {} unmatched note-on(s) closed at track end", pending.len());
                song.unmatched_note_ons += pending.len();
            }
            for pitch in pending {
                ch.close(pitch, tick);
            }
            if !ch.seen {
                continue;
            }
            ch.notes.sort_by_key(|n| (n.start, n.pitch));
            song.tracks.push(RawTrack {
                chunk,
                channel,
                program: ch.program.unwrap_or(0),
                name: name.clone(),
                notes: ch.notes,
            });
        }
        chunk += 1;
    }
    Ok(song)
}

/// Indices into [`RawSong::tracks`] for each role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackAssignment {
    pub melody: usize,
    pub bass: usize,
    pub accompaniment: Option<usize>,
}

impl TrackAssignment {
    pub fn in_role_order(&self) -> Vec<(Role, usize)> {
        let mut out = vec![(Role::Melody, self.melody), (Role::Bass, self.bass)];
        if let Some(a) = self.accompaniment {
            out.push((Role::Accompaniment, a));
        }
        out
    }
}

fn ticks_per_step(raw: &RawSong) -> f64 {
    raw.ticks_per_quarter as f64 / STEPS_PER_QUARTER as f64
}

/// Fraction of sounding grid steps with two or more notes.
fn raw_polyphony_rate(track: &RawTrack, tps: f64) -> f64 {
    let notes: Vec<QuantizedNote> = track
        .notes
        .iter()
        .map(|n| {
            let onset = (n.start as f64 / tps).round() as u32;
            let duration = ((n.duration as f64 / tps).round() as u32).max(1);
            QuantizedNote::new(n.pitch, onset, duration)
        })
        .collect();
    let end = notes.iter().map(|n| n.end()).max().unwrap_or(0);
    let counts = sounding_counts(&notes, end);
    let any = counts.iter().filter(|&&c| c >= 1).count();
    let poly = counts.iter().filter(|&&c| c >= 2).count();
    if any == 0 {
        0.0
    } else {
        poly as f64 / any as f64
    }
}

fn role_label(name: &str) -> Option<Role> {
    Role::ALL
        .into_iter()
        .find(|r| name.eq_ignore_ascii_case(r.name()))
}

/// Decide which raw tracks play melody, bass and (optionally) accompaniment.
///
/// Tracks named exactly `melody`/`bass`/`accompaniment` (as written by
/// [`write_midi`]) are honoured when both mandatory roles are labelled.
/// Otherwise: bass is the lowest mean pitch, melody the highest mean pitch
/// among mostly monophonic tracks, accompaniment the densest remaining track.
/// Ties go to the lower track index. Drum-channel and empty tracks are ignored.
pub fn classify_tracks(raw: &RawSong) -> Result<TrackAssignment, MidiError> {
    let eligible: Vec<usize> = (0..raw.tracks.len())
        .filter(|&i| !raw.tracks[i].is_drum() && !raw.tracks[i].notes.is_empty())
        .collect();
    if eligible.len() < 2 {
        return Err(MidiError::Unfilterable(format!(
            "need at least 2 non-drum tracks with notes, found {}",
            eligible.len()
        )));
    }

    let labelled = |role: Role| -> Option<usize> {
        let hits: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&i| raw.tracks[i].name.as_deref().and_then(role_label) == Some(role))
            .collect();
        (hits.len() == 1).then(|| hits[0])
    };
    if let (Some(melody), Some(bass)) = (labelled(Role::Melody), labelled(Role::Bass)) {
        if melody != bass {
            return Ok(TrackAssignment {
                melody,
                bass,
                accompaniment: labelled(Role::Accompaniment),
            });
        }
    }

    let tps = ticks_per_step(raw);
    let mut bass = eligible[0];
    for &i in &eligible[1..] {
        if raw.tracks[i].mean_pitch() < raw.tracks[bass].mean_pitch() {
            bass = i;
        }
    }
    let mut melody: Option<usize> = None;
    for &i in eligible.iter().filter(|&&i| i != bass) {
        if raw_polyphony_rate(&raw.tracks[i], tps) >= MONOPHONIC_POLYPHONY_RATE {
            continue;
        }
        if melody.is_none_or(|m| raw.tracks[i].mean_pitch() > raw.tracks[m].mean_pitch()) {
            melody = Some(i);
        }
    }
    let melody = melody.ok_or_else(|| {
        MidiError::Unfilterable("no monophonic track available for the melody".into())
    })?;
    let mut accompaniment: Option<usize> = None;
    for &i in eligible.iter().filter(|&&i| i != bass && i != melody) {
        if accompaniment.is_none_or(|a| raw.tracks[i].notes.len() > raw.tracks[a].notes.len()) {
            accompaniment = Some(i);
        }
    }
    Ok(TrackAssignment {
        melody,
        bass,
        accompaniment,
    })
}

/// Side information from [`quantize_with_report`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuantizeReport {
    /// Bar count before truncation, when the song was longer than 16 bars.
    pub truncated_from_bars: Option<u32>,
    pub clamped_pitches: usize,
    pub unmatched_note_ons: usize,
    /// Eligible tracks that were not assigned a role.
    pub dropped_tracks: usize,
}

pub fn quantize(raw: &RawSong) -> Result<QuantizedSong, MidiError> {
    quantize_with_report(raw).map(|(song, _)| song)
}

/// Snap a raw song to the sixteenth-note grid, assign roles and cut it to at
/// most 16 bars.
pub fn quantize_with_report(raw: &RawSong) -> Result<(QuantizedSong, QuantizeReport), MidiError> {
    let (num, den) = raw.time_signature.unwrap_or((4, 4));
    let time_signature = TimeSignature::from_fraction(num, den).ok_or(MidiError::UnsupportedMetre {
        numerator: num,
        denominator: den,
    })?;
    if raw.note_count() == 0 {
        return Err(MidiError::NoNotes);
    }
    let assignment = classify_tracks(raw)?;
    let tps = ticks_per_step(raw);
    let spb = time_signature.steps_per_bar();
    let mut report = QuantizeReport {
        unmatched_note_ons: raw.unmatched_note_ons,
        ..Default::default()
    };
    let eligible = raw
        .tracks
        .iter()
        .filter(|t| !t.is_drum() && !t.notes.is_empty())
        .count();
    report.dropped_tracks = eligible - assignment.in_role_order().len();

    let mut tracks = Vec::new();
    let mut last_step = (raw.end_tick as f64 / tps).round() as u32;
    for (role, index) in assignment.in_role_order() {
        let src = &raw.tracks[index];
        let notes: Vec<QuantizedNote> = src
            .notes
            .iter()
            .map(|n| {
                let pitch = n.pitch.clamp(MIN_PITCH, MAX_PITCH);
                if pitch != n.pitch {
                    report.clamped_pitches += 1;
                }
                let onset = (n.start as f64 / tps).round() as u32;
                let duration = ((n.duration as f64 / tps).round() as u32).clamp(1, MAX_DURATION);
                QuantizedNote::new(pitch, onset, duration)
            })
            .collect();
        last_step = last_step.max(notes.iter().map(|n| n.end()).max().unwrap_or(0));
        tracks.push(QuantizedTrack::new(role, src.program, notes));
    }
    if report.clamped_pitches > 0 {
        warn!("{} pitch(es) clamped into [{MIN_PITCH}, {MAX_PITCH}]", report.clamped_pitches);
    }

    let mut bars = last_step.div_ceil(spb).max(1);
    if bars > MAX_BARS {
        report.truncated_from_bars = Some(bars);
        bars = MAX_BARS;
    }
    let total = bars * spb;
    for track in &mut tracks {
        normalize_notes(&mut track.notes, total);
    }
    let song = QuantizedSong {
        time_signature,
        tempo_bpm: raw.tempo_bpm(),
        bars,
        tracks,
    };
    song.validate()?;
    Ok((song, report))
}

/// The raw (tick-level) form of a quantized song, as [`write_midi`] followed by
/// [`parse_midi`] would produce it.
pub fn to_raw(song: &QuantizedSong, ticks_per_quarter: u16) -> RawSong {
    let tps = ticks_per_quarter as u64 / STEPS_PER_QUARTER as u64;
    let tracks = song
        .tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut notes: Vec<RawNote> = t
                .notes
                .iter()
                .map(|n| RawNote {
                    pitch: n.pitch,
                    start: n.onset as u64 * tps,
                    duration: n.duration as u64 * tps,
                })
                .collect();
            notes.sort_by_key(|n| (n.start, n.pitch));
            RawTrack {
                chunk: i + 1,
                channel: i as u8,
                program: t.instrument,
                name: Some(t.role.name().to_string()),
                notes,
            }
        })
        .collect();
    let (num, den) = song.time_signature.fraction();
    RawSong {
        format: 1,
        ticks_per_quarter,
        tempo_us_per_quarter: Some(tempo_to_us(song.tempo_bpm)),
        time_signature: Some((num, den)),
        end_tick: song.total_steps() as u64 * tps,
        tracks,
        unmatched_note_ons: 0,
    }
}

fn tempo_to_us(bpm: f64) -> u32 {
    (60_000_000.0 / bpm).round().clamp(1.0, 0xff_ffff as f64) as u32
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Events as (tick, order, bytes); lower order sorts first within a tick.
fn write_chunk(out: &mut Vec<u8>, mut events: Vec<(u64, u8, Vec<u8>)>, end_tick: u64) {
    events.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let mut body = Vec::new();
    let mut tick = 0u64;
    for (t, _, bytes) in events {
        push_vlq(&mut body, (t - tick) as u32);
        body.extend_from_slice(&bytes);
        tick = t;
    }
    push_vlq(&mut body, end_tick.saturating_sub(tick) as u32);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

fn meta(kind: u8, data: &[u8]) -> Vec<u8> {
    let mut v = vec![0xff, kind];
    push_vlq(&mut v, data.len() as u32);
    v.extend_from_slice(data);
    v
}

/// Write a type 1 SMF at 480 ticks per quarter: a conductor track with one
/// tempo and one time-signature event, then one named track per role.
pub fn write_midi(song: &QuantizedSong) -> Result<Vec<u8>, MidiError> {
    song.validate()?;
    let tpq = WRITE_TICKS_PER_QUARTER;
    let tps = (tpq as u32 / STEPS_PER_QUARTER) as u64;
    let end_tick = song.total_steps() as u64 * tps;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(song.tracks.len() as u16 + 1).to_be_bytes());
    out.extend_from_slice(&tpq.to_be_bytes());

    let us = tempo_to_us(song.tempo_bpm).to_be_bytes();
    let (num, den) = song.time_signature.fraction();
    let conductor = vec![
        (0, 0, meta(0x51, &us[1..])),
        (0, 1, meta(0x58, &[num, den.trailing_zeros() as u8, 24, 8])),
    ];
    write_chunk(&mut out, conductor, end_tick);

    for (i, track) in song.tracks.iter().enumerate() {
        let channel = i as u8;
        let mut events = vec![
            (0, 0, meta(0x03, track.role.name().as_bytes())),
            (0, 1, vec![0xc0 | channel, track.instrument & 0x7f]),
        ];
        for n in &track.notes {
            let on = n.onset as u64 * tps;
            let off = n.end() as u64 * tps;
            // Offs before ons at the same tick so re-struck pitches survive.
            events.push((on, 3, vec![0x90 | channel, n.pitch, WRITE_VELOCITY]));
            events.push((off, 2, vec![0x80 | channel, n.pitch, 0]));
        }
        write_chunk(&mut out, events, end_tick);
    }
    Ok(out)
}

/// Parse and quantize in one step.
pub fn read_song(bytes: &[u8]) -> Result<(QuantizedSong, QuantizeReport), MidiError> {
    quantize_with_report(&parse_midi(bytes)?)
}
