//! Infill requests without HTTP: validation, control substitution, decoding
//! and the tolerance check.

use std::collections::{BTreeMap, BTreeSet};

use musfill_core::codec::{decode_tokens, replace_controls};
use musfill_core::controls::{control_values, control_values_with_key, ControlError, RATE_BINS, TENSION_BINS};
use musfill_core::masking::mask_cells;
use musfill_core::model::{ModelError, ModelParams};
use musfill_core::sampler::{sample_infill, SampleConfig, SampleError};
use musfill_core::{Calibration, ControlSet, KeyEstimate, MaskedExample, QuantizedSong, TokenSequence};
use thiserror::Error;

use crate::api::InfillRequest;

/// Largest bin distance still counted as a match.
pub const MATCH_TOLERANCE: u8 = 1;

#[derive(Debug, Error)]
pub enum InfillError {
    /// The request is well-formed JSON but cannot be served.
    #[error("{0}")]
    Invalid(String),
    #[error("parent version has no controls: {0}")]
    Parent(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("cannot measure controls of the result: {0}")]
    Controls(#[from] ControlError),
}

impl InfillError {
    /// Errors the caller can fix by changing the request.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self,
            InfillError::Invalid(_) | InfillError::Sample(SampleError::Model(ModelError::Length { .. }))
        )
    }
}

fn invalid(msg: String) -> InfillError {
    InfillError::Invalid(msg)
}

fn check_bin(name: &str, value: Option<u8>, bins: usize) -> Result<(), InfillError> {
    match value {
        Some(v) if v as usize >= bins => Err(invalid(format!("{name} bin {v} outside 0..={}", bins - 1))),
        _ => Ok(()),
    }
}

/// Region and override checks against the song's shape.
pub fn validate_request(req: &InfillRequest, bars: u32, tracks: usize) -> Result<(), InfillError> {
    if req.regions.is_empty() {
        return Err(invalid("regions must not be empty".into()));
    }
    let mut seen = BTreeSet::new();
    for r in &req.regions {
        if r.bar >= bars || r.track >= tracks {
            return Err(invalid(format!(
                "region bar {} track {} outside {bars} bars x {tracks} tracks",
                r.bar, r.track
            )));
        }
        if !seen.insert(*r) {
            return Err(invalid(format!("region bar {} track {} listed twice", r.bar, r.track)));
        }
    }
    if !(req.temperature.is_finite() && req.temperature >= 0.0) {
        return Err(invalid(format!("temperature must be finite and nonnegative, got {}", req.temperature)));
    }
    for (&t, o) in &req.control_overrides.tracks {
        if t >= tracks {
            return Err(invalid(format!("override for track {t} but the song has {tracks}")));
        }
        check_bin("density", o.density, RATE_BINS)?;
        check_bin("occupation", o.occupation, RATE_BINS)?;
        check_bin("polyphony", o.polyphony, RATE_BINS)?;
    }
    for (&b, o) in &req.control_overrides.bars {
        if b >= bars {
            return Err(invalid(format!("override for bar {b} but the song has {bars}")));
        }
        check_bin("strain", o.strain, TENSION_BINS)?;
        check_bin("diameter", o.diameter, TENSION_BINS)?;
    }
    Ok(())
}

/// The parent's controls with the request's overrides written over them.
pub fn requested_controls(parent: &ControlSet, req: &InfillRequest) -> ControlSet {
    let mut c = parent.clone();
    for (&t, o) in &req.control_overrides.tracks {
        let tc = &mut c.tracks[t];
        tc.density = o.density.unwrap_or(tc.density);
        tc.occupation = o.occupation.unwrap_or(tc.occupation);
        tc.polyphony = o.polyphony.unwrap_or(tc.polyphony);
    }
    for (&b, o) in &req.control_overrides.bars {
        let bc = &mut c.bars[b as usize];
        bc.strain = o.strain.unwrap_or(bc.strain);
        bc.diameter = o.diameter.unwrap_or(bc.diameter);
    }
    c
}

/// `tracks.{i}.{field}` and `bars.{i}.{field}` for every overridden bin.
pub fn matched_flags(req: &InfillRequest, requested: &ControlSet, actual: &ControlSet) -> BTreeMap<String, bool> {
    let close = |a: u8, b: u8| a.abs_diff(b) <= MATCH_TOLERANCE;
    let mut out = BTreeMap::new();
    for (&t, o) in &req.control_overrides.tracks {
        let (r, a) = (requested.tracks[t], actual.tracks[t]);
        let fields = [
            ("density", o.density, r.density, a.density),
            ("occupation", o.occupation, r.occupation, a.occupation),
            ("polyphony", o.polyphony, r.polyphony, a.polyphony),
        ];
        for (name, given, want, got) in fields {
            if given.is_some() {
                out.insert(format!("tracks.{t}.{name}"), close(want, got));
            }
        }
    }
    for (&b, o) in &req.control_overrides.bars {
        let (r, a) = (requested.bars[b as usize], actual.bars[b as usize]);
        for (name, given, want, got) in [
            ("strain", o.strain, r.strain, a.strain),
            ("diameter", o.diameter, r.diameter, a.diameter),
        ] {
            if given.is_some() {
                out.insert(format!("bars.{b}.{name}"), close(want, got));
            }
        }
    }
    out
}

/// Binned controls of a song. A song whose notes were all removed has no
/// detectable key, so it keeps `fallback_key`.
pub fn measure_controls(song: &QuantizedSong, fallback_key: u8) -> Result<ControlSet, ControlError> {
    let values = match control_values(song) {
        Err(ControlError::Key(_)) => control_values_with_key(song, KeyEstimate::from_index(fallback_key))?,
        other => other?,
    };
    Ok(values.bin(&Calibration::default()))
}

/// Masked example for a request, conditioned on the requested controls.
pub fn build_masked(parent: &TokenSequence, requested: &ControlSet, req: &InfillRequest) -> Result<MaskedExample, InfillError> {
    let conditioned = replace_controls(parent, requested).map_err(|e| InfillError::Parent(e.to_string()))?;
    let cells: Vec<(u32, usize)> = req.regions.iter().map(|r| (r.bar, r.track)).collect();
    mask_cells(&conditioned, &cells).map_err(|e| invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfillOutcome {
    /// The result with its control tokens set to the measured controls.
    pub tokens: TokenSequence,
    pub song: QuantizedSong,
    pub requested: ControlSet,
    pub actual: ControlSet,
    pub matched: BTreeMap<String, bool>,
    pub truncated: bool,
}

/// Validate, mask, decode and measure. `parent` must carry controls.
pub fn run_infill(
    params: &ModelParams<f32>,
    parent: &TokenSequence,
    parent_controls: &ControlSet,
    req: &InfillRequest,
) -> Result<InfillOutcome, InfillError> {
    let bars = parent_controls.bars.len() as u32;
    validate_request(req, bars, parent_controls.tracks.len())?;
    let requested = requested_controls(parent_controls, req);
    let masked = build_masked(parent, &requested, req)?;
    let cfg = SampleConfig {
        temperature: req.temperature,
        seed: req.seed,
        ..SampleConfig::default()
    };
    let result = sample_infill(params, &masked, &cfg)?;
    let song = decode_tokens(&result.tokens).map_err(SampleError::from)?;
    let actual = measure_controls(&song, requested.key_bin)?;
    let tokens = replace_controls(&result.tokens, &actual).map_err(|e| InfillError::Parent(e.to_string()))?;
    Ok(InfillOutcome {
        matched: matched_flags(req, &requested, &actual),
        tokens,
        song,
        requested,
        actual,
        truncated: result.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::api::{BarOverride, Region, TrackOverride};
    use musfill_core::codec::{encode_song, parse_layout};
    use musfill_core::compute_control_set;
    use musfill_core::model::ModelConfig;
    use musfill_core::synth::reference_song;

    fn request(regions: &[(u32, usize)]) -> InfillRequest {
        InfillRequest {
            regions: regions.iter().map(|&(bar, track)| Region { bar, track }).collect(),
            control_overrides: Default::default(),
            temperature: 0.0,
            seed: 1,
            parent_version: None,
        }
    }

    fn tiny() -> ModelParams<f32> {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 16,
            feedforward_dim: 32,
            ..ModelConfig::toy()
        };
        ModelParams::init(&cfg, 3)
    }

    #[test]
    fn invalid_requests_are_named() {
        let bad = |r: InfillRequest| validate_request(&r, 2, 3).unwrap_err().to_string();
        assert!(bad(request(&[])).contains("empty"));
        assert!(bad(request(&[(2, 0)])).contains("outside"));
        assert!(bad(request(&[(0, 3)])).contains("outside"));
        assert!(bad(request(&[(0, 0), (0, 0)])).contains("twice"));
        let mut r = request(&[(0, 0)]);
        r.control_overrides.tracks.insert(0, TrackOverride { density: Some(10), ..Default::default() });
        assert!(bad(r).contains("density bin 10"));
        let mut r = request(&[(0, 0)]);
        r.control_overrides.bars.insert(1, BarOverride { diameter: Some(12), ..Default::default() });
        assert!(bad(r).contains("diameter bin 12"));
        let mut r = request(&[(0, 0)]);
        r.control_overrides.bars.insert(5, BarOverride::default());
        assert!(bad(r).contains("bar 5"));
        let mut r = request(&[(0, 0)]);
        r.temperature = f64::NAN;
        assert!(bad(r).contains("temperature"));
        assert!(validate_request(&request(&[(1, 2), (0, 0)]), 2, 3).is_ok());
    }

    #[test]
    fn tolerance_is_one_bin() {
        let song = reference_song();
        let base = compute_control_set(&song).unwrap();
        let mut r = request(&[(0, 0)]);
        r.control_overrides.tracks.insert(
            0,
            TrackOverride {
                density: Some(8),
                polyphony: Some(2),
                ..Default::default()
            },
        );
        let requested = requested_controls(&base, &r);
        let mut actual = requested.clone();
        actual.tracks[0].density = 7;
        actual.tracks[0].polyphony = 4;
        let m = matched_flags(&r, &requested, &actual);
        assert_eq!(m.len(), 2);
        assert!(m["tracks.0.density"]);
        assert!(!m["tracks.0.polyphony"]);
    }

    #[test]
    fn silent_song_keeps_fallback_key() {
        let mut song = reference_song();
        for t in &mut song.tracks {
            t.notes.clear();
        }
        let c = measure_controls(&song, 17).unwrap();
        assert_eq!(c.key_bin, 17);
        assert!(c.tracks.iter().all(|t| t.density == 0));
    }

    #[test]
    fn result_keeps_unmasked_cells_and_conditions_on_overrides() {
        let song = reference_song();
        let controls = compute_control_set(&song).unwrap();
        let parent = encode_song(&song, Some(&controls)).unwrap();
        let mut r = request(&[(1, 0)]);
        r.control_overrides.tracks.insert(0, TrackOverride { density: Some(9), ..Default::default() });
        let requested = requested_controls(&controls, &r);
        let masked = build_masked(&parent, &requested, &r).unwrap();
        assert!(masked.encoder_input.tokens.contains(&musfill_core::Token::Density(9)));

        let out = run_infill(&tiny(), &parent, &controls, &r).unwrap();
        assert_eq!(musfill_core::codec::read_controls(&out.tokens), Some(out.actual.clone()));
        let (a, b) = (parse_layout(&parent).unwrap(), parse_layout(&out.tokens).unwrap());
        for bar in 0..2 {
            for track in 0..3 {
                if (bar, track) != (1, 0) {
                    let (ca, cb) = (a.cell(bar, track).unwrap(), b.cell(bar, track).unwrap());
                    assert_eq!(parent.tokens[ca.start..ca.end], out.tokens.tokens[cb.start..cb.end]);
                }
            }
        }
        assert_eq!(out, run_infill(&tiny(), &parent, &controls, &r).unwrap());
    }
}
