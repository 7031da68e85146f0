//! JSON bodies of the `/v1` API.

use std::collections::BTreeMap;

use musfill_core::{ControlSet, QuantizedNote, QuantizedSong, TimeSignature};
use serde::{Deserialize, Serialize};

pub const API_VERSION: &str = "v1";

fn v1() -> String {
    API_VERSION.to_string()
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub bar: u32,
    pub track: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupation: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polyphony: Option<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strain: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameter: Option<u8>,
}

/// Requested control bins, keyed by track or bar index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlOverrides {
    #[serde(default)]
    pub tracks: BTreeMap<usize, TrackOverride>,
    #[serde(default)]
    pub bars: BTreeMap<u32, BarOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfillRequest {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub control_overrides: ControlOverrides,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the latest version.
    #[serde(default)]
    pub parent_version: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub index: usize,
    pub role: String,
    pub instrument: u8,
    pub notes: Vec<QuantizedNote>,
}

pub fn track_infos(song: &QuantizedSong) -> Vec<TrackInfo> {
    song.tracks
        .iter()
        .enumerate()
        .map(|(index, t)| TrackInfo {
            index,
            role: t.role.name().to_string(),
            instrument: t.instrument,
            notes: t.notes.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    #[serde(default = "v1")]
    pub api: String,
    pub song_id: String,
    pub version_id: usize,
    pub controls: ControlSet,
    pub tokens: String,
    pub bars: u32,
    pub time_signature: TimeSignature,
    pub tempo_bpm: f64,
    pub tracks: Vec<TrackInfo>,
    pub truncated: bool,
    pub truncated_from_bars: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillResponse {
    #[serde(default = "v1")]
    pub api: String,
    pub song_id: String,
    pub version_id: usize,
    pub parent_version: usize,
    pub seed: u64,
    pub tokens: String,
    /// Controls measured on the result.
    pub controls: ControlSet,
    /// Controls the model was conditioned on.
    pub requested_controls: ControlSet,
    /// One flag per override, keyed like `tracks.0.density`.
    pub matched: BTreeMap<String, bool>,
    /// Some region hit the length cap and was closed early.
    pub truncated: bool,
    pub tracks: Vec<TrackInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSummary {
    pub version_id: usize,
    pub parent_version: Option<usize>,
    pub request: Option<InfillRequest>,
    pub controls: ControlSet,
    pub matched: BTreeMap<String, bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    #[serde(default = "v1")]
    pub api: String,
    pub song_id: String,
    pub created_at: u64,
    pub bars: u32,
    pub time_signature: TimeSignature,
    pub tracks: Vec<TrackInfo>,
    pub truncated_from_bars: Option<u32>,
    pub versions: Vec<VersionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionResponse {
    #[serde(default = "v1")]
    pub api: String,
    pub song_id: String,
    pub version_id: usize,
    pub parent_version: Option<usize>,
    pub tokens: String,
    pub controls: ControlSet,
    pub tracks: Vec<TrackInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestsetResponse {
    #[serde(default = "v1")]
    pub api: String,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub api: String,
    pub error: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_request_takes_defaults() {
        let r: InfillRequest = serde_json::from_str(r#"{"regions":[{"bar":0,"track":1}]}"#).unwrap();
        assert_eq!((r.temperature, r.seed, r.parent_version), (1.0, 0, None));
        assert_eq!(r.control_overrides, ControlOverrides::default());
    }

    #[test]
    fn override_keys_are_indices() {
        let r: InfillRequest = serde_json::from_str(
            r#"{"regions":[],"control_overrides":{"tracks":{"0":{"density":8}},"bars":{"3":{"strain":2}}}}"#,
        )
        .unwrap();
        assert_eq!(r.control_overrides.tracks[&0].density, Some(8));
        assert_eq!(r.control_overrides.bars[&3].strain, Some(2));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<InfillRequest>(r#"{"regions":[],"sead":1}"#).is_err());
        assert!(serde_json::from_str::<InfillRequest>(
            r#"{"regions":[],"control_overrides":{"tracks":{"0":{"dense":1}}}}"#
        )
        .is_err());
    }
}
