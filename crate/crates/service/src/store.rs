//! Sessions on disk: one directory per song holding `original.mid`,
//! `index.json` and one `v{n}.tokens` text file per version.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use musfill_core::codec::validate_grammar;
use musfill_core::midi::read_song;
use musfill_core::{ControlSet, QuantizedSong, TokenSequence};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;

use crate::api::{track_infos, InfillRequest, SessionSummary, VersionSummary, API_VERSION};

const INDEX_FILE: &str = "index.json";
const ORIGINAL_FILE: &str = "original.mid";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl ToString) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Version {
    pub id: usize,
    pub parent: Option<usize>,
    pub tokens: TokenSequence,
    pub controls: ControlSet,
    pub request: Option<InfillRequest>,
    pub matched: BTreeMap<String, bool>,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub song_id: String,
    pub original: QuantizedSong,
    pub created_at: u64,
    pub truncated_from_bars: Option<u32>,
    pub versions: Vec<Version>,
}

impl Session {
    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            api: API_VERSION.into(),
            song_id: self.song_id.clone(),
            created_at: self.created_at,
            bars: self.original.bars,
            time_signature: self.original.time_signature,
            tracks: track_infos(&self.original),
            truncated_from_bars: self.truncated_from_bars,
            versions: self
                .versions
                .iter()
                .map(|v| VersionSummary {
                    version_id: v.id,
                    parent_version: v.parent,
                    request: v.request.clone(),
                    controls: v.controls.clone(),
                    matched: v.matched.clone(),
                    truncated: v.truncated,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    api: String,
    song_id: String,
    created_at: u64,
    truncated_from_bars: Option<u32>,
    versions: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: usize,
    parent: Option<usize>,
    tokens_file: String,
    controls: ControlSet,
    request: Option<InfillRequest>,
    matched: BTreeMap<String, bool>,
    truncated: bool,
}

fn tokens_file(id: usize) -> String {
    format!("v{id}.tokens")
}

/// Write through a temporary file so a crash never leaves half an index.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub type SessionHandle = Arc<Mutex<Session>>;

/// All sessions, each behind its own lock so requests to one song run one
/// at a time while different songs proceed in parallel.
pub struct Store {
    root: PathBuf,
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl Store {
    /// Open (creating if needed) a store and load every session in it.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(root).map_err(io_err(root))? {
            let dir = entry.map_err(io_err(root))?.path();
            if dir.join(INDEX_FILE).is_file() {
                let s = load_session(&dir)?;
                sessions.insert(s.song_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        log::info!("loaded {} sessions from {}", sessions.len(), root.display());
        Ok(Self {
            root: root.to_path_buf(),
            sessions: RwLock::new(sessions),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get(&self, song_id: &str) -> Option<SessionHandle> {
        self.sessions.read().expect("store lock").get(song_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Persist a new session with `version0` and register it.
    pub fn create(
        &self,
        midi: &[u8],
        original: QuantizedSong,
        truncated_from_bars: Option<u32>,
        version0: Version,
    ) -> Result<SessionHandle, StoreError> {
        let mut sessions = self.sessions.write().expect("store lock");
        let song_id = loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if !sessions.contains_key(&id) && !self.root.join(&id).exists() {
                break id;
            }
        };
        let dir = self.root.join(&song_id);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        fs::write(dir.join(ORIGINAL_FILE), midi).map_err(io_err(&dir))?;
        let session = Session {
            song_id: song_id.clone(),
            original,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            truncated_from_bars,
            versions: vec![version0],
        };
        self.persist(&session)?;
        let handle = Arc::new(Mutex::new(session));
        sessions.insert(song_id, handle.clone());
        Ok(handle)
    }

    /// Write missing version files, then the index.
    pub fn persist(&self, session: &Session) -> Result<(), StoreError> {
        let dir = self.root.join(&session.song_id);
        let mut entries = Vec::with_capacity(session.versions.len());
        for v in &session.versions {
            let name = tokens_file(v.id);
            let path = dir.join(&name);
            if !path.exists() {
                write_atomic(&path, format!("{}\n", v.tokens.to_text()).as_bytes())?;
            }
            entries.push(IndexEntry {
                id: v.id,
                parent: v.parent,
                tokens_file: name,
                controls: v.controls.clone(),
                request: v.request.clone(),
                matched: v.matched.clone(),
                truncated: v.truncated,
            });
        }
        let index = IndexFile {
            api: API_VERSION.into(),
            song_id: session.song_id.clone(),
            created_at: session.created_at,
            truncated_from_bars: session.truncated_from_bars,
            versions: entries,
        };
        let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
        text.push('\n');
        write_atomic(&dir.join(INDEX_FILE), text.as_bytes())
    }
}

fn load_session(dir: &Path) -> Result<Session, StoreError> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index: IndexFile = serde_json::from_str(&text).map_err(|e| corrupt(&index_path, e))?;
    let midi_path = dir.join(ORIGINAL_FILE);
    let midi = fs::read(&midi_path).map_err(io_err(&midi_path))?;
    let (original, _) = read_song(&midi).map_err(|e| corrupt(&midi_path, e))?;
    let mut versions = Vec::with_capacity(index.versions.len());
    for (i, e) in index.versions.into_iter().enumerate() {
        let path = dir.join(&e.tokens_file);
        if e.id != i || e.parent.is_some_and(|p| p >= i) || (i > 0) != e.parent.is_some() {
            return Err(corrupt(&index_path, format!("version {i} breaks the version chain")));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let tokens = TokenSequence::parse(&text).map_err(|e| corrupt(&path, e))?;
        validate_grammar(&tokens).map_err(|e| corrupt(&path, e))?;
        versions.push(Version {
            id: e.id,
            parent: e.parent,
            tokens,
            controls: e.controls,
            request: e.request,
            matched: e.matched,
            truncated: e.truncated,
        });
    }
    if versions.is_empty() {
        return Err(corrupt(&index_path, "no versions"));
    }
    Ok(Session {
        song_id: index.song_id,
        original,
        created_at: index.created_at,
        truncated_from_bars: index.truncated_from_bars,
        versions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use musfill_core::codec::encode_song;
    use musfill_core::compute_control_set;
    use musfill_core::midi::write_midi;
    use musfill_core::synth::reference_song;

    fn version0() -> (Vec<u8>, QuantizedSong, Version) {
        let midi = write_midi(&reference_song()).unwrap();
        let (song, _) = read_song(&midi).unwrap();
        let controls = compute_control_set(&song).unwrap();
        let v = Version {
            id: 0,
            parent: None,
            tokens: encode_song(&song, Some(&controls)).unwrap(),
            controls,
            request: None,
            matched: BTreeMap::new(),
            truncated: false,
        };
        (midi, song, v)
    }

    #[test]
    fn sessions_survive_reopening() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let (midi, song, v0) = version0();
        let handle = store.create(&midi, song, None, v0.clone()).unwrap();
        let mut s = handle.try_lock().unwrap().clone();
        s.versions.push(Version {
            id: 1,
            parent: Some(0),
            ..v0
        });
        store.persist(&s).unwrap();

        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 1);
        let again = reopened.get(&s.song_id).unwrap().try_lock().unwrap().clone();
        assert_eq!(again, s);
    }

    #[test]
    fn broken_chain_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let (midi, song, v0) = version0();
        let id = store.create(&midi, song, None, v0).unwrap().try_lock().unwrap().song_id.clone();
        let index = dir.path().join(&id).join(INDEX_FILE);
        let text = fs::read_to_string(&index).unwrap().replace("\"parent\": null", "\"parent\": 0");
        fs::write(&index, text).unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::Corrupt { .. })));
    }
}
