//! Controllable multi-track music infilling.
//!
//! The crate is organised as a pipeline:
//!
//! * [`midi`] reads and writes Standard MIDI Files and quantizes them into a
//!   [`QuantizedSong`] on a sixteenth-note grid.
//! * [`spiral`] places pitches on the spiral array, detects the key and
//!   measures per-bar tonal tension.
//! * [`controls`] turns a song into binned control values ([`ControlSet`]).
//! * [`codec`] maps songs (optionally with controls) to and from a 360-token
//!   vocabulary and validates the token grammar.
//! * [`masking`] builds span-masked (pretraining) and cell-masked (finetuning)
//!   encoder/decoder examples.
//! * [`model`] is a small transformer encoder-decoder with hand-written
//!   backpropagation, Adam training and checkpointing.
//! * [`sampler`] decodes infills under the track grammar.
//! * [`metrics`] and [`harness`] score infills against the originals.
//! * [`corpus`] builds windowed, augmented, split training shards.

pub mod codec;
pub mod controls;
pub mod corpus;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod midi;
pub mod model;
pub mod sampler;
pub mod song;
pub mod spiral;
pub mod synth;

pub use codec::{
    build_vocab, decode_tokens, encode_song, validate_grammar, GrammarError, Token, TokenSequence,
    Vocabulary,
};
pub use controls::{compute_control_set, Calibration, ControlSet, TrackStats};
pub use masking::{FinetuneMode, MaskMode, MaskSpan, MaskedExample};
pub use metrics::{Category, FeatureVector, MetricReport};
pub use model::{ModelConfig, ModelParams, TrainConfig};
pub use song::{QuantizedNote, QuantizedSong, QuantizedTrack, Role, TimeSignature};
pub use spiral::{KeyEstimate, SpiralPoint};
