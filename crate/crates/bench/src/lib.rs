//! Shared inputs for the benchmarks.

use musfill_core::codec::{encode_song, TokenSequence};
use musfill_core::controls::compute_control_set;
use musfill_core::synth::{random_song, SynthOptions};
use musfill_core::QuantizedSong;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn song(bars: u32, seed: u64) -> QuantizedSong {
    let opts = SynthOptions {
        min_bars: bars,
        max_bars: bars,
        ..SynthOptions::default()
    };
    random_song(&mut ChaCha8Rng::seed_from_u64(seed), &opts)
}

pub fn controlled_tokens(song: &QuantizedSong) -> TokenSequence {
    encode_song(song, Some(&compute_control_set(song).unwrap())).unwrap()
}
