use musfill_core::codec::{
    decode_tokens, encode_song, read_controls, replace_controls, validate_grammar, TokenSequence, VOCAB_SIZE,
};
use musfill_core::controls::compute_control_set;
use musfill_core::midi::{read_song, write_midi};
use musfill_core::synth::{random_song_binned_tempo, SynthOptions};
use musfill_core::QuantizedSong;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn song(seed: u64) -> QuantizedSong {
    random_song_binned_tempo(&mut ChaCha8Rng::seed_from_u64(seed), &SynthOptions::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(seed in any::<u64>()) {
        let s = song(seed);
        let plain = encode_song(&s, None).unwrap();
        prop_assert!(validate_grammar(&plain).is_ok());
        prop_assert_eq!(&decode_tokens(&plain).unwrap(), &s);

        let controls = compute_control_set(&s).unwrap();
        let with = encode_song(&s, Some(&controls)).unwrap();
        prop_assert!(validate_grammar(&with).is_ok());
        prop_assert_eq!(&decode_tokens(&with).unwrap(), &s);
        prop_assert_eq!(read_controls(&with), Some(controls));
        prop_assert_eq!(TokenSequence::parse(&with.to_text()).unwrap(), with);
    }

    #[test]
    fn replacing_controls_matches_fresh_encoding(seed in any::<u64>(), bump in 0u8..12) {
        let s = song(seed);
        let mut controls = compute_control_set(&s).unwrap();
        let with = encode_song(&s, Some(&controls)).unwrap();
        for t in &mut controls.tracks {
            t.density = (t.density + bump) % 10;
        }
        for b in &mut controls.bars {
            b.diameter = (b.diameter + bump) % 12;
        }
        controls.key_bin = (controls.key_bin + bump) % 24;
        let replaced = replace_controls(&with, &controls).unwrap();
        prop_assert_eq!(&replaced, &encode_song(&s, Some(&controls)).unwrap());
        prop_assert!(replace_controls(&encode_song(&s, None).unwrap(), &controls).is_err());
    }

    #[test]
    fn quantize_is_idempotent(seed in any::<u64>()) {
        let s = song(seed);
        prop_assume!(s.tracks.iter().all(|t| !t.notes.is_empty()));
        let (once, _) = read_song(&write_midi(&s).unwrap()).unwrap();
        let (twice, _) = read_song(&write_midi(&once).unwrap()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(&once.tracks, &s.tracks);
        prop_assert_eq!(once.time_signature, s.time_signature);
        prop_assert_eq!(once.bars, s.bars);
        prop_assert_eq!(
            musfill_core::controls::bin_tempo(once.tempo_bpm),
            musfill_core::controls::bin_tempo(s.tempo_bpm)
        );
    }
}

proptest! {
    #[test]
    fn validator_never_panics(ids in prop::collection::vec(0u32..VOCAB_SIZE as u32, 0..80)) {
        let seq = TokenSequence::from_ids(&ids).unwrap();
        if validate_grammar(&seq).is_ok() {
            prop_assert!(decode_tokens(&seq).is_ok());
        }
    }

    #[test]
    fn dropping_a_note_token_is_caught_or_harmless(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let s = song(seed);
        let mut seq = encode_song(&s, None).unwrap();
        let i = pick.index(seq.len());
        seq.tokens.remove(i);
        // Whatever survives validation must still decode.
        if validate_grammar(&seq).is_ok() {
            prop_assert!(decode_tokens(&seq).is_ok());
        }
    }
}
