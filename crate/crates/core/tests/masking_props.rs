use musfill_core::codec::{encode_song, validate_grammar, Token, TokenSequence};
use musfill_core::controls::compute_control_set;
use musfill_core::masking::{
    finetune_mask, pretrain_mask, splice, target_segments, FinetuneMode, MaskedExample, PRETRAIN_MASK_FRACTION,
};
use musfill_core::synth::{random_song, SynthOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sequence(seed: u64, controls: bool) -> TokenSequence {
    let s = random_song(&mut ChaCha8Rng::seed_from_u64(seed), &SynthOptions::default());
    let c = controls.then(|| compute_control_set(&s).unwrap());
    encode_song(&s, c.as_ref()).unwrap()
}

fn reconstruct(ex: &MaskedExample) -> Vec<Token> {
    splice(&ex.encoder_input.tokens, &target_segments(&ex.decoder_target.tokens)).unwrap()
}

/// Chi-square critical value for 2 degrees of freedom at p = 0.01.
const CHI2_DF2_P01: f64 = 9.210_340_371_976_18;

#[test]
fn pretrain_statistics_over_ten_thousand_examples() {
    let mut counts = [0usize; 4];
    for i in 0..10_000u64 {
        let seq = sequence(i, i % 2 == 0);
        let ex = pretrain_mask(&seq, i.wrapping_mul(31));
        let masked: usize = ex.spans.iter().map(|s| s.len()).sum();
        let budget = (PRETRAIN_MASK_FRACTION * seq.len() as f64).floor() as usize;
        assert!(masked <= budget, "example {i}: {masked} > {budget}");
        assert_eq!(reconstruct(&ex), seq.tokens, "example {i}");
        for s in &ex.spans {
            counts[s.len()] += 1;
        }
    }
    let n = (counts[1] + counts[2] + counts[3]) as f64;
    let expected = [(1, 0.25), (2, 0.25), (3, 0.5)];
    let chi2: f64 = expected
        .iter()
        .map(|&(len, p)| (counts[len] as f64 - n * p).powi(2) / (n * p))
        .sum();
    assert!(chi2 < CHI2_DF2_P01, "chi2 {chi2:.3} over {counts:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn finetune_masks_reconstruct(seed in any::<u64>(), mode in 0usize..3, controls in any::<bool>()) {
        let seq = sequence(seed, controls);
        let ex = finetune_mask(&seq, FinetuneMode::ALL[mode], seed ^ 5).unwrap();
        prop_assert_eq!(reconstruct(&ex), seq.tokens.clone());
        prop_assert_eq!(ex.decoder_input.len(), ex.decoder_target.len());
        let masks = ex.encoder_input.tokens.iter().filter(|&&t| t == Token::Mask).count();
        let eos = ex.decoder_target.tokens.iter().filter(|&&t| t == Token::Eos).count();
        prop_assert_eq!(masks, eos);
        prop_assert!(masks >= 1);
        // Every masked cell is a whole track segment.
        for seg in target_segments(&ex.decoder_target.tokens) {
            prop_assert!(matches!(seg[0], Token::Track(_)));
        }
        prop_assert!(validate_grammar(&seq).is_ok());
    }

    #[test]
    fn pretrain_decoder_pairs_line_up(seed in any::<u64>()) {
        let seq = sequence(seed, true);
        let ex = pretrain_mask(&seq, seed);
        prop_assert_eq!(ex.decoder_input.len(), ex.decoder_target.len());
        let mut prev_end = None;
        for s in &ex.spans {
            prop_assert!((1..=3).contains(&s.len()));
            if let Some(e) = prev_end {
                prop_assert!(s.u > e + 1);
            }
            prev_end = Some(s.v);
        }
    }
}
