use musfill_core::codec::{encode_song, PAD_ID, VOCAB_SIZE};
use musfill_core::controls::compute_control_set;
use musfill_core::masking::{finetune_mask, FinetuneMode};
use musfill_core::model::{
    cross_entropy, forward, gradient_check, jitter, load_checkpoint, save_checkpoint, EncodedExample,
    IncrementalDecoder, ModelConfig, ModelParams,
};
use musfill_core::synth::reference_song;

fn example() -> EncodedExample {
    let song = reference_song();
    let seq = encode_song(&song, Some(&compute_control_set(&song).unwrap())).unwrap();
    EncodedExample::from(&finetune_mask(&seq, FinetuneMode::TrackAllBars, 2).unwrap())
}

fn small(pre_norm: bool) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        feedforward_dim: 32,
        pre_norm,
        ..ModelConfig::toy()
    }
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gradients_match_finite_differences_on_toy_config() {
    let mut p = ModelParams::<f64>::init(&ModelConfig::toy(), 11);
    jitter(&mut p, 0.02, 3);
    let report = gradient_check(&p, &example(), 300, 9).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn gradients_match_finite_differences_post_norm() {
    let mut p = ModelParams::<f64>::init(&small(false), 12);
    jitter(&mut p, 0.05, 4);
    let report = gradient_check(&p, &example(), 300, 10).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn uniform_logits_cost_log_vocab() {
    let mut p = ModelParams::<f64>::init(&small(true), 1);
    p.output.w.fill(0.0);
    p.output.b.fill(0.0);
    let ex = example();
    let m = vec![true; ex.decoder_input.len()];
    let logits = forward(&p, &ex.encoder, &ex.decoder_input, &vec![true; ex.encoder.len()], &m).unwrap();
    let (loss, _) = cross_entropy(&logits, &ex.decoder_target, &m);
    assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-6);
}

#[test]
fn decoder_is_causal() {
    for pre_norm in [true, false] {
        let p = ModelParams::<f64>::init(&small(pre_norm), 5);
        let ex = example();
        let em = vec![true; ex.encoder.len()];
        let dm = vec![true; ex.decoder_input.len()];
        let base = forward(&p, &ex.encoder, &ex.decoder_input, &em, &dm).unwrap();
        let j = ex.decoder_input.len() / 2;
        let mut changed = ex.decoder_input.clone();
        for t in &mut changed[j..] {
            *t = (*t + 17) % VOCAB_SIZE as u32;
        }
        let other = forward(&p, &ex.encoder, &changed, &em, &dm).unwrap();
        for i in 0..j {
            let d = max_abs_diff(base.row(i).iter().copied(), other.row(i).iter().copied());
            assert!(d < 1e-12, "position {i} moved by {d}");
        }
        let later = max_abs_diff(base.row(j).iter().copied(), other.row(j).iter().copied());
        assert!(later > 1e-6);
    }
}

#[test]
fn padding_does_not_change_outputs() {
    for pre_norm in [true, false] {
        let p = ModelParams::<f64>::init(&small(pre_norm), 6);
        let ex = example();
        let em = vec![true; ex.encoder.len()];
        let dm = vec![true; ex.decoder_input.len()];
        let base = forward(&p, &ex.encoder, &ex.decoder_input, &em, &dm).unwrap();

        let mut enc = ex.encoder.clone();
        enc.extend([PAD_ID; 7]);
        let mut enc_mask = em.clone();
        enc_mask.extend([false; 7]);
        let mut dec = ex.decoder_input.clone();
        dec.extend([PAD_ID; 5]);
        let mut dec_mask = dm.clone();
        dec_mask.extend([false; 5]);
        let padded = forward(&p, &enc, &dec, &enc_mask, &dec_mask).unwrap();
        for i in 0..ex.decoder_input.len() {
            let d = max_abs_diff(base.row(i).iter().copied(), padded.row(i).iter().copied());
            assert!(d < 1e-10, "position {i} moved by {d}");
        }
        let (l0, _) = cross_entropy(&base, &ex.decoder_target, &dm);
        let mut tgt = ex.decoder_target.clone();
        tgt.extend([PAD_ID; 5]);
        let (l1, _) = cross_entropy(&padded, &tgt, &dec_mask);
        assert!((l0 - l1).abs() < 1e-10);
    }
}

#[test]
fn incremental_decoding_matches_full_pass() {
    for pre_norm in [true, false] {
        let p = ModelParams::<f64>::init(&small(pre_norm), 7);
        let ex = example();
        let full = forward(
            &p,
            &ex.encoder,
            &ex.decoder_input,
            &vec![true; ex.encoder.len()],
            &vec![true; ex.decoder_input.len()],
        )
        .unwrap();
        let mut dec = IncrementalDecoder::new(&p, &ex.encoder).unwrap();
        for (i, &t) in ex.decoder_input.iter().enumerate() {
            let row = dec.step(t).unwrap();
            let d = max_abs_diff(row.iter().copied(), full.row(i).iter().copied());
            assert!(d < 1e-10, "step {i}: {d}");
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let p = ModelParams::<f32>::init(&small(true), 8);
    let q = load_checkpoint(&save_checkpoint(&p)).unwrap();
    let ex = example();
    let em = vec![true; ex.encoder.len()];
    let dm = vec![true; ex.decoder_input.len()];
    assert_eq!(
        forward(&p, &ex.encoder, &ex.decoder_input, &em, &dm).unwrap(),
        forward(&q, &ex.encoder, &ex.decoder_input, &em, &dm).unwrap()
    );
}
