//! A toy model must be able to memorise a tiny corpus.

use musfill_core::codec::encode_song;
use musfill_core::controls::compute_control_set;
use musfill_core::masking::{finetune_mask, FinetuneMode};
use musfill_core::model::train::evaluate;
use musfill_core::model::{EncodedExample, ModelConfig, ModelParams, TrainConfig, Trainer};
use musfill_core::synth::{random_song, SynthOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn toy_model_memorises_ten_examples() {
    let opts = SynthOptions {
        min_bars: 4,
        max_bars: 4,
        max_notes_per_bar: 4,
        ..SynthOptions::default()
    };
    let corpus: Vec<EncodedExample> = (0..10u64)
        .map(|i| {
            let s = random_song(&mut ChaCha8Rng::seed_from_u64(100 + i), &opts);
            let seq = encode_song(&s, Some(&compute_control_set(&s).unwrap())).unwrap();
            EncodedExample::from(&finetune_mask(&seq, FinetuneMode::ALL[i as usize % 3], i).unwrap())
        })
        .collect();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: corpus.len(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(ModelParams::<f32>::init(&ModelConfig::toy(), 1), &cfg).without_dropout();
    let mut accuracy = 0.0;
    for step in 1..=2000 {
        trainer.step(&corpus).unwrap();
        if step % 25 == 0 {
            accuracy = evaluate(&trainer.params, &corpus).unwrap().accuracy();
            if accuracy >= 0.99 {
                break;
            }
        }
    }
    assert!(accuracy >= 0.99, "accuracy {accuracy}");
}
