use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use musfill_bench::{controlled_tokens, song};
use musfill_core::codec::{decode_tokens, encode_song};
use musfill_core::controls::compute_control_set;
use musfill_core::masking::{finetune_mask, pretrain_mask, FinetuneMode};
use musfill_core::model::{forward, EncodedExample, ModelConfig, ModelParams};
use musfill_core::sampler::{sample_infill, SampleConfig};

fn codec(c: &mut Criterion) {
    let s = song(16, 1);
    let controls = compute_control_set(&s).unwrap();
    let seq = controlled_tokens(&s);
    c.bench_function("controls/16 bars", |b| b.iter(|| compute_control_set(black_box(&s)).unwrap()));
    c.bench_function("encode/16 bars", |b| b.iter(|| encode_song(black_box(&s), Some(&controls)).unwrap()));
    c.bench_function("decode/16 bars", |b| b.iter(|| decode_tokens(black_box(&seq)).unwrap()));
}

fn masking(c: &mut Criterion) {
    let seq = controlled_tokens(&song(16, 2));
    let mut seed = 0u64;
    c.bench_function("pretrain_mask/16 bars", |b| {
        b.iter(|| {
            seed += 1;
            pretrain_mask(black_box(&seq), seed)
        })
    });
}

fn model(c: &mut Criterion) {
    let params = ModelParams::<f32>::init(&ModelConfig::toy(), 1);
    let seq = controlled_tokens(&song(8, 3));
    let ex = EncodedExample::from(&finetune_mask(&seq, FinetuneMode::TrackAllBars, 1).unwrap());
    let (em, dm) = (vec![true; ex.encoder.len()], vec![true; ex.decoder_input.len()]);
    c.bench_function("forward/toy 8 bars", |b| {
        b.iter(|| forward(&params, black_box(&ex.encoder), &ex.decoder_input, &em, &dm).unwrap())
    });
}

fn sampler(c: &mut Criterion) {
    let params = ModelParams::<f32>::init(&ModelConfig::toy(), 2);
    let seq = controlled_tokens(&song(8, 4));
    let masked = finetune_mask(&seq, FinetuneMode::BarAllTracks, 3).unwrap();
    let cfg = SampleConfig {
        temperature: 1.0,
        seed: 5,
        ..SampleConfig::default()
    };
    let mut group = c.benchmark_group("sampler");
    group.sample_size(10);
    group.bench_function("bar_all_tracks/toy 8 bars", |b| {
        b.iter(|| sample_infill(&params, black_box(&masked), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, codec, masking, model, sampler);
criterion_main!(benches);
