use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehab_core::autodiff::{ParamSet, Tape};
use rehab_core::models::{
    predict_score, Autoencoder, AutoencoderConfig, MultiScaleScorer, ScorerConfig,
};
use rehab_core::nn::{Bound, Direction, Lstm};

fn lstm_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    let lstm = Lstm::new(&mut params, "lstm", 16, 32, &mut rng);
    let mut group = c.benchmark_group("lstm_forward");
    for len in [32, 128] {
        let x: Vec<f64> = (0..8 * len * 16)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, &len| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = Bound::new(&params, &mut tape);
                let xv = tape.constant(&[8, len, 16], x.clone()).unwrap();
                let h = lstm
                    .forward(&mut tape, &bound, xv, Direction::Forward)
                    .unwrap();
                black_box(tape.value(h)[0])
            })
        });
    }
    group.finish();
}

fn lstm_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    let lstm = Lstm::new(&mut params, "lstm", 16, 32, &mut rng);
    let x: Vec<f64> = (0..8 * 48 * 16)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    c.bench_function("lstm_forward_backward_48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = Bound::new(&params, &mut tape);
            let xv = tape.constant(&[8, 48, 16], x.clone()).unwrap();
            let h = lstm
                .forward(&mut tape, &bound, xv, Direction::Forward)
                .unwrap();
            let loss = tape.mean(h).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

fn inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let features = Array2::from_shape_fn((48, 15), |_| rng.random_range(-1.0..1.0));
    let ae = Autoencoder::new(AutoencoderConfig::default(), 15, 0).unwrap();
    c.bench_function("autoencoder_encode_48", |b| {
        b.iter(|| black_box(ae.encode(&[features.view()]).unwrap()))
    });
    let latent = Array2::from_shape_fn((48, 24), |_| rng.random_range(-1.0..1.0));
    let scorer = MultiScaleScorer::new(ScorerConfig::default(), 24, 3, 0).unwrap();
    c.bench_function("multiscale_score_48", |b| {
        b.iter(|| black_box(predict_score(&scorer, latent.view()).unwrap()))
    });
}

criterion_group!(benches, lstm_forward, lstm_backward, inference);
criterion_main!(benches);
