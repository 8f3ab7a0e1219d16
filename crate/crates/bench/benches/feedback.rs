use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rehab_core::eval::{synthesize_recording, template_recording, Performance, SynthConfig};
use rehab_core::feedback::{FeedbackConfig, FeedbackSession};
use rehab_core::skeleton::{Cohort, ExerciseId};

fn feedback_step(c: &mut Criterion) {
    let template = Arc::new(template_recording(ExerciseId::E1, 100, 2).unwrap());
    let live = synthesize_recording(
        &SynthConfig::default(),
        ExerciseId::E1,
        100,
        Performance {
            alpha: 0.7,
            ..Performance::TEMPLATE
        },
        3,
        "live",
        Cohort::Impaired,
    )
    .unwrap();
    let mut session = FeedbackSession::new(template, FeedbackConfig::default()).unwrap();
    let mut i = 0;
    c.bench_function("feedback_step", |b| {
        b.iter(|| {
            let fb = session
                .step(black_box(&live.frames[i % live.frames.len()]))
                .unwrap();
            i += 1;
            fb
        })
    });
}

criterion_group!(benches, feedback_step);
criterion_main!(benches);
