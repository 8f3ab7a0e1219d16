mod common;

use proptest::prelude::*;
use rehab_core::eval::{synthesize_recording, Performance, SynthConfig};
use rehab_core::features::{
    context_window, extract_features, scale_score, unscale_score, FeatureSpec,
};
use rehab_core::skeleton::{
    equalize_lengths, resample_channel, to_matrix, Cohort, Dataset, ExerciseId, MatrixContent,
    Recording,
};

fn recording(ex: ExerciseId, frames: usize, seed: u64) -> Recording {
    let cfg = SynthConfig::default();
    let perf = Performance {
        alpha: 0.8,
        ..Performance::TEMPLATE
    };
    synthesize_recording(
        &cfg,
        ex,
        frames,
        perf,
        seed,
        &format!("s{seed}"),
        Cohort::Impaired,
    )
    .unwrap()
}

fn dataset(lengths: &[usize]) -> Dataset {
    Dataset::new(
        lengths
            .iter()
            .enumerate()
            .map(|(i, &m)| recording(ExerciseId::E1, m, i as u64))
            .collect(),
    )
}

#[test]
fn equalize_targets_rounded_mean() {
    let out = equalize_lengths(&dataset(&[80, 100, 120]), ExerciseId::E1).unwrap();
    assert!(out.recordings.iter().all(|r| r.len() == 100));
    // half rounds up
    let out = equalize_lengths(&dataset(&[10, 11]), ExerciseId::E1).unwrap();
    assert!(out.recordings.iter().all(|r| r.len() == 11));
}

#[test]
fn two_point_channel_resamples_linearly() {
    assert_eq!(
        resample_channel(&[0.0, 1.0], 5),
        vec![0.0, 0.25, 0.5, 0.75, 1.0]
    );
}

#[test]
fn equalize_at_target_is_identity() {
    let ds = dataset(&[37]);
    let out = equalize_lengths(&ds, ExerciseId::E1).unwrap();
    let (a, b) = (
        to_matrix(&ds.recordings[0], MatrixContent::Both),
        to_matrix(&out.recordings[0], MatrixContent::Both),
    );
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
}

#[test]
fn equalize_requires_recordings() {
    assert!(equalize_lengths(&dataset(&[20]), ExerciseId::E4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equalize_is_idempotent(lengths in prop::collection::vec(5usize..60, 1..4)) {
        let once = equalize_lengths(&dataset(&lengths), ExerciseId::E1).unwrap();
        let twice = equalize_lengths(&once, ExerciseId::E1).unwrap();
        for (a, b) in once.recordings.iter().zip(&twice.recordings) {
            let (a, b) = (to_matrix(a, MatrixContent::Both), to_matrix(b, MatrixContent::Both));
            prop_assert_eq!(a.dim(), b.dim());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn resampling_stays_within_channel_bounds(
        values in prop::collection::vec(-100.0f64..100.0, 2..40),
        target in 2usize..120,
    ) {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = resample_channel(&values, target);
        prop_assert_eq!(out.len(), target);
        prop_assert_eq!(out[0], values[0]);
        prop_assert_eq!(out[target - 1], values[values.len() - 1]);
        prop_assert!(out.iter().all(|v| (lo..=hi).contains(v)));
    }

    #[test]
    fn equalized_positions_stay_within_bounds(lengths in prop::collection::vec(5usize..40, 2..4)) {
        let ds = dataset(&lengths);
        let out = equalize_lengths(&ds, ExerciseId::E1).unwrap();
        for (before, after) in ds.recordings.iter().zip(&out.recordings) {
            let (b, a) = (to_matrix(before, MatrixContent::Positions), to_matrix(after, MatrixContent::Positions));
            for c in 0..b.ncols() {
                let col = b.column(c);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.column(c).iter().all(|v| (lo..=hi).contains(v)));
            }
        }
    }

    #[test]
    fn features_are_translation_invariant(
        seed in any::<u64>(),
        ex in 0usize..5,
        offset in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let ex = ExerciseId::ALL[ex];
        let rec = recording(ex, 20, seed);
        let mut moved = rec.clone();
        for f in &mut moved.frames {
            for p in &mut f.positions {
                for (c, o) in p.iter_mut().zip(offset) {
                    *c += o;
                }
            }
        }
        let spec = FeatureSpec::default_for(ex);
        let (a, b) = (extract_features(&rec, &spec).unwrap(), extract_features(&moved, &spec).unwrap());
        prop_assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn context_window_center_block_is_input(
        m in 1usize..30,
        d in 1usize..5,
        half in 0usize..4,
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let x = ndarray::Array2::from_shape_vec((m, d), common::away_from_zero(&mut r, m * d)).unwrap();
        let w = 2 * half + 1;
        let out = context_window(x.view(), w).unwrap();
        prop_assert_eq!(out.dim(), (m, w * d));
        for t in 0..m {
            prop_assert_eq!(out.slice(ndarray::s![t, half * d..(half + 1) * d]), x.row(t));
        }
        if w == 1 {
            prop_assert_eq!(&out, &x);
        }
    }

    #[test]
    fn scale_score_is_affine(k in 0u32..=1024, j in 0u32..=1024, l in 0u32..=16) {
        // dyadic points keep every operation exact
        let (x, y, lam) = (k as f64 / 1024.0, j as f64 / 1024.0, l as f64 / 16.0);
        prop_assert_eq!(scale_score(50.0 * x).unwrap(), x);
        let mix = lam * 50.0 * x + (1.0 - lam) * 50.0 * y;
        prop_assert_eq!(
            scale_score(mix).unwrap(),
            lam * scale_score(50.0 * x).unwrap() + (1.0 - lam) * scale_score(50.0 * y).unwrap()
        );
        prop_assert_eq!(unscale_score(scale_score(50.0 * x).unwrap()), 50.0 * x);
    }

    #[test]
    fn scale_score_is_strictly_monotone(a in 0.0f64..50.0, b in 0.0f64..50.0) {
        prop_assume!(a < b);
        prop_assert!(scale_score(a).unwrap() < scale_score(b).unwrap());
    }
}

#[test]
fn scale_score_endpoints_and_domain() {
    assert_eq!(scale_score(50.0).unwrap(), 1.0);
    assert_eq!(scale_score(0.0).unwrap(), 0.0);
    assert!(scale_score(50.5).is_err());
    assert!(scale_score(-0.1).is_err());
}
