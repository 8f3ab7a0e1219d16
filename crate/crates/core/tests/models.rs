mod common;

use common::{early_stopping_run, pca_vs_svd, small_autoencoder, wavy_sequences};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rehab_core::autodiff::{OptimizerConfig, Tape};
use rehab_core::models::{
    pca_fit, pca_reconstruct, pooled_length, split_indices, train_score_model, Autoencoder,
    AutoencoderConfig, MultiScaleScorer, ScorerConfig, Standardizer, TrainConfig, BRANCH_SCALES,
};
use rehab_core::nn::Bound;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn pca_matches_svd_oracle(seed in any::<u64>()) {
        let errs = pca_vs_svd(seed, 50, 10);
        for (k, (pca, oracle)) in errs.iter().enumerate() {
            prop_assert!((pca - oracle).abs() <= 1e-9, "dims {}: {pca} vs {oracle}", k + 1);
        }
        prop_assert!(errs.windows(2).all(|w| w[1].0 <= w[0].0 + 1e-12));
        prop_assert!(errs[9].0 < 1e-20);
    }

    #[test]
    fn branches_align_for_any_length(m in 1usize..80) {
        let scorer = MultiScaleScorer::new(ScorerConfig::default(), 3, 1, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&scorer.params, &mut tape);
        let x = tape.constant(&[1, m, 3], vec![0.1; m * 3]).unwrap();
        let outs = scorer.branch_outputs(&mut tape, &bound, x).unwrap();
        prop_assert_eq!(outs.len(), BRANCH_SCALES.len());
        for o in outs {
            prop_assert_eq!(tape.shape(o)[1], pooled_length(m));
        }
    }
}

#[test]
fn encoder_penalty_leaves_decoder_gradients_zero() {
    let ae = Autoencoder::new(small_autoencoder(), 6, 3).unwrap();
    let mut params = ae.params.clone();
    let mut tape = Tape::new();
    let bound = Bound::new(&params, &mut tape);
    let weights: Vec<_> = ae
        .encoder_weight_ids()
        .iter()
        .map(|&id| bound.var(id))
        .collect();
    let l1 = tape.l1_norm(&weights).unwrap();
    let loss = tape.scale(l1, 1e-4).unwrap();
    let grads = tape.backward(loss).unwrap();
    bound.store_grads(&mut params, &grads);
    let enc = ae.encoder_weight_ids();
    let mut decoder_params = 0;
    for id in params.ids() {
        let g = params.get(id).grad.as_ref().unwrap();
        if enc.contains(&id) {
            assert!(g.iter().all(|&v| v.abs() == 1e-4), "{}", params.name(id));
        } else {
            assert!(g.iter().all(|&v| v == 0.0), "{}", params.name(id));
            if params.name(id).starts_with("dec") || params.name(id).starts_with("readout") {
                decoder_params += 1;
            }
        }
    }
    assert!(decoder_params > 0);
}

#[test]
fn zero_dataset_is_reconstructed_exactly() {
    let seqs = vec![Array2::<f64>::zeros((12, 5)); 6];
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let train = TrainConfig {
        l1_lambda: 0.0,
        max_epochs: 400,
        patience: 400,
        optimizer: OptimizerConfig::adam(1e-2),
        ..TrainConfig::autoencoder()
    };
    let (ae, log) = Autoencoder::fit(small_autoencoder(), &views, &train).unwrap();
    assert!(log.best_val_loss < 1e-6, "{}", log.best_val_loss);
    assert!(ae.reconstruction_mse(&views).unwrap() < 1e-6);
}

#[test]
fn planar_data_pca_and_autoencoder_agree() {
    // every frame lies on a 2-D plane through the origin
    let mut r = common::rng(9);
    let basis = Array2::from_shape_fn((2, 6), |_| r.random_range(-1.0..1.0));
    let seqs: Vec<Array2<f64>> = (0..24)
        .map(|_| {
            let (f, p) = (r.random_range(0.2..0.4), r.random_range(0.0..6.0));
            let codes =
                Array2::from_shape_fn((24, 2), |(t, c)| (t as f64 * f + p + c as f64 * 1.3).sin());
            codes.dot(&basis)
        })
        .collect();
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let train = TrainConfig {
        l1_lambda: 0.0,
        max_epochs: 3000,
        patience: 300,
        optimizer: OptimizerConfig::adam(1e-2),
        ..TrainConfig::autoencoder()
    };
    let config = AutoencoderConfig {
        hidden1: 12,
        hidden2: 6,
        latent: 2,
        latent_kernel: 3,
        decoder_hidden: vec![8, 12],
    };
    let (ae, log) = Autoencoder::fit(config, &views, &train).unwrap();
    eprintln!(
        "planar best epoch {} of {}",
        log.best_epoch,
        log.last_epoch()
    );
    let (tr, val) = split_indices(seqs.len(), train.validation_fraction, train.seed).unwrap();
    let val_views: Vec<_> = val.iter().map(|&i| views[i]).collect();
    let ae_mse = ae.reconstruction_mse(&val_views).unwrap();

    // PCA in the same standardized units
    let st = Standardizer::fit(tr.iter().map(|&i| views[i])).unwrap();
    let stack = |idx: &[usize]| {
        let rows: Vec<Array2<f64>> = idx.iter().map(|&i| st.apply(views[i]).unwrap()).collect();
        ndarray::concatenate(
            ndarray::Axis(0),
            &rows.iter().map(|a| a.view()).collect::<Vec<_>>(),
        )
        .unwrap()
    };
    let (xt, xv) = (stack(&tr), stack(&val));
    let pca = pca_fit(xt.view(), 2).unwrap();
    let recon = pca_reconstruct(&pca, xv.view()).unwrap();
    let pca_mse = (&recon - &xv).mapv(|v| v * v).mean().unwrap();
    eprintln!("planar: pca {pca_mse:e} autoencoder {ae_mse:e}");
    assert!(pca_mse < 1e-3);
    assert!(ae_mse < 1e-3, "autoencoder {ae_mse:e}");
}

#[test]
fn scorer_learns_mean_of_a_latent_channel() {
    let mut r = common::rng(4);
    let (n, m, d) = (60, 16, 3);
    let inputs: Vec<Array2<f64>> = (0..n)
        .map(|_| {
            let level = r.random_range(0.1..0.9);
            Array2::from_shape_fn((m, d), |(_, c)| {
                if c == 0 {
                    level + 0.1 * r.random_range(-1.0..1.0)
                } else {
                    r.random_range(-1.0..1.0)
                }
            })
        })
        .collect();
    let targets: Vec<f64> = inputs.iter().map(|x| x.column(0).mean().unwrap()).collect();
    let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
    let train = TrainConfig {
        max_epochs: 400,
        patience: 60,
        optimizer: OptimizerConfig::adam(3e-3),
        ..TrainConfig::scorer()
    };
    let model = MultiScaleScorer::new(ScorerConfig::default(), d, 1, 0).unwrap();
    let out = train_score_model(model, &views, &targets, &train).unwrap();
    assert!(out.val_mse < 0.01, "val mse {}", out.val_mse);
}

#[test]
fn early_stopping_restores_best_at_both_patience_scales() {
    // the 1000 and 25 epoch settings, each scaled down by 25
    for (patience, max_epochs) in [(40, 600), (1, 600)] {
        let run = early_stopping_run(patience, max_epochs);
        assert!(run.stopped_early, "patience {patience} never triggered");
        assert!(
            run.holds(),
            "patience {patience}: best {} last {}",
            run.best_epoch,
            run.last_epoch
        );
    }
}

#[test]
fn autoencoder_training_is_deterministic() {
    let seqs = wavy_sequences(1, 6, 10, 3);
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let train = TrainConfig {
        max_epochs: 15,
        ..TrainConfig::autoencoder()
    };
    let (a, la) = Autoencoder::fit(small_autoencoder(), &views, &train).unwrap();
    let (b, lb) = Autoencoder::fit(small_autoencoder(), &views, &train).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params.to_json().unwrap(), b.params.to_json().unwrap());
}
