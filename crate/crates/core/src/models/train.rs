//! Seeded train/validation splits and the early-stopping training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Optimizer, OptimizerConfig, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fraction held out for validation; the rest is trained on.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// `None` trains on the whole training split each step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// L1 coefficient on encoder weights (autoencoder only).
    pub l1_lambda: f64,
    /// Odd context window applied to scorer inputs.
    pub context_window: usize,
}

impl TrainConfig {
    /// Autoencoder defaults: patience 1000, up to 10000 epochs.
    pub fn autoencoder() -> Self {
        TrainConfig {
            validation_fraction: 0.2,
            patience: 1000,
            max_epochs: 10_000,
            batch_size: None,
            seed: 0,
            optimizer: OptimizerConfig::adam(1e-3),
            l1_lambda: 1e-4,
            context_window: 1,
        }
    }

    /// Scorer defaults: patience 25, up to 2000 epochs, context window 3.
    pub fn scorer() -> Self {
        TrainConfig {
            patience: 25,
            max_epochs: 2000,
            l1_lambda: 0.0,
            context_window: 3,
            ..Self::autoencoder()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(
                "validation fraction must lie in (0, 1)".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.l1_lambda < 0.0 {
            return Err(Error::Config("l1_lambda must be >= 0".into()));
        }
        if self.context_window.is_multiple_of(2) {
            return Err(Error::Config("context window must be odd".into()));
        }
        Ok(())
    }
}

/// Seeded, unstratified shuffle into (train, validation) index lists.
pub fn split_indices(
    n: usize,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 sequences, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub seed: u64,
}

impl TrainLog {
    /// One JSON object per line: `{"epoch", "train_loss", "val_loss"}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("plain record"));
        }
        out
    }

    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }
}

/// Gradient-based training with restore-best early stopping.
///
/// `batch_loss` records the loss for a list of training-set positions on a
/// fresh tape; `validate` scores the current parameters. Training stops once
/// `patience` epochs pass without a strictly lower validation loss, and
/// `params` is left holding the best epoch's values.
pub fn fit<F, V>(
    params: &mut ParamSet,
    cfg: &TrainConfig,
    n_train: usize,
    mut batch_loss: F,
    mut validate: V,
) -> Result<TrainLog>
where
    F: FnMut(&mut Tape, &Bound, &[usize]) -> Result<Var>,
    V: FnMut(&ParamSet) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_e90c);
    let mut order: Vec<usize> = (0..n_train).collect();
    let batch = cfg.batch_size.unwrap_or(n_train).min(n_train);

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        if batch < n_train {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = Bound::new(params, &mut tape);
            let loss = batch_loss(&mut tape, &bound, chunk).map_err(|e| match e {
                Error::NonFinite(op) => Error::Training {
                    epoch,
                    message: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            loss_sum += tape.scalar(loss) * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            bound.store_grads(params, &grads);
            optimizer.step(params.tensors_mut())?;
        }
        let train_loss = loss_sum / n_train as f64;
        let val_loss = validate(params)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: "loss is not finite".into(),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params.copy_values_from(params)?;
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    params.copy_values_from(&best_params)?;
    params.clear_grads();
    Ok(TrainLog {
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split_indices(10, 0.2, 7).unwrap();
        let (c, d) = split_indices(10, 0.2, 7).unwrap();
        assert_eq!((a.clone(), b.clone()), (c, d));
        assert_eq!(a.len(), 8);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(
            split_indices(1, 0.2, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn stops_after_patience_and_restores_best() {
        // validation loss follows a fixed script with its minimum at epoch 4
        let script = [5.0, 4.0, 3.0, 1.0, 2.0, 2.5, 1.5, 3.0, 0.5];
        let mut params = ParamSet::new();
        params.add("w", Tensor::scalar(0.0));
        let cfg = TrainConfig {
            patience: 3,
            max_epochs: 100,
            optimizer: OptimizerConfig::sgd(1.0),
            ..TrainConfig::scorer()
        };
        let mut calls = 0;
        let log = fit(
            &mut params,
            &cfg,
            1,
            |tape, bound, _| {
                // d/dw of w is 1, so sgd with lr 1 decrements w each epoch
                tape.sum(bound.var(crate::autodiff::ParamId(0)))
            },
            |_| {
                calls += 1;
                Ok(script[calls - 1])
            },
        )
        .unwrap();
        assert_eq!(log.best_epoch, 4);
        assert_eq!(log.last_epoch(), 7);
        assert!(log.stopped_early);
        assert_eq!(params.get(crate::autodiff::ParamId(0)).data()[0], -4.0);
    }
}
