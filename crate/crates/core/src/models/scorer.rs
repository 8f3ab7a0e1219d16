use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit, split_indices, TrainConfig, TrainLog};
use super::{batch_constant, check_uniform};
use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::context_window;
use crate::nn::{Bound, Conv1d, Direction, Linear, Lstm};

/// Temporal downsampling factors of the parallel branches.
pub const BRANCH_SCALES: [usize; 3] = [1, 2, 4];

/// A sequence-to-score network producing values in `(0, 1)`.
pub trait ScoreModel {
    fn input_width(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// `[B, M, D]` to `[B, 1]`.
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var>;

    /// Scores for a set of equal-shape inputs.
    fn predict(&self, inputs: &[ArrayView2<'_, f64>]) -> Result<Vec<f64>> {
        let (_, d) = check_uniform(inputs, "scorer input")?;
        if d != self.input_width() {
            return Err(Error::shape("scorer input", &[d], &[self.input_width()]));
        }
        let mut tape = Tape::new();
        let bound = Bound::new(self.params(), &mut tape);
        let x = batch_constant(&mut tape, inputs)?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Mean squared error between predictions and scaled targets.
    fn evaluate_mse(&self, inputs: &[ArrayView2<'_, f64>], targets: &[f64]) -> Result<f64> {
        if inputs.len() != targets.len() {
            return Err(Error::shape("targets", &[inputs.len()], &[targets.len()]));
        }
        let pred = self.predict(inputs)?;
        Ok(pred
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y).powi(2))
            .sum::<f64>()
            / pred.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Output channels of the two convolutions in each branch.
    pub branch_channels: [usize; 2],
    pub kernel: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            branch_channels: [16, 32],
            kernel: 3,
            lstm_hidden: 32,
            lstm_layers: 2,
            fc_hidden: 16,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branch_channels.contains(&0)
            || self.lstm_hidden == 0
            || self.lstm_layers == 0
            || self.fc_hidden == 0
        {
            return Err(Error::Parameter(
                "scorer layer widths must be positive".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Parameter("scorer kernel size must be odd".into()));
        }
        Ok(())
    }
}

/// Pooled length shared by all branches for an input of `m` steps.
pub fn pooled_length(m: usize) -> usize {
    (m / 4).max(1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Branch {
    scale: usize,
    conv1: Conv1d,
    conv2: Conv1d,
}

/// Three-branch CNN front end at full, half and quarter temporal resolution,
/// pooled to a common length and concatenated, followed by stacked LSTMs and
/// a small fully connected head with a sigmoid output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiScaleScorer {
    pub config: ScorerConfig,
    pub input_width: usize,
    /// Context window applied to latent sequences before scoring.
    pub context_window: usize,
    branches: Vec<Branch>,
    lstms: Vec<Lstm>,
    fc1: Linear,
    fc2: Linear,
    pub params: ParamSet,
}

impl MultiScaleScorer {
    pub fn new(
        config: ScorerConfig,
        input_width: usize,
        context_window: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if input_width == 0 {
            return Err(Error::Parameter(
                "scorer input width must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let [c1, c2] = config.branch_channels;
        let branches = BRANCH_SCALES
            .iter()
            .map(|&scale| Branch {
                scale,
                conv1: Conv1d::same(
                    &mut params,
                    &format!("branch{scale}.conv1"),
                    input_width,
                    c1,
                    config.kernel,
                    &mut rng,
                ),
                conv2: Conv1d::same(
                    &mut params,
                    &format!("branch{scale}.conv2"),
                    c1,
                    c2,
                    config.kernel,
                    &mut rng,
                ),
            })
            .collect();
        let mut lstms = Vec::new();
        let mut width = c2 * BRANCH_SCALES.len();
        for i in 0..config.lstm_layers {
            lstms.push(Lstm::new(
                &mut params,
                &format!("lstm{}", i + 1),
                width,
                config.lstm_hidden,
                &mut rng,
            ));
            width = config.lstm_hidden;
        }
        let fc1 = Linear::new(&mut params, "fc1", width, config.fc_hidden, &mut rng);
        let fc2 = Linear::new(&mut params, "fc2", config.fc_hidden, 1, &mut rng);
        Ok(MultiScaleScorer {
            config,
            input_width,
            context_window,
            branches,
            lstms,
            fc1,
            fc2,
            params,
        })
    }

    /// Branch outputs, each `[B, pooled_length(M), branch_channels[1]]`.
    pub fn branch_outputs(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        let m = tape.shape(x)[1];
        let lc = pooled_length(m);
        self.branches
            .iter()
            .map(|b| {
                let xs = if b.scale == 1 {
                    x
                } else {
                    tape.downsample(x, b.scale)?
                };
                let h = b.conv1.forward(tape, bound, xs)?;
                let h = tape.relu(h)?;
                let h = b.conv2.forward(tape, bound, h)?;
                let h = tape.relu(h)?;
                tape.adaptive_maxpool1d(h, lc)
            })
            .collect()
    }

    /// Scores a latent sequence after applying the model's context window.
    pub fn score_sequence(&self, latent: ArrayView2<'_, f64>) -> Result<f64> {
        let windowed = context_window(latent, self.context_window)?;
        predict_score(self, windowed.view())
    }
}

impl ScoreModel for MultiScaleScorer {
    fn input_width(&self) -> usize {
        self.input_width
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_width {
            return Err(Error::shape("scorer", &shape, &[0, 0, self.input_width]));
        }
        let branches = self.branch_outputs(tape, bound, x)?;
        let mut h = tape.concat(&branches, 2)?;
        for lstm in &self.lstms {
            h = lstm.forward(tape, bound, h, Direction::Forward)?;
        }
        let last = tape.shape(h)[1] - 1;
        let h = tape.select(h, 1, last)?;
        let h = self.fc1.forward(tape, bound, h)?;
        let h = tape.relu(h)?;
        let y = self.fc2.forward(tape, bound, h)?;
        tape.sigmoid(y)
    }
}

/// Scaled score in `(0, 1)` for one input already in model format.
pub fn predict_score(model: &impl ScoreModel, input: ArrayView2<'_, f64>) -> Result<f64> {
    Ok(model.predict(&[input])?[0])
}

/// Result of fitting a score model.
#[derive(Clone, Debug)]
pub struct ScorerTraining<M> {
    pub model: M,
    pub log: TrainLog,
    /// Prediction MSE on the internal validation split at the restored epoch.
    pub val_mse: f64,
}

/// Fits any score model with BCE loss and early stopping on validation BCE.
pub fn train_score_model<M: ScoreModel>(
    mut model: M,
    inputs: &[ArrayView2<'_, f64>],
    targets: &[f64],
    train: &TrainConfig,
) -> Result<ScorerTraining<M>> {
    train.validate()?;
    if inputs.len() != targets.len() {
        return Err(Error::shape("targets", &[inputs.len()], &[targets.len()]));
    }
    let (_, d) = check_uniform(inputs, "scorer input")?;
    if d != model.input_width() {
        return Err(Error::shape("scorer input", &[d], &[model.input_width()]));
    }
    if let Some(y) = targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Domain(format!("scaled score {y} outside [0, 1]")));
    }
    let (train_idx, val_idx) = split_indices(inputs.len(), train.validation_fraction, train.seed)?;
    let train_x: Vec<_> = train_idx.iter().map(|&i| inputs[i]).collect();
    let train_y: Vec<_> = train_idx.iter().map(|&i| targets[i]).collect();
    let val_x: Vec<_> = val_idx.iter().map(|&i| inputs[i]).collect();
    let val_y: Vec<_> = val_idx.iter().map(|&i| targets[i]).collect();

    let mut params = std::mem::take(model.params_mut());
    let log = {
        let net = &model;
        fit(
            &mut params,
            train,
            train_x.len(),
            |tape, bound, batch| {
                let xs: Vec<_> = batch.iter().map(|&i| train_x[i]).collect();
                let ys: Vec<_> = batch.iter().map(|&i| train_y[i]).collect();
                let x = batch_constant(tape, &xs)?;
                let y = tape.constant(&[ys.len(), 1], ys)?;
                let pred = net.forward(tape, bound, x)?;
                tape.bce(pred, y)
            },
            |p| {
                let mut tape = Tape::new();
                let bound = Bound::new(p, &mut tape);
                let x = batch_constant(&mut tape, &val_x)?;
                let y = tape.constant(&[val_y.len(), 1], val_y.clone())?;
                let pred = net.forward(&mut tape, &bound, x)?;
                let loss = tape.bce(pred, y)?;
                Ok(tape.scalar(loss))
            },
        )?
    };
    *model.params_mut() = params;
    let val_mse = model.evaluate_mse(&val_x, &val_y)?;
    Ok(ScorerTraining {
        model,
        log,
        val_mse,
    })
}

/// Applies the context window from `train` to each latent sequence, then fits
/// a fresh [`MultiScaleScorer`].
pub fn train_scorer(
    latents: &[ArrayView2<'_, f64>],
    targets: &[f64],
    config: ScorerConfig,
    train: &TrainConfig,
) -> Result<ScorerTraining<MultiScaleScorer>> {
    train.validate()?;
    let (_, d) = check_uniform(latents, "latent")?;
    let windowed: Vec<Array2<f64>> = latents
        .iter()
        .map(|z| context_window(*z, train.context_window))
        .collect::<Result<_>>()?;
    let views: Vec<_> = windowed.iter().map(|a| a.view()).collect();
    let model = MultiScaleScorer::new(
        config,
        d * train.context_window,
        train.context_window,
        train.seed,
    )?;
    train_score_model(model, &views, targets, train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScorerConfig {
        ScorerConfig {
            branch_channels: [3, 4],
            kernel: 3,
            lstm_hidden: 4,
            lstm_layers: 2,
            fc_hidden: 3,
        }
    }

    #[test]
    fn branches_share_pooled_length() {
        let model = MultiScaleScorer::new(tiny(), 2, 1, 0).unwrap();
        for m in [1, 2, 3, 5, 8, 13, 17] {
            let mut tape = Tape::new();
            let bound = Bound::new(&model.params, &mut tape);
            let x = tape.constant(&[2, m, 2], vec![0.5; 2 * m * 2]).unwrap();
            let outs = model.branch_outputs(&mut tape, &bound, x).unwrap();
            for o in outs {
                assert_eq!(tape.shape(o), &[2, pooled_length(m), 4]);
            }
            let y = model.forward(&mut tape, &bound, x).unwrap();
            assert_eq!(tape.shape(y), &[2, 1]);
        }
    }

    #[test]
    fn prediction_is_a_probability() {
        let model = MultiScaleScorer::new(tiny(), 3, 1, 4).unwrap();
        let x = Array2::from_shape_fn((9, 3), |(t, c)| (t * c) as f64 * 10.0);
        let p = predict_score(&model, x.view()).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let wrong = Array2::<f64>::zeros((9, 4));
        assert!(matches!(
            predict_score(&model, wrong.view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn constant_target_is_learned() {
        let inputs: Vec<_> = (0..8)
            .map(|i| {
                Array2::from_shape_fn((8, 2), |(t, c)| ((t + i) as f64 * 0.3 + c as f64).sin())
            })
            .collect();
        let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
        let targets = vec![0.7; 8];
        let cfg = TrainConfig {
            max_epochs: 600,
            patience: 600,
            optimizer: crate::autodiff::OptimizerConfig::adam(1e-2),
            context_window: 1,
            ..TrainConfig::scorer()
        };
        let out = train_scorer(&views, &targets, tiny(), &cfg).unwrap();
        for p in out.model.predict(&views).unwrap() {
            assert!((p - 0.7).abs() < 0.02, "{p}");
        }
    }

    #[test]
    fn context_window_sets_input_width() {
        let z = Array2::from_shape_fn((6, 2), |(t, c)| (t + c) as f64);
        let cfg = TrainConfig {
            max_epochs: 1,
            context_window: 3,
            ..TrainConfig::scorer()
        };
        let out = train_scorer(&[z.view(), z.view()], &[0.2, 0.9], tiny(), &cfg).unwrap();
        assert_eq!(out.model.input_width, 6);
        let s = out.model.score_sequence(z.view()).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
}
