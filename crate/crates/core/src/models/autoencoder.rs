use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{fit, split_indices, TrainConfig, TrainLog};
use super::{batch_constant, check_uniform, unbatch, Standardizer};
use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{BiLstm, Bound, Conv1d, Direction, Linear, Lstm};
use crate::skeleton::Cohort;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// Hidden width per direction of the first bidirectional layer.
    pub hidden1: usize,
    /// Hidden width per direction of the second bidirectional layer.
    pub hidden2: usize,
    pub latent: usize,
    pub latent_kernel: usize,
    /// Widths of the stacked decoder LSTMs.
    pub decoder_hidden: Vec<usize>,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden1: 32,
            hidden2: 16,
            latent: 8,
            latent_kernel: 3,
            decoder_hidden: vec![16, 32, 32],
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self, input_width: usize) -> Result<()> {
        if !(self.hidden1 > self.hidden2 && self.hidden2 >= self.latent && self.latent >= 1) {
            return Err(Error::Parameter(format!(
                "encoder widths must satisfy hidden1 > hidden2 >= latent >= 1, got {} / {} / {}",
                self.hidden1, self.hidden2, self.latent
            )));
        }
        if self.latent >= input_width {
            return Err(Error::Parameter(format!(
                "latent width {} must be below the input width {input_width}",
                self.latent
            )));
        }
        if self.latent_kernel.is_multiple_of(2) {
            return Err(Error::Parameter("latent kernel size must be odd".into()));
        }
        if self.decoder_hidden.is_empty() || self.decoder_hidden.contains(&0) {
            return Err(Error::Parameter(
                "decoder needs at least one non-empty layer".into(),
            ));
        }
        Ok(())
    }
}

/// Recurrent sequence autoencoder with an L1-regularized encoder.
///
/// Inputs are z-scored with a standardizer fitted on the training split;
/// reconstructions and their errors are in those standardized units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub input_width: usize,
    pub standardizer: Standardizer,
    enc1: BiLstm,
    enc2: BiLstm,
    to_latent: Conv1d,
    decoder: Vec<Lstm>,
    readout: Linear,
    pub params: ParamSet,
}

impl Autoencoder {
    /// Untrained model with seeded weights and an identity standardizer.
    pub fn new(config: AutoencoderConfig, input_width: usize, seed: u64) -> Result<Self> {
        config.validate(input_width)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc1 = BiLstm::new(&mut params, "enc1", input_width, config.hidden1, &mut rng);
        let enc2 = BiLstm::new(
            &mut params,
            "enc2",
            enc1.output_width(),
            config.hidden2,
            &mut rng,
        );
        let to_latent = Conv1d::same(
            &mut params,
            "latent",
            enc2.output_width(),
            config.latent,
            config.latent_kernel,
            &mut rng,
        );
        let mut decoder = Vec::new();
        let mut width = config.latent;
        for (i, &h) in config.decoder_hidden.iter().enumerate() {
            decoder.push(Lstm::new(
                &mut params,
                &format!("dec{}", i + 1),
                width,
                h,
                &mut rng,
            ));
            width = h;
        }
        let readout = Linear::new(&mut params, "readout", width, input_width, &mut rng);
        Ok(Autoencoder {
            config,
            input_width,
            standardizer: Standardizer::identity(input_width),
            enc1,
            enc2,
            to_latent,
            decoder,
            readout,
            params,
        })
    }

    /// Weights covered by the L1 penalty: every encoder weight matrix and the
    /// latent convolution kernel, but no biases.
    pub fn encoder_weight_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.enc1.weight_ids().to_vec();
        ids.extend(self.enc2.weight_ids());
        ids.push(self.to_latent.kernel);
        ids
    }

    pub fn encoder_l1(&self) -> f64 {
        self.params.l1_norm(&self.encoder_weight_ids())
    }

    /// `[B, M, K]` standardized input to `[B, M, latent]`.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.enc1.run(tape, bound, x)?;
        let h = self.enc2.run(tape, bound, h)?;
        self.to_latent.forward(tape, bound, h)
    }

    /// `[B, M, latent]` to `[B, M, K]`.
    pub fn decode_var(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.decoder {
            h = layer.forward(tape, bound, h, Direction::Forward)?;
        }
        self.readout.forward(tape, bound, h)
    }

    fn standardize_all(&self, seqs: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        check_uniform(seqs, "autoencoder input")?;
        if seqs[0].ncols() != self.input_width {
            return Err(Error::shape(
                "autoencoder input",
                &[seqs[0].nrows(), seqs[0].ncols()],
                &[seqs[0].nrows(), self.input_width],
            ));
        }
        seqs.iter().map(|s| self.standardizer.apply(*s)).collect()
    }

    /// Latent sequences (`M x latent`) for raw feature sequences of one length.
    pub fn encode(&self, seqs: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        let z = self.standardize_all(seqs)?;
        let views: Vec<_> = z.iter().map(|a| a.view()).collect();
        let mut tape = Tape::new();
        let bound = Bound::new(&self.params, &mut tape);
        let x = batch_constant(&mut tape, &views)?;
        let latent = self.encode_var(&mut tape, &bound, x)?;
        Ok(unbatch(&tape, latent))
    }

    /// Reconstructions in standardized units.
    pub fn reconstruct(&self, seqs: &[ArrayView2<'_, f64>]) -> Result<Vec<Array2<f64>>> {
        Ok(self.reconstruct_with_inputs(seqs)?.1)
    }

    fn reconstruct_with_inputs(
        &self,
        seqs: &[ArrayView2<'_, f64>],
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        let z = self.standardize_all(seqs)?;
        let views: Vec<_> = z.iter().map(|a| a.view()).collect();
        let mut tape = Tape::new();
        let bound = Bound::new(&self.params, &mut tape);
        let x = batch_constant(&mut tape, &views)?;
        let latent = self.encode_var(&mut tape, &bound, x)?;
        let recon = self.decode_var(&mut tape, &bound, latent)?;
        Ok((z, unbatch(&tape, recon)))
    }

    /// Mean squared reconstruction error in standardized units, averaged over
    /// every frame and channel.
    pub fn reconstruction_mse(&self, seqs: &[ArrayView2<'_, f64>]) -> Result<f64> {
        let (inputs, recons) = self.reconstruct_with_inputs(seqs)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x, r) in inputs.iter().zip(&recons) {
            sum += (x - r).mapv(|d| d * d).sum();
            n += x.len();
        }
        Ok(sum / n as f64)
    }

    /// Trains on raw sequences of one shape. The standardizer is fitted on the
    /// training split only.
    pub fn fit(
        config: AutoencoderConfig,
        seqs: &[ArrayView2<'_, f64>],
        train: &TrainConfig,
    ) -> Result<(Self, TrainLog)> {
        train.validate()?;
        let (_, width) = check_uniform(seqs, "autoencoder input")?;
        let (train_idx, val_idx) =
            split_indices(seqs.len(), train.validation_fraction, train.seed)?;
        let mut model = Autoencoder::new(config, width, train.seed)?;
        model.standardizer = Standardizer::fit(train_idx.iter().map(|&i| seqs[i]))?;

        let z = model.standardize_all(seqs)?;
        let train_set: Vec<ArrayView2<'_, f64>> = train_idx.iter().map(|&i| z[i].view()).collect();
        let val_set: Vec<ArrayView2<'_, f64>> = val_idx.iter().map(|&i| z[i].view()).collect();
        let l1_ids = model.encoder_weight_ids();
        let lambda = train.l1_lambda;

        let mut params = std::mem::take(&mut model.params);
        let log = {
            let net = &model;
            fit(
                &mut params,
                train,
                train_set.len(),
                |tape, bound, batch| {
                    let views: Vec<_> = batch.iter().map(|&i| train_set[i]).collect();
                    let x = batch_constant(tape, &views)?;
                    let latent = net.encode_var(tape, bound, x)?;
                    let recon = net.decode_var(tape, bound, latent)?;
                    let mse = tape.mse(recon, x)?;
                    if lambda > 0.0 {
                        let weights: Vec<Var> = l1_ids.iter().map(|&id| bound.var(id)).collect();
                        let l1 = tape.l1_norm(&weights)?;
                        let l1 = tape.scale(l1, lambda)?;
                        tape.add(mse, l1)
                    } else {
                        Ok(mse)
                    }
                },
                |p| {
                    let mut tape = Tape::new();
                    let bound = Bound::new(p, &mut tape);
                    let x = batch_constant(&mut tape, &val_set)?;
                    let latent = net.encode_var(&mut tape, &bound, x)?;
                    let recon = net.decode_var(&mut tape, &bound, latent)?;
                    let mse = tape.mse(recon, x)?;
                    Ok(tape.scalar(mse))
                },
            )?
        };
        model.params = params;
        Ok((model, log))
    }
}

/// Trains the autoencoder on healthy-cohort feature sequences.
pub fn train_autoencoder(
    sequences: &[FeatureSequence],
    config: AutoencoderConfig,
    train: &TrainConfig,
) -> Result<(Autoencoder, TrainLog)> {
    if let Some(s) = sequences.iter().find(|s| s.cohort != Cohort::Healthy) {
        return Err(Error::Parameter(format!(
            "autoencoder trains on healthy sequences only; {} is {:?}",
            s.subject_id, s.cohort
        )));
    }
    let views: Vec<_> = sequences.iter().map(|s| s.values.view()).collect();
    Autoencoder::fit(config, &views, train)
}
