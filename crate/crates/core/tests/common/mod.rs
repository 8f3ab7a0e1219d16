//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehab_core::autodiff::{gradient_check_many, ParamSet, Tape, Tensor, Var};
use rehab_core::nn::{BiLstm, Bound, Conv1d, Direction, Linear, Lstm};
use rehab_core::skeleton::{SkeletonFrame, NUM_JOINTS};
use rehab_core::Result;

pub const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
pub fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), away_from_zero(rng, n)).unwrap()
}

/// Random-weighted sum, so every output element gets a distinct gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let mut r = rng(seed ^ 0x9e37);
    let w = tape.constant(&shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Every differentiable tape op, with input shapes.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], |t, v| {
            t.add_bias(v[0], v[1])
        }),
        ("scale", vec![vec![3, 2]], |t, v| t.scale(v[0], -1.7)),
        ("sigmoid", vec![vec![3, 3]], |t, v| t.sigmoid(v[0])),
        ("tanh", vec![vec![3, 3]], |t, v| t.tanh(v[0])),
        ("relu", vec![vec![3, 3]], |t, v| t.relu(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("slice", vec![vec![2, 5, 3]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("select", vec![vec![2, 5, 3]], |t, v| t.select(v[0], 1, 2)),
        ("concat", vec![vec![2, 4, 3], vec![2, 4, 2]], |t, v| {
            t.concat(&[v[0], v[1]], 2)
        }),
        ("stack", vec![vec![2, 3], vec![2, 3]], |t, v| {
            t.stack(&[v[0], v[1]], 1)
        }),
        ("reverse_time", vec![vec![2, 4, 3]], |t, v| {
            t.reverse_time(v[0])
        }),
        ("downsample", vec![vec![2, 7, 3]], |t, v| {
            t.downsample(v[0], 2)
        }),
        ("conv1d", vec![vec![2, 7, 3], vec![3, 3, 2]], |t, v| {
            t.conv1d(v[0], v[1], 1, 1)
        }),
        (
            "conv1d_strided",
            vec![vec![2, 9, 2], vec![3, 2, 2]],
            |t, v| t.conv1d(v[0], v[1], 2, 0),
        ),
        ("maxpool1d", vec![vec![2, 8, 3]], |t, v| {
            t.maxpool1d(v[0], 2, 2)
        }),
        ("adaptive_maxpool1d", vec![vec![2, 7, 3]], |t, v| {
            t.adaptive_maxpool1d(v[0], 3)
        }),
        ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("mse", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mse(v[0], v[1])
        }),
        ("bce", vec![vec![4, 1]], |t, v| {
            let p = t.sigmoid(v[0])?;
            let y = t.constant(&[4, 1], vec![0.0, 0.3, 0.8, 1.0])?;
            t.bce(p, y)
        }),
        ("l1_norm", vec![vec![3, 2], vec![4]], |t, v| {
            t.l1_norm(&[v[0], v[1]])
        }),
    ]
}

/// Worst relative gradient error for one op on random inputs.
pub fn gradcheck_op(seed: u64, shapes: &[Vec<usize>], op: OpFn) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| tensor(&mut r, s)).collect();
    gradient_check_many(
        |tape, vars| {
            let y = op(tape, vars)?;
            project(tape, y, seed)
        },
        &inputs,
        H,
    )
}

struct Composed {
    params: ParamSet,
    bilstm: BiLstm,
    branches: Vec<(usize, Conv1d)>,
    pooled: usize,
    lstm: Lstm,
    fc: Linear,
}

const B: usize = 2;
const L: usize = 8;
const D: usize = 2;

impl Composed {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut params = ParamSet::new();
        let bilstm = BiLstm::new(&mut params, "enc", D, 2, &mut r);
        let branches = [1, 2, 4]
            .into_iter()
            .map(|s| {
                (
                    s,
                    Conv1d::same(&mut params, &format!("b{s}"), 4, 2, 3, &mut r),
                )
            })
            .collect();
        let lstm = Lstm::new(&mut params, "lstm", 6, 3, &mut r);
        let fc = Linear::new(&mut params, "fc", 3, 1, &mut r);
        Composed {
            params,
            bilstm,
            branches,
            pooled: L / 4,
            lstm,
            fc,
        }
    }

    fn loss(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.bilstm.run(tape, bound, x)?;
        let mut outs = Vec::new();
        for (s, conv) in &self.branches {
            let hs = if *s == 1 { h } else { tape.downsample(h, *s)? };
            let c = conv.forward(tape, bound, hs)?;
            outs.push(tape.adaptive_maxpool1d(c, self.pooled)?);
        }
        let cat = tape.concat(&outs, 2)?;
        let seq = self.lstm.forward(tape, bound, cat, Direction::Forward)?;
        let last = tape.select(seq, 1, L / 4 - 1)?;
        let logit = self.fc.forward(tape, bound, last)?;
        let p = tape.sigmoid(logit)?;
        let y = tape.constant(&[B, 1], vec![0.25, 0.9])?;
        tape.bce(p, y)
    }
}

/// Gradient check through bilstm, conv, maxpool, concat, lstm, FC and BCE,
/// against both the input and every parameter.
pub fn gradcheck_composed(seed: u64) -> Result<f64> {
    let model = Composed::new(seed);
    let mut r = rng(seed.wrapping_add(1));
    let mut inputs = vec![tensor(&mut r, &[B, L, D])];
    inputs.extend(model.params.tensors().iter().cloned());
    gradient_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(vars[1..].to_vec());
            model.loss(tape, &bound, vars[0])
        },
        &inputs,
        H,
    )
}

pub fn random_frame(rng: &mut impl Rng, index: u64) -> SkeletonFrame {
    let mut positions = [[0.0; 3]; NUM_JOINTS];
    let mut orientations = [[0.0; 4]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        for c in 0..3 {
            positions[j][c] = rng.random_range(-1.5..1.5);
        }
        for c in 0..4 {
            orientations[j][c] = rng.random_range(-1.0..1.0);
        }
    }
    SkeletonFrame::new(positions, orientations, index, index as f64 * 1000.0 / 30.0).unwrap()
}

/// Per-joint sum of absolute quaternion component differences, written out
/// element by element.
pub fn brute_force_dissimilarity(a: &SkeletonFrame, b: &SkeletonFrame) -> Vec<f64> {
    let mut out = vec![0.0; NUM_JOINTS];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for c in 0..4 {
            let d = a.orientations[j][c] - b.orientations[j][c];
            s += if d < 0.0 { -d } else { d };
        }
        *o = s;
    }
    out
}

use ndarray::Array2;
use rehab_core::autodiff::OptimizerConfig;
use rehab_core::models::{
    pca_fit, pca_reconstruct, split_indices, Autoencoder, AutoencoderConfig, TrainConfig,
};

pub fn random_matrix(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
    // correlated columns so the spectrum is uneven
    let base = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let mix = Array2::from_shape_fn((d, d), |(i, j)| {
        if i == j {
            1.0
        } else {
            rng.random_range(-0.5..0.5)
        }
    });
    base.dot(&mix)
}

fn mean_sq(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap()
}

/// Reconstruction error of the library PCA and of a truncated-SVD oracle for
/// every dimension count, as `(pca, oracle)` pairs.
pub fn pca_vs_svd(seed: u64, n: usize, d: usize) -> Vec<(f64, f64)> {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, n, d);
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &x - &mean;
    let m = nalgebra::DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    (1..=d)
        .map(|k| {
            let mut approx = nalgebra::DMatrix::zeros(n, d);
            for &i in &order[..k] {
                approx += u.column(i) * svd.singular_values[i] * vt.row(i);
            }
            let oracle = Array2::from_shape_fn((n, d), |(i, j)| approx[(i, j)] + mean[j]);
            let model = pca_fit(x.view(), k).unwrap();
            let recon = pca_reconstruct(&model, x.view()).unwrap();
            (mean_sq(&recon, &x), mean_sq(&oracle, &x))
        })
        .collect()
}

pub struct EarlyStopRun {
    pub patience: usize,
    pub best_epoch: usize,
    pub last_epoch: usize,
    pub stopped_early: bool,
    pub min_logged: f64,
    pub best_val_loss: f64,
    /// Validation loss of the returned model, recomputed from scratch.
    pub returned_val_loss: f64,
}

impl EarlyStopRun {
    pub fn holds(&self) -> bool {
        self.last_epoch - self.best_epoch <= self.patience
            && (!self.stopped_early || self.last_epoch - self.best_epoch == self.patience)
            && self.best_val_loss == self.min_logged
            && (self.returned_val_loss - self.min_logged).abs() <= 1e-12
    }
}

pub fn small_autoencoder() -> AutoencoderConfig {
    AutoencoderConfig {
        hidden1: 6,
        hidden2: 4,
        latent: 2,
        latent_kernel: 3,
        decoder_hidden: vec![4, 6],
    }
}

/// Noisy sinusoid sequences, `n x (m x k)`.
pub fn wavy_sequences(seed: u64, n: usize, m: usize, k: usize) -> Vec<Array2<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let phase = r.random_range(0.0..6.0);
            Array2::from_shape_fn((m, k), |(t, c)| {
                (t as f64 * 0.3 + phase + c as f64).sin() + 0.2 * r.random_range(-1.0..1.0)
            })
        })
        .collect()
}

/// Trains a small autoencoder with a deliberately high learning rate so the
/// validation curve stalls and early stopping engages.
pub fn early_stopping_run(patience: usize, max_epochs: usize) -> EarlyStopRun {
    let seqs = wavy_sequences(5, 12, 16, 4);
    let views: Vec<_> = seqs.iter().map(|s| s.view()).collect();
    let train = TrainConfig {
        patience,
        max_epochs,
        optimizer: OptimizerConfig::adam(5e-2),
        ..TrainConfig::autoencoder()
    };
    let (model, log) = Autoencoder::fit(small_autoencoder(), &views, &train).unwrap();
    let (_, val) = split_indices(seqs.len(), train.validation_fraction, train.seed).unwrap();
    let val_views: Vec<_> = val.iter().map(|&i| seqs[i].view()).collect();
    EarlyStopRun {
        patience,
        best_epoch: log.best_epoch,
        last_epoch: log.last_epoch(),
        stopped_early: log.stopped_early,
        min_logged: log
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min),
        best_val_loss: log.best_val_loss,
        returned_val_loss: model.reconstruction_mse(&val_views).unwrap(),
    }
}
