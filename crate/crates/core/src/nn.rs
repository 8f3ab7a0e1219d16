//! Trainable layers built from tape primitives.
//!
//! Layers own [`ParamId`]s into a shared [`ParamSet`]. A forward pass first
//! binds the whole set onto a tape with [`Bound::new`], then threads the
//! bound variables through each layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter set recorded onto a tape, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(params: &ParamSet, tape: &mut Tape) -> Self {
        Bound {
            vars: params.tensors().iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Uses variables already on the tape, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Writes gradients into `params[i].grad`; parameters the loss does not
    /// reach get an explicit zero gradient.
    pub fn store_grads(&self, params: &mut ParamSet, grads: &Gradients) {
        for (tensor, var) in params.tensors_mut().iter_mut().zip(&self.vars) {
            let g = grads
                .get(*var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            tensor.grad = Some(g);
        }
    }
}

/// Uniform initialization in `±1/sqrt(fan_in)`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

fn as_rows(tape: &mut Tape, x: Var) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(x).to_vec();
    match shape.len() {
        2 => Ok((x, shape)),
        3 => Ok((tape.reshape(x, &[shape[0] * shape[1], shape[2]])?, shape)),
        _ => Err(Error::shape("linear", &shape, &[0, 0])),
    }
}

/// Fully connected layer applied to the last axis of a rank-2 or rank-3 input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            uniform_init(&[input, output], input, rng),
        );
        let bias = params.add(format!("{name}.bias"), uniform_init(&[output], input, rng));
        Linear {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let (rows, shape) = as_rows(tape, x)?;
        let y = tape.matmul(rows, bound.var(self.weight))?;
        let y = tape.add_bias(y, bound.var(self.bias))?;
        if shape.len() == 3 {
            tape.reshape(y, &[shape[0], shape[1], self.output])
        } else {
            Ok(y)
        }
    }
}

/// Temporal convolution with bias. `padding = kernel / 2` with stride 1 keeps
/// the sequence length for odd kernels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel_size * in_channels;
        let kernel = params.add(
            format!("{name}.kernel"),
            uniform_init(&[kernel_size, in_channels, out_channels], fan_in, rng),
        );
        let bias = params.add(
            format!("{name}.bias"),
            uniform_init(&[out_channels], fan_in, rng),
        );
        Conv1d {
            kernel,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        }
    }

    /// Stride 1 with `kernel_size / 2` zero padding on each side.
    pub fn same(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            params,
            name,
            in_channels,
            out_channels,
            kernel_size,
            1,
            kernel_size / 2,
            rng,
        )
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, bound.var(self.kernel), self.stride, self.padding)?;
        tape.add_bias(y, bound.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Single-direction LSTM with gates packed as `[input, forget, cell, output]`.
///
/// `z = x W_x + h W_h + b`, `i = σ(z_i)`, `f = σ(z_f)`, `g = tanh(z_g)`,
/// `o = σ(z_o)`, `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_x = params.add(
            format!("{name}.w_x"),
            uniform_init(&[input, 4 * hidden], hidden, rng),
        );
        let w_h = params.add(
            format!("{name}.w_h"),
            uniform_init(&[hidden, 4 * hidden], hidden, rng),
        );
        let mut b = uniform_init(&[4 * hidden], hidden, rng);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = params.add(format!("{name}.bias"), b);
        Lstm {
            w_x,
            w_h,
            bias,
            input,
            hidden,
        }
    }

    /// Gate nonlinearities given the pre-activation `z` (`[B, 4H]`, without
    /// the recurrent term) and the previous state.
    fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_input: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        let z = match state {
            Some((h_prev, _)) => {
                let rec = tape.matmul(h_prev, bound.var(self.w_h))?;
                tape.add(z_input, rec)?
            }
            None => z_input,
        };
        let zi = tape.slice(z, 1, 0, h)?;
        let zf = tape.slice(z, 1, h, h)?;
        let zg = tape.slice(z, 1, 2 * h, h)?;
        let zo = tape.slice(z, 1, 3 * h, h)?;
        let i = tape.sigmoid(zi)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let ig = tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let f = tape.sigmoid(zf)?;
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c))
    }

    /// One step from explicit state; `x_t` is `[B, D]`, states are `[B, H]`.
    pub fn cell(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let zx = tape.matmul(x_t, bound.var(self.w_x))?;
        let zx = tape.add_bias(zx, bound.var(self.bias))?;
        self.step(tape, bound, zx, Some((h_prev, c_prev)))
    }

    /// Runs over a `[B, L, D]` sequence from zero initial state, returning all
    /// hidden states as `[B, L, H]` in the input's time order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seq: Var,
        direction: Direction,
    ) -> Result<Var> {
        let shape = tape.shape(seq).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::shape("lstm", &shape, &[0, 0, self.input]));
        }
        let (b, l) = (shape[0], shape[1]);
        let input = match direction {
            Direction::Forward => seq,
            Direction::Backward => tape.reverse_time(seq)?,
        };
        // input projections for every time step in one product
        let flat = tape.reshape(input, &[b * l, self.input])?;
        let proj = tape.matmul(flat, bound.var(self.w_x))?;
        let proj = tape.add_bias(proj, bound.var(self.bias))?;
        let proj = tape.reshape(proj, &[b, l, 4 * self.hidden])?;

        let mut state = None;
        let mut outputs = Vec::with_capacity(l);
        for t in 0..l {
            let z_t = tape.select(proj, 1, t)?;
            let (h, c) = self.step(tape, bound, z_t, state)?;
            outputs.push(h);
            state = Some((h, c));
        }
        let out = tape.stack(&outputs, 1)?;
        match direction {
            Direction::Forward => Ok(out),
            Direction::Backward => tape.reverse_time(out),
        }
    }

    pub fn weight_ids(&self) -> [ParamId; 2] {
        [self.w_x, self.w_h]
    }
}

/// Forward and backward LSTMs whose outputs are concatenated per time step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        BiLstm {
            forward: Lstm::new(params, &format!("{name}.fwd"), input, hidden, rng),
            backward: Lstm::new(params, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.forward.hidden
    }

    /// `[B, L, D] -> [B, L, 2H]`.
    pub fn run(&self, tape: &mut Tape, bound: &Bound, seq: Var) -> Result<Var> {
        let f = self.forward.forward(tape, bound, seq, Direction::Forward)?;
        let b = self
            .backward
            .forward(tape, bound, seq, Direction::Backward)?;
        tape.concat(&[f, b], 2)
    }

    pub fn weight_ids(&self) -> [ParamId; 4] {
        [
            self.forward.w_x,
            self.forward.w_h,
            self.backward.w_x,
            self.backward.w_h,
        ]
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_hidden_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "l", 3, 4, &mut rng);
        for t in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let bound = Bound::new(&params, &mut tape);
        let x = tape
            .constant(&[2, 5, 3], (0..30).map(|i| i as f64 * 0.1 - 1.0).collect())
            .unwrap();
        let y = lstm
            .forward(&mut tape, &bound, x, Direction::Forward)
            .unwrap();
        assert_eq!(tape.shape(y), &[2, 5, 4]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilstm_doubles_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let bi = BiLstm::new(&mut params, "bi", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::new(&params, &mut tape);
        let x = tape.constant(&[1, 7, 3], vec![0.3; 21]).unwrap();
        let y = bi.run(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 7, 10]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "l", 2, 3, &mut rng);
        assert_eq!(&params.get(lstm.bias).data()[3..6], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cell_matches_straight_line_gate_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, h) = (3, 2);
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "l", d, h, &mut rng);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hp: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cp: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let bound = Bound::new(&params, &mut tape);
        let xv = tape.constant(&[1, d], x.clone()).unwrap();
        let hv = tape.constant(&[1, h], hp.clone()).unwrap();
        let cv = tape.constant(&[1, h], cp.clone()).unwrap();
        let (h_t, c_t) = lstm.cell(&mut tape, &bound, xv, hv, cv).unwrap();

        let wx = params.get(lstm.w_x).data();
        let wh = params.get(lstm.w_h).data();
        let b = params.get(lstm.bias).data();
        let pre = |gate: usize, j: usize| {
            let col = gate * h + j;
            let mut z = b[col];
            for (p, xp) in x.iter().enumerate() {
                z += xp * wx[p * 4 * h + col];
            }
            for (p, hv) in hp.iter().enumerate() {
                z += hv * wh[p * 4 * h + col];
            }
            z
        };
        for j in 0..h {
            let i = sigmoid(pre(0, j));
            let f = sigmoid(pre(1, j));
            let g = pre(2, j).tanh();
            let o = sigmoid(pre(3, j));
            let c = f * cp[j] + i * g;
            let hh = o * c.tanh();
            assert!((tape.value(c_t)[j] - c).abs() < 1e-12);
            assert!((tape.value(h_t)[j] - hh).abs() < 1e-12);
        }
    }

    #[test]
    fn unreached_parameters_get_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let used = Linear::new(&mut params, "used", 2, 1, &mut rng);
        let _unused = Linear::new(&mut params, "unused", 2, 1, &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::new(&params, &mut tape);
        let x = tape.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let y = used.forward(&mut tape, &bound, x).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        bound.store_grads(&mut params, &grads);
        assert_eq!(params.tensors()[0].grad.as_deref(), Some(&[1.0, 2.0][..]));
        assert_eq!(params.tensors()[2].grad.as_deref(), Some(&[0.0, 0.0][..]));
    }
}
