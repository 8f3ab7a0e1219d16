use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scorer::ScoreModel;
use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Direction, Linear, Lstm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepLstmConfig {
    pub hidden: Vec<usize>,
    pub fc_hidden: usize,
}

impl Default for DeepLstmConfig {
    fn default() -> Self {
        DeepLstmConfig {
            hidden: vec![32, 32],
            fc_hidden: 16,
        }
    }
}

/// Stacked LSTMs over the full sequence, last hidden state, then a two-layer
/// head with a sigmoid output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeepLstmScorer {
    pub config: DeepLstmConfig,
    pub input_width: usize,
    lstms: Vec<Lstm>,
    fc1: Linear,
    fc2: Linear,
    pub params: ParamSet,
}

impl DeepLstmScorer {
    pub fn new(config: DeepLstmConfig, input_width: usize, seed: u64) -> Result<Self> {
        if config.hidden.is_empty()
            || config.hidden.contains(&0)
            || config.fc_hidden == 0
            || input_width == 0
        {
            return Err(Error::Parameter("deep LSTM widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut lstms = Vec::new();
        let mut width = input_width;
        for (i, &h) in config.hidden.iter().enumerate() {
            lstms.push(Lstm::new(
                &mut params,
                &format!("lstm{}", i + 1),
                width,
                h,
                &mut rng,
            ));
            width = h;
        }
        let fc1 = Linear::new(&mut params, "fc1", width, config.fc_hidden, &mut rng);
        let fc2 = Linear::new(&mut params, "fc2", config.fc_hidden, 1, &mut rng);
        Ok(DeepLstmScorer {
            config,
            input_width,
            lstms,
            fc1,
            fc2,
            params,
        })
    }
}

impl ScoreModel for DeepLstmScorer {
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
        let mut h = x;
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
