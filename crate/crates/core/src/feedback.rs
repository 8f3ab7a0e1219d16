//! Live per-joint feedback against an exercise template.
//!
//! For joint `j`, dissimilarity is the L1 distance between the live and
//! template orientation quaternions, `T_j = Σ_c |q_live[j,c] - q_tmpl[j,c]|`,
//! i.e. the 4-entry slice of the 100-wide orientation vector belonging to that
//! joint. No temporal alignment is attempted: a correct but slow performance
//! is compared frame by frame and shows up as dissimilar.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Recording, SkeletonFrame, NUM_JOINTS};

/// Per-joint L1 distance between quaternion components.
pub fn joint_dissimilarity(live: &SkeletonFrame, template: &SkeletonFrame) -> [f64; NUM_JOINTS] {
    dissimilarity_with(live, template, false)
}

/// Like [`joint_dissimilarity`], optionally flipping each live quaternion onto
/// the template's hemisphere first so `q` and `-q` compare as equal.
pub fn dissimilarity_with(
    live: &SkeletonFrame,
    template: &SkeletonFrame,
    align_sign: bool,
) -> [f64; NUM_JOINTS] {
    let mut out = [0.0; NUM_JOINTS];
    for (j, t) in out.iter_mut().enumerate() {
        let (ql, qt) = (&live.orientations[j], &template.orientations[j]);
        let flip = align_sign && ql.iter().zip(qt).map(|(a, b)| a * b).sum::<f64>() < 0.0;
        let sign = if flip { -1.0 } else { 1.0 };
        *t = ql.iter().zip(qt).map(|(a, b)| (sign * a - b).abs()).sum();
    }
    out
}

/// Thresholds of the linear green-to-red ramp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradingScale {
    pub t_green: f64,
    pub t_red: f64,
    pub num_classes: usize,
}

impl Default for GradingScale {
    fn default() -> Self {
        GradingScale {
            t_green: 0.05,
            t_red: 0.6,
            num_classes: 5,
        }
    }
}

impl GradingScale {
    pub fn new(t_green: f64, t_red: f64, num_classes: usize) -> Result<Self> {
        let scale = GradingScale {
            t_green,
            t_red,
            num_classes,
        };
        scale.validate()?;
        Ok(scale)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_green > 0.0) || !(self.t_red > self.t_green) || !self.t_red.is_finite() {
            return Err(Error::Config(format!(
                "grading thresholds must satisfy 0 < t_green < t_red, got {} and {}",
                self.t_green, self.t_red
            )));
        }
        if self.num_classes < 3 {
            return Err(Error::Config("grading needs at least 3 classes".into()));
        }
        Ok(())
    }

    /// Class index in `0..num_classes`; 0 is green, the last is red.
    pub fn class_of(&self, t: f64) -> usize {
        let top = self.num_classes - 1;
        if t <= self.t_green {
            return 0;
        }
        if t >= self.t_red {
            return top;
        }
        let u = (t - self.t_green) / (self.t_red - self.t_green);
        // absorb rounding so values on a class boundary land in the upper class
        ((u * top as f64 + 1e-9).floor() as usize).min(top)
    }

    /// RGB for a class: green through yellow to red.
    pub fn color_of(&self, class: usize) -> [u8; 3] {
        let u = class.min(self.num_classes - 1) as f64 / (self.num_classes - 1) as f64;
        if u <= 0.5 {
            [(510.0 * u).round() as u8, 255, 0]
        } else {
            [255, (510.0 * (1.0 - u)).round() as u8, 0]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointColor {
    pub class: usize,
    pub rgb: [u8; 3],
}

/// Grades each dissimilarity value.
pub fn grade(t_values: &[f64; NUM_JOINTS], scale: &GradingScale) -> [JointColor; NUM_JOINTS] {
    t_values.map(|t| {
        let class = scale.class_of(t);
        JointColor {
            class,
            rgb: scale.color_of(class),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackFrame {
    pub frame_index: u64,
    pub template_index: usize,
    pub t_values: Vec<f64>,
    pub colors: Vec<JointColor>,
    /// Mean of `t_values`.
    pub overall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    #[serde(default)]
    pub scale: GradingScale,
    /// Treat `q` and `-q` as the same orientation. Off by default.
    #[serde(default)]
    pub align_sign: bool,
}

impl FeedbackConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: FeedbackConfig =
            toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
        cfg.scale.validate()?;
        Ok(cfg)
    }
}

/// Aggregates reported when a session closes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub frames: usize,
    pub mean_t: Vec<f64>,
}

/// Frame-by-frame comparison against a looping template.
#[derive(Debug)]
pub struct FeedbackSession {
    template: Arc<Recording>,
    config: FeedbackConfig,
    cursor: usize,
    t_sums: [f64; NUM_JOINTS],
    frames: usize,
    closed: bool,
}

impl FeedbackSession {
    pub fn new(template: Arc<Recording>, config: FeedbackConfig) -> Result<Self> {
        if template.frames.is_empty() {
            return Err(Error::EmptyInput("template has no frames".into()));
        }
        config.scale.validate()?;
        Ok(FeedbackSession {
            template,
            config,
            cursor: 0,
            t_sums: [0.0; NUM_JOINTS],
            frames: 0,
            closed: false,
        })
    }

    pub fn template(&self) -> &Recording {
        &self.template
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Compares `live` to the template frame under the cursor, then advances
    /// the cursor, wrapping to frame 0 after the last template frame.
    pub fn step(&mut self, live: &SkeletonFrame) -> Result<FeedbackFrame> {
        if self.closed {
            return Err(Error::State("feedback session is closed".into()));
        }
        let template_index = self.cursor;
        let t = dissimilarity_with(
            live,
            &self.template.frames[template_index],
            self.config.align_sign,
        );
        let colors = grade(&t, &self.config.scale);
        for (sum, v) in self.t_sums.iter_mut().zip(&t) {
            *sum += v;
        }
        self.frames += 1;
        self.cursor = (self.cursor + 1) % self.template.frames.len();
        Ok(FeedbackFrame {
            frame_index: live.frame_index,
            template_index,
            overall: t.iter().sum::<f64>() / NUM_JOINTS as f64,
            t_values: t.to_vec(),
            colors: colors.to_vec(),
        })
    }

    pub fn stats(&self) -> SessionStats {
        let n = self.frames.max(1) as f64;
        SessionStats {
            frames: self.frames,
            mean_t: self.t_sums.iter().map(|s| s / n).collect(),
        }
    }

    pub fn close(&mut self) -> Result<SessionStats> {
        if self.closed {
            return Err(Error::State("feedback session already closed".into()));
        }
        self.closed = true;
        Ok(self.stats())
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}
