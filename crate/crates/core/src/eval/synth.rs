//! Synthetic skeleton recordings with a known score function.
//!
//! Each exercise is a small set of rotation drivers, each turning a group of
//! joints about a pivot joint. Driver angles follow a multi-sinusoid profile;
//! impaired performances attenuate the amplitude, warp the timing and may add
//! an oscillating tremor.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{
    joints::*, Cohort, Dataset, ExerciseId, Recording, SkeletonFrame, BONES, DEFAULT_RATE_HZ,
    MAX_CLINICAL_SCORE, NUM_JOINTS,
};

/// Maps a performance's deviation to the clinical scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFunction {
    pub attenuation_weight: f64,
    pub tremor_weight: f64,
}

impl Default for ScoreFunction {
    fn default() -> Self {
        ScoreFunction {
            attenuation_weight: 1.0,
            tremor_weight: 0.5,
        }
    }
}

impl ScoreFunction {
    /// Deviation in `[0, 1]`; zero for a full-amplitude, tremor-free motion.
    pub fn deviation(&self, alpha: f64, tremor_fraction: f64) -> f64 {
        (self.attenuation_weight * (1.0 - alpha) + self.tremor_weight * tremor_fraction)
            .clamp(0.0, 1.0)
    }

    pub fn score(&self, alpha: f64, tremor_fraction: f64) -> f64 {
        MAX_CLINICAL_SCORE * (1.0 - self.deviation(alpha, tremor_fraction))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub exercises: Vec<ExerciseId>,
    /// Healthy recordings per exercise.
    pub n_healthy: usize,
    /// Impaired recordings per exercise.
    pub n_impaired: usize,
    /// Nominal frame count.
    pub frames: usize,
    /// Recording lengths vary uniformly by this fraction of `frames`.
    pub length_jitter: f64,
    pub repetitions: usize,
    /// Amplitude of smooth per-driver angle noise, radians.
    pub noise_std: f64,
    /// Gaussian noise on joint positions, meters.
    pub sensor_noise_std: f64,
    /// Healthy amplitudes are drawn from `[1 - spread, 1]`.
    pub healthy_alpha_spread: f64,
    /// Impaired amplitude range.
    pub impaired_alpha: [f64; 2],
    /// Largest time-warp strength for impaired recordings, in `[0, 1)`.
    pub phase_jitter: f64,
    /// Largest tremor amplitude, radians; zero disables tremor.
    pub tremor_max: f64,
    /// Tremor oscillation period in frames.
    pub tremor_period: f64,
    pub score: ScoreFunction,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            exercises: ExerciseId::ALL.to_vec(),
            n_healthy: 20,
            n_impaired: 20,
            frames: 48,
            length_jitter: 0.15,
            repetitions: 2,
            noise_std: 0.03,
            sensor_noise_std: 0.002,
            healthy_alpha_spread: 0.05,
            impaired_alpha: [0.3, 0.95],
            phase_jitter: 0.3,
            tremor_max: 0.0,
            tremor_period: 6.0,
            score: ScoreFunction::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.exercises.is_empty() {
            return bad("no exercises selected");
        }
        if self.frames < 2 {
            return bad("frames must be >= 2");
        }
        if !(0.0..1.0).contains(&self.length_jitter) {
            return bad("length_jitter must lie in [0, 1)");
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1");
        }
        if self.noise_std < 0.0 || self.sensor_noise_std < 0.0 || self.tremor_max < 0.0 {
            return bad("noise and tremor amplitudes must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.healthy_alpha_spread) {
            return bad("healthy_alpha_spread must lie in [0, 1]");
        }
        let [lo, hi] = self.impaired_alpha;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("impaired_alpha must be an ordered range within [0, 1]");
        }
        if !(self.tremor_period >= 2.0) {
            return bad("tremor_period must be at least 2 frames");
        }
        if !(0.0..1.0).contains(&self.phase_jitter) {
            return bad("phase_jitter must lie in [0, 1)");
        }
        if self.score.attenuation_weight < 0.0 || self.score.tremor_weight < 0.0 {
            return bad("score weights must be >= 0");
        }
        Ok(())
    }
}

/// How one performance departs from the template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    /// Amplitude factor; 1 is the full template motion.
    pub alpha: f64,
    /// Time-warp strength in `(-1, 1)`.
    pub warp: f64,
    /// Tremor amplitude, radians.
    pub tremor: f64,
}

impl Performance {
    pub const TEMPLATE: Performance = Performance {
        alpha: 1.0,
        warp: 0.0,
        tremor: 0.0,
    };
}

#[derive(Clone, Copy, Debug)]
enum Profile {
    /// `0.5 (1 - cos)` per repetition: rest, peak, rest.
    Raise,
    /// Zero-mean swing to both sides.
    Swing,
    Constant,
}

#[derive(Clone, Debug)]
struct Driver {
    pivot: usize,
    joints: Vec<usize>,
    axis: [f64; 3],
    amplitude: f64,
    profile: Profile,
}

fn descendants(root: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(j) = stack.pop() {
        for &(p, c) in &BONES {
            if p == j {
                out.push(c);
                stack.push(c);
            }
        }
    }
    out
}

fn with_root(root: usize) -> Vec<usize> {
    let mut v = vec![root];
    v.extend(descendants(root));
    v
}

/// Upright rest pose, meters, y up.
pub fn rest_pose() -> [[f64; 3]; NUM_JOINTS] {
    let mut p = [[0.0; 3]; NUM_JOINTS];
    p[SPINE_BASE] = [0.0, 1.0, 0.0];
    p[SPINE_MID] = [0.0, 1.25, 0.0];
    p[SPINE_SHOULDER] = [0.0, 1.5, 0.0];
    p[NECK] = [0.0, 1.56, 0.0];
    p[HEAD] = [0.0, 1.72, 0.0];
    for (side, sh, el, wr, ha, tip, th, hip, kn, an, ft) in [
        (
            -1.0,
            SHOULDER_LEFT,
            ELBOW_LEFT,
            WRIST_LEFT,
            HAND_LEFT,
            HAND_TIP_LEFT,
            THUMB_LEFT,
            HIP_LEFT,
            KNEE_LEFT,
            ANKLE_LEFT,
            FOOT_LEFT,
        ),
        (
            1.0,
            SHOULDER_RIGHT,
            ELBOW_RIGHT,
            WRIST_RIGHT,
            HAND_RIGHT,
            HAND_TIP_RIGHT,
            THUMB_RIGHT,
            HIP_RIGHT,
            KNEE_RIGHT,
            ANKLE_RIGHT,
            FOOT_RIGHT,
        ),
    ] {
        p[sh] = [side * 0.18, 1.45, 0.0];
        p[el] = [side * 0.2, 1.18, 0.0];
        p[wr] = [side * 0.21, 0.93, 0.0];
        p[ha] = [side * 0.21, 0.85, 0.0];
        p[tip] = [side * 0.21, 0.77, 0.0];
        p[th] = [side * 0.17, 0.85, 0.03];
        p[hip] = [side * 0.1, 0.95, 0.0];
        p[kn] = [side * 0.1, 0.52, 0.02];
        p[an] = [side * 0.1, 0.1, 0.0];
        p[ft] = [side * 0.1, 0.05, 0.12];
    }
    p
}

const X: [f64; 3] = [1.0, 0.0, 0.0];
const Y: [f64; 3] = [0.0, 1.0, 0.0];
const Z: [f64; 3] = [0.0, 0.0, 1.0];

/// Drivers listed distal first; each later driver also moves joints already
/// displaced by earlier ones.
fn drivers(exercise: ExerciseId) -> (Vec<Driver>, Option<usize>) {
    let d = |pivot, joints, axis, amplitude, profile| Driver {
        pivot,
        joints,
        axis,
        amplitude,
        profile,
    };
    let upper = descendants(SPINE_MID);
    match exercise {
        ExerciseId::E1 => (
            vec![
                d(
                    ELBOW_LEFT,
                    descendants(ELBOW_LEFT),
                    Z,
                    -0.35,
                    Profile::Raise,
                ),
                d(
                    ELBOW_RIGHT,
                    descendants(ELBOW_RIGHT),
                    Z,
                    0.35,
                    Profile::Raise,
                ),
                d(
                    SHOULDER_LEFT,
                    descendants(SHOULDER_LEFT),
                    Z,
                    -2.4,
                    Profile::Raise,
                ),
                d(
                    SHOULDER_RIGHT,
                    descendants(SHOULDER_RIGHT),
                    Z,
                    2.4,
                    Profile::Raise,
                ),
            ],
            None,
        ),
        ExerciseId::E2 => (
            vec![
                d(
                    SHOULDER_LEFT,
                    descendants(SHOULDER_LEFT),
                    Z,
                    -2.7,
                    Profile::Constant,
                ),
                d(
                    SHOULDER_RIGHT,
                    descendants(SHOULDER_RIGHT),
                    Z,
                    2.7,
                    Profile::Constant,
                ),
                d(SPINE_MID, upper, Z, 0.45, Profile::Swing),
            ],
            None,
        ),
        ExerciseId::E3 => (
            vec![
                d(
                    SHOULDER_LEFT,
                    descendants(SHOULDER_LEFT),
                    Z,
                    -1.4,
                    Profile::Constant,
                ),
                d(
                    SHOULDER_RIGHT,
                    descendants(SHOULDER_RIGHT),
                    Z,
                    1.4,
                    Profile::Constant,
                ),
                d(SPINE_MID, upper, Y, 0.7, Profile::Swing),
            ],
            None,
        ),
        ExerciseId::E4 => {
            let mut pelvis = with_root(HIP_LEFT);
            pelvis.extend(with_root(HIP_RIGHT));
            (
                vec![
                    d(KNEE_LEFT, descendants(KNEE_LEFT), X, 0.2, Profile::Swing),
                    d(KNEE_RIGHT, descendants(KNEE_RIGHT), X, -0.2, Profile::Swing),
                    d(SPINE_BASE, pelvis, Y, 0.5, Profile::Swing),
                ],
                None,
            )
        }
        ExerciseId::E5 => (
            vec![
                d(KNEE_LEFT, descendants(KNEE_LEFT), X, 2.0, Profile::Raise),
                d(KNEE_RIGHT, descendants(KNEE_RIGHT), X, 2.0, Profile::Raise),
                d(HIP_LEFT, with_root(KNEE_LEFT), X, -1.0, Profile::Raise),
                d(HIP_RIGHT, with_root(KNEE_RIGHT), X, -1.0, Profile::Raise),
                d(SPINE_BASE, with_root(SPINE_MID), X, 0.5, Profile::Raise),
            ],
            Some(ANKLE_LEFT),
        ),
    }
}

fn profile_value(profile: Profile, u: f64, reps: usize) -> f64 {
    let phase = TAU * reps as f64 * u;
    match profile {
        Profile::Raise => 0.5 * (1.0 - phase.cos()) + 0.08 * (2.0 * phase).sin(),
        Profile::Swing => phase.sin() + 0.15 * (3.0 * phase).sin(),
        Profile::Constant => 1.0,
    }
}

fn axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let (s, c) = (0.5 * angle).sin_cos();
    [c, axis[0] * s, axis[1] * s, axis[2] * s]
}

/// Hamilton product `a * b`, (w, x, y, z) order.
fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let p = quat_mul(
        quat_mul(q, [0.0, v[0], v[1], v[2]]),
        [q[0], -q[1], -q[2], -q[3]],
    );
    [p[1], p[2], p[3]]
}

fn unit(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / n)
}

/// Smooth low-frequency angle perturbation for one driver.
#[derive(Clone, Copy, Debug)]
struct Wobble {
    amplitude: f64,
    freq: f64,
    phase: f64,
}

/// Renders one performance of `exercise` as `frames` skeleton frames.
fn render(
    exercise: ExerciseId,
    frames: usize,
    reps: usize,
    perf: Performance,
    wobble: &[Wobble],
    tremor: (f64, f64),
    sensor_noise: &mut dyn FnMut() -> f64,
) -> Result<Vec<SkeletonFrame>> {
    let (drivers, anchor) = drivers(exercise);
    let rest = rest_pose();
    let denom = (frames - 1).max(1) as f64;
    (0..frames)
        .map(|t| {
            let u = t as f64 / denom;
            let warped = u + perf.warp * (TAU * u).sin() / TAU;
            let (period, tremor_phase) = tremor;
            let shake = perf.tremor * (TAU * t as f64 / period + tremor_phase).sin();
            let mut pos = rest;
            let mut ori = [[1.0, 0.0, 0.0, 0.0]; NUM_JOINTS];
            for (k, d) in drivers.iter().enumerate() {
                let mut angle = perf.alpha * d.amplitude * profile_value(d.profile, warped, reps);
                if !matches!(d.profile, Profile::Constant) {
                    angle += shake;
                }
                if let Some(w) = wobble.get(k) {
                    angle += w.amplitude * (TAU * w.freq * u + w.phase).sin();
                }
                let q = axis_angle(d.axis, angle);
                let pivot = pos[d.pivot];
                for &j in &d.joints {
                    let rel = [
                        pos[j][0] - pivot[0],
                        pos[j][1] - pivot[1],
                        pos[j][2] - pivot[2],
                    ];
                    let r = rotate(q, rel);
                    pos[j] = [pivot[0] + r[0], pivot[1] + r[1], pivot[2] + r[2]];
                    ori[j] = quat_mul(q, ori[j]);
                }
            }
            if let Some(a) = anchor {
                let shift = [
                    rest[a][0] - pos[a][0],
                    rest[a][1] - pos[a][1],
                    rest[a][2] - pos[a][2],
                ];
                for p in pos.iter_mut() {
                    for (c, s) in p.iter_mut().zip(shift) {
                        *c += s;
                    }
                }
            }
            for p in pos.iter_mut().flatten() {
                *p += sensor_noise();
            }
            let ori = ori.map(unit);
            SkeletonFrame::new(pos, ori, t as u64, t as f64 * 1000.0 / DEFAULT_RATE_HZ)
        })
        .collect()
}

/// Noise-free template motion, scored 50.
pub fn template_recording(
    exercise: ExerciseId,
    frames: usize,
    repetitions: usize,
) -> Result<Recording> {
    let cfg = SynthConfig {
        noise_std: 0.0,
        sensor_noise_std: 0.0,
        repetitions,
        ..SynthConfig::default()
    };
    synthesize_recording(
        &cfg,
        exercise,
        frames,
        Performance::TEMPLATE,
        0,
        "template",
        Cohort::Healthy,
    )
}

/// One recording with explicit performance parameters, using the noise
/// levels, repetitions and score function of `cfg`.
pub fn synthesize_recording(
    cfg: &SynthConfig,
    exercise: ExerciseId,
    frames: usize,
    perf: Performance,
    seed: u64,
    subject_id: &str,
    cohort: Cohort,
) -> Result<Recording> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let score = cfg.score.score(perf.alpha, tremor_fraction(cfg, perf));
    make(
        cfg, exercise, frames, perf, &mut rng, subject_id, cohort, score,
    )
}

fn tremor_fraction(cfg: &SynthConfig, perf: Performance) -> f64 {
    if cfg.tremor_max > 0.0 {
        (perf.tremor / cfg.tremor_max).min(1.0)
    } else {
        0.0
    }
}

#[allow(clippy::too_many_arguments)]
fn make(
    cfg: &SynthConfig,
    exercise: ExerciseId,
    frames: usize,
    perf: Performance,
    rng: &mut ChaCha8Rng,
    subject_id: &str,
    cohort: Cohort,
    score: f64,
) -> Result<Recording> {
    if frames < 2 {
        return Err(Error::Parameter(
            "a recording needs at least 2 frames".into(),
        ));
    }
    let n_drivers = drivers(exercise).0.len();
    let wobble: Vec<Wobble> = (0..n_drivers)
        .map(|_| Wobble {
            amplitude: cfg.noise_std * rng.random_range(0.5..1.5),
            freq: rng.random_range(0.3..1.5),
            phase: rng.random_range(0.0..TAU),
        })
        .collect();
    let tremor = (cfg.tremor_period, rng.random_range(0.0..TAU));
    let sensor_noise_std = cfg.sensor_noise_std;
    let normal =
        Normal::new(0.0, sensor_noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut sensor = || {
        if sensor_noise_std > 0.0 {
            normal.sample(&mut noise_rng)
        } else {
            0.0
        }
    };
    let frames = render(
        exercise,
        frames,
        cfg.repetitions,
        perf,
        &wobble,
        tremor,
        &mut sensor,
    )?;
    let rec = Recording {
        subject_id: subject_id.to_string(),
        exercise,
        cohort,
        frames,
        clinical_score: Some(score.clamp(0.0, MAX_CLINICAL_SCORE)),
    };
    rec.validate()?;
    Ok(rec)
}

/// Healthy and impaired recordings for every configured exercise, with
/// varying lengths and scores from the configured score function.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut recordings = Vec::new();
    for &exercise in &cfg.exercises {
        for (cohort, count) in [
            (Cohort::Healthy, cfg.n_healthy),
            (Cohort::Impaired, cfg.n_impaired),
        ] {
            for i in 0..count {
                let jitter = cfg.length_jitter * cfg.frames as f64;
                let frames = ((cfg.frames as f64 + rng.random_range(-jitter..=jitter)).round()
                    as usize)
                    .max(2);
                let perf = match cohort {
                    Cohort::Healthy => Performance {
                        alpha: 1.0 - cfg.healthy_alpha_spread * rng.random::<f64>(),
                        warp: 0.0,
                        tremor: 0.0,
                    },
                    Cohort::Impaired => Performance {
                        alpha: rng.random_range(cfg.impaired_alpha[0]..=cfg.impaired_alpha[1]),
                        warp: cfg.phase_jitter * rng.random_range(-1.0..=1.0),
                        tremor: cfg.tremor_max * rng.random::<f64>(),
                    },
                };
                let score = cfg.score.score(perf.alpha, tremor_fraction(cfg, perf));
                let tag = match cohort {
                    Cohort::Healthy => 'h',
                    Cohort::Impaired => 'p',
                };
                let id = format!("{exercise}-{tag}{i:03}");
                let rec = make(cfg, exercise, frames, perf, &mut rng, &id, cohort, score)?;
                recordings.push(rec);
            }
        }
    }
    Ok(Dataset::new(recordings))
}
