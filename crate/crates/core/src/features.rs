//! Per-frame clinical features and context windows.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{
    joints, Cohort, ExerciseId, Recording, SkeletonFrame, MAX_CLINICAL_SCORE, NUM_JOINTS,
};

pub const FEATURE_SPEC_VERSION: u32 = 1;

/// Joint pairs closer than this make an angle undefined.
const DEGENERATE_LENGTH: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    /// Angle at `vertex` between the segments to `a` and `c`, in `[0, π]`.
    JointAngle { a: usize, vertex: usize, c: usize },
    /// Euclidean distance in meters.
    PairwiseDistance { a: usize, b: usize },
    /// Coordinate of `joint` along `axis`, measured from the spine base.
    AxisElevation { joint: usize, axis: Axis },
    /// Angle between the spine (base to shoulder center) and the vertical.
    TrunkTilt,
    /// One component (0 = w .. 3 = z) of a joint's orientation quaternion.
    OrientationComponent { joint: usize, component: usize },
}

impl Feature {
    fn joints(&self) -> Vec<usize> {
        match *self {
            Feature::JointAngle { a, vertex, c } => vec![a, vertex, c],
            Feature::PairwiseDistance { a, b } => vec![a, b],
            Feature::AxisElevation { joint, .. } | Feature::OrientationComponent { joint, .. } => {
                vec![joint]
            }
            Feature::TrunkTilt => vec![joints::SPINE_BASE, joints::SPINE_SHOULDER],
        }
    }

    /// Value for one frame; `None` marks degenerate geometry.
    fn evaluate(&self, frame: &SkeletonFrame) -> Option<f64> {
        let p = &frame.positions;
        match *self {
            Feature::JointAngle { a, vertex, c } => {
                angle_between(sub(p[a], p[vertex]), sub(p[c], p[vertex]))
            }
            Feature::PairwiseDistance { a, b } => Some(norm(sub(p[a], p[b]))),
            Feature::AxisElevation { joint, axis } => {
                Some(p[joint][axis.index()] - p[joints::SPINE_BASE][axis.index()])
            }
            Feature::TrunkTilt => angle_between(
                sub(p[joints::SPINE_SHOULDER], p[joints::SPINE_BASE]),
                [0.0, 1.0, 0.0],
            ),
            Feature::OrientationComponent { joint, component } => {
                Some(frame.orientations[joint][component])
            }
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn angle_between(u: [f64; 3], v: [f64; 3]) -> Option<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu < DEGENERATE_LENGTH || nv < DEGENERATE_LENGTH {
        return None;
    }
    let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
    Some(cos.clamp(-1.0, 1.0).acos())
}

/// Ordered feature list for one exercise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub version: u32,
    pub exercise: ExerciseId,
    pub features: Vec<Feature>,
}

impl FeatureSpec {
    pub fn new(exercise: ExerciseId, features: Vec<Feature>) -> Result<Self> {
        let spec = FeatureSpec {
            version: FEATURE_SPEC_VERSION,
            exercise,
            features,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-frame dimensionality.
    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FEATURE_SPEC_VERSION {
            return Err(Error::Config(format!(
                "unsupported feature spec version {}",
                self.version
            )));
        }
        if self.features.is_empty() {
            return Err(Error::Config("feature spec has no features".into()));
        }
        for f in &self.features {
            if let Some(j) = f.joints().into_iter().find(|&j| j >= NUM_JOINTS) {
                return Err(Error::Config(format!(
                    "joint index {j} out of range in {f:?}"
                )));
            }
            if let Feature::OrientationComponent { component, .. } = f {
                if *component > 3 {
                    return Err(Error::Config(format!(
                        "quaternion component {component} out of range"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: FeatureSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a spec from TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let spec: FeatureSpec = serde_json::from_str(&text)?;
            spec.validate()?;
            Ok(spec)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// Built-in feature set for an exercise.
    pub fn default_for(exercise: ExerciseId) -> Self {
        use joints::*;
        use Feature::*;
        let elbow_l = JointAngle {
            a: SHOULDER_LEFT,
            vertex: ELBOW_LEFT,
            c: WRIST_LEFT,
        };
        let elbow_r = JointAngle {
            a: SHOULDER_RIGHT,
            vertex: ELBOW_RIGHT,
            c: WRIST_RIGHT,
        };
        let shoulder_l = JointAngle {
            a: SPINE_MID,
            vertex: SHOULDER_LEFT,
            c: ELBOW_LEFT,
        };
        let shoulder_r = JointAngle {
            a: SPINE_MID,
            vertex: SHOULDER_RIGHT,
            c: ELBOW_RIGHT,
        };
        let knee_l = JointAngle {
            a: HIP_LEFT,
            vertex: KNEE_LEFT,
            c: ANKLE_LEFT,
        };
        let knee_r = JointAngle {
            a: HIP_RIGHT,
            vertex: KNEE_RIGHT,
            c: ANKLE_RIGHT,
        };
        let quat =
            |joint: usize| (0..4).map(move |component| OrientationComponent { joint, component });
        let features: Vec<Feature> = match exercise {
            ExerciseId::E1 => vec![
                shoulder_l,
                shoulder_r,
                elbow_l,
                elbow_r,
                AxisElevation {
                    joint: WRIST_LEFT,
                    axis: Axis::Y,
                },
                AxisElevation {
                    joint: WRIST_RIGHT,
                    axis: Axis::Y,
                },
                PairwiseDistance {
                    a: WRIST_LEFT,
                    b: WRIST_RIGHT,
                },
            ]
            .into_iter()
            .chain(quat(SHOULDER_LEFT))
            .chain(quat(SHOULDER_RIGHT))
            .collect(),
            ExerciseId::E2 => vec![
                TrunkTilt,
                shoulder_l,
                shoulder_r,
                elbow_l,
                elbow_r,
                AxisElevation {
                    joint: WRIST_LEFT,
                    axis: Axis::Y,
                },
                AxisElevation {
                    joint: WRIST_RIGHT,
                    axis: Axis::Y,
                },
                AxisElevation {
                    joint: SPINE_SHOULDER,
                    axis: Axis::X,
                },
            ]
            .into_iter()
            .chain(quat(SPINE_SHOULDER))
            .collect(),
            ExerciseId::E3 => vec![
                TrunkTilt,
                PairwiseDistance {
                    a: SHOULDER_LEFT,
                    b: HIP_RIGHT,
                },
                PairwiseDistance {
                    a: SHOULDER_RIGHT,
                    b: HIP_LEFT,
                },
                AxisElevation {
                    joint: SHOULDER_LEFT,
                    axis: Axis::Z,
                },
                AxisElevation {
                    joint: SHOULDER_RIGHT,
                    axis: Axis::Z,
                },
            ]
            .into_iter()
            .chain(quat(SPINE_SHOULDER))
            .chain(quat(SPINE_MID))
            .collect(),
            ExerciseId::E4 => vec![
                knee_l,
                knee_r,
                AxisElevation {
                    joint: HIP_LEFT,
                    axis: Axis::Z,
                },
                AxisElevation {
                    joint: HIP_RIGHT,
                    axis: Axis::Z,
                },
            ]
            .into_iter()
            .chain(quat(SPINE_BASE))
            .chain(quat(HIP_LEFT))
            .chain(quat(HIP_RIGHT))
            .collect(),
            ExerciseId::E5 => vec![
                knee_l,
                knee_r,
                JointAngle {
                    a: SPINE_MID,
                    vertex: HIP_LEFT,
                    c: KNEE_LEFT,
                },
                JointAngle {
                    a: SPINE_MID,
                    vertex: HIP_RIGHT,
                    c: KNEE_RIGHT,
                },
                TrunkTilt,
                AxisElevation {
                    joint: ANKLE_LEFT,
                    axis: Axis::Y,
                },
                AxisElevation {
                    joint: ANKLE_RIGHT,
                    axis: Axis::Y,
                },
            ]
            .into_iter()
            .chain(quat(KNEE_LEFT))
            .chain(quat(KNEE_RIGHT))
            .collect(),
        };
        FeatureSpec::new(exercise, features).expect("built-in specs are valid")
    }
}

/// Degenerate-geometry flag raised while extracting features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureWarning {
    pub frame: usize,
    pub feature: usize,
}

/// `M x K` matrix of per-frame features for one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub values: Array2<f64>,
    pub exercise: ExerciseId,
    pub subject_id: String,
    pub cohort: Cohort,
    /// Clinical score scaled to `[0, 1]`.
    pub score: Option<f64>,
    pub warnings: Vec<FeatureWarning>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// Evaluates `spec` on every frame. Each row depends only on its own frame.
/// Degenerate angles yield 0 and a [`FeatureWarning`] instead of an error.
pub fn extract_features(rec: &Recording, spec: &FeatureSpec) -> Result<FeatureSequence> {
    spec.validate()?;
    if rec.exercise != spec.exercise {
        return Err(Error::Parameter(format!(
            "feature spec is for {} but recording `{}` is {}",
            spec.exercise, rec.subject_id, rec.exercise
        )));
    }
    let k = spec.width();
    let mut values = Array2::zeros((rec.frames.len(), k));
    let mut warnings = Vec::new();
    for (t, frame) in rec.frames.iter().enumerate() {
        for (i, feature) in spec.features.iter().enumerate() {
            match feature.evaluate(frame) {
                Some(v) => values[[t, i]] = v,
                None => warnings.push(FeatureWarning {
                    frame: t,
                    feature: i,
                }),
            }
        }
    }
    if !warnings.is_empty() {
        log::warn!(
            "recording `{}`: {} degenerate feature values set to 0",
            rec.subject_id,
            warnings.len()
        );
    }
    let score = rec.clinical_score.map(scale_score).transpose()?;
    Ok(FeatureSequence {
        values,
        exercise: rec.exercise,
        subject_id: rec.subject_id.clone(),
        cohort: rec.cohort,
        score,
        warnings,
    })
}

/// Maps a clinical score in `[0, 50]` to `[0, 1]`.
pub fn scale_score(raw: f64) -> Result<f64> {
    if !(0.0..=MAX_CLINICAL_SCORE).contains(&raw) {
        return Err(Error::Domain(format!(
            "clinical score {raw} outside [0, 50]"
        )));
    }
    Ok(raw / MAX_CLINICAL_SCORE)
}

/// Inverse of [`scale_score`].
pub fn unscale_score(scaled: f64) -> f64 {
    scaled * MAX_CLINICAL_SCORE
}

/// Concatenates each row with its `(w-1)/2` predecessors and successors,
/// replicating the first/last row past the sequence edges.
///
/// Output row `t` is `[x(t-k), .., x(t), .., x(t+k)]`, width `w * D`.
pub fn context_window(seq: ArrayView2<'_, f64>, w: usize) -> Result<Array2<f64>> {
    if w == 0 || w.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "context window must be odd and positive, got {w}"
        )));
    }
    let (m, d) = seq.dim();
    if m == 0 {
        return Err(Error::EmptyInput(
            "context window over an empty sequence".into(),
        ));
    }
    let half = (w / 2) as isize;
    let mut out = Array2::zeros((m, w * d));
    for t in 0..m {
        for (slot, offset) in (-half..=half).enumerate() {
            let src = (t as isize + offset).clamp(0, m as isize - 1) as usize;
            out.slice_mut(s![t, slot * d..(slot + 1) * d])
                .assign(&seq.row(src));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;

    fn frame_with(points: &[(usize, [f64; 3])]) -> SkeletonFrame {
        let mut positions = [[0.0; 3]; NUM_JOINTS];
        for (j, p) in positions.iter_mut().enumerate() {
            *p = [j as f64 * 0.01, 0.0, 0.0];
        }
        for &(j, p) in points {
            positions[j] = p;
        }
        SkeletonFrame::new(positions, [[1.0, 0.0, 0.0, 0.0]; NUM_JOINTS], 0, 0.0).unwrap()
    }

    fn rec(frames: Vec<SkeletonFrame>) -> Recording {
        Recording {
            subject_id: "t".into(),
            exercise: ExerciseId::E1,
            cohort: Cohort::Healthy,
            frames,
            clinical_score: Some(25.0),
        }
    }

    fn single(feature: Feature, frame: SkeletonFrame) -> FeatureSequence {
        let spec = FeatureSpec::new(ExerciseId::E1, vec![feature]).unwrap();
        extract_features(&rec(vec![frame]), &spec).unwrap()
    }

    #[test]
    fn right_angle_at_elbow() {
        let f = frame_with(&[
            (4, [0.0, 1.0, 0.0]),
            (5, [0.0, 0.0, 0.0]),
            (6, [1.0, 0.0, 0.0]),
        ]);
        let out = single(
            Feature::JointAngle {
                a: 4,
                vertex: 5,
                c: 6,
            },
            f,
        );
        assert!((out.values[[0, 0]] - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn collinear_joints_give_pi() {
        let f = frame_with(&[
            (4, [-1.0, 0.0, 0.0]),
            (5, [0.0, 0.0, 0.0]),
            (6, [2.0, 0.0, 0.0]),
        ]);
        let out = single(
            Feature::JointAngle {
                a: 4,
                vertex: 5,
                c: 6,
            },
            f,
        );
        assert!((out.values[[0, 0]] - PI).abs() < 1e-15);
    }

    #[test]
    fn self_distance_is_zero() {
        let f = frame_with(&[]);
        let out = single(Feature::PairwiseDistance { a: 7, b: 7 }, f);
        assert_eq!(out.values[[0, 0]], 0.0);
    }

    #[test]
    fn coincident_joints_warn_instead_of_failing() {
        let f = frame_with(&[
            (4, [0.5, 0.5, 0.5]),
            (5, [0.5, 0.5, 0.5]),
            (6, [1.0, 0.0, 0.0]),
        ]);
        let out = single(
            Feature::JointAngle {
                a: 4,
                vertex: 5,
                c: 6,
            },
            f,
        );
        assert_eq!(out.values[[0, 0]], 0.0);
        assert_eq!(
            out.warnings,
            vec![FeatureWarning {
                frame: 0,
                feature: 0
            }]
        );
    }

    #[test]
    fn score_is_scaled_on_extraction() {
        let out = single(Feature::TrunkTilt, frame_with(&[(20, [0.0, 1.0, 0.0])]));
        assert_eq!(out.score, Some(0.5));
        assert!(out.values[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn scale_score_endpoints() {
        assert_eq!(scale_score(50.0).unwrap(), 1.0);
        assert_eq!(scale_score(0.0).unwrap(), 0.0);
        assert_eq!(scale_score(25.0).unwrap(), 0.5);
        assert!(matches!(scale_score(50.5), Err(Error::Domain(_))));
        assert!(matches!(scale_score(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn context_window_replicates_edges() {
        let x = array![[1.0], [2.0], [3.0]];
        let out = context_window(x.view(), 3).unwrap();
        assert_eq!(
            out,
            array![[1.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 3.0]]
        );
    }

    #[test]
    fn context_window_of_one_is_identity() {
        let x = array![[1.0, -2.0], [0.5, 4.0]];
        assert_eq!(context_window(x.view(), 1).unwrap(), x);
        assert!(matches!(
            context_window(x.view(), 2),
            Err(Error::Parameter(_))
        ));
        assert_eq!(context_window(x.view(), 5).unwrap().ncols(), 10);
    }

    #[test]
    fn default_specs_are_valid_and_round_trip_through_toml() {
        for ex in ExerciseId::ALL {
            let spec = FeatureSpec::default_for(ex);
            let text = spec.to_toml_string().unwrap();
            assert_eq!(FeatureSpec::from_toml_str(&text).unwrap(), spec);
        }
    }

    #[test]
    fn out_of_range_joint_is_config_error() {
        let err = FeatureSpec::new(
            ExerciseId::E1,
            vec![Feature::PairwiseDistance { a: 0, b: 25 }],
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
