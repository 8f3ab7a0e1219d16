//! Skeleton data model, the `.rec` recording format, and length equalization.
//!
//! A `.rec` file is UTF-8 text. Line 1 is a JSON header
//! `{"subject": .., "exercise": "E1", "cohort": "healthy", "score": 42.0}`
//! (`score` optional, on the clinical 0..50 scale). Every following non-empty
//! line is one frame of 175 comma-separated decimals: 25 joint positions
//! (x, y, z) followed by 25 orientations (w, x, y, z), joint-major. A line may
//! carry one extra leading column with the timestamp in milliseconds; without
//! it timestamps are synthesized at 30 Hz.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 25;
pub const POSITION_WIDTH: usize = NUM_JOINTS * 3;
pub const ORIENTATION_WIDTH: usize = NUM_JOINTS * 4;
pub const FRAME_WIDTH: usize = POSITION_WIDTH + ORIENTATION_WIDTH;
/// Nominal Kinect frame rate used when timestamps are absent.
pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const MAX_CLINICAL_SCORE: f64 = 50.0;

/// Kinect v2 joint indices.
pub mod joints {
    pub const SPINE_BASE: usize = 0;
    pub const SPINE_MID: usize = 1;
    pub const NECK: usize = 2;
    pub const HEAD: usize = 3;
    pub const SHOULDER_LEFT: usize = 4;
    pub const ELBOW_LEFT: usize = 5;
    pub const WRIST_LEFT: usize = 6;
    pub const HAND_LEFT: usize = 7;
    pub const SHOULDER_RIGHT: usize = 8;
    pub const ELBOW_RIGHT: usize = 9;
    pub const WRIST_RIGHT: usize = 10;
    pub const HAND_RIGHT: usize = 11;
    pub const HIP_LEFT: usize = 12;
    pub const KNEE_LEFT: usize = 13;
    pub const ANKLE_LEFT: usize = 14;
    pub const FOOT_LEFT: usize = 15;
    pub const HIP_RIGHT: usize = 16;
    pub const KNEE_RIGHT: usize = 17;
    pub const ANKLE_RIGHT: usize = 18;
    pub const FOOT_RIGHT: usize = 19;
    pub const SPINE_SHOULDER: usize = 20;
    pub const HAND_TIP_LEFT: usize = 21;
    pub const THUMB_LEFT: usize = 22;
    pub const HAND_TIP_RIGHT: usize = 23;
    pub const THUMB_RIGHT: usize = 24;
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "SpineBase",
    "SpineMid",
    "Neck",
    "Head",
    "ShoulderLeft",
    "ElbowLeft",
    "WristLeft",
    "HandLeft",
    "ShoulderRight",
    "ElbowRight",
    "WristRight",
    "HandRight",
    "HipLeft",
    "KneeLeft",
    "AnkleLeft",
    "FootLeft",
    "HipRight",
    "KneeRight",
    "AnkleRight",
    "FootRight",
    "SpineShoulder",
    "HandTipLeft",
    "ThumbLeft",
    "HandTipRight",
    "ThumbRight",
];

/// The 24 bones of the Kinect v2 skeleton tree as (parent, child) pairs.
pub const BONES: [(usize, usize); NUM_JOINTS - 1] = [
    (0, 1),
    (1, 20),
    (20, 2),
    (2, 3),
    (20, 4),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 21),
    (6, 22),
    (20, 8),
    (8, 9),
    (9, 10),
    (10, 11),
    (11, 23),
    (10, 24),
    (0, 12),
    (12, 13),
    (13, 14),
    (14, 15),
    (0, 16),
    (16, 17),
    (17, 18),
    (18, 19),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ExerciseId {
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl ExerciseId {
    pub const ALL: [ExerciseId; 5] = [
        ExerciseId::E1,
        ExerciseId::E2,
        ExerciseId::E3,
        ExerciseId::E4,
        ExerciseId::E5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExerciseId::E1 => "Lifting of Arms",
            ExerciseId::E2 => "Lateral tilt of the trunk with arms in extension",
            ExerciseId::E3 => "Trunk Rotation",
            ExerciseId::E4 => "Pelvic Rotation on the Transverse Plane",
            ExerciseId::E5 => "Squatting",
        }
    }
}

impl fmt::Display for ExerciseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ExerciseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "E1" => Ok(ExerciseId::E1),
            "E2" => Ok(ExerciseId::E2),
            "E3" => Ok(ExerciseId::E3),
            "E4" => Ok(ExerciseId::E4),
            "E5" => Ok(ExerciseId::E5),
            other => Err(Error::Parameter(format!("unknown exercise `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Healthy,
    Impaired,
}

/// Unchecked frame layout as it appears on the wire; converted into a
/// [`SkeletonFrame`] through validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawFrame {
    pub positions: Vec<[f64; 3]>,
    pub orientations: Vec<[f64; 4]>,
    #[serde(default)]
    pub frame_index: u64,
    #[serde(default)]
    pub timestamp_ms: Option<f64>,
}

/// One time sample of 25 joint positions (meters) and unit-quaternion
/// orientations `(w, x, y, z)` relative to the spine base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame", into = "RawFrame")]
pub struct SkeletonFrame {
    pub positions: [[f64; 3]; NUM_JOINTS],
    pub orientations: [[f64; 4]; NUM_JOINTS],
    pub frame_index: u64,
    pub timestamp_ms: f64,
}

fn normalize_quaternion(q: [f64; 4]) -> Result<[f64; 4]> {
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Data("zero-norm quaternion".into()));
    }
    // already unit up to rounding: keep the exact bits so files round-trip
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(q);
    }
    Ok(q.map(|c| c / norm))
}

impl SkeletonFrame {
    /// Validates finiteness and normalizes every quaternion.
    pub fn new(
        positions: [[f64; 3]; NUM_JOINTS],
        orientations: [[f64; 4]; NUM_JOINTS],
        frame_index: u64,
        timestamp_ms: f64,
    ) -> Result<Self> {
        if positions.iter().flatten().any(|v| !v.is_finite())
            || orientations.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Data(format!(
                "non-finite value in frame {frame_index}"
            )));
        }
        if !(timestamp_ms >= 0.0) || !timestamp_ms.is_finite() {
            return Err(Error::Data(format!(
                "invalid timestamp in frame {frame_index}"
            )));
        }
        let mut normalized = orientations;
        for (j, q) in normalized.iter_mut().enumerate() {
            *q = normalize_quaternion(*q).map_err(|_| {
                Error::Data(format!(
                    "zero-norm quaternion at joint {j}, frame {frame_index}"
                ))
            })?;
        }
        Ok(SkeletonFrame {
            positions,
            orientations: normalized,
            frame_index,
            timestamp_ms,
        })
    }

    /// Builds a frame from 175 flattened values (positions then orientations).
    pub fn from_flat(values: &[f64], frame_index: u64, timestamp_ms: f64) -> Result<Self> {
        if values.len() != FRAME_WIDTH {
            return Err(Error::Schema(format!(
                "frame has {} values, expected {FRAME_WIDTH} ({NUM_JOINTS} joints)",
                values.len()
            )));
        }
        let mut positions = [[0.0; 3]; NUM_JOINTS];
        let mut orientations = [[0.0; 4]; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            positions[j].copy_from_slice(&values[3 * j..3 * j + 3]);
            let o = POSITION_WIDTH + 4 * j;
            orientations[j].copy_from_slice(&values[o..o + 4]);
        }
        Self::new(positions, orientations, frame_index, timestamp_ms)
    }

    pub fn flat_positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.positions.iter().flatten().copied()
    }

    pub fn flat_orientations(&self) -> impl Iterator<Item = f64> + '_ {
        self.orientations.iter().flatten().copied()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.flat_positions()
            .chain(self.flat_orientations())
            .collect()
    }
}

impl TryFrom<RawFrame> for SkeletonFrame {
    type Error = Error;

    fn try_from(raw: RawFrame) -> Result<Self> {
        if raw.positions.len() != NUM_JOINTS || raw.orientations.len() != NUM_JOINTS {
            return Err(Error::Schema(format!(
                "frame has {} positions and {} orientations, expected {NUM_JOINTS} joints",
                raw.positions.len(),
                raw.orientations.len()
            )));
        }
        let positions: [[f64; 3]; NUM_JOINTS] = raw.positions.try_into().expect("length checked");
        let orientations: [[f64; 4]; NUM_JOINTS] =
            raw.orientations.try_into().expect("length checked");
        let ts = raw
            .timestamp_ms
            .unwrap_or(raw.frame_index as f64 * 1000.0 / DEFAULT_RATE_HZ);
        SkeletonFrame::new(positions, orientations, raw.frame_index, ts)
    }
}

impl From<SkeletonFrame> for RawFrame {
    fn from(f: SkeletonFrame) -> Self {
        RawFrame {
            positions: f.positions.to_vec(),
            orientations: f.orientations.to_vec(),
            frame_index: f.frame_index,
            timestamp_ms: Some(f.timestamp_ms),
        }
    }
}

/// A subject's full performance of one exercise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub subject_id: String,
    pub exercise: ExerciseId,
    pub cohort: Cohort,
    pub frames: Vec<SkeletonFrame>,
    pub clinical_score: Option<f64>,
}

impl Recording {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Data(format!(
                "recording `{}` has {} frames, need at least 2",
                self.subject_id,
                self.frames.len()
            )));
        }
        for pair in self.frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::Data(format!(
                    "recording `{}`: frame indices not strictly increasing at {}",
                    self.subject_id, pair[1].frame_index
                )));
            }
            if pair[1].timestamp_ms < pair[0].timestamp_ms {
                return Err(Error::Data(format!(
                    "recording `{}`: timestamps decrease at frame {}",
                    self.subject_id, pair[1].frame_index
                )));
            }
        }
        if let Some(score) = self.clinical_score {
            if !(0.0..=MAX_CLINICAL_SCORE).contains(&score) {
                return Err(Error::Domain(format!(
                    "clinical score {score} outside [0, 50]"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RecHeader {
    subject: String,
    exercise: ExerciseId,
    cohort: Cohort,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn column_name(col: usize) -> String {
    const POS: [&str; 3] = ["x", "y", "z"];
    const ORI: [&str; 4] = ["w", "x", "y", "z"];
    if col < POSITION_WIDTH {
        format!("joint {} position {}", col / 3, POS[col % 3])
    } else {
        let c = col - POSITION_WIDTH;
        format!("joint {} orientation {}", c / 4, ORI[c % 4])
    }
}

/// Parses `.rec` text.
pub fn parse_recording(text: &str) -> Result<Recording> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        field: "header".into(),
        message: "empty file".into(),
    })?;
    let header: RecHeader = serde_json::from_str(header_line).map_err(|e| Error::Parse {
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;

    let mut frames = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let with_ts = match cells.len() {
            FRAME_WIDTH => false,
            n if n == FRAME_WIDTH + 1 => true,
            n => {
                return Err(Error::Schema(format!(
                    "line {line_no}: {n} values, expected {FRAME_WIDTH} ({NUM_JOINTS} joints x 7)"
                )))
            }
        };
        let mut values = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let field = match (with_ts, col) {
                (true, 0) => "timestamp_ms".to_string(),
                (true, c) => column_name(c - 1),
                (false, c) => column_name(c),
            };
            let v: f64 = cell.trim().parse().map_err(|e| Error::Parse {
                line: line_no,
                field: field.clone(),
                message: format!("`{}`: {e}", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "line {line_no}, {field}: non-finite value"
                )));
            }
            values.push(v);
        }
        let frame_index = frames.len() as u64;
        let (ts, body) = if with_ts {
            (values[0], &values[1..])
        } else {
            (frame_index as f64 * 1000.0 / DEFAULT_RATE_HZ, &values[..])
        };
        let frame = SkeletonFrame::from_flat(body, frame_index, ts).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("line {line_no}: {m}")),
            other => other,
        })?;
        frames.push(frame);
    }

    let rec = Recording {
        subject_id: header.subject,
        exercise: header.exercise,
        cohort: header.cohort,
        frames,
        clinical_score: header.score,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    parse_recording(&fs::read_to_string(path)?)
}

/// Serializes to `.rec` text. Frames are renumbered by line order on read, so
/// the timestamp column is written only when it differs from the 30 Hz grid.
pub fn format_recording(rec: &Recording) -> Result<String> {
    let header = RecHeader {
        subject: rec.subject_id.clone(),
        exercise: rec.exercise,
        cohort: rec.cohort,
        score: rec.clinical_score,
    };
    let synthesized = rec
        .frames
        .iter()
        .enumerate()
        .all(|(i, f)| f.timestamp_ms == i as f64 * 1000.0 / DEFAULT_RATE_HZ);
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for frame in &rec.frames {
        let mut cells: Vec<String> = Vec::with_capacity(FRAME_WIDTH + 1);
        if !synthesized {
            cells.push(frame.timestamp_ms.to_string());
        }
        cells.extend(frame.flat().iter().map(f64::to_string));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<()> {
    fs::write(path, format_recording(rec)?)?;
    Ok(())
}

/// Collection of recordings, possibly spanning several exercises.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn new(recordings: Vec<Recording>) -> Self {
        Dataset { recordings }
    }

    /// Number of recordings per exercise.
    pub fn manifest(&self) -> BTreeMap<ExerciseId, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.recordings {
            *counts.entry(r.exercise).or_insert(0) += 1;
        }
        counts
    }

    pub fn for_exercise(&self, exercise: ExerciseId) -> impl Iterator<Item = &Recording> {
        self.recordings
            .iter()
            .filter(move |r| r.exercise == exercise)
    }

    /// Reads every `*.rec` file in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "rec"))
            .collect();
        paths.sort();
        let recordings = paths
            .iter()
            .map(|p| {
                load_recording(p).map_err(|e| match e {
                    Error::Io(io) => Error::Io(io),
                    other => Error::Data(format!("{}: {other}", p.display())),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { recordings })
    }

    /// Writes each recording to `dir/<subject>_<exercise>.rec`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.recordings {
            save_recording(r, &dir.join(format!("{}_{}.rec", r.subject_id, r.exercise)))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(&fs::read_to_string(path)?)?;
        for r in &ds.recordings {
            r.validate()?;
        }
        Ok(ds)
    }
}

/// `round(mean)` with halves rounded up, computed exactly in integers.
pub fn mean_length(lengths: &[usize]) -> usize {
    let n = lengths.len();
    let sum: usize = lengths.iter().sum();
    (2 * sum + n) / (2 * n)
}

/// Piecewise-linear resampling of one channel over normalized time. Endpoints
/// are preserved exactly.
pub fn resample_channel(values: &[f64], target_len: usize) -> Vec<f64> {
    let m = values.len();
    if m == target_len {
        return values.to_vec();
    }
    if target_len == 1 || m == 1 {
        return vec![values[0]; target_len];
    }
    let denom = target_len - 1;
    (0..target_len)
        .map(|j| {
            // source position j*(m-1)/(target-1), kept as an exact fraction
            let num = j * (m - 1);
            let i0 = num / denom;
            let rem = num % denom;
            if rem == 0 {
                values[i0]
            } else {
                let frac = rem as f64 / denom as f64;
                values[i0] + frac * (values[i0 + 1] - values[i0])
            }
        })
        .collect()
}

/// Resamples a recording to `target_len` frames, channel by channel, then
/// renormalizes the quaternions.
pub fn resample_recording(rec: &Recording, target_len: usize) -> Result<Recording> {
    if rec.frames.len() == target_len {
        return Ok(rec.clone());
    }
    let rows: Vec<Vec<f64>> = rec.frames.iter().map(SkeletonFrame::flat).collect();
    let channels: Vec<Vec<f64>> = (0..FRAME_WIDTH)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            resample_channel(&col, target_len)
        })
        .collect();
    let timestamps: Vec<f64> = rec.frames.iter().map(|f| f.timestamp_ms).collect();
    let timestamps = resample_channel(&timestamps, target_len);
    let frames = (0..target_len)
        .map(|t| {
            let flat: Vec<f64> = channels.iter().map(|ch| ch[t]).collect();
            SkeletonFrame::from_flat(&flat, t as u64, timestamps[t])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Recording {
        frames,
        ..rec.clone()
    })
}

/// Resamples every recording of `exercise` to the rounded mean frame count of
/// that exercise. Recordings of other exercises pass through unchanged.
pub fn equalize_lengths(dataset: &Dataset, exercise: ExerciseId) -> Result<Dataset> {
    let lengths: Vec<usize> = dataset.for_exercise(exercise).map(Recording::len).collect();
    if lengths.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no recordings for exercise {exercise}"
        )));
    }
    if let Some(r) = dataset.for_exercise(exercise).find(|r| r.frames.len() < 2) {
        return Err(Error::Data(format!(
            "recording `{}` has fewer than 2 frames",
            r.subject_id
        )));
    }
    let target = mean_length(&lengths);
    let recordings = dataset
        .recordings
        .iter()
        .map(|r| {
            if r.exercise == exercise {
                resample_recording(r, target)
            } else {
                Ok(r.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { recordings })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixContent {
    Positions,
    Orientations,
    Both,
}

impl MatrixContent {
    pub fn width(self) -> usize {
        match self {
            MatrixContent::Positions => POSITION_WIDTH,
            MatrixContent::Orientations => ORIENTATION_WIDTH,
            MatrixContent::Both => FRAME_WIDTH,
        }
    }
}

/// Flattens frames into an `m x {75, 100, 175}` matrix, joint-major.
pub fn to_matrix(rec: &Recording, content: MatrixContent) -> Array2<f64> {
    let width = content.width();
    let mut data = Vec::with_capacity(rec.frames.len() * width);
    for f in &rec.frames {
        match content {
            MatrixContent::Positions => data.extend(f.flat_positions()),
            MatrixContent::Orientations => data.extend(f.flat_orientations()),
            MatrixContent::Both => data.extend(f.flat()),
        }
    }
    Array2::from_shape_vec((rec.frames.len(), width), data).expect("row widths are fixed")
}

/// Inverse of [`to_matrix`] with [`MatrixContent::Both`]; timestamps are
/// synthesized at 30 Hz.
pub fn frames_from_matrix(matrix: &Array2<f64>) -> Result<Vec<SkeletonFrame>> {
    if matrix.ncols() != FRAME_WIDTH {
        return Err(Error::Schema(format!(
            "matrix has {} columns, expected {FRAME_WIDTH}",
            matrix.ncols()
        )));
    }
    matrix
        .rows()
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            let values: Vec<f64> = row.iter().copied().collect();
            SkeletonFrame::from_flat(&values, t as u64, t as f64 * 1000.0 / DEFAULT_RATE_HZ)
        })
        .collect()
}
