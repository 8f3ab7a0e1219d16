use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiments::{DimredSection, MethodRow, ScoringSection, SeedRun, SweepSection};
use crate::error::Result;

pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub commit: Option<String>,
    /// Experiment configuration per section, as run.
    pub configs: BTreeMap<String, serde_json::Value>,
}

/// Results of the dimensionality-reduction, scoring and context-window
/// experiments. Sections are filled independently.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dimred: Option<DimredSection>,
    pub scoring: Option<ScoringSection>,
    pub sweep: Option<SweepSection>,
    pub metadata: RunMetadata,
}

fn seeds_cell(values: &[f64]) -> String {
    values
        .iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

fn method_csv(rows: &[MethodRow]) -> String {
    let mut out = String::from("method,mean,std,per_seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.method,
            r.mean,
            r.std,
            seeds_cell(&r.per_seed)
        );
    }
    out
}

impl ExperimentReport {
    /// Reads `report.json` from `dir`, or starts an empty report.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(REPORT_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Writes `report.json`, `metadata.json` and one CSV per filled section.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(REPORT_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        fs::write(
            dir.join("metadata.json"),
            serde_json::to_string_pretty(&self.metadata)? + "\n",
        )?;
        if let Some(d) = &self.dimred {
            fs::write(dir.join("dimred.csv"), method_csv(&d.rows))?;
        }
        if let Some(s) = &self.scoring {
            fs::write(dir.join("scoring.csv"), method_csv(&s.rows))?;
        }
        if let Some(s) = &self.sweep {
            fs::write(dir.join("context_sweep.csv"), self.sweep_csv(s))?;
        }
        Ok(())
    }

    fn sweep_csv(&self, s: &SweepSection) -> String {
        let mut out = String::from("window,mean,std,per_seed\n");
        for p in &s.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                p.window,
                p.mean,
                p.std,
                seeds_cell(&p.per_seed)
            );
        }
        out
    }

    /// All sections as one CSV with a leading `section` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,mean,std,per_seed\n");
        for (name, rows) in [
            ("dimred", self.dimred.as_ref().map(|d| &d.rows)),
            ("scoring", self.scoring.as_ref().map(|s| &s.rows)),
        ] {
            for r in rows.into_iter().flatten() {
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{}",
                    r.method,
                    r.mean,
                    r.std,
                    seeds_cell(&r.per_seed)
                );
            }
        }
        if let Some(s) = &self.sweep {
            for p in &s.points {
                let _ = writeln!(
                    out,
                    "context_sweep,W={},{},{},{}",
                    p.window,
                    p.mean,
                    p.std,
                    seeds_cell(&p.per_seed)
                );
            }
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("# Experiment report\n");
        if let Some(d) = &self.dimred {
            let _ = write!(
                out,
                "\n## Reconstruction MSE ({}, latent width {}, seeds {:?})\n\n| method | mean | std |\n|---|---|---|\n",
                d.exercise, d.latent_dims, d.seeds
            );
            for r in &d.rows {
                let _ = writeln!(out, "| {} | {:.4} | {:.4} |", r.method, r.mean, r.std);
            }
        }
        if let Some(s) = &self.scoring {
            let _ = write!(
                out,
                "\n## Score MSE ({}, W={}, seeds {:?})\n\n| method | mean | std |\n|---|---|---|\n",
                s.exercise, s.context_window, s.seeds
            );
            for r in &s.rows {
                let _ = writeln!(out, "| {} | {:.4} | {:.4} |", r.method, r.mean, r.std);
            }
        }
        if let Some(s) = &self.sweep {
            let _ = write!(
                out,
                "\n## Context window sweep ({}, seeds {:?})\n\n| W | mean | std |\n|---|---|---|\n",
                s.exercise, s.seeds
            );
            for p in &s.points {
                let _ = writeln!(out, "| {} | {:.4} | {:.4} |", p.window, p.mean, p.std);
            }
        }
        let _ = write!(out, "\nversion {}", self.metadata.tool_version);
        if let Some(c) = &self.metadata.commit {
            let _ = write!(out, ", commit {c}");
        }
        out.push('\n');
        out
    }
}

/// Persists each run's model as `<name>_seed<k>.json` and its training log as
/// `<name>_seed<k>.log.jsonl` under `dir/runs`.
pub fn write_runs<M: Serialize>(dir: &Path, name: &str, runs: &[SeedRun<M>]) -> Result<()> {
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    for r in runs {
        fs::write(
            runs_dir.join(format!("{name}_seed{}.json", r.seed)),
            serde_json::to_string(&r.model)?,
        )?;
        fs::write(
            runs_dir.join(format!("{name}_seed{}.log.jsonl", r.seed)),
            r.log.to_jsonl(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::SweepPoint;
    use crate::skeleton::ExerciseId;

    fn sample() -> ExperimentReport {
        ExperimentReport {
            sweep: Some(SweepSection {
                exercise: ExerciseId::E3,
                seeds: vec![0, 1],
                points: vec![SweepPoint {
                    window: 3,
                    mean: 0.5,
                    std: 0.25,
                    per_seed: vec![0.25, 0.75],
                }],
            }),
            metadata: RunMetadata {
                tool_version: "0.1.0".into(),
                ..RunMetadata::default()
            },
            ..ExperimentReport::default()
        }
    }

    #[test]
    fn round_trips_through_dir() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample();
        r.write_dir(dir.path()).unwrap();
        assert_eq!(ExperimentReport::load_dir(dir.path()).unwrap(), r);
        let csv = fs::read_to_string(dir.path().join("context_sweep.csv")).unwrap();
        assert_eq!(csv, "window,mean,std,per_seed\n3,0.5,0.25,0.25;0.75\n");
        assert!(r.to_markdown().contains("| 3 | 0.5000 | 0.2500 |"));
        assert!(r.to_csv().contains("context_sweep,W=3,0.5,0.25,0.25;0.75"));
    }
}
