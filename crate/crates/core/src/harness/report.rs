use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::debias::{CorrelationReport, Mode};
use crate::error::Result;
use crate::estimator::{GradCheckReport, TrainingMetadata};
use crate::metrics::{ArmMetrics, CalibrationBucket, DeltaEstimate, LevelSummary, Metric, ShiftBucket};
use crate::simulator::UniverseManifest;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRow {
    pub arm: String,
    pub kind: String,
    pub interactions: usize,
    pub metrics: ArmMetrics,
}

/// One row of `table1.csv`: each metric as a change versus control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub arm: String,
    pub emerging_creator_exposure: DeltaEstimate,
    pub novel_wt_share: DeltaEstimate,
    pub familiar_wt_share: DeltaEstimate,
    pub overall_wt: DeltaEstimate,
}

impl DeltaRow {
    pub fn from_estimates(arm: &str, estimates: &[DeltaEstimate]) -> Self {
        let pick = |m: Metric| {
            *estimates
                .iter()
                .find(|d| d.metric == m)
                .expect("every metric estimated")
        };
        Self {
            arm: arm.to_string(),
            emerging_creator_exposure: pick(Metric::EmergingCreatorExposure),
            novel_wt_share: pick(Metric::NovelWtShare),
            familiar_wt_share: pick(Metric::FamiliarWtShare),
            overall_wt: pick(Metric::OverallWt),
        }
    }

    pub fn get(&self, metric: Metric) -> &DeltaEstimate {
        match metric {
            Metric::EmergingCreatorExposure => &self.emerging_creator_exposure,
            Metric::NovelWtShare => &self.novel_wt_share,
            Metric::FamiliarWtShare => &self.familiar_wt_share,
            Metric::OverallWt => &self.overall_wt,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeLevels {
    pub mode: Mode,
    pub levels: Vec<LevelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeShift {
    pub mode: Mode,
    pub buckets: Vec<ShiftBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeCalibration {
    pub mode: Mode,
    pub buckets: Vec<CalibrationBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub fit_interactions: usize,
    pub emerging_creators: usize,
    pub table_cells: usize,
    pub training: TrainingMetadata,
    pub correlation: Vec<CorrelationReport>,
    pub level_feature: String,
    pub score_distribution: Vec<ModeLevels>,
    pub label_prediction_shift: Vec<ModeShift>,
    pub calibration: Vec<ModeCalibration>,
    pub gradient_check: Vec<GradCheckReport>,
}

/// Outcome of one acceptance criterion evaluated on this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u8,
    pub name: String,
    /// `None` when the run does not contain what the criterion needs.
    pub passed: Option<bool>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub config_sha256: String,
    pub universe: UniverseManifest,
    pub schema_hash: String,
    pub control: String,
    pub arms: Vec<ArmRow>,
    pub table1: Vec<DeltaRow>,
    pub diagnostics: Diagnostics,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn row(&self, arm: &str) -> Option<&DeltaRow> {
        self.table1.iter().find(|r| r.arm == arm)
    }

    pub fn check(&self, criterion: u8) -> Option<&Check> {
        self.checks.iter().find(|c| c.criterion == criterion)
    }

    /// Writes `report.json` and the CSV tables into `dir`, returning the file names.
    pub fn write(&self, dir: &Path) -> Result<Vec<&'static str>> {
        std::fs::create_dir_all(dir)?;
        let files: [(&'static str, String); 5] = [
            ("report.json", self.to_json()?),
            ("table1.csv", table1_csv(self)),
            ("fig3_distribution.csv", fig3_csv(self)),
            ("fig4_shift.csv", fig4_shift_csv(self)),
            ("fig4_calibration.csv", fig4_calibration_csv(self)),
        ];
        for (name, body) in &files {
            std::fs::write(dir.join(name), body)?;
        }
        Ok(files.iter().map(|(n, _)| *n).collect())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Column order: arm, then per metric the change in percent or
/// percentage points followed by its 95% interval.
pub const TABLE1_HEADER: &str = "arm,emerging_creator_exposure_pct,emerging_creator_exposure_ci_low,emerging_creator_exposure_ci_high,novel_wt_share_pp,novel_wt_share_ci_low,novel_wt_share_ci_high,familiar_wt_share_pp,familiar_wt_share_ci_low,familiar_wt_share_ci_high,overall_wt_pct,overall_wt_ci_low,overall_wt_ci_high";

pub fn table1_csv(report: &Report) -> String {
    let mut out = String::from(TABLE1_HEADER);
    out.push('\n');
    for row in &report.table1 {
        out.push_str(&row.arm);
        for m in Metric::ALL {
            let d = row.get(m);
            for v in [d.point, d.low, d.high] {
                out.push(',');
                out.push_str(&cell(v.map(|x| 100.0 * x)));
            }
        }
        out.push('\n');
    }
    out
}

pub fn fig3_csv(report: &Report) -> String {
    let mut out = String::from("mode,level,series,count,mean,variance,p10,p20,p30,p40,p50,p60,p70,p80,p90\n");
    for ml in &report.diagnostics.score_distribution {
        for level in &ml.levels {
            for (series, summary) in [("raw", &level.raw), ("debiased", &level.debiased)] {
                let level_name = serde_json::to_value(level.level).expect("level serializes");
                let _ = write!(out, "{},{},{series}", ml.mode, level_name.as_str().unwrap_or_default());
                match summary {
                    Some(s) => {
                        let _ = write!(out, ",{},{},{}", s.count, s.mean, s.variance);
                        for d in &s.deciles {
                            let _ = write!(out, ",{d}");
                        }
                    }
                    None => out.push_str(",0,,,,,,,,,,,"),
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn fig4_shift_csv(report: &Report) -> String {
    let mut out = String::from(
        "mode,bucket,count,mean_label,mean_debiased_label,mean_prediction,mean_debiased_prediction\n",
    );
    for ms in &report.diagnostics.label_prediction_shift {
        for b in &ms.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                ms.mode,
                b.bucket,
                b.count,
                b.mean_label,
                b.mean_debiased_label,
                b.mean_prediction,
                b.mean_debiased_prediction
            );
        }
    }
    out
}

pub fn fig4_calibration_csv(report: &Report) -> String {
    let mut out = String::from("mode,bucket,count,feature_low,feature_high,mean_prediction,mean_label,ratio\n");
    for mc in &report.diagnostics.calibration {
        for b in &mc.buckets {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                mc.mode,
                b.bucket,
                b.count,
                cell(b.feature_low),
                cell(b.feature_high),
                cell(b.mean_prediction),
                cell(b.mean_label),
                cell(b.ratio)
            );
        }
    }
    out
}
