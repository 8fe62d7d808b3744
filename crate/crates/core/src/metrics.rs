//! Segmentation overlap metrics and landmark error metrics, plus mean/SD
//! report aggregation over a test split.
//!
//! Undefined values (empty denominators, no contributing landmark pairs)
//! are carried as `None` and excluded from aggregates with a footnote;
//! they never poison a mean.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::landmark::{LandmarkGroup, LandmarkSet};
use crate::volume::Volume;

fn overlap_counts(pred: &Volume, gt: &Volume, label: u32) -> Result<(usize, usize, usize)> {
    if pred.grid() != gt.grid() {
        return Err(Error::GridMismatch(
            "prediction and ground truth must share a grid".into(),
        ));
    }
    let l = label as f64;
    let mut p = 0usize;
    let mut g = 0usize;
    let mut both = 0usize;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        let ia = *a == l;
        let ib = *b == l;
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok((p, g, both))
}

/// Dice similarity coefficient for one class: 2|P∩G| / (|P|+|G|).
///
/// Returns 1.0 when both sets are empty (documented convention).
pub fn dice(pred: &Volume, gt: &Volume, label: u32) -> Result<f64> {
    let (p, g, both) = overlap_counts(pred, gt, label)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Sensitivity |P∩G| / |G|; `None` when the ground truth set is empty.
pub fn sensitivity(pred: &Volume, gt: &Volume, label: u32) -> Result<Option<f64>> {
    let (_, g, both) = overlap_counts(pred, gt, label)?;
    Ok((g > 0).then(|| both as f64 / g as f64))
}

/// Positive predictive value |P∩G| / |P|; `None` when the prediction set is
/// empty.
pub fn ppv(pred: &Volume, gt: &Volume, label: u32) -> Result<Option<f64>> {
    let (p, _, both) = overlap_counts(pred, gt, label)?;
    Ok((p > 0).then(|| both as f64 / p as f64))
}

fn paired<'a>(
    pred: &'a LandmarkSet,
    gt: &'a LandmarkSet,
    group: LandmarkGroup,
) -> Vec<(&'a crate::landmark::Landmark, &'a crate::landmark::Landmark)> {
    gt.entries()
        .iter()
        .filter(|g| g.group == group)
        .filter_map(|g| pred.find(&g.name).map(|p| (p, g)))
        .collect()
}

/// Root mean squared Euclidean landmark error in mm over one group.
///
/// Only name-matched pairs where both are present contribute; `None` when
/// no pairs contribute.
pub fn landmark_rmse(pred: &LandmarkSet, gt: &LandmarkSet, group: LandmarkGroup) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in paired(pred, gt, group) {
        if p.present && g.present {
            let d = [
                p.position[0] - g.position[0],
                p.position[1] - g.position[1],
                p.position[2] - g.position[2],
            ];
            sum += d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// True positive rate as a percentage: the fraction of ground-truth-present
/// landmarks that are predicted present within `tau_mm` Euclidean distance.
///
/// `None` when the group has no ground-truth-present landmarks.
pub fn landmark_tpr(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    group: LandmarkGroup,
    tau_mm: f64,
) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, g) in paired(pred, gt, group) {
        if !g.present {
            continue;
        }
        total += 1;
        if p.present {
            let d2 = (0..3)
                .map(|a| (p.position[a] - g.position[a]).powi(2))
                .sum::<f64>();
            if d2.sqrt() <= tau_mm {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Metrics for one case of the test split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    /// Per-structure overlap metrics keyed by structure name.
    pub structures: BTreeMap<String, StructureMetrics>,
    /// Per-group landmark metrics keyed by group name.
    pub groups: BTreeMap<String, GroupMetrics>,
    /// Cases that failed to produce a prediction carry a note and are
    /// excluded from aggregates.
    pub failed: Option<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StructureMetrics {
    pub dice: f64,
    pub sensitivity: Option<f64>,
    pub ppv: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupMetrics {
    pub rmse_mm: Option<f64>,
    pub tpr_percent: Option<f64>,
}

/// Mean and standard deviation (population SD; SD = 0 for a single case).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(MeanSd {
        mean,
        sd: var.sqrt(),
        n: values.len(),
    })
}

/// Aggregated report over a test split, shaped like the usual comparison
/// tables: per-structure DSC/SEN/PPV and per-group RMSE/TPR, mean±SD.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Report {
    pub tau_mm: f64,
    pub cases: Vec<CaseMetrics>,
    pub structure_summary: BTreeMap<String, StructureSummary>,
    pub group_summary: BTreeMap<String, GroupSummary>,
    /// Undefined-metric and failed-case notes.
    pub footnotes: Vec<String>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StructureSummary {
    pub dice: Option<MeanSd>,
    pub sensitivity: Option<MeanSd>,
    pub ppv: Option<MeanSd>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupSummary {
    pub rmse_mm: Option<MeanSd>,
    pub tpr_percent: Option<MeanSd>,
}

/// Aggregate per-case metrics into a report.
pub fn build_report(cases: Vec<CaseMetrics>, tau_mm: f64) -> Report {
    let mut footnotes = Vec::new();
    let mut structure_names: Vec<String> = Vec::new();
    let mut group_names: Vec<String> = Vec::new();
    for c in &cases {
        if let Some(reason) = &c.failed {
            footnotes.push(format!(
                "case '{}' excluded from aggregates: {reason}",
                c.case
            ));
            continue;
        }
        for k in c.structures.keys() {
            if !structure_names.contains(k) {
                structure_names.push(k.clone());
            }
        }
        for k in c.groups.keys() {
            if !group_names.contains(k) {
                group_names.push(k.clone());
            }
        }
    }

    let ok_cases: Vec<&CaseMetrics> = cases.iter().filter(|c| c.failed.is_none()).collect();
    let mut structure_summary = BTreeMap::new();
    for name in &structure_names {
        let mut dices = Vec::new();
        let mut sens = Vec::new();
        let mut ppvs = Vec::new();
        for c in &ok_cases {
            if let Some(s) = c.structures.get(name) {
                dices.push(s.dice);
                match s.sensitivity {
                    Some(v) => sens.push(v),
                    None => footnotes.push(format!(
                        "case '{}' structure '{name}': sensitivity undefined (empty ground truth)",
                        c.case
                    )),
                }
                match s.ppv {
                    Some(v) => ppvs.push(v),
                    None => footnotes.push(format!(
                        "case '{}' structure '{name}': ppv undefined (empty prediction)",
                        c.case
                    )),
                }
            }
        }
        structure_summary.insert(
            name.clone(),
            StructureSummary {
                dice: mean_sd(&dices),
                sensitivity: mean_sd(&sens),
                ppv: mean_sd(&ppvs),
            },
        );
    }

    let mut group_summary = BTreeMap::new();
    for name in &group_names {
        let mut rmses = Vec::new();
        let mut tprs = Vec::new();
        for c in &ok_cases {
            if let Some(g) = c.groups.get(name) {
                match g.rmse_mm {
                    Some(v) => rmses.push(v),
                    None => footnotes.push(format!(
                        "case '{}' group '{name}': rmse undefined (no contributing pairs)",
                        c.case
                    )),
                }
                match g.tpr_percent {
                    Some(v) => tprs.push(v),
                    None => footnotes.push(format!(
                        "case '{}' group '{name}': tpr undefined (empty group)",
                        c.case
                    )),
                }
            }
        }
        group_summary.insert(
            name.clone(),
            GroupSummary {
                rmse_mm: mean_sd(&rmses),
                tpr_percent: mean_sd(&tprs),
            },
        );
    }

    Report {
        tau_mm,
        cases,
        structure_summary,
        group_summary,
        footnotes,
    }
}

impl Report {
    /// Plain-text table rendering (mean±SD columns).
    pub fn render_text(&self) -> String {
        let fmt = |m: &Option<MeanSd>, scale: f64| match m {
            Some(v) => format!("{:.1}±{:.1}", v.mean * scale, v.sd * scale),
            None => "undefined".to_string(),
        };
        let mut out = String::new();
        out.push_str("Segmentation (per structure, mean±SD)\n");
        out.push_str(&format!(
            "{:<12} {:>12} {:>12} {:>12}\n",
            "Structure", "DSC (%)", "SEN (%)", "PPV (%)"
        ));
        for (name, s) in &self.structure_summary {
            out.push_str(&format!(
                "{:<12} {:>12} {:>12} {:>12}\n",
                name,
                fmt(&s.dice, 100.0),
                fmt(&s.sensitivity, 100.0),
                fmt(&s.ppv, 100.0)
            ));
        }
        out.push_str(&format!(
            "\nLandmark detection (per group, mean±SD, tau = {} mm)\n",
            self.tau_mm
        ));
        out.push_str(&format!(
            "{:<12} {:>14} {:>12}\n",
            "Group", "RMSE (mm)", "TPR (%)"
        ));
        for (name, g) in &self.group_summary {
            let rmse = match &g.rmse_mm {
                Some(v) => format!("{:.2}±{:.2}", v.mean, v.sd),
                None => "undefined".into(),
            };
            out.push_str(&format!(
                "{:<12} {:>14} {:>12}\n",
                name,
                rmse,
                fmt(&g.tpr_percent, 1.0)
            ));
        }
        out.push_str("\nNote: the TPR definition (predicted present within tau of ground truth) and tau are artifact conventions.\n");
        if !self.footnotes.is_empty() {
            out.push_str("\nFootnotes:\n");
            for f in &self.footnotes {
                out.push_str(&format!("  - {f}\n"));
            }
        }
        out
    }
}
