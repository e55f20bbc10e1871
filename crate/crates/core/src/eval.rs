//! Evaluation: patient-level AUROC (Mann-Whitney with tie half-credit) and
//! lesion-level average precision with one-to-one peak-inside-lesion matching.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::volume::MaskVolume;

/// Mann-Whitney AUROC via average ranks; tied positive/negative pairs count
/// half. `None` when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group [i, j)
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One scored candidate with its heatmap peak location.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub case_idx: usize,
    pub peak: [u32; 3],
    pub score: f64,
}

/// One row of the precision-recall walk, highest score first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub is_tp: bool,
    pub precision: f64,
    pub recall: f64,
}

/// Lesion-level average precision.
///
/// Detections are ranked by descending score (ties break by case order, then
/// peak position). A detection whose peak lies inside a still-unmatched
/// lesion instance is a true positive and claims that lesion; later
/// detections of the same lesion are discarded; peaks outside every lesion
/// are false positives. AP is the mean over all ground-truth lesions of the
/// precision at their matching detection, with unmatched lesions scoring 0.
pub fn lesion_average_precision(
    detections: &[Detection],
    masks: &[Option<&MaskVolume>],
) -> Result<(f64, Vec<PrPoint>)> {
    let mut n_lesions = 0usize;
    for m in masks {
        if let Some(m) = m {
            n_lesions += m.values.iter().copied().max().unwrap_or(0) as usize;
        }
    }
    if n_lesions == 0 {
        return Err(PipelineError::InvalidInput(
            "average precision needs at least one ground-truth lesion".into(),
        ));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then(da.case_idx.cmp(&db.case_idx))
            .then(da.peak.cmp(&db.peak))
    });
    let mut matched: Vec<std::collections::HashSet<u16>> =
        masks.iter().map(|_| Default::default()).collect();
    let mut curve = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    for &di in &order {
        let d = &detections[di];
        let mask = masks.get(d.case_idx).and_then(|m| *m).ok_or_else(|| {
            PipelineError::InvalidInput(format!("detection for case {} lacks a lesion mask", d.case_idx))
        })?;
        let lesion_id = mask.at(d.peak[0] as usize, d.peak[1] as usize, d.peak[2] as usize);
        if lesion_id > 0 {
            if !matched[d.case_idx].insert(lesion_id) {
                continue; // duplicate hit on an already-claimed lesion
            }
            tp += 1;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / n_lesions as f64;
        if lesion_id > 0 {
            ap += precision / n_lesions as f64;
        }
        curve.push(PrPoint {
            score: d.score,
            is_tp: lesion_id > 0,
            precision,
            recall,
        });
    }
    Ok((ap, curve))
}

/// Patient score: the maximum corrected ROI probability, 0 for an empty case.
pub fn patient_score(final_probs: &[f64]) -> f64 {
    final_probs.iter().copied().fold(0.0, f64::max)
}

/// One operating point of the patient-level ROC curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC walk over the distinct patient scores, descending.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<RocPoint> {
    let n_pos = labels.iter().filter(|&&l| l > 0).count();
    let n_neg = labels.len() - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] > 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: if n_pos > 0 { tp as f64 / n_pos as f64 } else { 0.0 },
            fpr: if n_neg > 0 { fp as f64 / n_neg as f64 } else { 0.0 },
        });
    }
    points
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_lesions: usize,
    pub n_detections: usize,
    pub patient_auroc: Option<f64>,
    pub lesion_ap: f64,
}

pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut out = String::from("score,is_tp,precision,recall\n");
    for p in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.score, p.is_tp as u8, p.precision, p.recall
        ));
    }
    write_text(path, &out)
}

pub fn write_roc_csv(path: &Path, curve: &[RocPoint]) -> Result<()> {
    let mut out = String::from("threshold,tpr,fpr\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.tpr, p.fpr));
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| PipelineError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| PipelineError::io(path, e))
}
