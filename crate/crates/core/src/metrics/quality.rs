use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub const QUALITY_HEADER: &str = "model_id,epochs,fcn_score,blur_fft,blur_lapvar,clf_real_frac";
/// FCN scores closer than this to a group leader count as tied.
pub const FCN_TIE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageQuality {
    pub index: usize,
    pub dsc: f64,
    pub blur_fft: f64,
    pub blur_lapvar: f64,
    pub p_real: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub model_id: String,
    pub epochs: usize,
    pub fcn_score: f64,
    pub blur_fft: f64,
    pub blur_lapvar: f64,
    pub clf_real_frac: f64,
    pub per_image: Vec<ImageQuality>,
}

impl QualityReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.model_id, self.epochs, self.fcn_score, self.blur_fft, self.blur_lapvar, self.clf_real_frac
        )
    }

    pub fn to_csv(reports: &[QualityReport]) -> String {
        let mut out = String::from(QUALITY_HEADER);
        out.push('\n');
        for r in reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Best model first. Sorted by descending FCN score; consecutive models
/// within [`FCN_TIE`] of their group's leader form a tie group, ordered
/// by descending Laplacian variance, then descending classifier
/// real-fraction, then model id.
pub fn rank_models(reports: &[QualityReport]) -> Vec<&QualityReport> {
    let mut by_fcn: Vec<&QualityReport> = reports.iter().collect();
    by_fcn.sort_by(|a, b| b.fcn_score.total_cmp(&a.fcn_score).then_with(|| a.model_id.cmp(&b.model_id)));
    let mut ranked = Vec::with_capacity(reports.len());
    let mut i = 0;
    while i < by_fcn.len() {
        let leader = by_fcn[i].fcn_score;
        let mut j = i;
        while j < by_fcn.len() && leader - by_fcn[j].fcn_score <= FCN_TIE {
            j += 1;
        }
        let mut group = by_fcn[i..j].to_vec();
        group.sort_by(|a, b| tie_break(a, b));
        ranked.extend(group);
        i = j;
    }
    ranked
}

fn tie_break(a: &QualityReport, b: &QualityReport) -> Ordering {
    b.blur_lapvar
        .total_cmp(&a.blur_lapvar)
        .then_with(|| b.clf_real_frac.total_cmp(&a.clf_real_frac))
        .then_with(|| a.model_id.cmp(&b.model_id))
}
