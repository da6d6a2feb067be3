use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AugMode;
use crate::error::{Error, Result};
use crate::metrics::QualityReport;

pub const REPORT_HEADER: &str = "percent,mode,seed,mean_dsc,dsc_iph,dsc_ivh,dsc_sah,dsc_edh,dsc_sdh,precision,recall";
pub const SUMMARY_HEADER: &str = "percent,mode,seeds,median_mean_dsc,median_rel_improvement";

/// Test-set results of one segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub percent: f64,
    pub mode: AugMode,
    pub seed: u64,
    pub mean_dsc: f64,
    pub dsc_iph: Option<f64>,
    pub dsc_ivh: Option<f64>,
    pub dsc_sah: Option<f64>,
    pub dsc_edh: Option<f64>,
    pub dsc_sdh: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Training images seen by this segmenter (JSON only).
    #[serde(default)]
    pub train_images: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    pub fn per_class(&self) -> [Option<f64>; 5] {
        [self.dsc_iph, self.dsc_ivh, self.dsc_sah, self.dsc_edh, self.dsc_sdh]
    }

    pub fn csv_row(&self) -> String {
        let classes: Vec<String> = self.per_class().iter().map(|v| opt(*v)).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.percent,
            self.mode,
            self.seed,
            self.mean_dsc,
            classes.join(","),
            opt(self.precision),
            opt(self.recall)
        )
    }

    pub fn to_csv(rows: &[ReportRow]) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Parses a report CSV written by [`ReportRow::to_csv`].
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::format(path, "missing or wrong report header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("row {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad("expected 11 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
            let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(ReportRow {
                percent: num(f[0])?,
                mode: f[1].parse().map_err(|_| bad(&format!("bad mode `{}`", f[1])))?,
                seed: f[2].parse().map_err(|_| bad("bad seed"))?,
                mean_dsc: num(f[3])?,
                dsc_iph: maybe(f[4])?,
                dsc_ivh: maybe(f[5])?,
                dsc_sah: maybe(f[6])?,
                dsc_edh: maybe(f[7])?,
                dsc_sdh: maybe(f[8])?,
                precision: maybe(f[9])?,
                recall: maybe(f[10])?,
                train_images: 0,
            })
        })
        .collect()
}

/// Median of the values; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub percent: f64,
    pub mode: AugMode,
    pub seeds: usize,
    pub median_mean_dsc: f64,
    /// Median over seeds of (dsc - dsc_none) / dsc_none.
    pub median_rel_improvement: Option<f64>,
    pub median_per_class: [Option<f64>; 5],
    pub median_precision: Option<f64>,
    pub median_recall: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

fn key(p: f64) -> u64 {
    p.to_bits()
}

/// Per (percent, mode) medians across seeds, percents ascending and modes
/// in canonical order.
pub fn summarize(rows: &[ReportRow]) -> Summary {
    let mut groups: BTreeMap<(u64, AugMode), Vec<&ReportRow>> = BTreeMap::new();
    let mut none: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for r in rows {
        groups.entry((key(r.percent), r.mode)).or_default().push(r);
        if r.mode == AugMode::None {
            none.insert((key(r.percent), r.seed), r.mean_dsc);
        }
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((_, mode), g)| {
            let percent = g[0].percent;
            let col = |f: &dyn Fn(&ReportRow) -> Option<f64>| median(&g.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let rel: Vec<f64> = g
                .iter()
                .filter_map(|r| none.get(&(key(percent), r.seed)).filter(|b| **b > 0.0).map(|b| (r.mean_dsc - b) / b))
                .collect();
            SummaryRow {
                percent,
                mode,
                seeds: g.len(),
                median_mean_dsc: col(&|r| Some(r.mean_dsc)).unwrap_or(0.0),
                median_rel_improvement: median(&rel),
                median_per_class: std::array::from_fn(|i| col(&|r| r.per_class()[i])),
                median_precision: col(&|r| r.precision),
                median_recall: col(&|r| r.recall),
            }
        })
        .collect();
    out.sort_by(|a, b| a.percent.total_cmp(&b.percent).then(a.mode.cmp(&b.mode)));
    Summary { rows: out }
}

impl Summary {
    pub fn get(&self, percent: f64, mode: AugMode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.percent == percent && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.percent,
                r.mode,
                r.seeds,
                r.median_mean_dsc,
                opt(r.median_rel_improvement)
            ));
        }
        out
    }

    fn percents(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.rows.iter().map(|r| r.percent).collect();
        p.dedup();
        p
    }

    fn modes(&self) -> Vec<AugMode> {
        let mut m: Vec<AugMode> = self.rows.iter().map(|r| r.mode).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Median mean DSC, one row per percent, one column per mode.
    pub fn table1(&self) -> String {
        let modes = self.modes();
        let names: Vec<&str> = modes.iter().map(|m| m.name()).collect();
        let mut out = format!("percent,{}\n", names.join(","));
        for p in self.percents() {
            let cells: Vec<String> = modes.iter().map(|m| opt(self.get(p, *m).map(|r| r.median_mean_dsc))).collect();
            out.push_str(&format!("{p},{}\n", cells.join(",")));
        }
        out
    }

    /// Median per-class DSC.
    pub fn table2(&self) -> String {
        let mut out = String::from("percent,mode,dsc_iph,dsc_ivh,dsc_sah,dsc_edh,dsc_sdh\n");
        for r in &self.rows {
            let cells: Vec<String> = r.median_per_class.iter().map(|v| opt(*v)).collect();
            out.push_str(&format!("{},{},{}\n", r.percent, r.mode, cells.join(",")));
        }
        out
    }

    /// Median detection precision and recall.
    pub fn table3(&self) -> String {
        let mut out = String::from("percent,mode,precision,recall\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.percent, r.mode, opt(r.median_precision), opt(r.median_recall)));
        }
        out
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `report.csv/json`, `quality.csv/json`, `summary.csv` and the
/// three table CSVs into `dir`.
pub fn write_reports(dir: &Path, rows: &[ReportRow], quality: &[QualityReport]) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summarize(rows);
    write(&dir.join("report.csv"), &ReportRow::to_csv(rows))?;
    write(&dir.join("report.json"), &json(&rows))?;
    write(&dir.join("quality.csv"), &QualityReport::to_csv(quality))?;
    write(&dir.join("quality.json"), &json(&quality))?;
    write_summary(dir, &summary)?;
    Ok(summary)
}

/// Writes `summary.csv` and `table1.csv` .. `table3.csv`.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    write(&dir.join("summary.csv"), &summary.to_csv())?;
    write(&dir.join("table1.csv"), &summary.table1())?;
    write(&dir.join("table2.csv"), &summary.table2())?;
    write(&dir.join("table3.csv"), &summary.table3())
}
