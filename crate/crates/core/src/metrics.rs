//! Multi-label evaluation: per-class AP and mAP, per-category and overall
//! precision / recall / F1 under "all" (thresholded) and top-k prediction.
//!
//! Conventions:
//! * AP is the non-interpolated mean over positive ranks of precision@rank,
//!   ranking by descending score with ties broken by ascending sample index.
//! * Classes without positives in the evaluated set are excluded from mAP and
//!   from the CP/CR averages; CP additionally skips classes with no
//!   predictions (0/0).
//! * F1 is `2PR / (P + R)` with 0/0 read as 0.
//! * Top-k ties are broken by ascending class index.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::labels::{ScoreMatrix, TargetMatrix};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores are {scores:?} but targets are {targets:?}")]
    Shape { scores: [usize; 2], targets: [usize; 2] },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed report: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    All { threshold: f64 },
    TopK { k: usize },
}

impl EvalMode {
    pub fn all() -> Self {
        EvalMode::All { threshold: 0.5 }
    }

    pub fn top3() -> Self {
        EvalMode::TopK { k: 3 }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        match *self {
            EvalMode::All { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                Err(MetricsError::Config(format!("threshold {threshold} not in (0, 1)")))
            }
            EvalMode::TopK { k: 0 } => Err(MetricsError::Config("k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::All { .. } => f.write_str("all"),
            EvalMode::TopK { k } => write!(f, "top-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: EvalMode,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
}

/// Non-interpolated average precision, or `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Predicted-positive mask, row-major `n × classes`.
pub fn predictions(scores: &ScoreMatrix, mode: EvalMode) -> Vec<bool> {
    let l = scores.classes();
    let mut out = vec![false; scores.rows() * l];
    for i in 0..scores.rows() {
        let row = scores.row(i);
        match mode {
            EvalMode::All { threshold } => {
                for j in 0..l {
                    out[i * l + j] = row[j] >= threshold;
                }
            }
            EvalMode::TopK { k } => {
                let mut order: Vec<usize> = (0..l).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                for &j in order.iter().take(k) {
                    out[i * l + j] = true;
                }
            }
        }
    }
    out
}

pub fn evaluate(scores: &ScoreMatrix, targets: &TargetMatrix, mode: EvalMode) -> Result<MetricReport, MetricsError> {
    if scores.rows() != targets.rows() || scores.classes() != targets.classes() {
        return Err(MetricsError::Shape {
            scores: [scores.rows(), scores.classes()],
            targets: [targets.rows(), targets.classes()],
        });
    }
    mode.validate()?;
    let (n, l) = (scores.rows(), scores.classes());
    let pred = predictions(scores, mode);

    let mut per_class_ap = Vec::with_capacity(l);
    let (mut tp_all, mut pred_all, mut pos_all) = (0, 0, 0);
    let (mut cp_sum, mut cp_n, mut cr_sum, mut cr_n) = (0.0, 0usize, 0.0, 0usize);
    for j in 0..l {
        let col: Vec<f64> = (0..n).map(|i| scores.get(i, j)).collect();
        let lab: Vec<bool> = (0..n).map(|i| targets.get(i, j)).collect();
        per_class_ap.push(average_precision(&col, &lab));
        let tp = (0..n).filter(|&i| pred[i * l + j] && lab[i]).count();
        let npred = (0..n).filter(|&i| pred[i * l + j]).count();
        let npos = lab.iter().filter(|&&y| y).count();
        tp_all += tp;
        pred_all += npred;
        pos_all += npos;
        if npos > 0 {
            cr_sum += ratio(tp, npos);
            cr_n += 1;
            if npred > 0 {
                cp_sum += ratio(tp, npred);
                cp_n += 1;
            }
        }
    }
    let defined: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let cp = if cp_n == 0 { 0.0 } else { cp_sum / cp_n as f64 };
    let cr = if cr_n == 0 { 0.0 } else { cr_sum / cr_n as f64 };
    let op = ratio(tp_all, pred_all);
    let or = ratio(tp_all, pos_all);
    Ok(MetricReport {
        mode,
        per_class_ap,
        map,
        cp,
        cr,
        cf1: f1(cp, cr),
        op,
        or,
        of1: f1(op, or),
    })
}

/// Fixed column order of the report file.
pub fn report_header(classes: usize) -> String {
    let mut cols = vec![
        "mode".to_string(),
        "k".into(),
        "threshold".into(),
        "mAP".into(),
        "CP".into(),
        "CR".into(),
        "CF1".into(),
        "OP".into(),
        "OR".into(),
        "OF1".into(),
    ];
    cols.extend((0..classes).map(|j| format!("AP_{j}")));
    cols.join(",")
}

fn report_row(r: &MetricReport) -> String {
    let (k, thr) = match r.mode {
        EvalMode::All { threshold } => ("NA".to_string(), threshold.to_string()),
        EvalMode::TopK { k } => (k.to_string(), "NA".to_string()),
    };
    let mut cols = vec![r.mode.to_string(), k, thr];
    cols.extend([r.map, r.cp, r.cr, r.cf1, r.op, r.or, r.of1].iter().map(f64::to_string));
    cols.extend(r.per_class_ap.iter().map(|ap| ap.map_or("NA".to_string(), |v| v.to_string())));
    cols.join(",")
}

/// Comma-separated report, one row per mode. All reports must share the
/// class count.
pub fn write_reports(reports: &[MetricReport], path: &Path) -> Result<(), MetricsError> {
    let classes = reports.first().map_or(0, |r| r.per_class_ap.len());
    let mut out = report_header(classes);
    out.push('\n');
    for r in reports {
        out.push_str(&report_row(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_reports(path: &Path) -> Result<Vec<MetricReport>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: String| MetricsError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let classes = header.split(',').count().checked_sub(10).ok_or_else(|| bad("short header".into()))?;
    if header != report_header(classes) {
        return Err(bad("unexpected header".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
    lines
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 10 + classes {
                return Err(bad(format!("row has {} columns", c.len())));
            }
            let mode = if c[0] == "all" {
                EvalMode::All { threshold: num(c[2])? }
            } else {
                EvalMode::TopK {
                    k: c[1].parse().map_err(|_| bad(format!("bad k `{}`", c[1])))?,
                }
            };
            let per_class_ap = c[10..]
                .iter()
                .map(|s| if *s == "NA" { Ok(None) } else { num(s).map(Some) })
                .collect::<Result<_, _>>()?;
            Ok(MetricReport {
                mode,
                per_class_ap,
                map: num(c[3])?,
                cp: num(c[4])?,
                cr: num(c[5])?,
                cf1: num(c[6])?,
                op: num(c[7])?,
                or: num(c[8])?,
                of1: num(c[9])?,
            })
        })
        .collect()
}
