//! Top-k accuracy and one-vs-rest ROC analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Fraction of rows whose true class ranks among the `k` highest scores.
/// Ties rank the lower class index first.
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("topk_accuracy", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let classes = scores[0].len();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("k must lie in 1..={classes}, got {k}")));
    }
    let mut hits = 0;
    for (row, &label) in scores.iter().zip(labels) {
        if row.len() != classes || label >= classes {
            return Err(Error::InvalidArgument(format!(
                "score row of width {} with label {label} (expected width {classes})",
                row.len()
            )));
        }
        let s = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC of `scores` against binary `positive` labels. Tied scores form one
/// threshold step, so a tie contributes a diagonal segment.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    roc_curve_for(0, scores, positive)
}

pub fn roc_curve_for(class: usize, scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::shape("roc_curve", &[scores.len()], &[positive.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("roc_curve: NaN score".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateClass {
            class,
            reason: format!("needs positives and negatives, got {pos} and {neg}"),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { class, points, auc })
}

/// One-vs-rest curves: class `k` scores with column `k`, positives are rows
/// labelled `k`. A degenerate class yields an error in its slot only.
pub fn multiclass_roc(probabilities: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<Result<RocCurve>>> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("ROC needs at least 2 classes, got {classes}")));
    }
    if probabilities.len() != labels.len() || probabilities.iter().any(|r| r.len() != classes) {
        return Err(Error::shape("multiclass_roc", &[probabilities.len(), classes], &[labels.len()]));
    }
    Ok((0..classes)
        .map(|k| {
            let scores: Vec<f64> = probabilities.iter().map(|r| r[k]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            roc_curve_for(k, &scores, &positive)
        })
        .collect())
}

pub fn roc_csv(curves: &[RocCurve]) -> String {
    let mut s = String::from("class,fpr,tpr\n");
    for c in curves {
        for (f, t) in &c.points {
            let _ = writeln!(s, "{},{f},{t}", c.class);
        }
    }
    s
}

pub fn auc_csv(curves: &[RocCurve]) -> String {
    let mut s = String::from("class,auc\n");
    for c in curves {
        let _ = writeln!(s, "{},{}", c.class, c.auc);
    }
    s
}

/// Unit-square plot with one polyline per class and the chance diagonal.
pub fn roc_svg(curves: &[RocCurve]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (size, pad) = (400.0, 40.0);
    let map = |(f, t): (f64, f64)| (pad + f * size, pad + (1.0 - t) * size);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n\
         <rect x=\"{pad}\" y=\"{pad}\" width=\"{size}\" height=\"{size}\" fill=\"none\" stroke=\"#444\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{b}\" y2=\"{pad}\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>\n",
        w = size + 2.0 * pad,
        b = pad + size,
    );
    for (i, c) in curves.iter().enumerate() {
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">class {} AUC {:.4}</text>",
            pad + size - 130.0,
            pad + size - 12.0 - 16.0 * i as f64,
            c.class,
            c.auc
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `roc.csv`, `auc.csv` and `roc.svg` into `dir`.
pub fn write_roc_files(dir: &Path, curves: &[RocCurve]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("roc.csv", roc_csv(curves)),
        ("auc.csv", auc_csv(curves)),
        ("roc.svg", roc_svg(curves)),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub top1: f64,
    /// Top-`min(5, K)` accuracy.
    pub top5: f64,
    /// Per-class AUC; `None` where the class is absent or alone.
    pub auc: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

pub fn metrics_report(probabilities: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<(MetricsReport, Vec<RocCurve>)> {
    let top1 = topk_accuracy(probabilities, labels, 1)?;
    let top5 = topk_accuracy(probabilities, labels, classes.min(5))?;
    let mut curves = Vec::new();
    let mut auc = Vec::new();
    let mut warnings = Vec::new();
    for r in multiclass_roc(probabilities, labels, classes)? {
        match r {
            Ok(c) => {
                auc.push(Some(c.auc));
                curves.push(c);
            }
            Err(e) => {
                auc.push(None);
                warnings.push(e.to_string());
            }
        }
    }
    Ok((
        MetricsReport {
            samples: labels.len(),
            top1,
            top5,
            auc,
            warnings,
        },
        curves,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_ties_favour_lower_index() {
        let s = vec![vec![0.5, 0.5, 0.0]];
        assert_eq!(topk_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&s, &[1], 2).unwrap(), 1.0);
        assert!(topk_accuracy(&s, &[1], 4).is_err());
    }

    #[test]
    fn separated_and_constant_scores() {
        let labels = [true, true, false, false];
        let r = roc_curve(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap();
        assert_eq!(r.auc, 1.0);
        assert!(r.points.contains(&(0.0, 1.0)));
        let r = roc_curve(&[0.3; 4], &labels).unwrap();
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn degenerate_class_is_reported() {
        assert!(matches!(
            roc_curve_for(2, &[0.1, 0.2], &[false, false]),
            Err(Error::DegenerateClass { class: 2, .. })
        ));
        let probs = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1]];
        let out = multiclass_roc(&probs, &[0, 1], 3).unwrap();
        assert!(out[0].is_ok() && out[1].is_ok() && out[2].is_err());
    }

    #[test]
    fn files_have_headers() {
        let r = roc_curve(&[0.9, 0.1], &[true, false]).unwrap();
        assert!(roc_csv(&[r.clone()]).starts_with("class,fpr,tpr\n0,0,0\n"));
        assert_eq!(auc_csv(&[r.clone()]), "class,auc\n0,1\n");
        assert!(roc_svg(&[r]).contains("<polyline"));
    }
}
