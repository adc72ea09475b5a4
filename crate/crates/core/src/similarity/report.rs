use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// Evaluation summary written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub p_at_1: f64,
    pub topk_error: BTreeMap<usize, f64>,
    pub ppl: BTreeMap<String, f64>,
    pub kl: f64,
}

/// Fixed-width table of ROC points at evenly spaced false-positive rates.
pub fn roc_ascii(curve: &[(f64, f64)], rows: usize) -> String {
    let mut out = String::from("  fpr     tpr\n");
    for i in 0..=rows {
        let fpr = i as f64 / rows as f64;
        // Highest TPR reached without exceeding this FPR.
        let tpr = curve
            .iter()
            .filter(|(f, _)| *f <= fpr + 1e-12)
            .map(|(_, t)| *t)
            .fold(0.0, f64::max);
        let bar = "#".repeat((tpr * 40.0).round() as usize);
        writeln!(out, "{fpr:5.2}  {tpr:6.3}  {bar}").unwrap();
    }
    out
}

pub fn roc_svg(curve: &[(f64, f64)], auc: f64) -> String {
    let size = 320.0;
    let pad = 40.0;
    let x = |f: f64| pad + f * size;
    let y = |t: f64| pad + (1.0 - t) * size;
    let mut pts = String::new();
    for (f, t) in curve {
        write!(pts, "{:.2},{:.2} ", x(*f), y(*t)).unwrap();
    }
    let w = size + 2.0 * pad;
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\">\n",
            "<rect x=\"{p}\" y=\"{p}\" width=\"{s}\" height=\"{s}\" fill=\"none\" stroke=\"#888\"/>\n",
            "<line x1=\"{p}\" y1=\"{e}\" x2=\"{e}\" y2=\"{p}\" stroke=\"#ccc\" stroke-dasharray=\"4\"/>\n",
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\"/>\n",
            "<text x=\"{p}\" y=\"{t}\" font-family=\"monospace\" font-size=\"12\">ROC, AUC = {auc:.4}</text>\n",
            "<text x=\"{p}\" y=\"{b}\" font-family=\"monospace\" font-size=\"11\">false positive rate</text>\n",
            "</svg>\n"
        ),
        w = w,
        p = pad,
        s = size,
        e = pad + size,
        pts = pts.trim_end(),
        t = pad - 12.0,
        b = pad + size + 24.0,
        auc = auc
    )
}
