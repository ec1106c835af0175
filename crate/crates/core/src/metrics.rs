//! Multi-label evaluation: exact match, pooled precision/recall/F1 and a
//! per-label breakdown.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LabelSet = BTreeSet<usize>;

/// Ratio with an empty denominator mapped to 0.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_lengths(preds: &[LabelSet], golds: &[LabelSet]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold sets",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

/// Fraction of documents whose predicted set equals the gold set. An empty
/// collection scores 0.
pub fn exact_match(preds: &[LabelSet], golds: &[LabelSet]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(ratio(hits, preds.len()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, f1(p, r))
    }
}

pub fn micro_counts(preds: &[LabelSet], golds: &[LabelSet]) -> Result<Counts> {
    check_lengths(preds, golds)?;
    let mut c = Counts::default();
    for (p, g) in preds.iter().zip(golds) {
        let tp = p.intersection(g).count();
        c.tp += tp;
        c.fp += p.len() - tp;
        c.fn_ += g.len() - tp;
    }
    Ok(c)
}

pub fn micro_prf(preds: &[LabelSet], golds: &[LabelSet]) -> Result<(f64, f64, f64)> {
    Ok(micro_counts(preds, golds)?.prf())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

/// One row per entry of `labels`, in label-id order.
pub fn per_label_report(preds: &[LabelSet], golds: &[LabelSet], labels: &[String]) -> Result<Vec<LabelRow>> {
    check_lengths(preds, golds)?;
    let mut counts = vec![Counts::default(); labels.len()];
    for (p, g) in preds.iter().zip(golds) {
        for &j in p.iter().chain(g) {
            if j >= labels.len() {
                return Err(Error::Index { op: "per_label_report", index: j, size: labels.len() });
            }
        }
        for &j in p {
            if g.contains(&j) {
                counts[j].tp += 1;
            } else {
                counts[j].fp += 1;
            }
        }
        for &j in g.difference(p) {
            counts[j].fn_ += 1;
        }
    }
    Ok(labels
        .iter()
        .zip(&counts)
        .map(|(name, c)| {
            let (p, r, f) = c.prf();
            LabelRow { label: name.clone(), p, r, f1: f, support: c.tp + c.fn_ }
        })
        .collect())
}

/// Sorts rows by support descending (ties by label name) and keeps the first
/// `k`.
pub fn top_k(mut rows: Vec<LabelRow>, k: usize) -> Vec<LabelRow> {
    rows.sort_by(|a, b| b.support.cmp(&a.support).then_with(|| a.label.cmp(&b.label)));
    rows.truncate(k);
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_docs: usize,
    pub em: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub per_label: Vec<LabelRow>,
}

impl MetricsReport {
    pub fn compute(preds: &[LabelSet], golds: &[LabelSet], labels: &[String]) -> Result<Self> {
        let em = exact_match(preds, golds)?;
        let (micro_p, micro_r, micro_f1) = micro_prf(preds, golds)?;
        let per_label = per_label_report(preds, golds, labels)?;
        let n = per_label.len().max(1) as f64;
        let macro_p = per_label.iter().map(|r| r.p).sum::<f64>() / n;
        let macro_r = per_label.iter().map(|r| r.r).sum::<f64>() / n;
        let macro_f1 = per_label.iter().map(|r| r.f1).sum::<f64>() / n;
        Ok(MetricsReport {
            n_docs: preds.len(),
            em,
            micro_p,
            micro_r,
            micro_f1,
            macro_p,
            macro_r,
            macro_f1,
            per_label,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: headline row then per-label rows by support.
    pub fn to_table(&self, k: Option<usize>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:>6} {:>6} {:>6} {:>6}", "", "EM", "P", "R", "F1");
        let _ = writeln!(
            out,
            "{:<8} {:>6.1} {:>6.1} {:>6.1} {:>6.1}",
            "micro",
            100.0 * self.em,
            100.0 * self.micro_p,
            100.0 * self.micro_r,
            100.0 * self.micro_f1
        );
        let rows = top_k(self.per_label.clone(), k.unwrap_or(self.per_label.len()));
        let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<width$} {:>6} {:>6} {:>6} {:>7}", "label", "P", "R", "F1", "N");
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$} {:>6.1} {:>6.1} {:>6.1} {:>7}",
                r.label,
                100.0 * r.p,
                100.0 * r.r,
                100.0 * r.f1,
                r.support
            );
        }
        out
    }
}

/// Thresholds probabilities into a label set.
pub fn threshold(probs: &[f64], cut: f64) -> LabelSet {
    probs.iter().enumerate().filter(|(_, &p)| p >= cut).map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> LabelSet {
        xs.iter().copied().collect()
    }

    #[test]
    fn exact_match_counts() {
        let g = vec![set(&[0]), set(&[1]), set(&[]), set(&[0, 1])];
        let p = vec![set(&[0]), set(&[0]), set(&[1]), set(&[1])];
        assert_eq!(exact_match(&p, &g).unwrap(), 0.25);
        assert_eq!(exact_match(&[set(&[])], &[set(&[])]).unwrap(), 1.0);
        assert!(exact_match(&p[..1], &g).is_err());
    }

    #[test]
    fn micro_hand_cases() {
        assert_eq!(micro_prf(&[set(&[1, 2])], &[set(&[0, 1])]).unwrap(), (0.5, 0.5, 0.5));
        assert_eq!(micro_prf(&[set(&[])], &[set(&[0])]).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(micro_prf(&[set(&[3])], &[set(&[3])]).unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_label_row_is_zero() {
        let labels: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let rows = per_label_report(&[set(&[0])], &[set(&[0])], &labels).unwrap();
        assert_eq!((rows[0].p, rows[0].r, rows[0].f1, rows[0].support), (1.0, 1.0, 1.0, 1));
        assert_eq!((rows[1].p, rows[1].r, rows[1].f1, rows[1].support), (0.0, 0.0, 0.0, 0));
        let top = top_k(rows, 1);
        assert_eq!(top[0].label, "a");
    }

    #[test]
    fn table_renders() {
        let labels = vec!["x".to_string()];
        let r = MetricsReport::compute(&[set(&[0])], &[set(&[0])], &labels).unwrap();
        let t = r.to_table(Some(20));
        assert!(t.contains("micro"));
        assert!(t.lines().last().unwrap().starts_with("x "));
    }
}
