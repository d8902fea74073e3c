//! Evaluation statistics: ROC AUC via the Mann-Whitney statistic, the DeLong
//! variance/covariance machinery for correlated AUCs, paired significance
//! tests, and score-table assembly.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Parallel score/label arrays; label 1 marks the OOD (positive) class.
#[derive(Debug, Clone)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        Ok(LabeledScores { scores, labels })
    }

    fn split(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, &l) in self.scores.iter().zip(&self.labels) {
            if !s.is_finite() {
                return Err(Error::InvalidInput("scores must be finite".into()));
            }
            if l == 1 {
                pos.push(*s);
            } else {
                neg.push(*s);
            }
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Degenerate("AUC needs both classes present".into()));
        }
        Ok((pos, neg))
    }
}

#[inline]
fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs where the
/// positive outranks the negative, ties counted half.
pub fn auc(scores: &LabeledScores) -> Result<f64> {
    let (pos, neg) = scores.split()?;
    let mut total = 0.0;
    for &x in &pos {
        for &y in &neg {
            total += psi(x, y);
        }
    }
    Ok(total / (pos.len() * neg.len()) as f64)
}

/// DeLong structural components: `v10[i]` is the mean of psi over negatives
/// for positive i, `v01[j]` the mean over positives for negative j.
fn structural_components(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let m = pos.len();
    let n = neg.len();
    let mut v10 = vec![0.0f64; m];
    let mut v01 = vec![0.0f64; n];
    for (i, &x) in pos.iter().enumerate() {
        for (j, &y) in neg.iter().enumerate() {
            let p = psi(x, y);
            v10[i] += p;
            v01[j] += p;
        }
    }
    for v in &mut v10 {
        *v /= n as f64;
    }
    for v in &mut v01 {
        *v /= m as f64;
    }
    let auc = v10.iter().sum::<f64>() / m as f64;
    (v10, v01, auc)
}

fn sample_var(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// DeLong variance of a single AUC estimate.
pub fn delong_variance(scores: &LabeledScores) -> Result<f64> {
    let (pos, neg) = scores.split()?;
    let (v10, v01, _) = structural_components(&pos, &neg);
    Ok(sample_var(&v10) / pos.len() as f64 + sample_var(&v01) / neg.len() as f64)
}

/// Paired comparison of two models scored on the identical sample set.
#[derive(Debug, Clone)]
pub struct PairedComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub z: f64,
    /// Two-sided p-value; `None` when the variance of the difference is
    /// degenerate (e.g. a model compared against itself).
    pub p_value: Option<f64>,
}

impl PairedComparison {
    pub fn delta(&self) -> f64 {
        self.auc_a - self.auc_b
    }
}

/// DeLong test for the difference of two correlated AUCs. Both score vectors
/// must cover the same samples in the same order with identical labels.
pub fn delong_test(a: &LabeledScores, b: &LabeledScores) -> Result<PairedComparison> {
    if a.labels != b.labels {
        return Err(Error::InvalidInput(
            "paired comparison requires the identical sample set".into(),
        ));
    }
    let (pos_a, neg_a) = a.split()?;
    let (pos_b, neg_b) = b.split()?;
    let m = pos_a.len() as f64;
    let n = neg_a.len() as f64;
    let (v10_a, v01_a, auc_a) = structural_components(&pos_a, &neg_a);
    let (v10_b, v01_b, auc_b) = structural_components(&pos_b, &neg_b);
    let var_a = sample_var(&v10_a) / m + sample_var(&v01_a) / n;
    let var_b = sample_var(&v10_b) / m + sample_var(&v01_b) / n;
    let covariance = sample_cov(&v10_a, &v10_b) / m + sample_cov(&v01_a, &v01_b) / n;
    let var_diff = var_a + var_b - 2.0 * covariance;
    let delta = auc_a - auc_b;
    if var_diff <= 1e-16 {
        return Ok(PairedComparison {
            auc_a,
            auc_b,
            var_a,
            var_b,
            covariance,
            z: 0.0,
            p_value: None,
        });
    }
    let z = delta / var_diff.sqrt();
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    Ok(PairedComparison { auc_a, auc_b, var_a, var_b, covariance, z, p_value: Some(p) })
}

/// Standard normal CDF via the Abramowitz-Stegun 26.2.17 rational
/// approximation (absolute error below 7.5e-8).
pub fn normal_cdf(x: f64) -> f64 {
    if x < 0.0 {
        return 1.0 - normal_cdf(-x);
    }
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - pdf * poly
}

/// Elementwise z-scoring against reference moments.
pub fn zscore_column(values: &[f64], mean: f64, std: f64) -> Result<Vec<f64>> {
    if std <= 0.0 {
        return Err(Error::InvalidInput(format!("std must be positive, got {std}")));
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

/// One table cell: AUC of a model on one OOD class versus the ID test set.
#[derive(Debug, Clone)]
pub struct TableCell {
    pub ood_class: String,
    pub model: String,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub p_vs_other: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ResultsTable {
    pub cells: Vec<TableCell>,
    pub models: Vec<String>,
}

/// Scores grouped per OOD class for one model: the ID test scores are the
/// negatives of every row.
pub type ClassScores = BTreeMap<String, Vec<f64>>;

/// Assemble the evaluation table. `per_model` pairs a model name with its ID
/// test scores and per-class OOD scores; when exactly two models are given, a
/// paired DeLong test is run per class.
pub fn results_table(per_model: &[(String, Vec<f64>, ClassScores)]) -> Result<ResultsTable> {
    if per_model.is_empty() {
        return Err(Error::InvalidInput("results table needs at least one model".into()));
    }
    let mut classes: Vec<String> = per_model
        .iter()
        .flat_map(|(_, _, by_class)| by_class.keys().cloned())
        .collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::InvalidInput("no OOD classes present".into()));
    }
    for (name, id_scores, _) in per_model {
        if id_scores.is_empty() {
            return Err(Error::InvalidInput(format!("model '{name}' has no ID test scores")));
        }
    }

    let labeled = |id_scores: &[f64], ood: &[f64]| -> Result<LabeledScores> {
        let mut scores = ood.to_vec();
        let mut labels = vec![1u8; ood.len()];
        scores.extend_from_slice(id_scores);
        labels.extend(std::iter::repeat_n(0u8, id_scores.len()));
        LabeledScores::new(scores, labels)
    };

    let mut cells = Vec::new();
    for class in &classes {
        let mut row: Vec<(String, LabeledScores, f64)> = Vec::new();
        for (name, id_scores, by_class) in per_model {
            let ood = by_class.get(class).ok_or_else(|| {
                Error::InvalidInput(format!("model '{name}' missing class '{class}'"))
            })?;
            let ls = labeled(id_scores, ood)?;
            let a = auc(&ls)?;
            row.push((name.clone(), ls, a));
        }
        let p = if row.len() == 2 {
            delong_test(&row[0].1, &row[1].1)?.p_value
        } else {
            None
        };
        for (name, ls, a) in row {
            let n_pos = ls.labels.iter().filter(|&&l| l == 1).count();
            cells.push(TableCell {
                ood_class: class.clone(),
                model: name,
                auc: a,
                n_pos,
                n_neg: ls.labels.len() - n_pos,
                p_vs_other: p,
            });
        }
    }
    Ok(ResultsTable { cells, models: per_model.iter().map(|(n, _, _)| n.clone()).collect() })
}

/// AUC formatted the way the tables report it: multiplied by 100, one decimal,
/// trailing ".0" trimmed (a perfect class shows as `100`).
pub fn format_auc(auc: f64) -> String {
    let v = auc * 100.0;
    let s = format!("{v:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn significance_marker(p: Option<f64>) -> &'static str {
    match p {
        Some(p) if p < 0.001 => "**",
        Some(p) if p < 0.05 => "*",
        _ => "",
    }
}

impl ResultsTable {
    /// Aligned plain-text rendering: one row per OOD class. With two models,
    /// `**` marks p < 0.001 and `*` marks p < 0.05 on the difference.
    pub fn render_text(&self) -> String {
        let mut classes: Vec<&str> = self.cells.iter().map(|c| c.ood_class.as_str()).collect();
        classes.sort();
        classes.dedup();
        let class_width = classes.iter().map(|c| c.len()).max().unwrap_or(8).max(9);
        let mut out = String::new();
        out.push_str(&format!("{:<class_width$}", "ood_class"));
        for m in &self.models {
            out.push_str(&format!("  {:>10}", m));
        }
        out.push('\n');
        for class in classes {
            out.push_str(&format!("{class:<class_width$}"));
            for m in &self.models {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.ood_class == class && &c.model == m)
                    .expect("cell exists");
                let marker = if self.models.len() == 2 { significance_marker(cell.p_vs_other) } else { "" };
                out.push_str(&format!("  {:>10}", format!("{}{}", format_auc(cell.auc), marker)));
            }
            out.push('\n');
        }
        out
    }

    /// Machine-readable records, one line per cell.
    pub fn render_records(&self) -> String {
        let mut out = String::from("ood_class\tmodel\tauc\tn_pos\tn_neg\tp_value\n");
        for c in &self.cells {
            let p = c.p_vs_other.map(|p| format!("{p:.6e}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{}\t{}\t{}\n",
                c.ood_class, c.model, c.auc, c.n_pos, c.n_neg, p
            ));
        }
        out
    }
}
