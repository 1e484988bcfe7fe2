//! Confusion matrices and classification indices.
//!
//! Ratios are kept exact (`Ratio<u128>`) and converted to `f64` only for
//! display. A ratio with a zero denominator evaluates to 0 and records a
//! warning instead of failing.

use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Exact = Ratio<u128>;

/// K×K counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    cells: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix { k, cells: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            k,
            cells: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.cells[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.cells[truth * self.k + pred] += 1;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.cells.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.k).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.total() - self.tp(c) - self.fp(c) - self.fn_(c)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::invalid(format!("class index out of range for K={k}: pred {p}, label {t}")));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64, what: &str, warnings: &mut Vec<String>) -> Exact {
    if den == 0 {
        warnings.push(format!("{what} undefined (0/0), reported as 0"));
        Exact::zero()
    } else {
        Exact::new(u128::from(num), u128::from(den))
    }
}

/// The five indices for one class treated as positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMetrics {
    pub accuracy: Exact,
    pub precision: Exact,
    pub recall: Exact,
    pub f1: Exact,
    pub specificity: Exact,
    pub warnings: Vec<String>,
}

/// One-vs-rest indices for class `c`.
pub fn one_vs_rest(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let (tp, fp, fn_, tn) = (cm.tp(c), cm.fp(c), cm.fn_(c), cm.tn(c));
    let mut w = Vec::new();
    ClassMetrics {
        accuracy: ratio(tp + tn, cm.total(), &format!("class {c} accuracy"), &mut w),
        precision: ratio(tp, tp + fp, &format!("class {c} precision"), &mut w),
        recall: ratio(tp, tp + fn_, &format!("class {c} recall"), &mut w),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, &format!("class {c} F1"), &mut w),
        specificity: ratio(tn, tn + fp, &format!("class {c} specificity"), &mut w),
        warnings: w,
    }
}

pub fn binary_metrics(cm: &ConfusionMatrix, positive: usize) -> Result<ClassMetrics> {
    if cm.classes() != 2 || positive > 1 {
        return Err(Error::invalid("binary metrics need a 2×2 matrix and positive class 0 or 1"));
    }
    Ok(one_vs_rest(cm, positive))
}

/// Equal-weight averages over a set of classes; accuracy is trace/total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroMetrics {
    pub accuracy: Exact,
    pub precision: Exact,
    pub recall: Exact,
    pub f1: Exact,
    pub specificity: Exact,
    pub per_class: Vec<ClassMetrics>,
    pub warnings: Vec<String>,
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> MacroMetrics {
    let all: Vec<usize> = (0..cm.classes()).collect();
    macro_metrics_over(cm, &all)
}

/// Macro averages over `classes` only; the matrix may carry extra classes
/// (e.g. a "none" column) that still count toward accuracy.
pub fn macro_metrics_over(cm: &ConfusionMatrix, classes: &[usize]) -> MacroMetrics {
    let mut warnings = Vec::new();
    let accuracy = ratio(cm.trace(), cm.total(), "accuracy", &mut warnings);
    let per_class: Vec<ClassMetrics> = classes.iter().map(|&c| one_vs_rest(cm, c)).collect();
    let n = Exact::from_integer(per_class.len().max(1) as u128);
    let mean = |f: fn(&ClassMetrics) -> Exact| per_class.iter().map(f).fold(Exact::zero(), |a, b| a + b) / n;
    for m in &per_class {
        warnings.extend(m.warnings.iter().cloned());
    }
    MacroMetrics {
        accuracy,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        specificity: mean(|m| m.specificity),
        per_class,
        warnings,
    }
}

/// Nearest `f64`; exact operands below 2^53 give a correctly rounded quotient.
pub fn to_f64(r: Exact) -> f64 {
    const LIMIT: u128 = 1 << 53;
    if *r.numer() < LIMIT && *r.denom() < LIMIT {
        *r.numer() as f64 / *r.denom() as f64
    } else {
        r.to_f64().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalScope {
    /// Location task scored on ICH-labelled samples with raw location argmax.
    IchOnly,
    /// Location task scored on every sample with gated predictions; Normal
    /// samples and Normal predictions fall into an extra "none" class.
    All,
}

impl fmt::Display for EvalScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalScope::IchOnly => "ich-only",
            EvalScope::All => "all",
        })
    }
}

impl std::str::FromStr for EvalScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ich-only" => Ok(EvalScope::IchOnly),
            "all" => Ok(EvalScope::All),
            _ => Err(Error::invalid(format!("unknown scope `{s}` (expected ich-only or all)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub classifier: String,
    pub samples: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// The same five values as exact fractions, e.g. "1265/1266".
    pub exact: [String; 5],
}

impl MetricsRow {
    fn new(classifier: &str, samples: u64, v: [Exact; 5]) -> Self {
        MetricsRow {
            classifier: classifier.to_string(),
            samples,
            accuracy: to_f64(v[0]),
            precision: to_f64(v[1]),
            recall: to_f64(v[2]),
            f1: to_f64(v[3]),
            specificity: to_f64(v[4]),
            exact: v.map(|r| r.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scope: EvalScope,
    pub rows: Vec<MetricsRow>,
    pub presence_confusion: Vec<Vec<u64>>,
    pub location_confusion: Vec<Vec<u64>>,
    pub warnings: Vec<String>,
}

/// Builds the two-row table. Task 1 treats ICH (index 1) as positive; task 2
/// is macro-averaged over the three location classes.
pub fn report(presence: &ConfusionMatrix, location: &ConfusionMatrix, scope: EvalScope) -> Result<Report> {
    let b = binary_metrics(presence, 1)?;
    let expected = match scope {
        EvalScope::IchOnly => 3,
        EvalScope::All => 4,
    };
    if location.classes() != expected {
        return Err(Error::invalid(format!(
            "scope {scope} expects a {expected}-class location matrix, got {}",
            location.classes()
        )));
    }
    let m = macro_metrics_over(location, &[0, 1, 2]);
    let mut warnings: Vec<String> = b.warnings.iter().map(|w| format!("classifier 1: {w}")).collect();
    warnings.extend(m.warnings.iter().map(|w| format!("classifier 2: {w}")));
    Ok(Report {
        scope,
        rows: vec![
            MetricsRow::new(
                "classifier 1",
                presence.total(),
                [b.accuracy, b.precision, b.recall, b.f1, b.specificity],
            ),
            MetricsRow::new(
                "classifier 2",
                location.total(),
                [m.accuracy, m.precision, m.recall, m.f1, m.specificity],
            ),
        ],
        presence_confusion: presence.rows(),
        location_confusion: location.rows(),
        warnings,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scope: {}", self.scope)?;
        writeln!(
            f,
            "{:<14}{:>8}{:>10}{:>11}{:>9}{:>9}{:>13}",
            "classifier", "n", "accuracy", "precision", "recall", "f1", "specificity"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14}{:>8}{:>10.5}{:>11.5}{:>9.5}{:>9.5}{:>13.5}",
                r.classifier, r.samples, r.accuracy, r.precision, r.recall, r.f1, r.specificity
            )?;
        }
        writeln!(f, "presence confusion (rows true normal/ich):")?;
        for row in &self.presence_confusion {
            writeln!(f, "  {}", join(row))?;
        }
        let labels = if self.scope == EvalScope::All {
            "deep/lobar/subtentorial/none"
        } else {
            "deep/lobar/subtentorial"
        };
        writeln!(f, "location confusion (rows true {labels}):")?;
        for row in &self.location_confusion {
            writeln!(f, "  {}", join(row))?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

fn join(row: &[u64]) -> String {
    row.iter().map(|v| format!("{v:>6}")).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: u128, d: u128) -> Exact {
        Exact::new(n, d)
    }

    #[test]
    fn confusion_basics() {
        let cm = confusion(&[0, 1, 2, 0, 1, 2, 0, 1, 2], &[0, 1, 2, 0, 1, 2, 0, 1, 2], 3).unwrap();
        assert_eq!(cm.trace(), 9);
        assert_eq!(cm.rows(), vec![vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3]]);
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[3], &[0], 3).is_err());
    }

    #[test]
    fn symmetric_binary_case() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        let m = binary_metrics(&cm, 1).unwrap();
        let half = q(1, 2);
        assert_eq!([m.accuracy, m.precision, m.recall, m.f1, m.specificity], [half; 5]);
    }

    #[test]
    fn three_class_hand_reduction() {
        // diag(2,2,2) plus one true-0 predicted-1
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1, 0], vec![0, 2, 0], vec![0, 0, 2]]).unwrap();
        let m = macro_metrics(&cm);
        assert_eq!(m.accuracy, q(6, 7));
        // class 0: tp2 fp0 fn1 tn4; class 1: tp2 fp1 fn0 tn4; class 2: tp2 fp0 fn0 tn5
        assert_eq!(m.precision, (q(1, 1) + q(2, 3) + q(1, 1)) / q(3, 1));
        assert_eq!(m.recall, (q(2, 3) + q(1, 1) + q(1, 1)) / q(3, 1));
        assert_eq!(m.specificity, (q(1, 1) + q(4, 5) + q(1, 1)) / q(3, 1));
        assert_eq!(m.f1, (q(4, 5) + q(4, 5) + q(1, 1)) / q(3, 1));
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn degenerate_classes_warn() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        let m = macro_metrics(&cm);
        assert_eq!(m.accuracy, q(1, 1));
        assert!(!m.warnings.is_empty());
        assert_eq!(m.per_class[1].precision, Exact::zero());
    }

    #[test]
    fn report_round_trip() {
        let p = ConfusionMatrix::from_rows(&[vec![458, 1], vec![0, 807]]).unwrap();
        let l = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 5, 1], vec![0, 0, 5]]).unwrap();
        let r = report(&p, &l, EvalScope::IchOnly).unwrap();
        assert_eq!(r.rows[0].exact[0], "1265/1266");
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let text = r.to_string();
        assert!(text.contains("classifier 1"));
        assert!(report(&p, &l, EvalScope::All).is_err());
    }
}
