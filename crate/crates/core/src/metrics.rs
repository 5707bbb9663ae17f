//! Classification metrics, the challenge composite score and Cohen's kappa.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Area under the ROC curve as the Mann-Whitney statistic `P(s+ > s-) + P(tie) / 2`.
///
/// Computed from mid-ranks, so ties contribute exactly one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score is NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, kept in integers.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R+ - p(p+1)/2 ; AUC = U / (p q)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

/// A rate that may be undefined for the given data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Value(f64),
    Undefined { undefined: String },
}

impl Rate {
    fn ratio(num: usize, den: usize, what: &str) -> Self {
        if den == 0 {
            Rate::Undefined { undefined: format!("{what}: denominator is zero") }
        } else {
            Rate::Value(num as f64 / den as f64)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Rate::Value(v) => Some(*v),
            Rate::Undefined { .. } => None,
        }
    }

    pub fn require(&self, name: &str) -> Result<f64> {
        match self {
            Rate::Value(v) => Ok(*v),
            Rate::Undefined { undefined } => Err(Error::Undefined(format!("{name}: {undefined}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[bool], labels: &[bool]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(invalid(format!("{} predictions vs {} labels", preds.len(), labels.len())));
        }
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub sensitivity: Rate,
    pub specificity: Rate,
    pub balanced_accuracy: Rate,
    pub precision: Rate,
    pub f1: Rate,
    pub accuracy: Rate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composite_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub confusion: Confusion,
}

pub fn confusion_report(c: Confusion) -> MetricsReport {
    let sensitivity = Rate::ratio(c.tp, c.tp + c.fn_, "sensitivity");
    let specificity = Rate::ratio(c.tn, c.tn + c.fp, "specificity");
    let balanced_accuracy = match (&sensitivity, &specificity) {
        (Rate::Value(a), Rate::Value(b)) => Rate::Value((a + b) / 2.0),
        _ => Rate::Undefined { undefined: "balanced accuracy needs both sensitivity and specificity".into() },
    };
    let precision = Rate::ratio(c.tp, c.tp + c.fp, "precision");
    // F1 = 2TP / (2TP + FP + FN), the harmonic mean of precision and recall.
    let f1 = Rate::ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1");
    MetricsReport {
        auc: None,
        sensitivity,
        specificity,
        balanced_accuracy,
        precision,
        f1,
        accuracy: Rate::ratio(c.tp + c.tn, c.total(), "accuracy"),
        composite_score: None,
        threshold: None,
        n_pos: c.tp + c.fn_,
        n_neg: c.tn + c.fp,
        confusion: c,
    }
}

pub fn confusion_metrics(preds: &[bool], labels: &[bool]) -> Result<MetricsReport> {
    Ok(confusion_report(Confusion::from_predictions(preds, labels)?))
}

/// Full report from probabilities: decisions at `score >= threshold`, AUC and composite score
/// where defined.
pub fn evaluate_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricsReport> {
    let preds: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let mut report = confusion_metrics(&preds, labels)?;
    report.threshold = Some(threshold);
    report.auc = roc_auc(scores, labels).ok();
    if let (Some(auc), Some(ba), Some(se), Some(sp)) = (
        report.auc,
        report.balanced_accuracy.value(),
        report.sensitivity.value(),
        report.specificity.value(),
    ) {
        report.composite_score = Some(composite_score(auc, ba, se, sp)?);
    }
    Ok(report)
}

/// `0.4 AUC + 0.2 (balanced accuracy + sensitivity + specificity)`.
pub fn composite_score(auc: f64, balanced_accuracy: f64, sensitivity: f64, specificity: f64) -> Result<f64> {
    for (name, v) in [
        ("auc", auc),
        ("balanced_accuracy", balanced_accuracy),
        ("sensitivity", sensitivity),
        ("specificity", specificity),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(0.4 * auc + 0.2 * balanced_accuracy + 0.2 * sensitivity + 0.2 * specificity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    /// Set when chance agreement is 1 and kappa is fixed at 1 by convention.
    pub degenerate: bool,
}

/// Cohen's kappa for two raters over any ordered label type.
pub fn cohens_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<Kappa> {
    if a.len() != b.len() {
        return Err(invalid(format!("rating sequences differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("kappa needs at least one rating"));
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<T, usize> = BTreeMap::new();
    let mut mb: BTreeMap<T, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x.clone()).or_default() += 1;
        *mb.entry(y.clone()).or_default() += 1;
        if x == y {
            agree += 1;
        }
    }
    let observed = agree as f64 / n;
    let expected: f64 = ma.iter().map(|(k, ca)| *ca as f64 * *mb.get(k).unwrap_or(&0) as f64).sum::<f64>() / (n * n);
    if (1.0 - expected).abs() < 1e-12 {
        return Ok(Kappa { kappa: 1.0, observed, expected, degenerate: true });
    }
    Ok(Kappa { kappa: (observed - expected) / (1.0 - expected), observed, expected, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::Undefined(_))));
    }

    #[test]
    fn confusion_fixture() {
        let mut preds = vec![true; 3];
        preds.push(false);
        preds.extend([false; 4]);
        preds.extend([true; 2]);
        let mut labels = vec![true; 4];
        labels.extend([false; 6]);
        let r = confusion_metrics(&preds, &labels).unwrap();
        assert_eq!(r.sensitivity, Rate::Value(0.75));
        assert_eq!(r.specificity, Rate::Value(4.0 / 6.0));
        assert!((r.balanced_accuracy.value().unwrap() - 17.0 / 24.0).abs() < 1e-15);
        assert!((r.f1.value().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn undefined_rates_are_flagged() {
        let r = confusion_metrics(&[false, true], &[false, false]).unwrap();
        assert!(r.sensitivity.value().is_none());
        assert!(r.sensitivity.require("sensitivity").is_err());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["sensitivity"]["undefined"].is_string());
    }

    #[test]
    fn composite_examples() {
        assert!((composite_score(0.716, 0.637, 0.472, 0.802).unwrap() - 0.6686).abs() < 1e-12);
        assert_eq!(composite_score(1.0, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!(composite_score(1.1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn kappa_examples() {
        let k = cohens_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((k.observed, k.expected, k.kappa), (0.5, 0.5, 0.0));
        assert_eq!(cohens_kappa(&[0, 1, 1], &[0, 1, 1]).unwrap().kappa, 1.0);
        let d = cohens_kappa(&[1, 1], &[1, 1]).unwrap();
        assert!(d.degenerate && d.kappa == 1.0);
    }
}
