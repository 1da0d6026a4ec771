//! Classification metrics: ROC AUC, average precision, accuracy and F1.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::numeric::sigmoid;

/// Mann–Whitney AUC with tied scores counted half. `None` without both classes.
pub fn binary_roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_k - R_{k-1}) P_k` over distinct score thresholds
/// taken from high to low. `None` without positives.
pub fn binary_average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            group_tp += usize::from(labels[order[j]]);
            j += 1;
        }
        tp += group_tp;
        seen += j - i;
        ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        i = j;
    }
    Some(ap)
}

/// Macro average over classes with a defined value; undefined classes are reported.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroValue {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn macro_over<F>(scores: &[Vec<f64>], labels: &[Vec<f64>], what: &str, f: F) -> Result<MacroValue>
where
    F: Fn(&[f64], &[bool]) -> Option<f64>,
{
    let classes = labels.first().map_or(0, Vec::len);
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c] > 0.5).collect();
        per_class.push(f(&s, &l));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(format!("{what}: no class has both outcomes present")));
    }
    Ok(MacroValue {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        excluded: (0..classes).filter(|&c| per_class[c].is_none()).collect(),
        per_class,
    })
}

/// Macro ROC AUC; rows are samples, columns classes (one-vs-rest).
pub fn roc_auc(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<MacroValue> {
    macro_over(scores, labels, "ROC AUC", binary_roc_auc)
}

/// Macro average precision.
pub fn pr_auc(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<MacroValue> {
    macro_over(scores, labels, "PR AUC", binary_average_precision)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// F1 with `0/0` taken as 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Hard predictions: `score >= 0.5` per class (multilabel) or the argmax
/// (multiclass, lowest index on ties).
pub fn predict(scores: &[f64], mode: TaskMode) -> Vec<bool> {
    match mode {
        TaskMode::Multilabel => scores.iter().map(|&s| s >= 0.5).collect(),
        TaskMode::Multiclass => {
            let best = argmax(scores);
            (0..scores.len()).map(|c| c == best).collect()
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy (exact match for multilabel) and macro F1, with per-class confusion counts.
pub fn acc_f1(scores: &[Vec<f64>], labels: &[Vec<f64>], mode: TaskMode) -> (f64, f64, Vec<Confusion>) {
    let classes = labels.first().map_or(0, Vec::len);
    let mut conf = vec![Confusion::default(); classes];
    let mut correct = 0;
    for (s, l) in scores.iter().zip(labels) {
        let pred = predict(s, mode);
        let truth: Vec<bool> = l.iter().map(|&v| v > 0.5).collect();
        let hit = match mode {
            TaskMode::Multilabel => pred == truth,
            TaskMode::Multiclass => truth[argmax(s)],
        };
        correct += usize::from(hit);
        for c in 0..classes {
            let cell = &mut conf[c];
            match (pred[c], truth[c]) {
                (true, true) => cell.tp += 1,
                (true, false) => cell.fp += 1,
                (false, true) => cell.fn_ += 1,
                (false, false) => cell.tn += 1,
            }
        }
    }
    let n = scores.len().max(1) as f64;
    let f1 = if classes == 0 {
        0.0
    } else {
        conf.iter().map(Confusion::f1).sum::<f64>() / classes as f64
    };
    (correct as f64 / n, f1, conf)
}

/// Scores from logits: sigmoid per class (multilabel) or softmax (multiclass).
pub fn scores_from_logits(logits: &[f64], mode: TaskMode) -> Vec<f64> {
    match mode {
        TaskMode::Multilabel => logits.iter().map(|&z| sigmoid(z)).collect(),
        TaskMode::Multiclass => {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub f1: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub task_mode: TaskMode,
    pub acc: f64,
    pub f1: f64,
    /// `None` when no class has both outcomes.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    /// Classes left out of the AUC averages.
    pub excluded_roc: Vec<usize>,
    pub excluded_pr: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn from_logits(logits: &[Vec<f64>], labels: &[Vec<f64>], mode: TaskMode, class_names: &[String]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::EmptySplit("evaluation"));
        }
        let scores: Vec<Vec<f64>> = logits.iter().map(|z| scores_from_logits(z, mode)).collect();
        let (acc, f1, conf) = acc_f1(&scores, labels, mode);
        let roc = roc_auc(&scores, labels).ok();
        let pr = pr_auc(&scores, labels).ok();
        let classes = conf.len();
        let per_class = (0..classes)
            .map(|c| ClassMetrics {
                class: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                roc_auc: roc.as_ref().and_then(|m| m.per_class[c]),
                pr_auc: pr.as_ref().and_then(|m| m.per_class[c]),
                f1: conf[c].f1(),
                confusion: conf[c],
            })
            .collect();
        Ok(MetricsReport {
            samples: logits.len(),
            task_mode: mode,
            acc,
            f1,
            roc_auc: roc.as_ref().map(|m| m.value),
            pr_auc: pr.as_ref().map(|m| m.value),
            excluded_roc: roc.map_or_else(|| (0..classes).collect(), |m| m.excluded),
            excluded_pr: pr.map_or_else(|| (0..classes).collect(), |m| m.excluded),
            per_class,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "samples {}  task {}", self.samples, self.task_mode);
        let _ = writeln!(
            out,
            "acc {:.4}  f1 {:.4}  roc_auc {}  pr_auc {}",
            self.acc,
            self.f1,
            opt(self.roc_auc),
            opt(self.pr_auc)
        );
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>5} {:>5} {:>5} {:>5}", "class", "roc", "pr", "f1", "tp", "fp", "fn", "tn");
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8.4} {:>5} {:>5} {:>5} {:>5}",
                c.class,
                opt(c.roc_auc),
                opt(c.pr_auc),
                c.f1,
                c.confusion.tp,
                c.confusion.fp,
                c.confusion.fn_,
                c.confusion.tn
            );
        }
        if !self.excluded_roc.is_empty() {
            let _ = writeln!(out, "excluded from roc_auc: {:?}", self.excluded_roc);
        }
        if !self.excluded_pr.is_empty() {
            let _ = writeln!(out, "excluded from pr_auc: {:?}", self.excluded_pr);
        }
        out
    }
}
