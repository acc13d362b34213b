//! Classification metrics over a confusion matrix, plus rank-based ROC AUC.
//!
//! Class 0 is the normal condition. Detection rate and false-alarm rate
//! collapse the multi-class problem to normal vs fault.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub const NORMAL_CLASS: usize = 0;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self { classes, counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let classes = counts.len();
        if counts.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    /// Row sum: samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
        Ok(())
    }
}

pub fn confusion_matrix(preds: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return arg_err(format!("{} predictions for {} labels", preds.len(), truth.len()));
    }
    let mut m = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= classes || t >= classes {
            return arg_err(format!("label pair ({t}, {p}) outside 0..{classes}"));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest precision, recall and F1 for class `c`; 0/0 counts as 0.
pub fn precision_recall_f1(m: &ConfusionMatrix, c: usize) -> (f64, f64, f64) {
    let tp = m.get(c, c);
    let predicted: u64 = (0..m.classes).map(|t| m.get(t, c)).sum();
    let p = ratio(tp, predicted);
    let r = ratio(tp, m.support(c));
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

pub fn accuracy(m: &ConfusionMatrix) -> f64 {
    ratio((0..m.classes).map(|c| m.get(c, c)).sum(), m.total())
}

/// Mean recall over the given fault classes.
pub fn detection_rate(m: &ConfusionMatrix, fault_classes: &[usize]) -> f64 {
    if fault_classes.is_empty() {
        return 0.0;
    }
    fault_classes.iter().map(|&c| precision_recall_f1(m, c).1).sum::<f64>() / fault_classes.len() as f64
}

/// Fraction of normal samples predicted as any fault; `None` without normal samples.
pub fn false_alarm_rate(m: &ConfusionMatrix, normal: usize) -> Option<f64> {
    let support = m.support(normal);
    (support > 0).then(|| (support - m.get(normal, normal)) as f64 / support as f64)
}

/// Binary ROC AUC from the Mann-Whitney rank statistic with midranks for ties.
pub fn roc_auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return arg_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return arg_err("NaN score");
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return arg_err("AUC needs both positive and negative samples");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Unweighted mean of one-vs-rest AUCs, scoring class `c` by `exp(logp[c])`.
/// Classes absent from `truth` are skipped.
pub fn roc_auc_macro(logp: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    if logp.len() != truth.len() {
        return arg_err(format!("{} score rows for {} labels", logp.len(), truth.len()));
    }
    let classes = logp.first().map_or(0, Vec::len);
    if logp.iter().any(|r| r.len() != classes) {
        return Err(Error::Shape("score rows differ in length".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let present = labels.iter().filter(|&&l| l).count();
        if present == 0 || present == labels.len() {
            log::warn!("class {c} has no positive or no negative samples; skipped in macro AUC");
            continue;
        }
        let scores: Vec<f64> = logp.iter().map(|r| r[c].exp()).collect();
        sum += roc_auc_binary(&scores, &labels)?;
        used += 1;
    }
    if used == 0 {
        return arg_err("macro AUC needs at least two classes present");
    }
    Ok(sum / used as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub micro_avg: Averages,
    pub acc: f64,
    pub dr: f64,
    pub far: Option<f64>,
    pub far_percent: Option<f64>,
    pub auc_macro: Option<f64>,
    pub runtime_s: f64,
}

impl EvalReport {
    /// Derives every metric from the confusion matrix; AUC only when scores are given.
    pub fn from_confusion(confusion: ConfusionMatrix, auc_macro: Option<f64>, runtime_s: f64) -> Self {
        let c = confusion.classes;
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let (precision, recall, f1) = precision_recall_f1(&confusion, k);
                ClassMetrics { class: k, precision, recall, f1, support: confusion.support(k) }
            })
            .collect();
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c.max(1) as f64;
        let macro_avg = Averages { precision: mean(|m| m.precision), recall: mean(|m| m.recall), f1: mean(|m| m.f1) };
        // single-label multi-class: pooled TP / FP / FN all share the trace
        let acc = accuracy(&confusion);
        let micro_avg = Averages { precision: acc, recall: acc, f1: acc };
        let faults: Vec<usize> = (0..c).filter(|&k| k != NORMAL_CLASS).collect();
        let dr = detection_rate(&confusion, &faults);
        let far = if c > NORMAL_CLASS { false_alarm_rate(&confusion, NORMAL_CLASS) } else { None };
        Self {
            confusion,
            per_class,
            macro_avg,
            micro_avg,
            acc,
            dr,
            far,
            far_percent: far.map(|f| f * 100.0),
            auc_macro,
            runtime_s,
        }
    }

    /// Builds a report from predictions; AUC is computed when possible.
    pub fn from_predictions(logp: &[Vec<f64>], truth: &[usize], classes: usize, runtime_s: f64) -> Result<Self> {
        let preds: Vec<usize> = logp.iter().map(|r| argmax(r)).collect();
        let confusion = confusion_matrix(&preds, truth, classes)?;
        let distinct = {
            let mut seen = vec![false; classes];
            truth.iter().for_each(|&t| seen[t] = true);
            seen.iter().filter(|&&s| s).count()
        };
        let auc = if distinct >= 2 { Some(roc_auc_macro(logp, truth)?) } else { None };
        Ok(Self::from_confusion(confusion, auc, runtime_s))
    }

    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>6} {:>10} {:>10} {:>10} {:>8}", "class", "precision", "recall", "f1", "support").unwrap();
        for m in &self.per_class {
            writeln!(s, "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}", m.class, m.precision, m.recall, m.f1, m.support)
                .unwrap();
        }
        let a = &self.macro_avg;
        writeln!(s, "{:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}", "macro", a.precision, a.recall, a.f1, self.confusion.total())
            .unwrap();
        writeln!(s).unwrap();
        writeln!(s, "ACC  {:.4}", self.acc).unwrap();
        writeln!(s, "DR   {:.4}", self.dr).unwrap();
        match self.far {
            Some(f) => writeln!(s, "FAR  {:.4} ({:.3}%)", f, f * 100.0).unwrap(),
            None => writeln!(s, "FAR  n/a (no normal samples)").unwrap(),
        }
        match self.auc_macro {
            Some(a) => writeln!(s, "AUC  {a:.4}").unwrap(),
            None => writeln!(s, "AUC  n/a").unwrap(),
        }
        s
    }

    /// One row per class: precision, recall, f1, support.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,precision,recall,f1,support\n");
        for m in &self.per_class {
            writeln!(s, "{},{:.6},{:.6},{:.6},{}", m.class, m.precision, m.recall, m.f1, m.support).unwrap();
        }
        s
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
