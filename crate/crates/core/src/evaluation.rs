//! Planar and hierarchical metrics, and projection onto coarse classes.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub slide_id: String,
    pub true_class: usize,
    pub probs: Vec<f64>,
    pub pred_class: usize,
    /// Node ids on the root-to-leaf path, root excluded.
    pub true_set: BTreeSet<usize>,
    pub pred_set: BTreeSet<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl EvalRecord {
    pub fn new(t: &Taxonomy, slide_id: impl Into<String>, true_class: usize, probs: Vec<f64>) -> Result<Self> {
        let n = t.leaf_count();
        if probs.len() != n || true_class >= n {
            return Err(Error::BadLabel(format!(
                "class {true_class} with {} probabilities for {n} classes",
                probs.len()
            )));
        }
        let pred_class = argmax(&probs);
        Ok(EvalRecord {
            slide_id: slide_id.into(),
            true_class,
            pred_class,
            true_set: t.label_set(t.leaf_id(true_class)?)?,
            pred_set: t.label_set(t.leaf_id(pred_class)?)?,
            probs,
        })
    }
}

fn check_classes(records: &[EvalRecord]) -> Result<usize> {
    let first = records.first().ok_or(Error::EmptyEval)?;
    let n = first.probs.len();
    for r in records {
        if r.probs.len() != n || r.true_class >= n || r.pred_class >= n {
            return Err(Error::BadLabel(format!("record {} is inconsistent with {n} classes", r.slide_id)));
        }
    }
    Ok(n)
}

/// `(ACC, weighted F1)`.
pub fn planar_metrics(records: &[EvalRecord]) -> Result<(f64, f64)> {
    let n = check_classes(records)?;
    let total = records.len() as f64;
    let mut tp = vec![0usize; n];
    let mut predicted = vec![0usize; n];
    let mut support = vec![0usize; n];
    for r in records {
        support[r.true_class] += 1;
        predicted[r.pred_class] += 1;
        if r.true_class == r.pred_class {
            tp[r.true_class] += 1;
        }
    }
    let acc = tp.iter().sum::<usize>() as f64 / total;
    let mut wf1 = 0.0;
    for c in 0..n {
        if support[c] == 0 {
            continue;
        }
        let precision = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        wf1 += support[c] as f64 / total * f1;
    }
    Ok((acc, wf1))
}

/// Rank-statistic AUC of `scores` for the positives in `labels` (ties ½).
fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Macro one-vs-rest AUC over classes with both positives and negatives.
pub fn macro_auc(records: &[EvalRecord]) -> Result<f64> {
    let n = check_classes(records)?;
    let mut aucs = Vec::new();
    for c in 0..n {
        let scores: Vec<f64> = records.iter().map(|r| r.probs[c]).collect();
        let labels: Vec<bool> = records.iter().map(|r| r.true_class == c).collect();
        if let Some(a) = binary_auc(&scores, &labels) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        return Err(Error::NoContributingClass);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Micro-averaged `(H-Precision, H-Recall, H-F1)`.
pub fn hier_metrics(records: &[EvalRecord]) -> Result<(f64, f64, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
    for r in records {
        inter += r.true_set.intersection(&r.pred_set).count();
        pred += r.pred_set.len();
        truth += r.true_set.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let hp = ratio(inter, pred);
    let hr = ratio(inter, truth);
    let hf = if hp + hr > 0.0 { 2.0 * hp * hr / (hp + hr) } else { 0.0 };
    Ok((hp, hr, hf))
}

/// Sums leaf probabilities within groups; `grouping[c]` is the coarse class of
/// leaf class `c`. Hierarchical label sets are cleared.
pub fn coarse_project(records: &[EvalRecord], grouping: &[usize]) -> Result<Vec<EvalRecord>> {
    let n = check_classes(records)?;
    if grouping.len() != n {
        return Err(Error::IncompleteGrouping(format!(
            "grouping covers {} of {n} leaf classes",
            grouping.len()
        )));
    }
    let groups = grouping.iter().max().map_or(0, |m| m + 1);
    let used: BTreeSet<usize> = grouping.iter().copied().collect();
    if used.len() != groups {
        return Err(Error::IncompleteGrouping("coarse class indices must be contiguous from 0".into()));
    }
    Ok(records
        .iter()
        .map(|r| {
            let mut probs = vec![0.0; groups];
            for (c, p) in r.probs.iter().enumerate() {
                probs[grouping[c]] += p;
            }
            EvalRecord {
                slide_id: r.slide_id.clone(),
                true_class: grouping[r.true_class],
                pred_class: argmax(&probs),
                probs,
                true_set: BTreeSet::new(),
                pred_set: BTreeSet::new(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanarReport {
    pub acc: f64,
    pub weighted_f1: f64,
    /// Absent when no class has both positives and negatives.
    pub macro_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub samples: usize,
    #[serde(flatten)]
    pub planar: PlanarReport,
    pub h_precision: f64,
    pub h_recall: f64,
    pub h_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse: Option<PlanarReport>,
}

fn planar_report(records: &[EvalRecord]) -> Result<PlanarReport> {
    let (acc, weighted_f1) = planar_metrics(records)?;
    let macro_auc = match macro_auc(records) {
        Ok(a) => Some(a),
        Err(Error::NoContributingClass) => None,
        Err(e) => return Err(e),
    };
    Ok(PlanarReport {
        acc,
        weighted_f1,
        macro_auc,
    })
}

impl MetricReport {
    pub fn compute(records: &[EvalRecord], grouping: Option<&[usize]>) -> Result<Self> {
        let planar = planar_report(records)?;
        let (h_precision, h_recall, h_f1) = hier_metrics(records)?;
        let coarse = grouping
            .map(|g| planar_report(&coarse_project(records, g)?))
            .transpose()?;
        Ok(MetricReport {
            samples: records.len(),
            planar,
            h_precision,
            h_recall,
            h_f1,
            coarse,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let auc = |a: Option<f64>| a.map_or("nan".to_string(), f);
        let mut out = format!(
            "samples={}\nacc={}\nweighted_f1={}\nmacro_auc={}\nh_precision={}\nh_recall={}\nh_f1={}\n",
            self.samples,
            f(self.planar.acc),
            f(self.planar.weighted_f1),
            auc(self.planar.macro_auc),
            f(self.h_precision),
            f(self.h_recall),
            f(self.h_f1)
        );
        if let Some(c) = &self.coarse {
            out.push_str(&format!(
                "coarse_acc={}\ncoarse_weighted_f1={}\ncoarse_macro_auc={}\n",
                f(c.acc),
                f(c.weighted_f1),
                auc(c.macro_auc)
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
