//! AUC, logloss and evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Split, TabularDataset};
use crate::error::{DpnError, Result};

pub const PROB_CLIP: f64 = 1e-7;

fn check_labels(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(DpnError::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DpnError::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.iter().filter(|&&y| y == 0.0).count();
    if pos + neg != labels.len() {
        return Err(DpnError::Metric("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(DpnError::Metric(format!("AUC needs both classes, got {pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

/// Rank-sum (Mann-Whitney) AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
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
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Quadratic pairwise count, ties worth one half.
pub fn auc_pairwise(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut wins = 0.0;
    for i in 0..scores.len() {
        if labels[i] != 1.0 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] == 0.0 {
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Mean binary cross-entropy with probabilities clipped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(DpnError::Metric(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    /// `None` when the slice holds a single class.
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub n: usize,
}

impl SliceMetrics {
    pub fn compute(probs: &[f64], labels: &[f64]) -> Self {
        Self { auc: auc(probs, labels).ok(), logloss: logloss(probs, labels).ok(), n: labels.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    pub params: usize,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slices: BTreeMap<String, SliceMetrics>,
}

impl EvalReport {
    pub fn compute(probs: &[f64], labels: &[f64], params: usize, wall_time_s: f64) -> Result<Self> {
        Ok(Self {
            auc: auc(probs, labels)?,
            logloss: logloss(probs, labels)?,
            n: labels.len(),
            params,
            wall_time_s,
            slices: BTreeMap::new(),
        })
    }

    /// Aligned text table, one row for the whole set and one per slice.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10}", "set", "auc", "logloss", "n");
        let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10}", "all", fmt(Some(self.auc)), fmt(Some(self.logloss)), self.n);
        for (name, m) in &self.slices {
            let _ = writeln!(s, "{:<24} {:>10} {:>10} {:>10}", name, fmt(m.auc), fmt(m.logloss), m.n);
        }
        let _ = writeln!(s, "params {}  wall {:.3}s", self.params, self.wall_time_s);
        s
    }
}

/// Test rows whose `field` value occurs fewer than `threshold` times in the
/// train split. `f64::INFINITY` selects the whole test split.
pub fn slice_by_frequency(data: &TabularDataset, field: &str, threshold: f64) -> Result<Vec<usize>> {
    let f = data.schema.index_of(field)?;
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for i in 0..data.len() {
        if data.splits[i] == Split::Train {
            *freq.entry(data.row(i)[f]).or_default() += 1;
        }
    }
    Ok((0..data.len())
        .filter(|&i| data.splits[i] == Split::Test)
        .filter(|&i| (*freq.get(&data.row(i)[f]).unwrap_or(&0) as f64) < threshold)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(DpnError::Metric(_))));
    }

    #[test]
    fn logloss_hand_cases() {
        assert!((logloss(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(logloss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1.1e-7);
        // -(ln 0.9 + ln 0.8 + ln 0.4) / 3
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((logloss(&[0.9, 0.2, 0.4], &[1.0, 0.0, 1.0]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn table_lists_slices() {
        let mut r = EvalReport::compute(&[0.2, 0.7], &[0.0, 1.0], 10, 0.5).unwrap();
        r.slices.insert("user<20".into(), SliceMetrics::compute(&[0.7], &[1.0]));
        let t = r.to_table();
        assert!(t.contains("user<20") && t.contains("params 10"));
    }
}
