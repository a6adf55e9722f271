//! Top-1 metrics on target data, prediction and attention dumps, and report
//! serialization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::DomainDataset;
use crate::error::{usage, Error, Result};
use crate::gcn::GcnModel;
use crate::graph::KnowledgeGraph;
use crate::tensor::Matrix;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetCounts {
    pub known_total: usize,
    pub known_correct: usize,
    pub unknown_total: usize,
    pub unknown_correct: usize,
}

/// Accuracies over known-class, unknown-class and all target samples. An
/// empty subset reports accuracy 0 with a zero count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub known_acc: f64,
    pub unknown_acc: f64,
    pub all_acc: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub counts: SubsetCounts,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    /// Tallies predictions against truth; `unknown` lists the unknown classes.
    pub fn from_predictions(
        predicted: &[usize],
        truth: &[usize],
        unknown: &[usize],
        fingerprint: &str,
        seed: u64,
    ) -> Result<Self> {
        if predicted.len() != truth.len() || truth.is_empty() {
            return Err(usage(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut counts = SubsetCounts::default();
        let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (&p, &y) in predicted.iter().zip(truth) {
            let hit = usize::from(p == y);
            let slot = per_class.entry(y).or_default();
            slot.0 += hit;
            slot.1 += 1;
            if unknown.contains(&y) {
                counts.unknown_total += 1;
                counts.unknown_correct += hit;
            } else {
                counts.known_total += 1;
                counts.known_correct += hit;
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(Self {
            known_acc: ratio(counts.known_correct, counts.known_total),
            unknown_acc: ratio(counts.unknown_correct, counts.unknown_total),
            all_acc: ratio(counts.known_correct + counts.unknown_correct, truth.len()),
            per_class: per_class.into_iter().map(|(c, (h, n))| (c, ratio(h, n))).collect(),
            counts,
            fingerprint: fingerprint.to_string(),
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    /// Aligned text table with Known / Unknown / All columns in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>8}", "", "Known", "Unknown", "All");
        let _ = writeln!(
            out,
            "{:<10} {:>8.1} {:>8.1} {:>8.1}",
            "top-1 %",
            100.0 * self.known_acc,
            100.0 * self.unknown_acc,
            100.0 * self.all_acc
        );
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>8} {:>8}",
            "samples",
            self.counts.known_total,
            self.counts.unknown_total,
            self.counts.known_total + self.counts.unknown_total
        );
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("report.txt"), self.to_table())?;
        Ok(())
    }
}

/// Top-1 evaluation of `bb` on a target set carrying truth labels.
pub fn evaluate(bb: &Backbone, target: &DomainDataset, fingerprint: &str, seed: u64) -> Result<EvalReport> {
    let truth = target.require_labels("evaluation")?;
    let predicted = bb.responses(target.features())?.argmax_rows();
    EvalReport::from_predictions(&predicted, truth, bb.unknown_classes(), fingerprint, seed)
}

/// The `k` most probable classes per sample, descending, ties by class index.
pub fn top_k_predictions(bb: &Backbone, x: &Matrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if k == 0 || k > bb.num_classes() {
        return Err(usage(format!("k = {k} outside 1..={}", bb.num_classes())));
    }
    let probs = bb.responses(x)?;
    Ok(probs
        .row_iter()
        .map(|row| {
            let mut ranked: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            ranked
        })
        .collect())
}

/// The `k` largest layer-2 attention coefficients of `node` with neighbor
/// names, descending, ties by node index; `k` beyond the neighborhood size
/// is truncated to it.
pub fn dump_attention(model: &GcnModel, g: &KnowledgeGraph, node: usize, k: usize) -> Result<Vec<(String, f64)>> {
    let nbrs = g.neighborhood(node)?;
    let alpha = model.layer2_attention(g, g.vectors())?;
    let mut ranked: Vec<(usize, f64)> = nbrs.iter().map(|&j| (j, alpha.get(node, j))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked.into_iter().map(|(j, a)| (g.name(j).to_string(), a)).collect())
}
