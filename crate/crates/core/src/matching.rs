//! Cross-domain sample matching.
//!
//! Every target sample is paired with its nearest source sample in feature
//! space; a pair counts toward the discrepancy loss only when the two
//! samples' classifier responses are closer than a threshold τ. The
//! Hungarian solver is the global-assignment baseline.

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Error, Result};
use crate::tape::{GradientTape, Var};
use crate::tensor::{l2_distance, Matrix};

const TARGET_BLOCK: usize = 32;
const SOURCE_BLOCK: usize = 128;

/// Nearest source sample of one target sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub target: usize,
    pub source: usize,
    pub feat_dist: f64,
}

/// A match annotated with its response distance and filter outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub target: usize,
    pub source: usize,
    pub feat_dist: f64,
    pub resp_dist: f64,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoConfig {
    /// Fixed threshold; when absent, τ is the `tau_quantile` of the current
    /// response distances.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_quantile")]
    pub tau_quantile: f64,
    #[serde(default)]
    pub reduction: Reduction,
    /// Rematch every `period` epochs.
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_quantile() -> f64 {
    0.5
}

fn default_period() -> usize {
    1
}

impl Default for SmoConfig {
    fn default() -> Self {
        Self {
            tau: None,
            tau_quantile: default_quantile(),
            reduction: Reduction::Sum,
            period: default_period(),
        }
    }
}

impl SmoConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau {
            if t.is_nan() || t < 0.0 {
                return Err(config(format!("tau must be non-negative, got {t}")));
            }
        }
        if !(self.tau_quantile > 0.0 && self.tau_quantile <= 1.0) {
            return Err(config(format!("tau_quantile must lie in (0, 1], got {}", self.tau_quantile)));
        }
        if self.period == 0 {
            return Err(config("rematch period must be at least 1"));
        }
        Ok(())
    }

    /// τ for the given response distances.
    pub fn threshold(&self, resp_dists: &[f64]) -> f64 {
        match self.tau {
            Some(t) => t,
            None => quantile_nearest_rank(resp_dists, self.tau_quantile),
        }
    }
}

/// Nearest-rank quantile: the `ceil(q n)`-th smallest value. Empty input
/// gives 0.
pub fn quantile_nearest_rank(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// For each target row, the source row at minimum L2 distance (lowest
/// index on ties), in target order. Distances are evaluated over blocks of
/// the source x target grid.
pub fn match_greedy(source: &Matrix, target: &Matrix) -> Result<Vec<Match>> {
    if source.cols() != target.cols() {
        return Err(Error::Dimension {
            op: "match_greedy",
            left: source.shape(),
            right: target.shape(),
        });
    }
    let (ns, nt) = (source.rows(), target.rows());
    let columns = SourceColumns::new(source);
    let mut best = vec![(0usize, f64::INFINITY); nt];
    for t0 in (0..nt).step_by(TARGET_BLOCK) {
        let t1 = (t0 + TARGET_BLOCK).min(nt);
        for s0 in (0..ns).step_by(SOURCE_BLOCK) {
            let s1 = (s0 + SOURCE_BLOCK).min(ns);
            columns.for_each_target(target, t0..t1, s0..s1, |t, d| keep_nearest(&mut best[t], d, s0));
        }
    }
    Ok(best
        .into_iter()
        .enumerate()
        .map(|(target, (source, feat_dist))| Match {
            target,
            source,
            feat_dist,
        })
        .collect())
}

/// Strict `<` keeps the lowest source index among equal distances.
fn keep_nearest(slot: &mut (usize, f64), dists: &[f64], s0: usize) {
    for (k, &d) in dists.iter().enumerate() {
        if d < slot.1 {
            *slot = (s0 + k, d);
        }
    }
}

/// Source rows stored coordinate-major, so one target's distances to a run
/// of source rows are computed coordinate by coordinate across the run.
/// Every distance still sums its coordinates in index order and equals
/// [`l2_distance`] exactly.
struct SourceColumns {
    rows: usize,
    data: Vec<f64>,
}

impl SourceColumns {
    fn new(source: &Matrix) -> Self {
        let (rows, cols) = source.shape();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for (c, &v) in source.row(r).iter().enumerate() {
                data[c * rows + r] = v;
            }
        }
        Self { rows, data }
    }

    /// Distances from `t` to source rows `s0..s0 + out.len()`.
    fn distances(&self, t: &[f64], s0: usize, out: &mut [f64]) {
        out.fill(0.0);
        let n = out.len();
        for (c, &tv) in t.iter().enumerate() {
            let col = &self.data[c * self.rows + s0..c * self.rows + s0 + n];
            for (acc, &x) in out.iter_mut().zip(col) {
                let d = x - tv;
                *acc += d * d;
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
    }

    /// Calls `visit(t, distances)` for every target row in `targets`, with
    /// the distances to source rows `sources`. Targets go two at a time.
    fn for_each_target(
        &self,
        target: &Matrix,
        targets: Range<usize>,
        sources: Range<usize>,
        mut visit: impl FnMut(usize, &[f64]),
    ) {
        let (s0, n) = (sources.start, sources.len());
        let (mut da, mut db) = (vec![0.0; n], vec![0.0; n]);
        let mut t = targets.start;
        while t < targets.end {
            if t + 1 < targets.end {
                self.distances2([target.row(t), target.row(t + 1)], s0, [&mut da, &mut db]);
                visit(t, &da);
                visit(t + 1, &db);
                t += 2;
            } else {
                self.distances(target.row(t), s0, &mut da);
                visit(t, &da);
                t += 1;
            }
        }
    }

    /// [`Self::distances`] for two targets in one pass over the columns.
    fn distances2(&self, t: [&[f64]; 2], s0: usize, out: [&mut [f64]; 2]) {
        let [oa, ob] = out;
        oa.fill(0.0);
        ob.fill(0.0);
        let n = oa.len();
        for (c, (&ta, &tb)) in t[0].iter().zip(t[1]).enumerate() {
            let col = &self.data[c * self.rows + s0..c * self.rows + s0 + n];
            for ((a, b), &x) in oa.iter_mut().zip(ob.iter_mut()).zip(col) {
                let da = x - ta;
                let db = x - tb;
                *a += da * da;
                *b += db * db;
            }
        }
        oa.iter_mut().chain(ob.iter_mut()).for_each(|v| *v = v.sqrt());
    }
}

/// Response distance of every match.
pub fn response_distances(matches: &[Match], source_resp: &Matrix, target_resp: &Matrix) -> Result<Vec<f64>> {
    if source_resp.cols() != target_resp.cols() {
        return Err(Error::Dimension {
            op: "filter_pairs",
            left: source_resp.shape(),
            right: target_resp.shape(),
        });
    }
    matches
        .iter()
        .map(|m| {
            if m.source >= source_resp.rows() || m.target >= target_resp.rows() {
                return Err(usage(format!("pair ({}, {}) outside response rows", m.target, m.source)));
            }
            l2_distance(source_resp.row(m.source), target_resp.row(m.target))
        })
        .collect()
}

/// Flags each match with `resp_dist < tau`.
pub fn filter_pairs(matches: &[Match], source_resp: &Matrix, target_resp: &Matrix, tau: f64) -> Result<Vec<MatchedPair>> {
    let dists = response_distances(matches, source_resp, target_resp)?;
    Ok(annotate(matches, &dists, tau))
}

/// Filters with τ resolved by `cfg` against the current response distances.
pub fn filter_with_config(
    matches: &[Match],
    source_resp: &Matrix,
    target_resp: &Matrix,
    cfg: &SmoConfig,
) -> Result<(Vec<MatchedPair>, f64)> {
    let dists = response_distances(matches, source_resp, target_resp)?;
    let tau = cfg.threshold(&dists);
    Ok((annotate(matches, &dists, tau), tau))
}

fn annotate(matches: &[Match], dists: &[f64], tau: f64) -> Vec<MatchedPair> {
    matches
        .iter()
        .zip(dists)
        .map(|(m, &d)| MatchedPair {
            target: m.target,
            source: m.source,
            feat_dist: m.feat_dist,
            resp_dist: d,
            pass: d < tau,
        })
        .collect()
}

/// Sum (or mean) of feature distances over passing pairs, measured on the
/// given features; 0 when nothing passes.
pub fn discrepancy_loss(
    pairs: &[MatchedPair],
    source_feats: &Matrix,
    target_feats: &Matrix,
    reduction: Reduction,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for p in pairs.iter().filter(|p| p.pass) {
        total += l2_distance(source_feats.row(p.source), target_feats.row(p.target))?;
        count += 1;
    }
    Ok(match (reduction, count) {
        (_, 0) => 0.0,
        (Reduction::Sum, _) => total,
        (Reduction::Mean, c) => total / c as f64,
    })
}

/// Tape version of [`discrepancy_loss`]; only passing rows receive gradient.
pub fn discrepancy_loss_on_tape(
    tape: &mut GradientTape,
    pairs: &[MatchedPair],
    source_feats: Var,
    target_feats: Var,
    reduction: Reduction,
) -> Result<Var> {
    let passing: Vec<&MatchedPair> = pairs.iter().filter(|p| p.pass).collect();
    if passing.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let s_idx: Vec<usize> = passing.iter().map(|p| p.source).collect();
    let t_idx: Vec<usize> = passing.iter().map(|p| p.target).collect();
    let s = tape.select_rows(source_feats, &s_idx)?;
    let t = tape.select_rows(target_feats, &t_idx)?;
    let diff = tape.sub(s, t)?;
    let norms = tape.row_norms(diff);
    Ok(match reduction {
        Reduction::Sum => tape.sum(norms),
        Reduction::Mean => tape.mean(norms),
    })
}

/// Minimum-cost perfect assignment of a square cost matrix: entry `i` of
/// the result is the column given to row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub columns: Vec<usize>,
    pub cost: f64,
}

/// Kuhn–Munkres with row/column potentials, O(n³).
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(usage(format!(
            "assignment needs a square cost matrix, got {}x{}; pad externally",
            n,
            cost.cols()
        )));
    }
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut columns = vec![0; n];
    for j in 1..=n {
        columns[owner[j] - 1] = j - 1;
    }
    let cost = columns.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Assignment { columns, cost })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_source: usize,
    pub n_target: usize,
    pub dim: usize,
    pub seed: u64,
    pub greedy_ms: f64,
    pub hungarian_ms: f64,
    pub greedy_acc: f64,
    pub hungarian_acc: f64,
}

/// Times greedy and Hungarian matching on a labeled synthetic instance and
/// scores each by the fraction of targets paired with a same-class source.
pub fn benchmark_matchers(n_source: usize, n_target: usize, dim: usize, seed: u64) -> Result<BenchReport> {
    let (source, target) = crate::synth::matching_instance(n_source, n_target, dim, seed)?;
    let (ys, yt) = (source.require_labels("benchmark")?, target.require_labels("benchmark")?);
    let (xs, xt) = (source.features(), target.features());

    let start = Instant::now();
    let greedy = match_greedy(xs, xt)?;
    let greedy_ms = start.elapsed().as_secs_f64() * 1e3;
    let greedy_hits = greedy.iter().filter(|m| ys[m.source] == yt[m.target]).count();

    let start = Instant::now();
    let n = n_source.max(n_target);
    let mut cost = Matrix::zeros(n, n);
    let mut max_cost: f64 = 0.0;
    let columns = SourceColumns::new(xs);
    columns.for_each_target(xt, 0..n_target, 0..n_source, |t, row| {
        for (s, &d) in row.iter().enumerate() {
            cost.set(t, s, d);
            max_cost = max_cost.max(d);
        }
    });
    // dummy rows/columns cost more than any real pair
    for t in 0..n {
        for s in 0..n {
            if t >= n_target || s >= n_source {
                cost.set(t, s, max_cost + 1.0);
            }
        }
    }
    let assignment = hungarian(&cost)?;
    let hungarian_ms = start.elapsed().as_secs_f64() * 1e3;
    let hungarian_hits = (0..n_target)
        .filter(|&t| {
            let s = assignment.columns[t];
            s < n_source && ys[s] == yt[t]
        })
        .count();

    Ok(BenchReport {
        n_source,
        n_target,
        dim,
        seed,
        greedy_ms,
        hungarian_ms,
        greedy_acc: greedy_hits as f64 / n_target as f64,
        hungarian_acc: hungarian_hits as f64 / n_target as f64,
    })
}

/// CSV audit of pairs: `target_idx,source_idx,feat_dist,resp_dist,pass`.
pub fn write_pair_dump(path: &Path, pairs: &[MatchedPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["target_idx", "source_idx", "feat_dist", "resp_dist", "pass"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for p in pairs {
        w.write_record([
            p.target.to_string(),
            p.source.to_string(),
            p.feat_dist.to_string(),
            p.resp_dist.to_string(),
            u8::from(p.pass).to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
