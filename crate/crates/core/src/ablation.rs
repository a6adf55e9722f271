//! The 2×2 grid of attention and matching switches, replicated over seeds.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::eval::EvalReport;
use crate::pipeline::{run_from_stage_a, run_stage_a, Ablation, PipelineConfig, PipelineData, StageAOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Uniform attention, no matching.
    Zgcn,
    /// Uniform attention with matching.
    ZgcnSmo,
    /// Learned attention, no matching.
    Agcn,
    /// Learned attention with matching.
    AgcnSmo,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Zgcn, Arm::ZgcnSmo, Arm::Agcn, Arm::AgcnSmo];

    pub fn tag(self) -> &'static str {
        match self {
            Arm::Zgcn => "zgcn",
            Arm::ZgcnSmo => "zgcn+smo",
            Arm::Agcn => "agcn",
            Arm::AgcnSmo => "agcn-smo",
        }
    }

    pub fn switches(self) -> Ablation {
        Ablation {
            attention: matches!(self, Arm::Agcn | Arm::AgcnSmo),
            smo: matches!(self, Arm::ZgcnSmo | Arm::AgcnSmo),
        }
    }

    /// Parses a comma-separated arm list; `all` selects the full grid.
    pub fn parse_list(text: &str) -> Result<Vec<Arm>> {
        if text.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut arms: Vec<Arm> = text.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
        arms.sort();
        arms.dedup();
        if arms.is_empty() {
            return Err(usage("empty arm list"));
        }
        Ok(arms)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| usage(format!("unknown arm `{s}`; expected zgcn, zgcn+smo, agcn or agcn-smo")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub report: EvalReport,
}

/// `cfg` with the arm's switches and `seed` applied.
pub fn arm_config(base: &PipelineConfig, arm: Arm, seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        ablation: arm.switches(),
        ..base.clone()
    }
}

/// Runs every arm for every seed. Seeds run on separate threads; within a
/// seed, stage A is trained once per attention mode and shared by the two
/// arms that use it. Results are ordered by seed, then arm.
pub fn run_ablation(base: &PipelineConfig, data: &PipelineData, arms: &[Arm], seeds: &[u64]) -> Result<Vec<ArmRun>> {
    let per_seed: Vec<Result<Vec<ArmRun>>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| s.spawn(move || run_seed(base, data, arms, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for runs in per_seed {
        out.extend(runs?);
    }
    Ok(out)
}

fn run_seed(base: &PipelineConfig, data: &PipelineData, arms: &[Arm], seed: u64) -> Result<Vec<ArmRun>> {
    let mut stage_a: BTreeMap<bool, StageAOutput> = BTreeMap::new();
    let mut runs = Vec::with_capacity(arms.len());
    for &arm in arms {
        let cfg = arm_config(base, arm, seed);
        let attention = cfg.ablation.attention;
        let sa = match stage_a.entry(attention) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(run_stage_a(
                &cfg.stage_a,
                cfg.attention_mode(),
                &data.graph,
                &data.gt_known,
                seed,
            )?),
        };
        let out = run_from_stage_a(&cfg, data, sa.clone())?;
        runs.push(ArmRun {
            arm,
            seed,
            report: out.report,
        });
    }
    Ok(runs)
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seeds: usize,
    pub known: MeanStd,
    pub unknown: MeanStd,
    pub all: MeanStd,
}

/// One summary row per arm present in `runs`, in grid order.
pub fn summarize(runs: &[ArmRun]) -> Vec<ArmSummary> {
    Arm::ALL
        .into_iter()
        .filter_map(|arm| {
            let reports: Vec<&EvalReport> = runs.iter().filter(|r| r.arm == arm).map(|r| &r.report).collect();
            if reports.is_empty() {
                return None;
            }
            let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some(ArmSummary {
                arm,
                seeds: reports.len(),
                known: col(|r| r.known_acc),
                unknown: col(|r| r.unknown_acc),
                all: col(|r| r.all_acc),
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// `arm,seeds,known_mean,known_std,unknown_mean,unknown_std,all_mean,all_std`.
pub fn write_summary_csv(path: &Path, rows: &[ArmSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "arm",
        "seeds",
        "known_mean",
        "known_std",
        "unknown_mean",
        "unknown_std",
        "all_mean",
        "all_std",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.arm.tag().to_string(),
            r.seeds.to_string(),
            r.known.mean.to_string(),
            r.known.std.to_string(),
            r.unknown.mean.to_string(),
            r.unknown.std.to_string(),
            r.all.mean.to_string(),
            r.all.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `arm,seed,known_acc,unknown_acc,all_acc`, one line per run.
pub fn write_runs_csv(path: &Path, runs: &[ArmRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["arm", "seed", "known_acc", "unknown_acc", "all_acc"])
        .map_err(csv_err)?;
    for r in runs {
        w.write_record([
            r.arm.tag().to_string(),
            r.seed.to_string(),
            r.report.known_acc.to_string(),
            r.report.unknown_acc.to_string(),
            r.report.all_acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table of the summary, accuracies in percent.
pub fn summary_table(rows: &[ArmSummary]) -> String {
    let mut s = format!(
        "{:<10} {:>5} {:>15} {:>15} {:>15}\n",
        "arm", "seeds", "known", "unknown", "all"
    );
    let cell = |m: MeanStd| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std);
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:>5} {:>15} {:>15} {:>15}\n",
            r.arm.tag(),
            r.seeds,
            cell(r.known),
            cell(r.unknown),
            cell(r.all)
        ));
    }
    s
}
