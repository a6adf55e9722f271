//! Command-line front end: data generation, training, matching, evaluation,
//! ablation and inspection. Every command writes into `--out`; on failure
//! the files it created there are removed and the exit code is non-zero.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use osdr::ablation::{run_ablation, summarize, summary_table, write_runs_csv, write_summary_csv, Arm};
use osdr::backbone::Backbone;
use osdr::eval::{dump_attention, evaluate, top_k_predictions};
use osdr::gcn::GcnModel;
use osdr::matching::{benchmark_matchers, filter_with_config, match_greedy, write_pair_dump};
use osdr::pipeline::{initial_backbone, run_pipeline, run_stage_a, write_trace, PipelineConfig, PipelineData};
use osdr::synth::{generate, reference_instance, REFERENCE_NAMES};

#[derive(Parser)]
#[command(name = "osdr", version, about = "Open-set domain recognition with graph-propagated classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance into a data directory.
    GenData {
        #[arg(long)]
        instance: String,
        /// Generator seed; use the instance's own seed to reproduce it.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the graph network on known-class classifiers (stage A).
    TrainGcn(RunArgs),
    /// Match target to source samples and apply the consistency filter.
    Match {
        #[command(flatten)]
        run: RunArgs,
        /// Backbone checkpoint; the stage-A initialization is used if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time greedy matching against the Hungarian baseline.
    BenchMatch {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full two-stage training and evaluation.
    TrainJoint(RunArgs),
    /// Evaluate a backbone checkpoint on target data.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest whose fingerprint is recorded in the report.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the attention × matching grid over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated arms (zgcn, zgcn+smo, agcn, agcn-smo) or `all`.
        #[arg(long, default_value = "all")]
        arms: String,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Dump attention coefficients or top-k predictions.
    Inspect {
        #[command(flatten)]
        data: DataArgs,
        /// Graph-network checkpoint, for `--node`.
        #[arg(long)]
        gcn: Option<PathBuf>,
        /// Node whose layer-2 attention is dumped.
        #[arg(long)]
        node: Option<String>,
        /// Backbone checkpoint, for `--sample`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Target sample whose top-k predictions are dumped.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Data directory written by `gen-data`.
    #[arg(long, conflicts_with = "instance")]
    data: Option<PathBuf>,
    /// Reference instance generated on the fly.
    #[arg(long)]
    instance: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

impl RunArgs {
    fn manifest(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        cfg.seed = self.seed;
        if self.data.instance.is_some() {
            cfg.instance = self.data.instance.clone();
        }
        Ok(cfg)
    }

    fn load(&self, cfg: &PipelineConfig) -> Result<PipelineData> {
        load_data(self.data.data.as_deref(), cfg.instance.as_deref())
    }
}

fn load_data(dir: Option<&Path>, instance: Option<&str>) -> Result<PipelineData> {
    match (dir, instance) {
        (Some(d), _) => PipelineData::load(d).with_context(|| format!("loading data from {}", d.display())),
        (None, Some(name)) => Ok(PipelineData::from(&generate(&reference_instance(name)?)?)),
        (None, None) => bail!(
            "no data: pass --data DIR, --instance NAME or set `instance` in the manifest (one of {})",
            REFERENCE_NAMES.join(", ")
        ),
    }
}

/// Output directory that forgets everything it created unless committed.
struct OutDir {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutDir {
    fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { instance, seed, out } => {
            let mut spec = reference_instance(&instance)?;
            spec.seed = seed;
            let inst = generate(&spec)?;
            let mut out = OutDir::new(&out)?;
            for name in [
                "source.osdf",
                "target.osdf",
                "edges.tsv",
                "embeddings.txt",
                "roles.tsv",
                "gt_known.ckpt",
                "synth.toml",
            ] {
                out.file(name);
            }
            inst.write(&out.dir)?;
            for note in &inst.notes {
                eprintln!("note: {note}");
            }
            println!(
                "{}: {} source / {} target samples, {} known + {} unknown classes",
                out.dir.display(),
                inst.source.len(),
                inst.target.len(),
                inst.spec.known_count(),
                inst.spec.unknown_count()
            );
            out.commit();
        }
        Command::TrainGcn(args) => {
            let cfg = args.manifest()?;
            let data = args.load(&cfg)?;
            let mut out = OutDir::new(&args.out)?;
            let sa = run_stage_a(&cfg.stage_a, cfg.attention_mode(), &data.graph, &data.gt_known, cfg.seed)?;
            sa.model.save(&out.file("gcn.ckpt"))?;
            let trace = out.file("stage_a_trace.csv");
            let mut w = csv::Writer::from_path(&trace)?;
            w.write_record(["step", "init_loss"])?;
            for (i, l) in sa.trace.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            let last = sa.trace.last().copied().unwrap_or(f64::NAN);
            write_json(
                &out.file("stage_a.json"),
                &serde_json::json!({
                    "steps": cfg.stage_a.steps,
                    "final_init_loss": last,
                    "fingerprint": cfg.fingerprint(),
                    "seed": cfg.seed,
                }),
            )?;
            println!("final init_loss {last:.6e}");
            out.commit();
        }
        Command::Match { run, checkpoint } => {
            let cfg = run.manifest()?;
            let data = run.load(&cfg)?;
            let mut out = OutDir::new(&run.out)?;
            let bb = match checkpoint {
                Some(p) => Backbone::load(&p)?,
                None => {
                    let sa = run_stage_a(&cfg.stage_a, cfg.attention_mode(), &data.graph, &data.gt_known, cfg.seed)?;
                    initial_backbone(&cfg, &data, &sa)?
                }
            };
            let xs = data.source.features();
            let xt = data.target.features();
            let matches = match_greedy(&bb.features(xs)?, &bb.features(xt)?)?;
            let (pairs, tau) = filter_with_config(&matches, &bb.responses(xs)?, &bb.responses(xt)?, &cfg.smo)?;
            write_pair_dump(&out.file("pairs.csv"), &pairs)?;
            let passing = pairs.iter().filter(|p| p.pass).count();
            write_json(
                &out.file("match.json"),
                &serde_json::json!({"pairs": pairs.len(), "passing": passing, "tau": tau}),
            )?;
            println!("{passing}/{} pairs pass at tau = {tau:.6}", pairs.len());
            out.commit();
        }
        Command::BenchMatch { n, dim, seed, out } => {
            let mut out = OutDir::new(&out)?;
            let report = benchmark_matchers(n, n, dim, seed)?;
            write_json(&out.file("bench.json"), &report)?;
            println!(
                "greedy {:.1} ms (acc {:.3}), hungarian {:.1} ms (acc {:.3})",
                report.greedy_ms, report.greedy_acc, report.hungarian_ms, report.hungarian_acc
            );
            out.commit();
        }
        Command::TrainJoint(args) => {
            let cfg = args.manifest()?;
            let data = args.load(&cfg)?;
            let mut out = OutDir::new(&args.out)?;
            let t = Instant::now();
            let res = run_pipeline(&cfg, &data)?;
            fs::write(out.file("config.toml"), cfg.to_toml()?)?;
            res.stage_a.model.save(&out.file("gcn.ckpt"))?;
            res.joint.transfer.save(&out.file("transfer.ckpt"))?;
            res.joint.backbone.save(&out.file("backbone.ckpt"))?;
            write_trace(&out.file("trace.csv"), &res.joint.trace)?;
            write_pair_dump(&out.file("pairs.csv"), &res.joint.pairs)?;
            out.file("report.json");
            out.file("report.txt");
            res.report.write(&out.dir)?;
            print!("{}", res.report.to_table());
            eprintln!("finished in {:.1?}", t.elapsed());
            out.commit();
        }
        Command::Evaluate {
            checkpoint,
            config,
            data,
            seed,
            out,
        } => {
            let bb = Backbone::load(&checkpoint)?;
            let d = load_data(data.data.as_deref(), data.instance.as_deref())?;
            let mut out = OutDir::new(&out)?;
            let fp = match config {
                Some(p) => PipelineConfig::load(&p)?.fingerprint(),
                None => String::new(),
            };
            let report = evaluate(&bb, &d.target, &fp, seed)?;
            out.file("report.json");
            out.file("report.txt");
            report.write(&out.dir)?;
            print!("{}", report.to_table());
            out.commit();
        }
        Command::Ablate { run, arms, seeds } => {
            let cfg = run.manifest()?;
            let arms = Arm::parse_list(&arms)?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let data = run.load(&cfg)?;
            let mut out = OutDir::new(&run.out)?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let runs = run_ablation(&cfg, &data, &arms, &seed_list)?;
            let summary = summarize(&runs);
            write_runs_csv(&out.file("runs.csv"), &runs)?;
            write_summary_csv(&out.file("summary.csv"), &summary)?;
            let table = summary_table(&summary);
            fs::write(out.file("summary.txt"), &table)?;
            print!("{table}");
            out.commit();
        }
        Command::Inspect {
            data,
            gcn,
            node,
            checkpoint,
            sample,
            k,
            out,
        } => {
            if node.is_none() && sample.is_none() {
                bail!("nothing to inspect: pass --node with --gcn, or --sample with --checkpoint");
            }
            let d = load_data(data.data.as_deref(), data.instance.as_deref())?;
            let mut out = OutDir::new(&out)?;
            let mut dump = serde_json::Map::new();
            if let Some(name) = node {
                let model = GcnModel::load(gcn.as_deref().context("--node needs --gcn")?)?;
                let idx = d
                    .graph
                    .index_of(&name)
                    .with_context(|| format!("no graph node named `{name}`"))?;
                let att = dump_attention(&model, &d.graph, idx, k)?;
                for (n, c) in &att {
                    println!("{name} <- {n}: {c:.4}");
                }
                dump.insert("attention".into(), serde_json::to_value(att)?);
            }
            if let Some(i) = sample {
                let bb = Backbone::load(checkpoint.as_deref().context("--sample needs --checkpoint")?)?;
                if i >= d.target.len() {
                    bail!("sample {i} out of range (target has {})", d.target.len());
                }
                let x = d.target.features().select_rows(&[i])?;
                let top = top_k_predictions(&bb, &x, k)?.remove(0);
                for (c, p) in &top {
                    println!("sample {i}: class {c} p = {p:.4}");
                }
                dump.insert("predictions".into(), serde_json::to_value(top)?);
            }
            write_json(&out.file("inspect.json"), &dump)?;
            out.commit();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
