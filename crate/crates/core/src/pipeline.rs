//! Two-stage training.
//!
//! Stage A regresses known-class classifiers from semantics with the graph
//! network and harvests rows for every class. Stage B initializes the
//! classifier from those rows and trains it jointly with a transfer network
//! on the weighted sum of classification, transfer, balance and matching
//! losses.
//!
//! The transfer network is a second graph network whose node inputs are
//! the stage-A outputs (auxiliary nodes included) and whose known-class
//! outputs are regressed onto the current classifier rows. It starts from
//! the identity-like configuration of [`GcnModel::identity_like`] so the
//! term is small at initialization.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{balance_loss_on_tape, classification_loss_on_tape, Backbone, FeatureMap};
use crate::checkpoint::TensorBundle;
use crate::dataset::{Domain, DomainDataset};
use crate::error::{config, usage, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::gcn::{
    train_init, AttentionMode, ClassifierWeightSet, GcnConfig, GcnModel, GcnVars, Kernel, RegressionTargets,
    SgdConfig, DEFAULT_HIDDEN, DIVERGENCE_LIMIT,
};
use crate::graph::{GraphFiles, KnowledgeGraph};
use crate::matching::{discrepancy_loss_on_tape, filter_with_config, match_greedy, MatchedPair, SmoConfig};
use crate::synth::SynthInstance;
use crate::tape::{GradientTape, Var};
use crate::tensor::Matrix;

/// Offset mixed into the run seed for the joint-stage shuffling stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageAConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default = "default_stage_a_lr")]
    pub lr: f64,
    #[serde(default = "default_stage_a_steps")]
    pub steps: usize,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_stage_a_lr() -> f64 {
    0.01
}
fn default_stage_a_steps() -> usize {
    2000
}

impl Default for StageAConfig {
    fn default() -> Self {
        Self {
            hidden_dim: default_hidden(),
            kernel: Kernel::default(),
            lr: default_stage_a_lr(),
            steps: default_stage_a_steps(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMapKind {
    #[default]
    Identity,
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_joint_lr")]
    pub lr: f64,
    #[serde(default)]
    pub feature_map: FeatureMapKind,
    /// Overwrite unknown-class rows from the transfer network after every
    /// epoch instead of leaving them as free parameters.
    #[serde(default)]
    pub refresh_unknown: bool,
    /// Classes whose rows enter the transfer loss.
    #[serde(default)]
    pub transfer_scope: TransferScope,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferScope {
    #[default]
    Known,
    All,
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_joint_lr() -> f64 {
    0.01
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_joint_lr(),
            feature_map: FeatureMapKind::default(),
            refresh_unknown: false,
            transfer_scope: TransferScope::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub cls: f64,
    #[serde(default = "one")]
    pub tran: f64,
    #[serde(default = "one")]
    pub lb: f64,
    #[serde(default = "one")]
    pub d: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            tran: 1.0,
            lb: 1.0,
            d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn total(&self, l_cls: f64, l_tran: f64, l_lb: f64, l_d: f64) -> f64 {
        self.cls * l_cls + self.tran * l_tran + self.lb * l_lb + self.d * l_d
    }
}

/// The two ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "yes")]
    pub attention: bool,
    #[serde(default = "yes")]
    pub smo: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            attention: true,
            smo: true,
        }
    }
}

/// Run manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Reference instance used when no data directory is given.
    #[serde(default)]
    pub instance: Option<String>,
    #[serde(default)]
    pub stage_a: StageAConfig,
    #[serde(default)]
    pub joint: JointConfig,
    #[serde(default)]
    pub smo: SmoConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: Ablation,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_a.hidden_dim == 0 {
            return Err(config("stage_a.hidden_dim must be positive"));
        }
        for (name, lr) in [("stage_a.lr", self.stage_a.lr), ("joint.lr", self.joint.lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(config(format!("{name} must be finite and non-negative, got {lr}")));
            }
        }
        if self.joint.batch_size == 0 {
            return Err(config("joint.batch_size must be at least 1"));
        }
        let w = &self.weights;
        for (name, v) in [("cls", w.cls), ("tran", w.tran), ("lb", w.lb), ("d", w.d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!("weights.{name} must be finite and non-negative, got {v}")));
            }
        }
        self.smo.validate()
    }

    pub fn attention_mode(&self) -> AttentionMode {
        if self.ablation.attention {
            AttentionMode::Learned
        } else {
            AttentionMode::Uniform
        }
    }

    /// Weights with the matching term zeroed when the SMO switch is off.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            d: if self.ablation.smo { self.weights.d } else { 0.0 },
            ..self.weights
        }
    }

    /// Hex SHA-256 of the manifest's canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Loss terms of one step (or an epoch average) and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_tran: f64,
    pub l_lb: f64,
    pub l_d: f64,
    pub weights: LossWeights,
    pub total: f64,
}

impl LossBreakdown {
    /// `|total - Σ λ·term|`.
    pub fn bookkeeping_error(&self) -> f64 {
        (self.total - self.weights.total(self.l_cls, self.l_tran, self.l_lb, self.l_d)).abs()
    }
}

/// Everything a run reads: graph, datasets and source-trained classifiers.
#[derive(Clone, Debug)]
pub struct PipelineData {
    pub graph: KnowledgeGraph,
    pub source: DomainDataset,
    /// Target features; labels, when present, are only used for reporting.
    pub target: DomainDataset,
    pub gt_known: ClassifierWeightSet,
}

impl PipelineData {
    /// Reads a directory in the layout written by [`SynthInstance::write`]:
    /// graph files, `source.osdf`, `target.osdf` and `gt_known.ckpt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let graph = GraphFiles::in_dir(dir).load()?;
        let source = DomainDataset::load(&dir.join("source.osdf"), Domain::Source)?;
        let target = DomainDataset::load(&dir.join("target.osdf"), Domain::Target)?;
        let rows = TensorBundle::load(&dir.join("gt_known.ckpt"))?.get("rows")?.clone();
        let gt_known = ClassifierWeightSet::new((0..rows.rows()).collect(), rows)?;
        if target.num_classes() != graph.class_count() {
            return Err(config(format!(
                "target inventory has {} classes, graph has {}",
                target.num_classes(),
                graph.class_count()
            )));
        }
        Ok(Self {
            graph,
            source,
            target,
            gt_known,
        })
    }
}

impl From<&SynthInstance> for PipelineData {
    fn from(inst: &SynthInstance) -> Self {
        Self {
            graph: inst.graph.clone(),
            source: inst.source.clone(),
            target: inst.target.clone(),
            gt_known: inst.gt_known.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageAOutput {
    pub model: GcnModel,
    /// Graph output for every node, the transfer network's inputs.
    pub node_outputs: Matrix,
    /// Rows for every class node.
    pub weights: ClassifierWeightSet,
    /// Loss before each step plus the final loss.
    pub trace: Vec<f64>,
}

/// Trains the graph network on the known-class classifiers and harvests
/// rows for every class.
pub fn run_stage_a(
    cfg: &StageAConfig,
    mode: AttentionMode,
    g: &KnowledgeGraph,
    gt_known: &ClassifierWeightSet,
    seed: u64,
) -> Result<StageAOutput> {
    let report = g.validate_reachability(&g.split());
    if !report.is_ok() {
        return Err(config(format!(
            "no path from a known class to: {}",
            report.unreachable.join(", ")
        )));
    }
    let targets = RegressionTargets::new(g, gt_known, &g.known_classes())?;
    let mut model = GcnModel::new(
        &GcnConfig {
            input_dim: g.dim(),
            hidden_dim: cfg.hidden_dim,
            output_dim: gt_known.feature_dim() + 1,
            kernel: cfg.kernel,
            mode,
        },
        seed,
    )?;
    let trace = train_init(
        &mut model,
        g,
        &targets,
        &SgdConfig {
            lr: cfg.lr,
            steps: cfg.steps,
        },
    )?;
    let node_outputs = model.forward(g)?;
    let weights = ClassifierWeightSet::harvest(&node_outputs, g)?;
    Ok(StageAOutput {
        model,
        node_outputs,
        weights,
        trace,
    })
}

/// Element-mean squared error between the transfer network's outputs (on
/// the stage-A node outputs) and the current classifier rows of `classes`.
pub fn transfer_loss_on_tape(
    tape: &mut GradientTape,
    transfer: &GcnModel,
    vars: &GcnVars,
    g: &KnowledgeGraph,
    stage_a_outputs: &Matrix,
    psi: Var,
    classes: &[usize],
) -> Result<Var> {
    if stage_a_outputs.rows() != g.node_count() {
        return Err(usage(format!(
            "stage-A outputs cover {} of {} nodes",
            stage_a_outputs.rows(),
            g.node_count()
        )));
    }
    if classes.is_empty() {
        return Err(usage("transfer loss needs at least one class"));
    }
    let class_nodes = g.class_nodes();
    let nodes = classes
        .iter()
        .map(|&c| class_nodes.get(c).copied().ok_or_else(|| usage(format!("class {c} has no graph node"))))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(stage_a_outputs.clone());
    let z = transfer.forward_on_tape(tape, vars, g, x)?;
    let zk = tape.select_rows(z, &nodes)?;
    let pk = tape.select_rows(psi, classes)?;
    let diff = tape.sub(zk, pk)?;
    let sq = tape.hadamard(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Value form of [`transfer_loss_on_tape`] for classifier rows `psi`.
pub fn transfer_loss(
    transfer: &GcnModel,
    g: &KnowledgeGraph,
    stage_a_outputs: &Matrix,
    psi: &Matrix,
    classes: &[usize],
) -> Result<f64> {
    let mut tape = GradientTape::new();
    let vars = transfer.register(&mut tape);
    let p = tape.constant(psi.clone());
    let l = transfer_loss_on_tape(&mut tape, transfer, &vars, g, stage_a_outputs, p, classes)?;
    tape.value(l).item()
}

/// One row of the epoch trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub known_acc: f64,
    pub unknown_acc: f64,
    pub all_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointOutput {
    pub backbone: Backbone,
    pub transfer: GcnModel,
    pub trace: Vec<EpochRecord>,
    /// Breakdown of every optimizer step.
    pub steps: Vec<LossBreakdown>,
    /// Pairs from the most recent rematch (empty when matching never ran).
    pub pairs: Vec<MatchedPair>,
    /// Number of times matching ran.
    pub rematches: usize,
}

/// Backbone for `data` with ψ initialized from stage A (known rows from the
/// source-trained classifiers).
pub fn initial_backbone(cfg: &PipelineConfig, data: &PipelineData, stage_a: &StageAOutput) -> Result<Backbone> {
    let d = data.source.dim();
    let phi = match cfg.joint.feature_map {
        FeatureMapKind::Identity => FeatureMap::identity(d),
        FeatureMapKind::Affine => FeatureMap::affine(d, d),
    };
    let mut bb = Backbone::new(phi, data.graph.known_classes(), data.graph.unknown_classes())?;
    bb.init_classifier_from_gcn(&stage_a.weights, Some(&data.gt_known))?;
    Ok(bb)
}

struct StepTerms {
    cls: f64,
    tran: f64,
    lb: f64,
    d: f64,
    total: f64,
}

/// Joint stage. Matching runs every `smo.period` epochs on current
/// features whenever the SMO switch is on, even if its weight is zero (the
/// pairs then only feed the audit); terms whose weight is zero are neither
/// computed nor logged.
pub fn run_joint(
    cfg: &PipelineConfig,
    data: &PipelineData,
    stage_a: &StageAOutput,
    mut backbone: Backbone,
) -> Result<JointOutput> {
    cfg.validate()?;
    let g = &data.graph;
    let weights = cfg.effective_weights();
    let labels = data.source.require_labels("joint training")?;
    let xs = data.source.features();
    let xt = data.target.features();
    let known = backbone.known_classes().to_vec();
    let unknown = backbone.unknown_classes().to_vec();
    let ratio = backbone.unknown_ratio();
    let tran_classes: Vec<usize> = match cfg.joint.transfer_scope {
        TransferScope::Known => known.clone(),
        TransferScope::All => (0..backbone.num_classes()).collect(),
    };
    let mut transfer = GcnModel::identity_like(stage_a.node_outputs.cols(), cfg.stage_a.kernel, cfg.attention_mode());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.source.len()).collect();
    let mut pairs = Vec::new();
    let mut rematches = 0;
    let mut trace = Vec::with_capacity(cfg.joint.epochs);
    let mut steps = Vec::new();
    let mut global_step = 0;

    for epoch in 0..cfg.joint.epochs {
        if cfg.ablation.smo && epoch % cfg.smo.period == 0 {
            let fs = backbone.features(xs)?;
            let ft = backbone.features(xt)?;
            let matches = match_greedy(&fs, &ft)?;
            let rs = backbone.responses(xs)?;
            let rt = backbone.responses(xt)?;
            pairs = filter_with_config(&matches, &rs, &rt, &cfg.smo)?.0;
            rematches += 1;
        }

        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut count = 0usize;
        for batch in order.chunks(cfg.joint.batch_size) {
            let mut tape = GradientTape::new();
            let bv = backbone.register(&mut tape);
            let tv = transfer.register(&mut tape);
            let mut total: Option<Var> = None;
            let mut terms = StepTerms {
                cls: 0.0,
                tran: 0.0,
                lb: 0.0,
                d: 0.0,
                total: 0.0,
            };
            let mut add = |tape: &mut GradientTape, term: Var, w: f64| -> Result<()> {
                let weighted = tape.scale(term, w);
                total = Some(match total {
                    None => weighted,
                    Some(t) => tape.add(t, weighted)?,
                });
                Ok(())
            };

            if weights.cls != 0.0 {
                let xb = tape.constant(xs.select_rows(batch)?);
                let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let f = backbone.features_on_tape(&mut tape, &bv, xb)?;
                let l = backbone.logits_on_tape(&mut tape, &bv, f)?;
                let term = classification_loss_on_tape(&mut tape, l, &yb)?;
                terms.cls = checked(tape.value(term).item()?, "l_cls", global_step)?;
                add(&mut tape, term, weights.cls)?;
            }
            if weights.tran != 0.0 {
                let term = transfer_loss_on_tape(&mut tape, &transfer, &tv, g, &stage_a.node_outputs, bv.psi, &tran_classes)?;
                terms.tran = checked(tape.value(term).item()?, "l_tran", global_step)?;
                add(&mut tape, term, weights.tran)?;
            }
            let target_feats = if weights.lb != 0.0 || weights.d != 0.0 {
                let xtv = tape.constant(xt.clone());
                Some(backbone.features_on_tape(&mut tape, &bv, xtv)?)
            } else {
                None
            };
            if let (true, Some(ft)) = (weights.lb != 0.0, target_feats) {
                let l = backbone.logits_on_tape(&mut tape, &bv, ft)?;
                let term = balance_loss_on_tape(&mut tape, l, &unknown, ratio)?;
                terms.lb = checked(tape.value(term).item()?, "l_lb", global_step)?;
                add(&mut tape, term, weights.lb)?;
            }
            if let (true, Some(ft)) = (weights.d != 0.0, target_feats) {
                let xsv = tape.constant(xs.clone());
                let fs = backbone.features_on_tape(&mut tape, &bv, xsv)?;
                let term = discrepancy_loss_on_tape(&mut tape, &pairs, fs, ft, cfg.smo.reduction)?;
                terms.d = checked(tape.value(term).item()?, "l_d", global_step)?;
                add(&mut tape, term, weights.d)?;
            }

            if let Some(total) = total {
                terms.total = checked(tape.value(total).item()?, "total", global_step)?;
                let grads = tape.backward(total)?;
                backbone.sgd_step(&grads, &bv, cfg.joint.lr)?;
                transfer.sgd_step(&grads, &tv, cfg.joint.lr)?;
                if !backbone.all_finite() || !transfer.all_finite() {
                    return Err(Error::Diverged {
                        step: global_step,
                        term: "parameters".into(),
                        value: f64::NAN,
                    });
                }
            }
            let step = LossBreakdown {
                l_cls: terms.cls,
                l_tran: terms.tran,
                l_lb: terms.lb,
                l_d: terms.d,
                weights,
                total: terms.total,
            };
            for (s, v) in sums.iter_mut().zip([step.l_cls, step.l_tran, step.l_lb, step.l_d, step.total]) {
                *s += v;
            }
            count += 1;
            steps.push(step);
            global_step += 1;
        }

        if cfg.joint.refresh_unknown && !unknown.is_empty() {
            let z = transfer.forward_inputs(g, &stage_a.node_outputs)?;
            backbone.set_rows(&ClassifierWeightSet::harvest(&z, g)?, &unknown)?;
        }

        let n = count.max(1) as f64;
        let losses = LossBreakdown {
            l_cls: sums[0] / n,
            l_tran: sums[1] / n,
            l_lb: sums[2] / n,
            l_d: sums[3] / n,
            weights,
            total: sums[4] / n,
        };
        let (known_acc, unknown_acc, all_acc) = match data.target.labels() {
            Some(_) => {
                let r = evaluate(&backbone, &data.target, "", cfg.seed)?;
                (r.known_acc, r.unknown_acc, r.all_acc)
            }
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        trace.push(EpochRecord {
            epoch,
            losses,
            known_acc,
            unknown_acc,
            all_acc,
        });
    }

    Ok(JointOutput {
        backbone,
        transfer,
        trace,
        steps,
        pairs,
        rematches,
    })
}

fn checked(value: f64, term: &str, step: usize) -> Result<f64> {
    if value.is_finite() && value.abs() <= DIVERGENCE_LIMIT {
        Ok(value)
    } else {
        Err(Error::Diverged {
            step,
            term: term.into(),
            value,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub stage_a: StageAOutput,
    pub joint: JointOutput,
    pub report: EvalReport,
}

/// Stage A, classifier initialization, joint stage and final evaluation.
pub fn run_pipeline(cfg: &PipelineConfig, data: &PipelineData) -> Result<RunOutput> {
    cfg.validate()?;
    let stage_a = run_stage_a(&cfg.stage_a, cfg.attention_mode(), &data.graph, &data.gt_known, cfg.seed)?;
    run_from_stage_a(cfg, data, stage_a)
}

/// Everything after stage A; lets callers reuse one stage-A result across
/// runs that share its configuration.
pub fn run_from_stage_a(cfg: &PipelineConfig, data: &PipelineData, stage_a: StageAOutput) -> Result<RunOutput> {
    let bb = initial_backbone(cfg, data, &stage_a)?;
    let joint = run_joint(cfg, data, &stage_a, bb)?;
    let report = evaluate(&joint.backbone, &data.target, &cfg.fingerprint(), cfg.seed)?;
    Ok(RunOutput { stage_a, joint, report })
}

/// CSV trace: `epoch,l_cls,l_tran,l_lb,l_d,total,known_acc,unknown_acc,all_acc`.
pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record([
        "epoch",
        "l_cls",
        "l_tran",
        "l_lb",
        "l_d",
        "total",
        "known_acc",
        "unknown_acc",
        "all_acc",
    ])
    .map_err(|e| Error::Format(e.to_string()))?;
    for r in trace {
        let l = &r.losses;
        w.write_record([
            r.epoch.to_string(),
            l.l_cls.to_string(),
            l.l_tran.to_string(),
            l.l_lb.to_string(),
            l.l_d.to_string(),
            l.total.to_string(),
            r.known_acc.to_string(),
            r.unknown_acc.to_string(),
            r.all_acc.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
