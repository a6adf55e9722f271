//! Two-layer attention graph network that regresses classifier weights
//! from node semantics.
//!
//! Each head transforms node features with its weight matrix `W`, scores
//! every neighbor `j` of node `i` with a similarity kernel on `(W h_i,
//! W h_j)`, softmaxes the scores over the neighborhood (which includes `i`)
//! and outputs the attention-weighted sum of the transformed neighbors.
//! Layer 1 runs two heads and concatenates their LeakyReLU outputs; layer 2
//! runs one head with no activation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorBundle;
use crate::error::{config, usage, Error, Result};
use crate::graph::KnowledgeGraph;
use crate::tape::{GradientTape, Gradients, Var};
use crate::tensor::{cosine_similarity, softmax_into, squared_distance, Matrix};

/// Negative-side slope of the inter-layer activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Default hidden width of each layer-1 head.
pub const DEFAULT_HIDDEN: usize = 64;

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Similarity used to score a neighbor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    #[default]
    Cosine,
    /// Negative squared Euclidean distance.
    NegEuclidean,
}

impl Kernel {
    pub fn tag(self) -> &'static str {
        match self {
            Kernel::Cosine => "cosine",
            Kernel::NegEuclidean => "neg-euclidean",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "cosine" => Ok(Kernel::Cosine),
            "neg-euclidean" => Ok(Kernel::NegEuclidean),
            other => Err(Error::Format(format!("unknown kernel `{other}`"))),
        }
    }

    fn score(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Kernel::Cosine => cosine_similarity(a, b),
            Kernel::NegEuclidean => Ok(-squared_distance(a, b)),
        }
    }
}

/// Whether neighbors are weighted by learned attention or uniformly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    #[default]
    Learned,
    /// Every neighbor (and the node itself) gets `1 / |neighborhood|`.
    Uniform,
}

impl AttentionMode {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionMode::Learned => "learned",
            AttentionMode::Uniform => "uniform",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "learned" => Ok(AttentionMode::Learned),
            "uniform" => Ok(AttentionMode::Uniform),
            other => Err(Error::Format(format!("unknown attention mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `f_out x f_in`.
    pub weight: Matrix,
    pub kernel: Kernel,
}

impl AttentionHead {
    pub fn new(weight: Matrix, kernel: Kernel) -> Self {
        Self { weight, kernel }
    }

    /// Glorot-uniform initialization.
    pub fn glorot<R: Rng>(out_dim: usize, in_dim: usize, kernel: Kernel, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self::new(Matrix::raw(out_dim, in_dim, data), kernel)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn transform(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.input_dim() {
            return Err(config(format!(
                "head expects {}-dim inputs, got {}",
                self.input_dim(),
                features.cols()
            )));
        }
        features.matmul(&self.weight.transpose())
    }
}

/// Attention weights of node `i` over its neighborhood, as
/// `(neighbor, weight)` in ascending neighbor order.
pub fn attention_coefficients(
    head: &AttentionHead,
    mode: AttentionMode,
    g: &KnowledgeGraph,
    features: &Matrix,
    i: usize,
) -> Result<Vec<(usize, f64)>> {
    let nbrs = g.neighborhood(i)?;
    if mode == AttentionMode::Uniform {
        let w = 1.0 / nbrs.len() as f64;
        return Ok(nbrs.into_iter().map(|j| (j, w)).collect());
    }
    let transformed = head.transform(features)?;
    let center = transformed.row(i);
    let scores = nbrs
        .iter()
        .map(|&j| head.kernel.score(center, transformed.row(j)))
        .collect::<Result<Vec<f64>>>()?;
    let mut weights = vec![0.0; scores.len()];
    softmax_into(&scores, &mut weights);
    Ok(nbrs.into_iter().zip(weights).collect())
}

/// Pre-activation output of `head` at node `i`: the attention-weighted sum
/// of transformed neighbor features.
pub fn aggregate(
    head: &AttentionHead,
    mode: AttentionMode,
    g: &KnowledgeGraph,
    features: &Matrix,
    i: usize,
) -> Result<Vec<f64>> {
    let coeffs = attention_coefficients(head, mode, g, features, i)?;
    let transformed = head.transform(features)?;
    let mut out = vec![0.0; head.output_dim()];
    for (j, a) in coeffs {
        for (o, &v) in out.iter_mut().zip(transformed.row(j)) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Constant attention matrix of the uniform mode.
fn uniform_attention(g: &KnowledgeGraph) -> Matrix {
    let n = g.node_count();
    let mask = g.neighborhood_mask();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let row = &mask[i * n..(i + 1) * n];
        let w = 1.0 / row.iter().filter(|&&b| b).count() as f64;
        for (o, &b) in m.row_mut(i).iter_mut().zip(row) {
            if b {
                *o = w;
            }
        }
    }
    m
}

/// Dense head evaluation on a tape. Returns `(output, attention)`.
fn head_on_tape(
    tape: &mut GradientTape,
    weight: Var,
    kernel: Kernel,
    mode: AttentionMode,
    g: &KnowledgeGraph,
    x: Var,
) -> Result<(Var, Var)> {
    let wt = tape.transpose(weight);
    let t = tape.matmul(x, wt)?;
    let alpha = match mode {
        AttentionMode::Uniform => tape.constant(uniform_attention(g)),
        AttentionMode::Learned => {
            let scores = match kernel {
                Kernel::Cosine => {
                    let unit = tape.normalize_rows(t);
                    let unit_t = tape.transpose(unit);
                    tape.matmul(unit, unit_t)?
                }
                Kernel::NegEuclidean => {
                    let d = tape.pairwise_sq_dist(t);
                    tape.scale(d, -1.0)
                }
            };
            tape.masked_softmax_rows(scores, &g.neighborhood_mask())?
        }
    };
    let z = tape.matmul(alpha, t)?;
    Ok((z, alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub kernel: Kernel,
    #[serde(default)]
    pub mode: AttentionMode,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl GcnConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN,
            output_dim,
            kernel: Kernel::default(),
            mode: AttentionMode::default(),
        }
    }
}

/// Parameter handles of a [`GcnModel`] registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GcnVars {
    pub layer1: [Var; 2],
    pub layer2: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnModel {
    pub layer1: [AttentionHead; 2],
    pub layer2: AttentionHead,
    pub mode: AttentionMode,
}

impl GcnModel {
    pub fn new(cfg: &GcnConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.output_dim == 0 {
            return Err(config(format!("GCN dimensions must be positive: {cfg:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer1 = [
            AttentionHead::glorot(cfg.hidden_dim, cfg.input_dim, cfg.kernel, &mut rng),
            AttentionHead::glorot(cfg.hidden_dim, cfg.input_dim, cfg.kernel, &mut rng),
        ];
        let layer2 = AttentionHead::glorot(cfg.output_dim, 2 * cfg.hidden_dim, cfg.kernel, &mut rng);
        Ok(Self {
            layer1,
            layer2,
            mode: cfg.mode,
        })
    }

    /// Builds a model from explicit head weights, checking shapes.
    pub fn from_heads(layer1: [AttentionHead; 2], layer2: AttentionHead, mode: AttentionMode) -> Result<Self> {
        let [a, b] = &layer1;
        if a.weight.shape() != b.weight.shape() {
            return Err(config(format!(
                "layer-1 heads differ in shape: {:?} vs {:?}",
                a.weight.shape(),
                b.weight.shape()
            )));
        }
        if layer2.input_dim() != 2 * a.output_dim() {
            return Err(config(format!(
                "layer 2 takes {} inputs but layer 1 concatenates to {}",
                layer2.input_dim(),
                2 * a.output_dim()
            )));
        }
        Ok(Self { layer1, layer2, mode })
    }

    /// A model whose layer-1 heads are `I` and `-I` and whose layer 2
    /// recombines them so that, up to neighborhood smoothing, the output
    /// reproduces the input. Used to start the transfer pass near the
    /// identity.
    pub fn identity_like(dim: usize, kernel: Kernel, mode: AttentionMode) -> Self {
        let eye = Matrix::identity(dim);
        let neg = eye.scale(-1.0);
        // LeakyReLU(u) - LeakyReLU(-u) = (1 + slope) u
        let s = 1.0 / (1.0 + LEAKY_SLOPE);
        let w2 = Matrix::concat_cols(&[&eye.scale(s), &eye.scale(-s)]).expect("square blocks");
        Self {
            layer1: [AttentionHead::new(eye, kernel), AttentionHead::new(neg, kernel)],
            layer2: AttentionHead::new(w2, kernel),
            mode,
        }
    }

    /// Same weights with attention replaced by uniform neighbor averaging.
    pub fn uniform_attention_mode(&self) -> Self {
        Self {
            mode: AttentionMode::Uniform,
            ..self.clone()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1[0].input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1[0].output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.output_dim()
    }

    pub fn kernel(&self) -> Kernel {
        self.layer2.kernel
    }

    pub fn register(&self, tape: &mut GradientTape) -> GcnVars {
        GcnVars {
            layer1: [
                tape.param(self.layer1[0].weight.clone()),
                tape.param(self.layer1[1].weight.clone()),
            ],
            layer2: tape.param(self.layer2.weight.clone()),
        }
    }

    fn check_inputs(&self, g: &KnowledgeGraph, x: &Matrix) -> Result<()> {
        if x.rows() != g.node_count() || x.cols() != self.input_dim() {
            return Err(config(format!(
                "GCN expects {} x {} node inputs, got {} x {}",
                g.node_count(),
                self.input_dim(),
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Forward pass on a tape; returns the `n x output_dim` node outputs.
    pub fn forward_on_tape(
        &self,
        tape: &mut GradientTape,
        vars: &GcnVars,
        g: &KnowledgeGraph,
        x: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(tape, vars, g, x)?.0)
    }

    fn forward_with_attention(
        &self,
        tape: &mut GradientTape,
        vars: &GcnVars,
        g: &KnowledgeGraph,
        x: Var,
    ) -> Result<(Var, Var)> {
        self.check_inputs(g, tape.value(x))?;
        let mut hidden = [x; 2];
        for (k, head) in self.layer1.iter().enumerate() {
            let (z, _) = head_on_tape(tape, vars.layer1[k], head.kernel, self.mode, g, x)?;
            hidden[k] = tape.leaky_relu(z, LEAKY_SLOPE);
        }
        let h = tape.concat_cols(&hidden)?;
        head_on_tape(tape, vars.layer2, self.layer2.kernel, self.mode, g, h)
    }

    /// Node outputs for the graph's own semantic vectors.
    pub fn forward(&self, g: &KnowledgeGraph) -> Result<Matrix> {
        self.forward_inputs(g, g.vectors())
    }

    /// Node outputs for arbitrary per-node inputs on the graph structure.
    pub fn forward_inputs(&self, g: &KnowledgeGraph, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        let vars = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let z = self.forward_on_tape(&mut tape, &vars, g, xv)?;
        Ok(tape.value(z).clone())
    }

    /// Dense `n x n` layer-2 attention matrix for the given inputs.
    pub fn layer2_attention(&self, g: &KnowledgeGraph, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        let vars = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let (_, alpha) = self.forward_with_attention(&mut tape, &vars, g, xv)?;
        Ok(tape.value(alpha).clone())
    }

    fn constants(&self, tape: &mut GradientTape) -> GcnVars {
        GcnVars {
            layer1: [
                tape.constant(self.layer1[0].weight.clone()),
                tape.constant(self.layer1[1].weight.clone()),
            ],
            layer2: tape.constant(self.layer2.weight.clone()),
        }
    }

    /// Plain gradient step `W -= lr * dW` on every head.
    pub fn sgd_step(&mut self, grads: &Gradients, vars: &GcnVars, lr: f64) -> Result<()> {
        self.layer1[0].weight.axpy(-lr, &grads.get(vars.layer1[0]))?;
        self.layer1[1].weight.axpy(-lr, &grads.get(vars.layer1[1]))?;
        self.layer2.weight.axpy(-lr, &grads.get(vars.layer2))?;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layer1.iter().all(|h| h.weight.all_finite()) && self.layer2.weight.all_finite()
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "gcn",
            "kernel": self.kernel().tag(),
            "mode": self.mode.tag(),
        }));
        b.push("layer1.head0", self.layer1[0].weight.clone());
        b.push("layer1.head1", self.layer1[1].weight.clone());
        b.push("layer2", self.layer2.weight.clone());
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        if b.meta_str("kind")? != "gcn" {
            return Err(Error::Format("checkpoint does not hold a GCN".into()));
        }
        let kernel = Kernel::from_tag(b.meta_str("kernel")?)?;
        let mode = AttentionMode::from_tag(b.meta_str("mode")?)?;
        Self::from_heads(
            [
                AttentionHead::new(b.get("layer1.head0")?.clone(), kernel),
                AttentionHead::new(b.get("layer1.head1")?.clone(), kernel),
            ],
            AttentionHead::new(b.get("layer2")?.clone(), kernel),
            mode,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// Per-class linear classifier parameters; each row is the weight vector
/// followed by the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeightSet {
    classes: Vec<usize>,
    params: Matrix,
}

impl ClassifierWeightSet {
    pub fn new(classes: Vec<usize>, params: Matrix) -> Result<Self> {
        if classes.len() != params.rows() {
            return Err(Error::Format(format!(
                "{} classes but {} parameter rows",
                classes.len(),
                params.rows()
            )));
        }
        if params.cols() < 2 {
            return Err(Error::Format("classifier rows need a weight and a bias".into()));
        }
        let mut sorted = classes.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format("duplicate class in weight set".into()));
        }
        if !params.all_finite() {
            return Err(Error::Format("non-finite classifier parameters".into()));
        }
        Ok(Self { classes, params })
    }

    /// Rows of the graph output for every class node, in class order.
    pub fn harvest(z: &Matrix, g: &KnowledgeGraph) -> Result<Self> {
        let nodes = g.class_nodes();
        Self::new((0..nodes.len()).collect(), z.select_rows(&nodes)?)
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// `classes x (feature_dim + 1)`.
    pub fn params(&self) -> &Matrix {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.params.cols() - 1
    }

    pub fn row(&self, class: usize) -> Option<&[f64]> {
        self.classes.iter().position(|&c| c == class).map(|p| self.params.row(p))
    }

    pub fn weight(&self, class: usize) -> Option<&[f64]> {
        self.row(class).map(|r| &r[..r.len() - 1])
    }

    pub fn bias(&self, class: usize) -> Option<f64> {
        self.row(class).map(|r| r[r.len() - 1])
    }

    /// Restriction to the given classes, in that order.
    pub fn subset(&self, classes: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            rows.push(self.row(c).ok_or(Error::MissingClassRow(c))?.to_vec());
        }
        Self::new(classes.to_vec(), Matrix::from_rows(&rows)?)
    }
}

/// Graph rows and their regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTargets {
    pub nodes: Vec<usize>,
    pub targets: Matrix,
}

impl RegressionTargets {
    /// Targets for `classes` taken from `gt`, mapped to their graph nodes.
    pub fn new(g: &KnowledgeGraph, gt: &ClassifierWeightSet, classes: &[usize]) -> Result<Self> {
        if classes.is_empty() {
            return Err(usage("regression needs at least one supervised class"));
        }
        let class_nodes = g.class_nodes();
        let mut nodes = Vec::with_capacity(classes.len());
        for &c in classes {
            let node = *class_nodes
                .get(c)
                .ok_or_else(|| usage(format!("class {c} has no graph node")))?;
            nodes.push(node);
        }
        Ok(Self {
            nodes,
            targets: gt.subset(classes)?.params().clone(),
        })
    }
}

/// Mean over supervised nodes of the element-mean squared error between
/// node outputs and targets.
pub fn init_loss(z: &Matrix, targets: &RegressionTargets) -> Result<f64> {
    if targets.nodes.is_empty() {
        return Err(usage("init_loss with an empty known list"));
    }
    let picked = z.select_rows(&targets.nodes)?;
    let diff = picked.sub(&targets.targets)?;
    Ok(diff.hadamard(&diff)?.mean())
}

/// Tape version of [`init_loss`].
pub fn init_loss_on_tape(tape: &mut GradientTape, z: Var, targets: &RegressionTargets) -> Result<Var> {
    if targets.nodes.is_empty() {
        return Err(usage("init_loss with an empty known list"));
    }
    let picked = tape.select_rows(z, &targets.nodes)?;
    let t = tape.constant(targets.targets.clone());
    let diff = tape.sub(picked, t)?;
    let sq = tape.hadamard(diff, diff)?;
    Ok(tape.mean(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub steps: usize,
}

/// Full-batch SGD on [`init_loss`]. Returns the loss before every step
/// followed by the final loss (`steps + 1` entries).
pub fn train_init(
    model: &mut GcnModel,
    g: &KnowledgeGraph,
    targets: &RegressionTargets,
    cfg: &SgdConfig,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut tape = GradientTape::new();
        let vars = model.register(&mut tape);
        let x = tape.constant(g.vectors().clone());
        let z = model.forward_on_tape(&mut tape, &vars, g, x)?;
        let loss = init_loss_on_tape(&mut tape, z, targets)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                term: "init_loss".into(),
                value,
            });
        }
        trace.push(value);
        if step == cfg.steps {
            break;
        }
        let grads = tape.backward(loss)?;
        model.sgd_step(&grads, &vars, cfg.lr)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeRole;
    use crate::testutil::grad_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn graph_from(vectors: Matrix, edges: &[(usize, usize)]) -> KnowledgeGraph {
        let n = vectors.rows();
        let names = (0..n).map(|i| format!("v{i}")).collect();
        let roles = (0..n)
            .map(|i| if i == 0 { NodeRole::Known } else { NodeRole::Unknown })
            .collect();
        KnowledgeGraph::new(names, roles, vectors, edges).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> KnowledgeGraph {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.35) {
                    edges.push((i, j));
                }
            }
        }
        graph_from(random_matrix(rng, n, dim), &edges)
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let g = graph_from(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), &[]);
        let head = AttentionHead::new(Matrix::identity(2), Kernel::Cosine);
        for mode in [AttentionMode::Learned, AttentionMode::Uniform] {
            let a = attention_coefficients(&head, mode, &g, g.vectors(), 1).unwrap();
            assert_eq!(a, vec![(1, 1.0)]);
        }
    }

    #[test]
    fn identical_neighbors_share_weight() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let g = graph_from(x, &[(0, 1), (0, 2)]);
        let head = AttentionHead::new(Matrix::identity(2), Kernel::Cosine);
        let a = attention_coefficients(&head, AttentionMode::Learned, &g, g.vectors(), 0).unwrap();
        assert_eq!(a[1].1, a[2].1);
        let a = attention_coefficients(&head, AttentionMode::Learned, &g, g.vectors(), 1).unwrap();
        // neighborhood of 1 is {0, 1}; scores cos=0 and cos=1
        assert_abs_diff_eq!(a[1].1, 1f64.exp() / (1f64.exp() + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn cosine_scores_one_zero_zero() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let g = graph_from(x, &[(0, 1), (0, 2)]);
        let head = AttentionHead::new(Matrix::identity(2), Kernel::Cosine);
        let a = attention_coefficients(&head, AttentionMode::Learned, &g, g.vectors(), 0).unwrap();
        let e = 1f64.exp();
        let expected = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for ((_, got), want) in a.iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(a[0].1, 0.5761, epsilon = 1e-4);
        assert_abs_diff_eq!(a[1].1, 0.2119, epsilon = 1e-4);
    }

    #[test]
    fn uniform_mode_weights() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.3, 1.0], [1.0, 1.0]]).unwrap();
        let g = graph_from(x, &[(0, 1), (1, 2)]);
        let head = AttentionHead::new(Matrix::identity(2), Kernel::Cosine);
        let a = attention_coefficients(&head, AttentionMode::Uniform, &g, g.vectors(), 1).unwrap();
        assert_eq!(a.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0 / 3.0; 3]);
        let a = attention_coefficients(&head, AttentionMode::Uniform, &g, g.vectors(), 3).unwrap();
        assert_eq!(a, vec![(3, 1.0)]);
    }

    #[test]
    fn uniform_equals_learned_when_transforms_coincide() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let g = graph_from(x, &[(0, 1), (1, 2), (0, 2)]);
        // rank-one head maps every node to the same vector
        let head = AttentionHead::new(Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0]]).unwrap(), Kernel::Cosine);
        for k in [Kernel::Cosine, Kernel::NegEuclidean] {
            let head = AttentionHead { kernel: k, ..head.clone() };
            for i in 0..3 {
                let l = attention_coefficients(&head, AttentionMode::Learned, &g, g.vectors(), i).unwrap();
                let u = attention_coefficients(&head, AttentionMode::Uniform, &g, g.vectors(), i).unwrap();
                assert_eq!(l, u);
            }
        }
    }

    #[test]
    fn aggregate_trivial_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let w = Matrix::from_rows(&[[1.0, 0.5], [-1.0, 2.0], [0.0, 1.0]]).unwrap();
        let head = AttentionHead::new(w.clone(), Kernel::Cosine);
        let g = graph_from(x, &[]);
        let wh = g.vectors().matmul(&w.transpose()).unwrap();
        assert_eq!(aggregate(&head, AttentionMode::Learned, &g, g.vectors(), 0).unwrap(), wh.row(0));

        // all neighbors share W h
        let same = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let g = graph_from(same, &[(0, 1), (0, 2)]);
        let v = g.vectors().matmul(&w.transpose()).unwrap();
        let out = aggregate(&head, AttentionMode::Learned, &g, g.vectors(), 0).unwrap();
        for (a, b) in out.iter().zip(v.row(0)) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    /// Dense matrix-form oracle: alpha masked by (A + I), times H W^T.
    fn dense_oracle(head: &AttentionHead, g: &KnowledgeGraph) -> Matrix {
        let n = g.node_count();
        let hw = g.vectors().matmul(&head.weight.transpose()).unwrap();
        let mut alpha = Matrix::zeros(n, n);
        for i in 0..n {
            let mut scores = Vec::new();
            for j in 0..n {
                let linked = i == j || g.adjacency()[i].contains(&j);
                if linked {
                    let (a, b) = (hw.row(i), hw.row(j));
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    scores.push((j, (dot / (na * nb)).exp()));
                }
            }
            let total: f64 = scores.iter().map(|s| s.1).sum();
            for (j, s) in scores {
                alpha.set(i, j, s / total);
            }
        }
        alpha.matmul(&hw).unwrap()
    }

    #[test]
    fn aggregate_matches_dense_oracle_on_toy_graph() {
        let x = Matrix::from_rows(&[[1.0, 0.2, -0.3], [0.1, 1.0, 0.4], [-0.5, 0.3, 1.0]]).unwrap();
        let g = graph_from(x, &[(0, 1), (1, 2)]);
        let head = AttentionHead::new(
            Matrix::from_rows(&[[0.5, -0.2, 0.1], [0.3, 0.8, -0.6]]).unwrap(),
            Kernel::Cosine,
        );
        let oracle = dense_oracle(&head, &g);
        for i in 0..3 {
            let out = aggregate(&head, AttentionMode::Learned, &g, g.vectors(), i).unwrap();
            for (a, b) in out.iter().zip(oracle.row(i)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dense_forward_layer_matches_per_node_aggregate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kernel in [Kernel::Cosine, Kernel::NegEuclidean] {
            for mode in [AttentionMode::Learned, AttentionMode::Uniform] {
                let g = random_graph(&mut rng, 7, 4);
                let head = AttentionHead::new(random_matrix(&mut rng, 3, 4), kernel);
                let mut tape = GradientTape::new();
                let w = tape.constant(head.weight.clone());
                let x = tape.constant(g.vectors().clone());
                let (z, _) = head_on_tape(&mut tape, w, kernel, mode, &g, x).unwrap();
                for i in 0..7 {
                    let out = aggregate(&head, mode, &g, g.vectors(), i).unwrap();
                    for (a, b) in out.iter().zip(tape.value(z).row(i)) {
                        assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn single_node_forward_is_plain_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = graph_from(random_matrix(&mut rng, 1, 4), &[]);
        let model = GcnModel::new(&GcnConfig { hidden_dim: 3, ..GcnConfig::new(4, 2) }, 9).unwrap();
        let z = model.forward(&g).unwrap();
        let h = g.vectors();
        let act = |m: Matrix| m.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        let a = act(h.matmul(&model.layer1[0].weight.transpose()).unwrap());
        let b = act(h.matmul(&model.layer1[1].weight.transpose()).unwrap());
        let cat = Matrix::concat_cols(&[&a, &b]).unwrap();
        let expected = cat.matmul(&model.layer2.weight.transpose()).unwrap();
        assert_eq!(z, expected);
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let g = graph_from(Matrix::zeros(4, 3), &[(0, 1), (1, 2), (2, 3)]);
        let model = GcnModel::new(&GcnConfig { hidden_dim: 5, ..GcnConfig::new(3, 4) }, 1).unwrap();
        assert_eq!(model.forward(&g).unwrap(), Matrix::zeros(4, 4));
    }

    #[test]
    fn input_dimension_mismatch_is_config_error() {
        let g = graph_from(Matrix::identity(3), &[(0, 1)]);
        let model = GcnModel::new(&GcnConfig::new(4, 2), 1).unwrap();
        assert!(matches!(model.forward(&g), Err(Error::Config(_))));
    }

    #[test]
    fn init_loss_examples() {
        let z = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let same = RegressionTargets {
            nodes: vec![0, 2],
            targets: Matrix::from_rows(&[[1.0, 2.0], [5.0, 6.0]]).unwrap(),
        };
        assert_eq!(init_loss(&z, &same).unwrap(), 0.0);
        let unit = RegressionTargets {
            nodes: vec![1],
            targets: Matrix::from_rows(&[[2.0, 5.0]]).unwrap(),
        };
        assert_eq!(init_loss(&z, &unit).unwrap(), 1.0);
        // element-MSEs 0.5 and 1.5
        let two = RegressionTargets {
            nodes: vec![0, 1],
            targets: Matrix::from_rows(&[[0.0, 2.0], [3.0 - 3f64.sqrt(), 4.0]]).unwrap(),
        };
        assert_abs_diff_eq!(init_loss(&z, &two).unwrap(), 1.0, epsilon = 1e-15);
        let empty = RegressionTargets {
            nodes: vec![],
            targets: Matrix::zeros(1, 2),
        };
        assert!(matches!(init_loss(&z, &empty), Err(Error::Usage(_))));
    }

    fn toy_targets(g: &KnowledgeGraph, out: usize) -> RegressionTargets {
        let nodes: Vec<usize> = (0..g.node_count()).step_by(2).collect();
        let data = (0..nodes.len() * out).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
        RegressionTargets {
            targets: Matrix::from_vec(nodes.len(), out, data).unwrap(),
            nodes,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_graph(&mut rng, 6, 4);
        let mut model = GcnModel::new(&GcnConfig { hidden_dim: 4, ..GcnConfig::new(4, 3) }, 3).unwrap();
        let trace = train_init(&mut model, &g, &toy_targets(&g, 3), &SgdConfig { lr: 0.0, steps: 5 }).unwrap();
        assert_eq!(trace.len(), 6);
        assert!(trace.iter().all(|&v| v == trace[0]));
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 6, 4);
        let t = toy_targets(&g, 3);
        let cfg = GcnConfig { hidden_dim: 8, ..GcnConfig::new(4, 3) };
        let run = || {
            let mut m = GcnModel::new(&cfg, 42).unwrap();
            let trace = train_init(&mut m, &g, &t, &SgdConfig { lr: 0.05, steps: 50 }).unwrap();
            (m, trace)
        };
        let (m1, t1) = run();
        let (m2, t2) = run();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert!(t1.last().unwrap() < &t1[0]);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 6, 4);
        let mut t = toy_targets(&g, 3);
        t.targets = t.targets.scale(1e3);
        let mut m = GcnModel::new(&GcnConfig { hidden_dim: 8, ..GcnConfig::new(4, 3) }, 1).unwrap();
        match train_init(&mut m, &g, &t, &SgdConfig { lr: 50.0, steps: 100 }) {
            Err(Error::Diverged { step, .. }) => assert!(step <= 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_reproduces_forward_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 5, 3);
        let model = GcnModel::new(
            &GcnConfig {
                hidden_dim: 4,
                kernel: Kernel::NegEuclidean,
                ..GcnConfig::new(3, 2)
            },
            77,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gcn.ckpt");
        model.save(&path).unwrap();
        let back = GcnModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.forward(&g).unwrap(), model.forward(&g).unwrap());
    }

    #[test]
    fn identity_like_reproduces_isolated_inputs() {
        let x = Matrix::from_rows(&[[0.3, -0.4, 1.2]]).unwrap();
        let g = graph_from(Matrix::identity(1), &[]);
        let model = GcnModel::identity_like(3, Kernel::Cosine, AttentionMode::Learned);
        let z = model.forward_inputs(&g, &x).unwrap();
        assert!(z.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn init_loss_gradients_match_finite_differences() {
        for seed in 0..8 {
            for kernel in [Kernel::Cosine, Kernel::NegEuclidean] {
                for mode in [AttentionMode::Learned, AttentionMode::Uniform] {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let g = random_graph(&mut rng, 5, 3);
                    let model = GcnModel::new(&GcnConfig { hidden_dim: 3, kernel, mode, ..GcnConfig::new(3, 2) }, seed).unwrap();
                    let targets = toy_targets(&g, 2);
                    let inputs = vec![
                        model.layer1[0].weight.clone(),
                        model.layer1[1].weight.clone(),
                        model.layer2.weight.clone(),
                    ];
                    let err = grad_check(&inputs, |t, v| {
                        let vars = GcnVars { layer1: [v[0], v[1]], layer2: v[2] };
                        let x = t.constant(g.vectors().clone());
                        let z = model.forward_on_tape(t, &vars, &g, x)?;
                        init_loss_on_tape(t, z, &targets)
                    });
                    assert!(err < 1e-4, "seed {seed} {kernel:?} {mode:?}: {err}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn attention_weights_are_distributions(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 3);
            for kernel in [Kernel::Cosine, Kernel::NegEuclidean] {
                let head = AttentionHead::new(random_matrix(&mut rng, 4, 3), kernel);
                for mode in [AttentionMode::Learned, AttentionMode::Uniform] {
                    for i in 0..n {
                        let a = attention_coefficients(&head, mode, &g, g.vectors(), i).unwrap();
                        prop_assert!(a.iter().all(|p| p.1 >= 0.0));
                        prop_assert!((a.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn aggregate_lies_in_convex_hull(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 3);
            let head = AttentionHead::new(random_matrix(&mut rng, 4, 3), Kernel::Cosine);
            let hw = g.vectors().matmul(&head.weight.transpose()).unwrap();
            for i in 0..n {
                let out = aggregate(&head, AttentionMode::Learned, &g, g.vectors(), i).unwrap();
                let nbrs = g.neighborhood(i).unwrap();
                for (k, &v) in out.iter().enumerate() {
                    let lo = nbrs.iter().map(|&j| hw.get(j, k)).fold(f64::INFINITY, f64::min);
                    let hi = nbrs.iter().map(|&j| hw.get(j, k)).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn forward_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..8) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let p = g.permuted(&perm).unwrap();
            let model = GcnModel::new(&GcnConfig { hidden_dim: 4, ..GcnConfig::new(3, 2) }, seed).unwrap();
            let z = model.forward(&g).unwrap();
            let zp = model.forward(&p).unwrap();
            // node order changes summation order, so agreement is up to rounding
            for i in 0..n {
                for (a, b) in z.row(i).iter().zip(zp.row(perm[i])) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn cosine_attention_is_scale_invariant(seed in any::<u64>(), n in 1usize..8, lambda in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 3);
            let head = AttentionHead::new(random_matrix(&mut rng, 4, 3), Kernel::Cosine);
            let scaled = g.vectors().scale(lambda);
            for i in 0..n {
                let a = attention_coefficients(&head, AttentionMode::Learned, &g, g.vectors(), i).unwrap();
                let b = attention_coefficients(&head, AttentionMode::Learned, &g, &scaled, i).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    prop_assert!((p.1 - q.1).abs() <= 1e-12);
                }
                let za = aggregate(&head, AttentionMode::Learned, &g, g.vectors(), i).unwrap();
                let zb = aggregate(&head, AttentionMode::Learned, &g, &scaled, i).unwrap();
                for (p, q) in za.iter().zip(&zb) {
                    prop_assert!((lambda * p - q).abs() <= 1e-9 * (1.0 + q.abs()));
                }
            }
        }
    }
}
