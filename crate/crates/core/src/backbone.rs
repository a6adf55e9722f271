//! Feature map φ, linear classifier ψ over every target class, and the
//! classification and balance losses.
//!
//! ψ is stored as one row per class holding the weight vector followed by
//! the bias, the same layout the graph network regresses.

use std::path::Path;

use crate::checkpoint::TensorBundle;
use crate::dataset::DomainDataset;
use crate::error::{config, usage, Error, Result};
use crate::gcn::ClassifierWeightSet;
use crate::tape::{GradientTape, Gradients, Var};
use crate::tensor::{softmax_rows, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    Identity { dim: usize },
    /// `x -> x Aᵀ + b` with `A: out x in`, `b: 1 x out`.
    Affine { weight: Matrix, bias: Matrix },
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        FeatureMap::Identity { dim }
    }

    /// Affine map initialized to the (rectangular) identity with zero bias.
    pub fn affine(in_dim: usize, out_dim: usize) -> Self {
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for k in 0..in_dim.min(out_dim) {
            weight.set(k, k, 1.0);
        }
        FeatureMap::Affine {
            weight,
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine { weight, .. } => weight.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { dim } => *dim,
            FeatureMap::Affine { weight, .. } => weight.rows(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, FeatureMap::Affine { .. })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    pub phi: Option<(Var, Var)>,
    pub psi: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    phi: FeatureMap,
    psi: Matrix,
    known: Vec<usize>,
    unknown: Vec<usize>,
}

impl Backbone {
    /// Zero-initialized classifier over `known.len() + unknown.len()`
    /// classes; the two lists must partition `0..l_t`.
    pub fn new(phi: FeatureMap, known: Vec<usize>, unknown: Vec<usize>) -> Result<Self> {
        let total = known.len() + unknown.len();
        let mut seen = vec![false; total];
        for &c in known.iter().chain(&unknown) {
            if c >= total || std::mem::replace(&mut seen[c], true) {
                return Err(config(format!(
                    "known {known:?} and unknown {unknown:?} do not partition 0..{total}"
                )));
            }
        }
        if known.is_empty() {
            return Err(config("backbone needs at least one known class"));
        }
        let psi = Matrix::zeros(total, phi.output_dim() + 1);
        Ok(Self {
            phi,
            psi,
            known,
            unknown,
        })
    }

    pub fn phi(&self) -> &FeatureMap {
        &self.phi
    }

    /// `l_t x (f + 1)` classifier rows.
    pub fn psi(&self) -> &Matrix {
        &self.psi
    }

    pub fn num_classes(&self) -> usize {
        self.psi.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn known_classes(&self) -> &[usize] {
        &self.known
    }

    pub fn unknown_classes(&self) -> &[usize] {
        &self.unknown
    }

    /// `l_u / l_t`, the unknown mass below which the balance loss is active.
    pub fn unknown_ratio(&self) -> f64 {
        self.unknown.len() as f64 / self.num_classes() as f64
    }

    /// Sets ψ rows: known classes from `known_rows` when given, every other
    /// class from `gcn_rows`.
    pub fn init_classifier_from_gcn(
        &mut self,
        gcn_rows: &ClassifierWeightSet,
        known_rows: Option<&ClassifierWeightSet>,
    ) -> Result<()> {
        for set in std::iter::once(gcn_rows).chain(known_rows) {
            if set.feature_dim() != self.feature_dim() {
                return Err(config(format!(
                    "classifier rows have {} features, backbone has {}",
                    set.feature_dim(),
                    self.feature_dim()
                )));
            }
        }
        let mut psi = self.psi.clone();
        for c in 0..self.num_classes() {
            let source = match known_rows {
                Some(k) if self.known.contains(&c) => k,
                _ => gcn_rows,
            };
            let row = source.row(c).ok_or(Error::MissingClassRow(c))?;
            psi.row_mut(c).copy_from_slice(row);
        }
        self.psi = psi;
        Ok(())
    }

    /// Overwrites the rows of `classes` from `rows`.
    pub fn set_rows(&mut self, rows: &ClassifierWeightSet, classes: &[usize]) -> Result<()> {
        for &c in classes {
            let row = rows.row(c).ok_or(Error::MissingClassRow(c))?;
            if row.len() != self.psi.cols() {
                return Err(config("classifier row width mismatch"));
            }
            self.psi.row_mut(c).copy_from_slice(row);
        }
        Ok(())
    }

    /// ψ as a weight set over all classes.
    pub fn classifier(&self) -> ClassifierWeightSet {
        ClassifierWeightSet::new((0..self.num_classes()).collect(), self.psi.clone())
            .expect("ψ rows are finite and distinct")
    }

    pub fn register(&self, tape: &mut GradientTape) -> BackboneVars {
        let phi = match &self.phi {
            FeatureMap::Identity { .. } => None,
            FeatureMap::Affine { weight, bias } => Some((tape.param(weight.clone()), tape.param(bias.clone()))),
        };
        BackboneVars {
            phi,
            psi: tape.param(self.psi.clone()),
        }
    }

    fn constants(&self, tape: &mut GradientTape) -> BackboneVars {
        let phi = match &self.phi {
            FeatureMap::Identity { .. } => None,
            FeatureMap::Affine { weight, bias } => {
                Some((tape.constant(weight.clone()), tape.constant(bias.clone())))
            }
        };
        BackboneVars {
            phi,
            psi: tape.constant(self.psi.clone()),
        }
    }

    pub fn features_on_tape(&self, tape: &mut GradientTape, vars: &BackboneVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "features",
                left: tape.value(x).shape(),
                right: (self.input_dim(), self.feature_dim()),
            });
        }
        match vars.phi {
            None => Ok(x),
            Some((w, b)) => {
                let wt = tape.transpose(w);
                let xw = tape.matmul(x, wt)?;
                tape.add_row(xw, b)
            }
        }
    }

    pub fn logits_on_tape(&self, tape: &mut GradientTape, vars: &BackboneVars, features: Var) -> Result<Var> {
        let f = self.feature_dim();
        let cols: Vec<usize> = (0..f).collect();
        let w = tape.select_cols(vars.psi, &cols)?;
        let b = tape.select_cols(vars.psi, &[f])?;
        let b = tape.transpose(b);
        let wt = tape.transpose(w);
        let raw = tape.matmul(features, wt)?;
        tape.add_row(raw, b)
    }

    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        let vars = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.features_on_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(f).clone())
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = GradientTape::new();
        let vars = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.features_on_tape(&mut tape, &vars, xv)?;
        let l = self.logits_on_tape(&mut tape, &vars, f)?;
        Ok(tape.value(l).clone())
    }

    /// Softmax class probabilities per sample.
    pub fn responses(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Top-1 class per sample; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn classification_loss(&self, ds: &DomainDataset) -> Result<f64> {
        let labels = ds.require_labels("classification loss")?;
        let mut tape = GradientTape::new();
        let vars = self.constants(&mut tape);
        let x = tape.constant(ds.features().clone());
        let f = self.features_on_tape(&mut tape, &vars, x)?;
        let l = self.logits_on_tape(&mut tape, &vars, f)?;
        let loss = classification_loss_on_tape(&mut tape, l, labels)?;
        tape.value(loss).item()
    }

    pub fn balance_loss(&self, x: &Matrix) -> Result<f64> {
        balance_loss_from_responses(&self.responses(x)?, &self.unknown, self.unknown_ratio())
    }

    /// `param -= lr * grad` for every trainable tensor.
    pub fn sgd_step(&mut self, grads: &Gradients, vars: &BackboneVars, lr: f64) -> Result<()> {
        self.psi.axpy(-lr, &grads.get(vars.psi))?;
        if let (FeatureMap::Affine { weight, bias }, Some((w, b))) = (&mut self.phi, vars.phi) {
            weight.axpy(-lr, &grads.get(w))?;
            bias.axpy(-lr, &grads.get(b))?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.psi.all_finite()
            && match &self.phi {
                FeatureMap::Identity { .. } => true,
                FeatureMap::Affine { weight, bias } => weight.all_finite() && bias.all_finite(),
            }
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new(serde_json::json!({
            "kind": "backbone",
            "phi": if self.phi.is_trainable() { "affine" } else { "identity" },
            "input_dim": self.input_dim(),
            "known": self.known,
            "unknown": self.unknown,
        }));
        b.push("psi", self.psi.clone());
        if let FeatureMap::Affine { weight, bias } = &self.phi {
            b.push("phi.weight", weight.clone());
            b.push("phi.bias", bias.clone());
        }
        b
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        if b.meta_str("kind")? != "backbone" {
            return Err(Error::Format("checkpoint does not hold a backbone".into()));
        }
        let indices = |key: &str| -> Result<Vec<usize>> {
            serde_json::from_value(b.meta.get(key).cloned().unwrap_or_default())
                .map_err(|e| Error::Format(format!("checkpoint `{key}`: {e}")))
        };
        let phi = match b.meta_str("phi")? {
            "identity" => {
                let dim = b
                    .meta
                    .get("input_dim")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| Error::Format("checkpoint lacks `input_dim`".into()))?;
                FeatureMap::identity(dim as usize)
            }
            "affine" => FeatureMap::Affine {
                weight: b.get("phi.weight")?.clone(),
                bias: b.get("phi.bias")?.clone(),
            },
            other => return Err(Error::Format(format!("unknown feature map `{other}`"))),
        };
        let mut bb = Self::new(phi, indices("known")?, indices("unknown")?)?;
        let psi = b.get("psi")?;
        if psi.shape() != bb.psi.shape() {
            return Err(Error::Format("classifier shape disagrees with metadata".into()));
        }
        bb.psi = psi.clone();
        Ok(bb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// Mean cross-entropy of `logits` against `labels`.
pub fn classification_loss_on_tape(tape: &mut GradientTape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(logits).shape();
    if labels.len() != n {
        return Err(usage(format!("{} labels for {n} samples", labels.len())));
    }
    let mut onehot = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(usage(format!("label {y} outside {k} classes")));
        }
        onehot.set(i, y, 1.0);
    }
    let logp = tape.log_softmax_rows(logits);
    let mask = tape.constant(onehot);
    let picked = tape.hadamard(logp, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// `-ln(mean unknown mass)`, or zero once that mass reaches `ratio`.
pub fn balance_loss_on_tape(tape: &mut GradientTape, logits: Var, unknown: &[usize], ratio: f64) -> Result<Var> {
    if unknown.is_empty() {
        return Err(usage("balance loss needs at least one unknown class"));
    }
    let n = tape.value(logits).rows();
    let probs = tape.softmax_rows(logits);
    let picked = tape.select_cols(probs, unknown)?;
    let total = tape.sum(picked);
    let mass = tape.scale(total, 1.0 / n as f64);
    if tape.value(mass).item()? >= ratio {
        return Ok(tape.scale(mass, 0.0));
    }
    let ln = tape.ln(mass);
    Ok(tape.scale(ln, -1.0))
}

/// Value form of [`balance_loss_on_tape`] given response rows.
pub fn balance_loss_from_responses(probs: &Matrix, unknown: &[usize], ratio: f64) -> Result<f64> {
    if unknown.is_empty() {
        return Err(usage("balance loss needs at least one unknown class"));
    }
    let mass = probs.select_cols(unknown)?.sum() / probs.rows() as f64;
    Ok(if mass >= ratio { 0.0 } else { -mass.ln() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Domain;
    use crate::testutil::grad_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn with_psi(phi: FeatureMap, known: Vec<usize>, unknown: Vec<usize>, psi: Matrix) -> Backbone {
        let mut bb = Backbone::new(phi, known, unknown).unwrap();
        let rows = ClassifierWeightSet::new((0..psi.rows()).collect(), psi).unwrap();
        bb.init_classifier_from_gcn(&rows, None).unwrap();
        bb
    }

    #[test]
    fn zero_rows_give_uniform_responses() {
        let bb = Backbone::new(FeatureMap::identity(3), vec![0, 1], vec![2, 3]).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [10.0, 0.0, 3.0]]).unwrap();
        assert_eq!(bb.responses(&x).unwrap(), Matrix::filled(2, 4, 0.25));
    }

    #[test]
    fn reinitializing_from_own_rows_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = with_psi(FeatureMap::identity(3), vec![0, 2], vec![1], random_matrix(&mut rng, 3, 4));
        let mut again = bb.clone();
        again.init_classifier_from_gcn(&bb.classifier(), Some(&bb.classifier())).unwrap();
        let x = random_matrix(&mut rng, 5, 3);
        assert_eq!(again.responses(&x).unwrap(), bb.responses(&x).unwrap());
    }

    #[test]
    fn known_rows_prefer_source_trained_weights() {
        let gcn = ClassifierWeightSet::new(vec![0, 1], Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0]]).unwrap()).unwrap();
        let gt = ClassifierWeightSet::new(vec![0], Matrix::from_rows(&[[9.0, 1.0]]).unwrap()).unwrap();
        let mut bb = Backbone::new(FeatureMap::identity(1), vec![0], vec![1]).unwrap();
        bb.init_classifier_from_gcn(&gcn, Some(&gt)).unwrap();
        assert_eq!(bb.psi(), &Matrix::from_rows(&[[9.0, 1.0], [2.0, 0.0]]).unwrap());
    }

    #[test]
    fn missing_row_names_the_class() {
        let gcn = ClassifierWeightSet::new(vec![0, 2], Matrix::zeros(2, 2)).unwrap();
        let mut bb = Backbone::new(FeatureMap::identity(1), vec![0], vec![1, 2]).unwrap();
        assert!(matches!(bb.init_classifier_from_gcn(&gcn, None), Err(Error::MissingClassRow(1))));
    }

    #[test]
    fn argmax_follows_largest_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_matrix(&mut rng, 5, 4);
        let bb = with_psi(FeatureMap::identity(3), vec![0, 1, 2], vec![3, 4], rows.clone());
        let x = random_matrix(&mut rng, 20, 3);
        let pred = bb.predict(&x).unwrap();
        for (i, p) in pred.into_iter().enumerate() {
            let score = |c: usize| {
                let r = rows.row(c);
                x.row(i).iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + r[3]
            };
            let best = (0..5).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).unwrap();
            assert_eq!(p, best);
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        let psi = Matrix::from_rows(&[[0.0, 1e4], [0.0, 0.0]]).unwrap();
        let bb = with_psi(FeatureMap::identity(1), vec![0], vec![1], psi);
        let r = bb.responses(&Matrix::from_rows(&[[0.0]]).unwrap()).unwrap();
        assert_abs_diff_eq!(r.get(0, 0), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn batch_matches_single_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bb = with_psi(FeatureMap::identity(3), vec![0, 1], vec![2], random_matrix(&mut rng, 3, 4));
        let x = random_matrix(&mut rng, 2, 3);
        let both = bb.responses(&x).unwrap();
        for i in 0..2 {
            let one = bb.responses(&x.select_rows(&[i]).unwrap()).unwrap();
            assert_eq!(one.row(0), both.row(i));
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // logits [0, 0] and [0, ln 3] give correct-class probabilities 1/2 and 1/4
        let psi = Matrix::from_rows(&[[0.0, 0.0], [3f64.ln(), 0.0]]).unwrap();
        let bb = with_psi(FeatureMap::identity(1), vec![0, 1], vec![], psi);
        let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let ds = DomainDataset::new(x, Some(vec![0, 0]), 2, Domain::Source).unwrap();
        let expected = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert_abs_diff_eq!(bb.classification_loss(&ds).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 1.0397, epsilon = 1e-4);

        let uniform = Backbone::new(FeatureMap::identity(1), vec![0, 1, 2, 3], vec![]).unwrap();
        let ds = DomainDataset::new(Matrix::zeros(3, 1), Some(vec![0, 3, 1]), 4, Domain::Source).unwrap();
        assert_abs_diff_eq!(uniform.classification_loss(&ds).unwrap(), 4f64.ln(), epsilon = 1e-12);

        let sharp = with_psi(FeatureMap::identity(1), vec![0, 1], vec![], Matrix::from_rows(&[[0.0, 800.0], [0.0, 0.0]]).unwrap());
        let ds = DomainDataset::new(Matrix::zeros(1, 1), Some(vec![0]), 2, Domain::Source).unwrap();
        assert_eq!(sharp.classification_loss(&ds).unwrap(), 0.0);
        assert!(matches!(sharp.classification_loss(&ds.without_labels()), Err(Error::Usage(_))));
    }

    #[test]
    fn balance_examples() {
        let bb = Backbone::new(FeatureMap::identity(2), vec![0, 1, 2, 3], vec![4]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [0.0, -1.0]]).unwrap();
        assert_eq!(bb.unknown_ratio(), 0.2);
        assert_eq!(bb.balance_loss(&x).unwrap(), 0.0);

        let all_unknown = Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(balance_loss_from_responses(&all_unknown, &[2], 1.0 / 3.0).unwrap(), 0.0);
        let tenth = Matrix::from_rows(&[[0.9, 0.1], [0.9, 0.1]]).unwrap();
        assert_abs_diff_eq!(balance_loss_from_responses(&tenth, &[1], 0.2).unwrap(), 10f64.ln(), epsilon = 1e-12);
        assert!(matches!(balance_loss_from_responses(&tenth, &[], 0.2), Err(Error::Usage(_))));
    }

    #[test]
    fn bias_shift_leaves_responses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = random_matrix(&mut rng, 4, 4);
        let mut shifted = psi.clone();
        for c in 0..4 {
            shifted.set(c, 3, psi.get(c, 3) + 7.5);
        }
        let a = with_psi(FeatureMap::identity(3), vec![0, 1], vec![2, 3], psi);
        let b = with_psi(FeatureMap::identity(3), vec![0, 1], vec![2, 3], shifted);
        let x = random_matrix(&mut rng, 6, 3);
        assert!(a.responses(&x).unwrap().max_abs_diff(&b.responses(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_matrix(&mut rng, 6, 3);
            let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
            let template = Backbone::new(FeatureMap::affine(3, 2), vec![0, 1, 2], vec![3, 4]).unwrap();
            let inputs = vec![random_matrix(&mut rng, 2, 3), random_matrix(&mut rng, 1, 2), random_matrix(&mut rng, 5, 3)];
            let build_logits = |t: &mut GradientTape, v: &[Var]| {
                let vars = BackboneVars { phi: Some((v[0], v[1])), psi: v[2] };
                let xv = t.constant(x.clone());
                let f = template.features_on_tape(t, &vars, xv)?;
                template.logits_on_tape(t, &vars, f)
            };
            let err = grad_check(&inputs, |t, v| {
                let l = build_logits(t, v)?;
                classification_loss_on_tape(t, l, &labels)
            });
            assert!(err < 1e-4, "cls seed {seed}: {err}");
            // ratio 1 keeps the balance term active everywhere
            let err = grad_check(&inputs, |t, v| {
                let l = build_logits(t, v)?;
                balance_loss_on_tape(t, l, &[3, 4], 1.0)
            });
            assert!(err < 1e-4, "lb seed {seed}: {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bb = with_psi(FeatureMap::affine(3, 2), vec![1], vec![0], random_matrix(&mut rng, 2, 3));
        if let FeatureMap::Affine { weight, .. } = &mut bb.phi {
            *weight = random_matrix(&mut rng, 2, 3);
        }
        let back = Backbone::from_bundle(&bb.to_bundle()).unwrap();
        assert_eq!(back, bb);
        let id = Backbone::new(FeatureMap::identity(4), vec![0], vec![1]).unwrap();
        assert_eq!(Backbone::from_bundle(&id.to_bundle()).unwrap(), id);
    }

    #[test]
    fn rejects_bad_partitions() {
        assert!(Backbone::new(FeatureMap::identity(2), vec![0, 1], vec![1]).is_err());
        assert!(Backbone::new(FeatureMap::identity(2), vec![], vec![0]).is_err());
        assert!(Backbone::new(FeatureMap::identity(2), vec![0], vec![2]).is_err());
    }

    proptest! {
        #[test]
        fn responses_are_distributions(seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_matrix(&mut rng, 4, 3).scale(20.0);
            let bb = with_psi(FeatureMap::identity(2), vec![0, 1], vec![2, 3], psi);
            let r = bb.responses(&random_matrix(&mut rng, n, 2)).unwrap();
            for row in r.row_iter() {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn balance_is_non_increasing_in_unknown_mass(a in 0.0f64..1.0, b in 0.0f64..1.0, ratio in 0.05f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let probs = |m: f64| Matrix::from_rows(&[[1.0 - m, m]]).unwrap();
            let l_lo = balance_loss_from_responses(&probs(lo.max(1e-9)), &[1], ratio).unwrap();
            let l_hi = balance_loss_from_responses(&probs(hi.max(1e-9)), &[1], ratio).unwrap();
            prop_assert!(l_hi <= l_lo);
        }
    }
}
