//! Loss terms and their weighted composition.
//!
//! Each term family implements [`LossTerm`]; [`compile_terms`] walks the
//! covariate declarations and instantiates one term per constraint — one
//! reconstruction term if weighted, one prediction term if weighted, a
//! structure term per equivariant covariate, an invariance (or MMD) term per
//! invariant covariate, and an orthogonality penalty per orthogonal
//! morphism. The trainer only sees the trait objects.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::functors::ModelBundle;
use crate::graph::{BandwidthPolicy, Graph, GraphError, NodeId};
use crate::pairing::{Constraint, CovariateSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("all loss weights are zero")]
    AllWeightsZero,
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: String, value: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Multipliers for the loss terms; per-covariate weights default to 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_per_covariate: BTreeMap<String, f64>,
    pub mu_orth: f64,
}

pub const DEFAULT_COVARIATE_LAMBDA: f64 = 0.01;

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 0.0,
            lambda_p: 1.0,
            lambda_s: 1.0,
            lambda_per_covariate: BTreeMap::new(),
            mu_orth: 0.1,
        }
    }
}

impl LossWeights {
    pub fn covariate_weight(&self, name: &str) -> f64 {
        self.lambda_per_covariate
            .get(name)
            .copied()
            .unwrap_or(DEFAULT_COVARIATE_LAMBDA)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let named = [
            ("lambda_r", self.lambda_r),
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("mu_orth", self.mu_orth),
        ];
        for (name, v) in named {
            if v < 0.0 {
                return Err(ObjectiveError::NegativeWeight {
                    name: name.into(),
                    value: v,
                });
            }
        }
        for (name, &v) in &self.lambda_per_covariate {
            if v < 0.0 {
                return Err(ObjectiveError::NegativeWeight {
                    name: name.clone(),
                    value: v,
                });
            }
        }
        let any = self.lambda_r > 0.0
            || self.lambda_p > 0.0
            || self.lambda_s > 0.0
            || self.mu_orth > 0.0
            || self.lambda_per_covariate.values().any(|&v| v > 0.0);
        if !any {
            return Err(ObjectiveError::AllWeightsZero);
        }
        Ok(())
    }
}

/// One pair within a batch, already oriented so the exponent is nonnegative:
/// the structure residual is ||W^exponent z_src - z_dst||^2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAt {
    pub src: usize,
    pub dst: usize,
    pub exponent: u32,
}

/// Everything a batch contributes to the loss graph. Positions index rows of
/// `features`.
#[derive(Debug, Clone)]
pub struct BatchData {
    /// Encode-set feature rows (batch rows first, then pair partners).
    pub features: Tensor,
    /// Positions of the actual batch rows within `features`.
    pub base: Vec<usize>,
    /// Labels of the base rows, in `base` order.
    pub labels: Vec<usize>,
    /// Oriented pairs per covariate.
    pub pairs: BTreeMap<String, Vec<PairAt>>,
    /// Bin-code groups of base rows per covariate (for the MMD penalty).
    pub groups: BTreeMap<String, Vec<Vec<usize>>>,
}

/// Nodes shared by every term built on one graph.
pub struct GraphParts {
    pub x: NodeId,
    pub latents: NodeId,
    morphisms: BTreeMap<String, NodeId>,
}

impl GraphParts {
    /// Registers (once) and returns the morphism parameter node.
    fn morphism_node(
        &mut self,
        g: &mut Graph,
        bundle: &ModelBundle,
        covariate: &str,
    ) -> Option<NodeId> {
        if let Some(&id) = self.morphisms.get(covariate) {
            return Some(id);
        }
        let m = bundle.morphism(covariate)?;
        let id = g
            .param(&format!("mor.{covariate}"), m.w.clone())
            .expect("morphism registered once");
        self.morphisms.insert(covariate.to_string(), id);
        Some(id)
    }
}

/// A named, weighted scalar contribution to the training objective.
pub trait LossTerm {
    fn name(&self) -> String;
    fn weight(&self) -> f64;
    /// Builds the unweighted scalar node; `None` when the batch carries
    /// nothing for this term (e.g. no pairs).
    fn build(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId>;
}

/// Mean squared reconstruction error over the batch rows.
pub struct ReconstructionTerm {
    pub weight: f64,
}

impl LossTerm for ReconstructionTerm {
    fn name(&self) -> String {
        "reconstruction".into()
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId> {
        if batch.base.is_empty() {
            return None;
        }
        let zb = g.gather_rows(parts.latents, batch.base.clone());
        let xhat = bundle.decoder.build_graph(g, zb, "dec");
        let xb = g.gather_rows(parts.x, batch.base.clone());
        let diff = g.sub(xhat, xb);
        let ss = g.frobenius_sq(diff);
        Some(g.scale(ss, 1.0 / batch.base.len() as f64))
    }
}

/// Mean cross-entropy of the classifier head over the batch rows.
pub struct PredictionTerm {
    pub weight: f64,
}

impl LossTerm for PredictionTerm {
    fn name(&self) -> String {
        "prediction".into()
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId> {
        if batch.base.is_empty() {
            return None;
        }
        let zb = g.gather_rows(parts.latents, batch.base.clone());
        let logits = bundle.classifier.build_graph(g, zb, "cls");
        Some(g.softmax_cross_entropy(logits, batch.labels.clone()))
    }
}

/// Mean structure-preserving residual ||W^e z_src - z_dst||^2 over pairs.
pub struct StructureTerm {
    pub covariate: String,
    pub weight: f64,
}

impl LossTerm for StructureTerm {
    fn name(&self) -> String {
        format!("structure:{}", self.covariate)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId> {
        let entries = batch.pairs.get(&self.covariate)?;
        if entries.is_empty() {
            return None;
        }
        let w = parts.morphism_node(g, bundle, &self.covariate)?;

        let mut by_exp: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for e in entries {
            let slot = by_exp.entry(e.exponent).or_default();
            slot.0.push(e.src);
            slot.1.push(e.dst);
        }

        // W^e nodes built incrementally across ascending exponents.
        let mut pow_cache: BTreeMap<u32, NodeId> = BTreeMap::new();
        let mut total: Option<NodeId> = None;
        for (&exp, (srcs, dsts)) in &by_exp {
            let zs = g.gather_rows(parts.latents, srcs.clone());
            let zd = g.gather_rows(parts.latents, dsts.clone());
            let morphed = if exp == 0 {
                zs
            } else {
                let mut highest = *pow_cache.keys().next_back().unwrap_or(&1);
                if !pow_cache.contains_key(&1) {
                    pow_cache.insert(1, w);
                    highest = 1;
                }
                for k in (highest + 1)..=exp {
                    let prev = pow_cache[&(k - 1)];
                    let next = g.matmul(prev, w);
                    pow_cache.insert(k, next);
                }
                let pe = pow_cache[&exp];
                // row latents: (W^e z)^T = z^T (W^e)^T
                let pet = g.transpose(pe);
                g.matmul(zs, pet)
            };
            let diff = g.sub(morphed, zd);
            let ss = g.frobenius_sq(diff);
            total = Some(match total {
                Some(t) => g.add(t, ss),
                None => ss,
            });
        }
        let t = total.expect("at least one exponent group");
        Some(g.scale(t, 1.0 / entries.len() as f64))
    }
}

/// Mean squared latent distance over cross-group pairs; the degenerate
/// structure term with W fixed to the identity.
pub struct InvarianceTerm {
    pub covariate: String,
    pub weight: f64,
}

impl LossTerm for InvarianceTerm {
    fn name(&self) -> String {
        format!("invariance:{}", self.covariate)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        _bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId> {
        let entries = batch.pairs.get(&self.covariate)?;
        if entries.is_empty() {
            return None;
        }
        let srcs: Vec<usize> = entries.iter().map(|e| e.src).collect();
        let dsts: Vec<usize> = entries.iter().map(|e| e.dst).collect();
        let zs = g.gather_rows(parts.latents, srcs);
        let zd = g.gather_rows(parts.latents, dsts);
        let diff = g.sub(zs, zd);
        let ss = g.frobenius_sq(diff);
        Some(g.scale(ss, 1.0 / entries.len() as f64))
    }
}

/// Biased squared MMD between the latent groups of a categorical covariate;
/// for more than two groups, the mean over unordered group pairs.
pub struct MmdTerm {
    pub covariate: String,
    pub weight: f64,
    pub bandwidth: BandwidthPolicy,
}

impl LossTerm for MmdTerm {
    fn name(&self) -> String {
        format!("mmd:{}", self.covariate)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        _bundle: &ModelBundle,
        parts: &mut GraphParts,
        batch: &BatchData,
    ) -> Option<NodeId> {
        let groups = batch.groups.get(&self.covariate)?;
        let occupied: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
        if occupied.len() < 2 {
            return None;
        }
        let nodes: Vec<NodeId> = occupied
            .iter()
            .map(|rows| g.gather_rows(parts.latents, (*rows).clone()))
            .collect();
        let mut total: Option<NodeId> = None;
        let mut count = 0usize;
        for a in 0..nodes.len() {
            for b in (a + 1)..nodes.len() {
                let m = g.mmd_rbf(nodes[a], nodes[b], self.bandwidth);
                count += 1;
                total = Some(match total {
                    Some(t) => g.add(t, m),
                    None => m,
                });
            }
        }
        Some(g.scale(total.expect("two groups"), 1.0 / count as f64))
    }
}

/// ||W^T W - I||_F^2 for one morphism.
pub struct OrthogonalityTerm {
    pub covariate: String,
    pub weight: f64,
}

impl LossTerm for OrthogonalityTerm {
    fn name(&self) -> String {
        format!("orthogonality:{}", self.covariate)
    }

    fn weight(&self) -> f64 {
        self.weight
    }

    fn build(
        &self,
        g: &mut Graph,
        bundle: &ModelBundle,
        parts: &mut GraphParts,
        _batch: &BatchData,
    ) -> Option<NodeId> {
        let w = parts.morphism_node(g, bundle, &self.covariate)?;
        let n = bundle.morphism(&self.covariate)?.dim();
        let wt = g.transpose(w);
        let wtw = g.matmul(wt, w);
        let eye = g.constant(Tensor::eye(n));
        let diff = g.sub(wtw, eye);
        Some(g.frobenius_sq(diff))
    }
}

/// How invariance is penalized for a categorical covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InvariancePenalty {
    Pairwise,
    Mmd,
}

/// Walks the covariate declarations and instantiates the loss terms, in
/// deterministic order: reconstruction, prediction, one term per covariate in
/// declaration order, then one orthogonality penalty per orthogonal morphism.
pub fn compile_terms(
    covs: &[CovariateSpec],
    weights: &LossWeights,
    penalties: &BTreeMap<String, InvariancePenalty>,
    bandwidth: BandwidthPolicy,
) -> Vec<Box<dyn LossTerm>> {
    let mut terms: Vec<Box<dyn LossTerm>> = Vec::new();
    if weights.lambda_r > 0.0 {
        terms.push(Box::new(ReconstructionTerm {
            weight: weights.lambda_r,
        }));
    }
    if weights.lambda_p > 0.0 {
        terms.push(Box::new(PredictionTerm {
            weight: weights.lambda_p,
        }));
    }
    for cov in covs {
        let w = weights.lambda_s * weights.covariate_weight(&cov.name);
        match cov.constraint {
            Constraint::Equivariance => terms.push(Box::new(StructureTerm {
                covariate: cov.name.clone(),
                weight: w,
            })),
            Constraint::Invariance => {
                match penalties
                    .get(&cov.name)
                    .copied()
                    .unwrap_or(InvariancePenalty::Pairwise)
                {
                    InvariancePenalty::Pairwise => terms.push(Box::new(InvarianceTerm {
                        covariate: cov.name.clone(),
                        weight: w,
                    })),
                    InvariancePenalty::Mmd => terms.push(Box::new(MmdTerm {
                        covariate: cov.name.clone(),
                        weight: w,
                        bandwidth,
                    })),
                }
            }
        }
    }
    for cov in covs {
        if cov.morphism.is_orthogonal() {
            terms.push(Box::new(OrthogonalityTerm {
                covariate: cov.name.clone(),
                weight: weights.mu_orth,
            }));
        }
    }
    terms
}

/// Value of one term after a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
}

/// Per-term diagnostics; `total` equals the weighted sum of the parts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub prediction: f64,
    pub structure: BTreeMap<String, f64>,
    pub orthogonality: f64,
    pub terms: Vec<TermValue>,
}

impl LossBreakdown {
    pub fn from_terms(terms: Vec<TermValue>) -> LossBreakdown {
        let mut b = LossBreakdown {
            terms: Vec::new(),
            ..Default::default()
        };
        for t in &terms {
            b.total += t.weight * t.raw;
            if t.name == "reconstruction" {
                b.reconstruction = t.raw;
            } else if t.name == "prediction" {
                b.prediction = t.raw;
            } else if let Some(cov) = t
                .name
                .strip_prefix("structure:")
                .or_else(|| t.name.strip_prefix("invariance:"))
                .or_else(|| t.name.strip_prefix("mmd:"))
            {
                b.structure.insert(cov.to_string(), t.raw);
            } else if t.name.starts_with("orthogonality:") {
                b.orthogonality += t.raw;
            }
        }
        b.terms = terms;
        b
    }
}

/// A loss graph ready to run: forward it, read the breakdown, backward it.
pub struct BuiltLoss {
    pub graph: Graph,
    pub total: NodeId,
    term_nodes: Vec<(String, f64, Option<NodeId>)>,
}

impl BuiltLoss {
    /// Reads per-term raw values after a forward pass.
    pub fn breakdown(&self) -> LossBreakdown {
        let terms = self
            .term_nodes
            .iter()
            .map(|(name, weight, node)| TermValue {
                name: name.clone(),
                raw: node
                    .and_then(|n| self.graph.value(n).map(|t| t.scalar_value()))
                    .unwrap_or(0.0),
                weight: *weight,
            })
            .collect();
        LossBreakdown::from_terms(terms)
    }
}

/// Assembles the full weighted loss graph for one batch: a shared encoder
/// pass over the encode-set rows, then every term in order.
pub fn build_loss_graph(
    bundle: &ModelBundle,
    terms: &[Box<dyn LossTerm>],
    batch: &BatchData,
) -> BuiltLoss {
    let mut g = Graph::new();
    let x = g.constant(batch.features.clone());
    let latents = bundle.encoder.build_graph(&mut g, x, "enc");
    let mut parts = GraphParts {
        x,
        latents,
        morphisms: BTreeMap::new(),
    };

    let mut term_nodes = Vec::new();
    let mut total: Option<NodeId> = None;
    for term in terms {
        let node = if term.weight() > 0.0 {
            term.build(&mut g, bundle, &mut parts, batch)
        } else {
            None
        };
        if let Some(n) = node {
            let weighted = g.scale(n, term.weight());
            total = Some(match total {
                Some(t) => g.add(t, weighted),
                None => weighted,
            });
        }
        term_nodes.push((term.name(), term.weight(), node));
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    g.set_output(total);
    BuiltLoss {
        graph: g,
        total,
        term_nodes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functors::{Activation, DecoderOutput, LatentSpec};
    use crate::tensor;

    fn empty_batch(features: Tensor, labels: Vec<usize>) -> BatchData {
        let base = (0..features.rows()).collect();
        BatchData {
            features,
            base,
            labels,
            pairs: BTreeMap::new(),
            groups: BTreeMap::new(),
        }
    }

    fn identity_autoencoder(p: usize) -> ModelBundle {
        let latent = LatentSpec::new(p, vec![], Activation::Tanh);
        let mut b = ModelBundle::init(&latent, p, 2, DecoderOutput::Linear, &[], 0);
        b.encoder.layers[0].w = Tensor::eye(p);
        b.encoder.layers[0].b = Tensor::zeros(vec![1, p]);
        b.decoder.layers[0].w = Tensor::eye(p);
        b.decoder.layers[0].b = Tensor::zeros(vec![1, p]);
        b
    }

    fn eval(bundle: &ModelBundle, terms: &[Box<dyn LossTerm>], batch: &BatchData) -> (f64, LossBreakdown) {
        let mut built = build_loss_graph(bundle, terms, batch);
        let total = built.graph.forward(&[]).unwrap().scalar_value();
        let bd = built.breakdown();
        (total, bd)
    }

    #[test]
    fn reconstruction_identity_fixture_is_zero() {
        let bundle = identity_autoencoder(3);
        let batch = empty_batch(
            Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap(),
            vec![0, 1],
        );
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(ReconstructionTerm { weight: 1.0 })];
        let (total, _) = eval(&bundle, &terms, &batch);
        assert!(total.abs() < 1e-30);
    }

    #[test]
    fn reconstruction_zero_decoder_is_mean_input_norm() {
        let mut bundle = identity_autoencoder(2);
        bundle.decoder.layers[0].w = Tensor::zeros(vec![2, 2]);
        // inputs with squared norms 1 and 4 -> mean 2.5
        let batch = empty_batch(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            vec![0, 1],
        );
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(ReconstructionTerm { weight: 1.0 })];
        let (total, _) = eval(&bundle, &terms, &batch);
        assert!((total - 2.5).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_matches_tensor_path_oracle() {
        let latent = LatentSpec::new(3, vec![4], Activation::Tanh);
        let bundle = ModelBundle::init(&latent, 5, 2, DecoderOutput::Linear, &[], 33);
        let x = Tensor::matrix(
            4,
            5,
            (0..20).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let batch = empty_batch(x.clone(), vec![0, 1, 0, 1]);
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(ReconstructionTerm { weight: 1.0 })];
        let (total, _) = eval(&bundle, &terms, &batch);
        // brute force: per-row decode(encode(s)), summed squared residuals
        let mut brute = 0.0;
        for r in 0..4 {
            let row = x.row(r).unwrap();
            let rec = bundle.decode(&bundle.encode(&row).unwrap()).unwrap();
            brute += tensor::frobenius_sq(&tensor::sub(&rec, &row).unwrap());
        }
        brute /= 4.0;
        assert!((total - brute).abs() < 1e-10);
    }

    #[test]
    fn prediction_uniform_is_ln2() {
        let latent = LatentSpec::new(2, vec![], Activation::Tanh);
        let mut bundle = ModelBundle::init(&latent, 2, 2, DecoderOutput::Linear, &[], 0);
        bundle.classifier.layers[0].w = Tensor::zeros(vec![2, 2]);
        let batch = empty_batch(
            Tensor::matrix(2, 2, vec![0.5, -0.5, 0.25, 0.75]).unwrap(),
            vec![0, 1],
        );
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(PredictionTerm { weight: 1.0 })];
        let (total, _) = eval(&bundle, &terms, &batch);
        assert!((total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn prediction_matches_neg_log_prob_oracle() {
        let latent = LatentSpec::new(3, vec![], Activation::Tanh);
        let bundle = ModelBundle::init(&latent, 3, 4, DecoderOutput::Linear, &[], 5);
        let x = Tensor::matrix(3, 3, vec![0.2, -0.1, 0.7, 0.0, 0.4, -0.9, 1.0, 0.3, 0.1]).unwrap();
        let labels = vec![2usize, 0, 3];
        let batch = empty_batch(x.clone(), labels.clone());
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(PredictionTerm { weight: 1.0 })];
        let (total, _) = eval(&bundle, &terms, &batch);
        let mut brute = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = bundle
                .classify(&bundle.encode(&x.row(r).unwrap()).unwrap())
                .unwrap();
            brute += -p.data()[y].ln();
        }
        brute /= labels.len() as f64;
        assert!((total - brute).abs() < 1e-10);
    }

    fn structure_batch(pairs: Vec<PairAt>, features: Tensor) -> BatchData {
        let mut b = empty_batch(features, vec![]);
        b.labels = vec![0; b.base.len()];
        b.pairs.insert("c".into(), pairs);
        b
    }

    /// Bundle with an identity encoder so latents equal features.
    fn latent_passthrough(n: usize, w: Tensor, orthogonal: bool) -> ModelBundle {
        let mut bundle = identity_autoencoder(n);
        bundle.morphisms.insert(
            "c".into(),
            crate::functors::Morphism {
                covariate: "c".into(),
                w,
                orthogonal,
                max_power: 64,
            },
        );
        bundle
    }

    #[test]
    fn structure_swap_matrix_hand_oracle() {
        // W = [[0,1],[1,0]], z_src = (1,0), z_dst = (0,1), exponent 1 -> 0
        let w = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let bundle = latent_passthrough(2, w, true);
        let features = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = structure_batch(
            vec![PairAt {
                src: 0,
                dst: 1,
                exponent: 1,
            }],
            features,
        );
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(StructureTerm {
            covariate: "c".into(),
            weight: 1.0,
        })];
        let (total, _) = eval(&bundle, &terms, &batch);
        assert!(total.abs() < 1e-30);
    }

    #[test]
    fn structure_zero_exponent_equals_invariance_bitwise() {
        let w = crate::functors::random_orthogonal(3, 8);
        let bundle = latent_passthrough(3, w, true);
        let features = Tensor::matrix(
            4,
            3,
            (0..12).map(|i| (i as f64 * 0.73).cos()).collect(),
        )
        .unwrap();
        let pairs = vec![
            PairAt { src: 0, dst: 1, exponent: 0 },
            PairAt { src: 2, dst: 3, exponent: 0 },
            PairAt { src: 1, dst: 3, exponent: 0 },
        ];
        let sbatch = structure_batch(pairs.clone(), features.clone());
        let sterm: Vec<Box<dyn LossTerm>> = vec![Box::new(StructureTerm {
            covariate: "c".into(),
            weight: 1.0,
        })];
        let (s, _) = eval(&bundle, &sterm, &sbatch);
        let iterm: Vec<Box<dyn LossTerm>> = vec![Box::new(InvarianceTerm {
            covariate: "c".into(),
            weight: 1.0,
        })];
        let (i, _) = eval(&bundle, &iterm, &sbatch);
        assert_eq!(s, i);
    }

    #[test]
    fn invariance_hand_values() {
        let bundle = latent_passthrough(2, Tensor::eye(2), true);
        // latents (0,0) and (3,4): squared distance 25
        let features = Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let batch = structure_batch(
            vec![PairAt { src: 0, dst: 1, exponent: 0 }],
            features,
        );
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(InvarianceTerm {
            covariate: "c".into(),
            weight: 1.0,
        })];
        let (total, _) = eval(&bundle, &terms, &batch);
        assert!((total - 25.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_term_groups_and_symmetry() {
        let bundle = identity_autoencoder(1);
        let features = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let mut batch = empty_batch(features, vec![0, 0]);
        batch
            .groups
            .insert("c".into(), vec![vec![0], vec![1]]);
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(MmdTerm {
            covariate: "c".into(),
            weight: 1.0,
            bandwidth: BandwidthPolicy::Fixed(1.0),
        })];
        let (total, _) = eval(&bundle, &terms, &batch);
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_term_matches_residual() {
        let w = Tensor::matrix(2, 2, vec![1.1, 0.2, -0.3, 0.9]).unwrap();
        let bundle = latent_passthrough(2, w, true);
        let batch = empty_batch(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), vec![0]);
        let terms: Vec<Box<dyn LossTerm>> = vec![Box::new(OrthogonalityTerm {
            covariate: "c".into(),
            weight: 1.0,
        })];
        let (total, _) = eval(&bundle, &terms, &batch);
        let expected = bundle.morphism("c").unwrap().orthogonality_residual();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum_of_parts() {
        let latent = LatentSpec::new(3, vec![4], Activation::Tanh);
        let mut bundle = ModelBundle::init(&latent, 4, 2, DecoderOutput::Linear, &[], 77);
        bundle.morphisms.insert(
            "age".into(),
            crate::functors::Morphism::init("age", 3, true, 7),
        );
        let features = Tensor::matrix(
            4,
            4,
            (0..16).map(|i| (i as f64 * 0.31).sin()).collect(),
        )
        .unwrap();
        let mut batch = empty_batch(features, vec![0, 1, 1, 0]);
        batch.pairs.insert(
            "age".into(),
            vec![
                PairAt { src: 0, dst: 1, exponent: 1 },
                PairAt { src: 2, dst: 3, exponent: 2 },
            ],
        );
        let weights = LossWeights {
            lambda_r: 0.7,
            lambda_p: 1.3,
            lambda_s: 1.0,
            lambda_per_covariate: BTreeMap::from([("age".to_string(), 0.05)]),
            mu_orth: 0.2,
        };
        let covs = vec![CovariateSpec {
            name: "age".into(),
            kind: crate::pairing::CovariateKind::Ordinal,
            column: crate::pairing::ColumnRef::Named { name: "age".into() },
            bins: crate::pairing::BinRule::Width(10.0),
            constraint: Constraint::Equivariance,
            morphism: crate::pairing::MorphismSpec::Orthogonal(3),
        }];
        let terms = compile_terms(&covs, &weights, &BTreeMap::new(), BandwidthPolicy::Median);
        assert_eq!(terms.len(), 4); // recon, pred, structure, orthogonality
        let (total, bd) = eval(&bundle, &terms, &batch);
        let recomposed: f64 = bd.terms.iter().map(|t| t.weight * t.raw).sum();
        assert!((total - recomposed).abs() < 1e-10);
        assert!((bd.total - total).abs() < 1e-10);
        assert!(total > 0.0);
    }

    #[test]
    fn compile_term_count_invariant() {
        let mk = |name: &str, constraint, morphism| CovariateSpec {
            name: name.into(),
            kind: if constraint == Constraint::Invariance {
                crate::pairing::CovariateKind::Categorical
            } else {
                crate::pairing::CovariateKind::Ordinal
            },
            column: crate::pairing::ColumnRef::Named { name: name.into() },
            bins: if constraint == Constraint::Invariance {
                crate::pairing::BinRule::Enumerate
            } else {
                crate::pairing::BinRule::Width(10.0)
            },
            constraint,
            morphism,
        };
        let covs = vec![
            mk("scanner", Constraint::Invariance, crate::pairing::MorphismSpec::None),
            mk(
                "age",
                Constraint::Equivariance,
                crate::pairing::MorphismSpec::Orthogonal(8),
            ),
        ];
        let weights = LossWeights {
            lambda_r: 0.0,
            lambda_p: 1.0,
            ..Default::default()
        };
        let terms = compile_terms(&covs, &weights, &BTreeMap::new(), BandwidthPolicy::Median);
        // prediction, invariance, structure, orthogonality
        assert_eq!(terms.len(), 4);
        let names: Vec<String> = terms.iter().map(|t| t.name()).collect();
        assert_eq!(
            names,
            vec![
                "prediction",
                "invariance:scanner",
                "structure:age",
                "orthogonality:age"
            ]
        );
    }

    #[test]
    fn five_covariate_plan_term_count() {
        // 1 prediction + 5 structure + 5 orthogonality
        let covs: Vec<CovariateSpec> = (0..5)
            .map(|i| CovariateSpec {
                name: format!("c{i}"),
                kind: crate::pairing::CovariateKind::Ordinal,
                column: crate::pairing::ColumnRef::Named {
                    name: format!("c{i}"),
                },
                bins: crate::pairing::BinRule::Width(10.0),
                constraint: Constraint::Equivariance,
                morphism: crate::pairing::MorphismSpec::Orthogonal(8),
            })
            .collect();
        let weights = LossWeights {
            lambda_r: 0.0,
            lambda_p: 1.0,
            ..Default::default()
        };
        let terms = compile_terms(&covs, &weights, &BTreeMap::new(), BandwidthPolicy::Median);
        assert_eq!(terms.len(), 11);
    }

    #[test]
    fn weights_validation() {
        let zero = LossWeights {
            lambda_r: 0.0,
            lambda_p: 0.0,
            lambda_s: 0.0,
            lambda_per_covariate: BTreeMap::new(),
            mu_orth: 0.0,
        };
        assert!(matches!(zero.validate(), Err(ObjectiveError::AllWeightsZero)));
        let neg = LossWeights {
            lambda_r: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            neg.validate(),
            Err(ObjectiveError::NegativeWeight { .. })
        ));
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn losses_gradcheck_through_full_objective() {
        let latent = LatentSpec::new(3, vec![4], Activation::Tanh);
        let mut bundle = ModelBundle::init(&latent, 4, 2, DecoderOutput::Sigmoid, &[], 13);
        bundle.morphisms.insert(
            "g".into(),
            crate::functors::Morphism::init("g", 3, true, 3),
        );
        let features = Tensor::matrix(
            4,
            4,
            (0..16).map(|i| 0.5 + 0.4 * (i as f64 * 0.17).sin()).collect(),
        )
        .unwrap();
        let mut batch = empty_batch(features, vec![0, 1, 1, 0]);
        batch.pairs.insert(
            "g".into(),
            vec![
                PairAt { src: 0, dst: 2, exponent: 1 },
                PairAt { src: 1, dst: 3, exponent: 0 },
            ],
        );
        batch
            .groups
            .insert("g".into(), vec![vec![0, 1], vec![2, 3]]);
        let terms: Vec<Box<dyn LossTerm>> = vec![
            Box::new(ReconstructionTerm { weight: 1.0 }),
            Box::new(PredictionTerm { weight: 1.0 }),
            Box::new(StructureTerm {
                covariate: "g".into(),
                weight: 0.5,
            }),
            Box::new(MmdTerm {
                covariate: "g".into(),
                weight: 0.3,
                bandwidth: BandwidthPolicy::Fixed(1.0),
            }),
            Box::new(OrthogonalityTerm {
                covariate: "g".into(),
                weight: 0.1,
            }),
        ];
        let mut built = build_loss_graph(&bundle, &terms, &batch);
        let report = crate::graph::grad_check(&mut built.graph, &[], 5, 1e-5).unwrap();
        assert!(report.pass(), "{:#?}", report.entries);
    }
}
