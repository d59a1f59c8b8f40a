//! The learnable maps of the framework: an encoder/decoder pair, a
//! classifier head, and one square latent morphism matrix per equivariant
//! covariate. Integer morphism powers are repeated multiplications; fractional
//! powers of orthogonal morphisms go through the real Schur form (principal
//! branch, rotation blocks raised to the fractional angle).

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{fnv64, softmax_rows, Graph, NodeId};
use crate::tensor::{self, Tensor, TensorError};

/// Default cap on |d| for integer morphism powers.
pub const DEFAULT_MAX_POWER: i64 = 64;
/// Condition-number guard for explicit inverses of non-orthogonal morphisms.
pub const MAX_INVERSE_CONDITION: f64 = 1e8;

#[derive(Debug, Error)]
pub enum FunctorError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("morphism '{name}' is not invertible (condition number {cond:.3e} exceeds {limit:.1e})")]
    NonInvertibleMorphism { name: String, cond: f64, limit: f64 },
    #[error("power {d} exceeds the configured limit {max}")]
    PowerLimitExceeded { d: i64, max: i64 },
    #[error("fractional power requested on non-orthogonal morphism '{0}'")]
    FractionalPowerOnNonOrthogonal(String),
    #[error("Schur decomposition failed for morphism '{0}'")]
    DecompositionFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => tensor::tanh(t),
            Activation::Relu => tensor::relu(t),
            Activation::Sigmoid => tensor::sigmoid(t),
        }
    }

    pub fn apply_graph(&self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// Latent-space description: dimension, hidden widths of the encoder MLP,
/// hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub n: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl LatentSpec {
    pub fn new(n: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        LatentSpec {
            n,
            hidden,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Plain fully-connected network; hidden activation between layers, optional
/// output activation on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
    pub output_activation: Option<Activation>,
}

impl Mlp {
    /// Kaiming-uniform fan-in initialization, zero biases, seeded.
    pub fn init(
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Option<Activation>,
        seed: u64,
    ) -> Mlp {
        let mut layers = Vec::new();
        for (i, win) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(Layer {
                w: Tensor::from_raw(vec![fan_in, fan_out], data),
                b: Tensor::zeros(vec![1, fan_out]),
            });
        }
        Mlp {
            layers,
            hidden_activation,
            output_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.shape()[0]).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.shape()[1]).unwrap_or(0)
    }

    /// Inference: rows of `x` are samples.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, FunctorError> {
        if x.cols() != self.input_dim() {
            return Err(FunctorError::Dim {
                what: "mlp input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut h = if x.is_matrix() {
            x.clone()
        } else {
            x.clone().into_row()
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = tensor::matmul(&h, &layer.w)?;
            h = tensor::add(&h, &layer.b)?;
            if i < last {
                h = self.hidden_activation.apply(&h);
            } else if let Some(act) = &self.output_activation {
                h = act.apply(&h);
            }
        }
        Ok(h)
    }

    /// Builds the same computation on a graph, registering parameters as
    /// `{prefix}.w{i}` / `{prefix}.b{i}`. The graph ops delegate to the same
    /// tensor kernels as [`Mlp::forward`], so both paths agree bit-for-bit.
    pub fn build_graph(&self, g: &mut Graph, x: NodeId, prefix: &str) -> NodeId {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g
                .param(&format!("{prefix}.w{i}"), layer.w.clone())
                .expect("unique param names");
            let b = g
                .param(&format!("{prefix}.b{i}"), layer.b.clone())
                .expect("unique param names");
            h = g.matmul(h, w);
            h = g.add(h, b);
            if i < last {
                h = self.hidden_activation.apply_graph(g, h);
            } else if let Some(act) = &self.output_activation {
                h = act.apply_graph(g, h);
            }
        }
        h
    }

    /// Named parameter tensors, in layer order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.w{i}"), layer.w.clone()));
            out.push((format!("{prefix}.b{i}"), layer.b.clone()));
        }
        out
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> bool {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if name == format!("w{i}") {
                layer.w = value;
                return true;
            }
            if name == format!("b{i}") {
                layer.b = value;
                return true;
            }
        }
        false
    }
}

/// A learned latent morphism: one square matrix per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Morphism {
    pub covariate: String,
    pub w: Tensor,
    pub orthogonal: bool,
    pub max_power: i64,
}

impl Morphism {
    /// Near-identity initialization: W = I + eps * G with seeded gaussian G.
    pub fn init(covariate: &str, n: usize, orthogonal: bool, seed: u64) -> Morphism {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv64(covariate.as_bytes()));
        let eps = 0.01;
        let mut w = Tensor::eye(n);
        {
            let data = w.data_mut();
            for v in data.iter_mut() {
                // Box-Muller from two uniforms keeps us on the plain Rng API.
                let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let gauss = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += eps * gauss;
            }
        }
        Morphism {
            covariate: covariate.to_string(),
            w,
            orthogonal,
            max_power: DEFAULT_MAX_POWER,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    /// ||W^T W - I||_F^2.
    pub fn orthogonality_residual(&self) -> f64 {
        let n = self.dim();
        let wt = tensor::transpose(&self.w).expect("square");
        let wtw = tensor::matmul(&wt, &self.w).expect("square");
        let diff = tensor::sub(&wtw, &Tensor::eye(n)).expect("same shape");
        tensor::frobenius_sq(&diff)
    }

    /// W^d z for integer d, applied to row-latents (vector or m×n matrix).
    /// d = 0 returns the input unchanged. Negative powers use W^T when the
    /// morphism is orthogonal, otherwise an explicit inverse guarded by the
    /// condition number.
    pub fn apply(&self, d: i64, z: &Tensor) -> Result<Tensor, FunctorError> {
        if d.unsigned_abs() as i64 > self.max_power {
            return Err(FunctorError::PowerLimitExceeded {
                d,
                max: self.max_power,
            });
        }
        let n = self.dim();
        if z.cols() != n {
            return Err(FunctorError::Dim {
                what: "morphism input",
                expected: n,
                got: z.cols(),
            });
        }
        if d == 0 {
            return Ok(z.clone());
        }
        let m = self.power_int(d)?;
        // rows: (W^d z)^T = z^T (W^d)^T
        let mt = tensor::transpose(&m)?;
        let was_vector = !z.is_matrix();
        let zr = if was_vector {
            z.clone().into_row()
        } else {
            z.clone()
        };
        let out = tensor::matmul(&zr, &mt)?;
        Ok(if was_vector {
            Tensor::vector(out.data().to_vec())
        } else {
            out
        })
    }

    /// W^d as a matrix, integer d (repeated multiplication).
    pub fn power_int(&self, d: i64) -> Result<Tensor, FunctorError> {
        if d.unsigned_abs() as i64 > self.max_power {
            return Err(FunctorError::PowerLimitExceeded {
                d,
                max: self.max_power,
            });
        }
        let base = if d >= 0 {
            self.w.clone()
        } else if self.orthogonal {
            tensor::transpose(&self.w)?
        } else {
            self.guarded_inverse()?
        };
        let mut acc = Tensor::eye(self.dim());
        for _ in 0..d.unsigned_abs() {
            acc = tensor::matmul(&acc, &base)?;
        }
        Ok(acc)
    }

    fn guarded_inverse(&self) -> Result<Tensor, FunctorError> {
        let na = to_na(&self.w);
        let sv = na.clone().svd(false, false).singular_values;
        let (mut smax, mut smin) = (0.0f64, f64::INFINITY);
        for &s in sv.iter() {
            smax = smax.max(s);
            smin = smin.min(s);
        }
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if cond > MAX_INVERSE_CONDITION {
            return Err(FunctorError::NonInvertibleMorphism {
                name: self.covariate.clone(),
                cond,
                limit: MAX_INVERSE_CONDITION,
            });
        }
        log::warn!(
            "morphism '{}' is not orthogonal; using an explicit inverse (condition {:.3e})",
            self.covariate,
            cond
        );
        let inv = na
            .try_inverse()
            .ok_or_else(|| FunctorError::NonInvertibleMorphism {
                name: self.covariate.clone(),
                cond,
                limit: MAX_INVERSE_CONDITION,
            })?;
        Ok(from_na(&inv))
    }

    /// W^a for real a (principal power), orthogonal morphisms only.
    ///
    /// The integer part is exact repeated multiplication; the fractional part
    /// maps each Schur rotation block through angle*a and each real
    /// eigenvalue lambda to Re(lambda^a).
    pub fn power(&self, a: f64) -> Result<Tensor, FunctorError> {
        if !self.orthogonal && a.fract() != 0.0 {
            return Err(FunctorError::FractionalPowerOnNonOrthogonal(
                self.covariate.clone(),
            ));
        }
        let k = a.floor();
        let f = a - k;
        if k.abs() > self.max_power as f64 {
            return Err(FunctorError::PowerLimitExceeded {
                d: k as i64,
                max: self.max_power,
            });
        }
        let int_part = self.power_int(k as i64)?;
        if f == 0.0 {
            return Ok(int_part);
        }
        let frac_part = schur_fractional_power(&self.w, f)
            .ok_or_else(|| FunctorError::DecompositionFailed(self.covariate.clone()))?;
        Ok(tensor::matmul(&int_part, &frac_part)?)
    }

    /// Replaces W with the nearest orthogonal factor (QR with sign fix).
    pub fn retract_qr(&mut self) {
        let n = self.dim();
        let qr = to_na(&self.w).qr();
        let r = qr.r();
        let mut q = qr.q();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        self.w = from_na(&q);
    }
}

pub(crate) fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = (m.nrows(), m.ncols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_raw(vec![r, c], data)
}

/// Fractional power (exponent in (0,1)) through the real Schur form.
fn schur_fractional_power(w: &Tensor, f: f64) -> Option<Tensor> {
    let n = w.rows();
    let schur = nalgebra::linalg::Schur::try_new(to_na(w), 1e-13, 0)?;
    let (q, t) = schur.unpack();
    let mut tf = DMatrix::<f64>::zeros(n, n);
    let mut i = 0;
    while i < n {
        let is_block = i + 1 < n && t[(i + 1, i)].abs() > 1e-10;
        if !is_block {
            let lam = t[(i, i)];
            tf[(i, i)] = if lam >= 0.0 {
                lam.powf(f)
            } else {
                // principal branch: Re(|lam|^f e^{i pi f})
                lam.abs().powf(f) * (std::f64::consts::PI * f).cos()
            };
            i += 1;
        } else {
            let (t11, t12, t21, t22) = (t[(i, i)], t[(i, i + 1)], t[(i + 1, i)], t[(i + 1, i + 1)]);
            let p = 0.5 * (t11 + t22);
            let disc = 0.25 * (t11 - t22) * (t11 - t22) + t12 * t21;
            if disc < 0.0 {
                // complex pair r e^{+-i theta}; B^f = r^f (cos(f theta) I + sin(f theta)/q (B - p I))
                let qv = (-disc).sqrt();
                let r = (p * p + qv * qv).sqrt();
                let theta = qv.atan2(p);
                let (cf, sf) = ((f * theta).cos(), (f * theta).sin());
                let rf = r.powf(f);
                tf[(i, i)] = rf * (cf + sf / qv * (t11 - p));
                tf[(i, i + 1)] = rf * (sf / qv * t12);
                tf[(i + 1, i)] = rf * (sf / qv * t21);
                tf[(i + 1, i + 1)] = rf * (cf + sf / qv * (t22 - p));
            } else {
                // defensively diagonalize a real-eigenvalue 2x2 block
                let sq = disc.sqrt();
                for (bi, lam) in [(0, p + sq), (1, p - sq)] {
                    let v = if lam >= 0.0 {
                        lam.powf(f)
                    } else {
                        lam.abs().powf(f) * (std::f64::consts::PI * f).cos()
                    };
                    tf[(i + bi, i + bi)] = v;
                }
            }
            i += 2;
        }
    }
    let out = &q * tf * q.transpose();
    Some(from_na(&out))
}

/// Deterministic random orthogonal matrix (QR of a seeded gaussian, signs
/// fixed by the R diagonal).
pub fn random_orthogonal(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    let m = DMatrix::from_row_slice(n, n, &data);
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    from_na(&q)
}

/// How the decoder output is squashed: sigmoid for pixel data in [0,1],
/// identity for standardized tabular features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderOutput {
    Sigmoid,
    Linear,
}

/// Encoder, decoder, classifier parameters plus one morphism per equivariant
/// covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub latent: LatentSpec,
    pub input_dim: usize,
    pub n_classes: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
    pub morphisms: BTreeMap<String, Morphism>,
}

impl ModelBundle {
    pub fn init(
        latent: &LatentSpec,
        input_dim: usize,
        n_classes: usize,
        decoder_output: DecoderOutput,
        morphism_covs: &[(String, bool)],
        seed: u64,
    ) -> ModelBundle {
        let mut enc_dims = vec![input_dim];
        enc_dims.extend_from_slice(&latent.hidden);
        enc_dims.push(latent.n);
        let mut dec_dims = vec![latent.n];
        dec_dims.extend(latent.hidden.iter().rev());
        dec_dims.push(input_dim);
        let cls_dims = vec![latent.n, n_classes.max(1)];

        let encoder = Mlp::init(&enc_dims, latent.activation, None, seed ^ 0x656e63);
        let decoder = Mlp::init(
            &dec_dims,
            latent.activation,
            match decoder_output {
                DecoderOutput::Sigmoid => Some(Activation::Sigmoid),
                DecoderOutput::Linear => None,
            },
            seed ^ 0x646563,
        );
        let classifier = Mlp::init(&cls_dims, latent.activation, None, seed ^ 0x636c73);

        let mut morphisms = BTreeMap::new();
        for (name, orthogonal) in morphism_covs {
            morphisms.insert(name.clone(), Morphism::init(name, latent.n, *orthogonal, seed));
        }
        ModelBundle {
            latent: latent.clone(),
            input_dim,
            n_classes,
            encoder,
            decoder,
            classifier,
            morphisms,
        }
    }

    /// F: rows of `s` (features) to rows of latents.
    pub fn encode(&self, s: &Tensor) -> Result<Tensor, FunctorError> {
        self.encoder.forward(s)
    }

    /// F^{-1}: rows of latents back to feature space.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, FunctorError> {
        self.decoder.forward(z)
    }

    /// C after softmax: class probabilities per row.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor, FunctorError> {
        let logits = self.classifier.forward(z)?;
        Ok(softmax_rows(&logits))
    }

    pub fn morphism(&self, covariate: &str) -> Option<&Morphism> {
        self.morphisms.get(covariate)
    }

    /// Every named parameter tensor in deterministic (sorted) order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params("enc");
        out.extend(self.decoder.named_params("dec"));
        out.extend(self.classifier.named_params("cls"));
        for (name, m) in &self.morphisms {
            out.push((format!("mor.{name}"), m.w.clone()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Writes a named parameter back (inverse of [`Self::named_params`]).
    pub fn set_named_param(&mut self, name: &str, value: Tensor) -> bool {
        if let Some(rest) = name.strip_prefix("enc.") {
            return self.encoder.set_param(rest, value);
        }
        if let Some(rest) = name.strip_prefix("dec.") {
            return self.decoder.set_param(rest, value);
        }
        if let Some(rest) = name.strip_prefix("cls.") {
            return self.classifier.set_param(rest, value);
        }
        if let Some(rest) = name.strip_prefix("mor.") {
            if let Some(m) = self.morphisms.get_mut(rest) {
                m.w = value;
                return true;
            }
        }
        false
    }
}
