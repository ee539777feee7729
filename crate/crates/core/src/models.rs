//! Differentiable desk-scale models with per-sample gradients.
//!
//! Every model is a feed-forward stack of fully connected layers. Layer `l`
//! owns an `outputs × (1 + inputs)` block of the flat parameter vector,
//! stored row-major with the bias in column 0, so the layer acts on the
//! augmented input `[1, h]`. The per-sample gradient of that block is
//! `δ ⊗ [1, h]` in the same row-major order, which makes the K-FAC block of
//! a layer `G ⊗ A`.
//!
//! Three output heads are supported: softmax cross-entropy over `C ≥ 2`
//! logits, scalar least squares `½(z − y)²`, and scalar logistic regression
//! with binary cross-entropy. Reverse mode runs per sample over the fixed
//! layer graph; forward mode (for Fisher-vector products) does the same.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} of sample {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("{0} is not supported for this model kind")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    MlpSoftmaxCe,
    LinearLeastSquares,
    LogisticBinary,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::MlpSoftmaxCe => "mlp-softmax-ce",
            ModelKind::LinearLeastSquares => "linear-least-squares",
            ModelKind::LogisticBinary => "logistic-binary",
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, ModelKind::LinearLeastSquares)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp-softmax-ce" => Ok(ModelKind::MlpSoftmaxCe),
            "linear-least-squares" => Ok(ModelKind::LinearLeastSquares),
            "logistic-binary" => Ok(ModelKind::LogisticBinary),
            other => Err(ModelError::InvalidSpec(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU subgradient at 0 is 0.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(ModelError::InvalidSpec(format!("unknown activation `{other}`"))),
        }
    }
}

/// Position of one fully connected layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerLayout {
    pub offset: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerLayout {
    /// Width of a parameter row: bias plus one weight per input.
    pub fn row_len(&self) -> usize {
        self.inputs + 1
    }

    pub fn len(&self) -> usize {
        self.outputs * self.row_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Architecture of a model: `widths = [d, h1, …, out]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    kind: ModelKind,
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerLayout>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, widths: Vec<usize>, activation: Activation) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::InvalidSpec("need at least input and output widths".into()));
        }
        if widths.contains(&0) {
            return Err(ModelError::InvalidSpec("layer widths must be positive".into()));
        }
        let out = *widths.last().unwrap();
        match kind {
            ModelKind::MlpSoftmaxCe if out < 2 => {
                return Err(ModelError::InvalidSpec("softmax cross-entropy needs at least 2 classes".into()))
            }
            ModelKind::LinearLeastSquares | ModelKind::LogisticBinary if out != 1 => {
                return Err(ModelError::InvalidSpec(format!("{kind} has exactly one output, got {out}")))
            }
            _ => {}
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let layer = LayerLayout { offset, inputs: pair[0], outputs: pair[1] };
            offset += layer.len();
            layers.push(layer);
        }
        Ok(Self { kind, widths, activation, layers })
    }

    /// Softmax cross-entropy MLP with ReLU hidden layers.
    pub fn mlp(widths: Vec<usize>) -> Result<Self, ModelError> {
        Self::new(ModelKind::MlpSoftmaxCe, widths, Activation::Relu)
    }

    /// Linear least squares on `d` inputs (bias included).
    pub fn linear(inputs: usize) -> Self {
        Self::new(ModelKind::LinearLeastSquares, vec![inputs, 1], Activation::Identity).expect("valid linear spec")
    }

    /// Logistic regression on `d` inputs (bias included).
    pub fn logistic(inputs: usize) -> Self {
        Self::new(ModelKind::LogisticBinary, vec![inputs, 1], Activation::Identity).expect("valid logistic spec")
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Width of the model output `z` (logits for softmax, 1 otherwise).
    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of label classes: `C` for softmax, 2 for logistic, 1 for regression.
    pub fn num_classes(&self) -> usize {
        match self.kind {
            ModelKind::MlpSoftmaxCe => self.output_dim(),
            ModelKind::LogisticBinary => 2,
            ModelKind::LinearLeastSquares => 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.last().map(|l| l.offset + l.len()).unwrap_or(0)
    }

    /// Stable textual form used for hashing and manifests.
    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!("kind={};widths={};activation={}", self.kind, widths.join(","), self.activation.as_str())
    }

    /// First 8 bytes (little endian) of the SHA-256 of [`Self::canonical`].
    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}

/// Flat parameter vector `θ ∈ ℝ^P`, laid out by [`ModelSpec::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(DenseVector);

impl ParameterVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self(DenseVector::zeros(spec.num_params()))
    }

    pub fn from_vec(spec: &ModelSpec, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != spec.num_params() {
            return Err(ModelError::ShapeMismatch {
                what: "parameter vector",
                expected: spec.num_params(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidSpec("parameters must be finite".into()));
        }
        Ok(Self(DenseVector::from_vec(values)))
    }

    /// Glorot-uniform weights `U(±√(6/(fan_in+fan_out)))`, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; spec.num_params()];
        for layer in spec.layers() {
            let limit = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for row in 0..layer.outputs {
                let start = layer.offset + row * layer.row_len();
                for v in &mut values[start + 1..start + layer.row_len()] {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        Self(DenseVector::from_vec(values))
    }

    pub fn as_vector(&self) -> &DenseVector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DenseVector {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `θ − step·direction`.
    pub fn stepped(&self, direction: &DenseVector, step: f64) -> Self {
        Self(&self.0 - direction * step)
    }

    /// Unchecked construction; the caller guarantees the length.
    pub fn from_vector_unchecked(values: DenseVector) -> Self {
        Self(values)
    }
}

/// Supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Class ids in `[0, C)`; logistic models use `{0, 1}`.
    Classes(Vec<usize>),
    /// Real-valued regression targets.
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` input rows plus their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, targets: Targets) -> Result<Self, ModelError> {
        if inputs.nrows() == 0 {
            return Err(ModelError::InvalidSpec("a batch needs at least one sample".into()));
        }
        if targets.len() != inputs.nrows() {
            return Err(ModelError::ShapeMismatch { what: "targets", expected: inputs.nrows(), got: targets.len() });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_row(&self, n: usize) -> Vec<f64> {
        self.inputs.row(n).iter().copied().collect()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.ncols();
        let inputs = DenseMatrix::from_fn(indices.len(), d, |i, j| self.inputs[(indices[i], j)]);
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(indices.iter().map(|&i| v[i]).collect()),
        };
        Batch { inputs, targets }
    }

    /// The same inputs with replaced class targets.
    pub fn with_classes(&self, labels: Vec<usize>) -> Batch {
        Batch { inputs: self.inputs.clone(), targets: Targets::Classes(labels) }
    }
}

/// Forward outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `N × out` model outputs.
    pub logits: DenseMatrix,
    pub losses: DenseVector,
    /// `N × C` class probabilities (classification kinds only).
    pub probs: Option<DenseMatrix>,
}

/// Everything the exact preconditioners need from one batch at one `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLinearization {
    pub losses: DenseVector,
    /// `N × P` per-sample gradients, row `n` = `∇θ l_n`.
    pub jacobian: DenseMatrix,
    /// `s_n = ‖∇_{z_n} l_n‖²`.
    pub sief: DenseVector,
    /// `g = Jᵀ1`.
    pub total_grad: DenseVector,
    pub probs: Option<DenseMatrix>,
    pub logits: DenseMatrix,
}

impl BatchLinearization {
    pub fn num_samples(&self) -> usize {
        self.jacobian.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.jacobian.ncols()
    }

    pub fn total_loss(&self) -> f64 {
        self.losses.sum()
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.jacobian.row_iter().map(|r| r.norm()).collect()
    }
}

// ---------------------------------------------------------------------------
// per-sample machinery

/// Cached forward pass for one sample.
struct Trace {
    /// Augmented input `[1, h_l]` of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one is the output `z`.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

fn forward_sample(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Trace {
    let n_layers = spec.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h: Vec<f64> = x.to_vec();
    for (l, layer) in spec.layers.iter().enumerate() {
        let mut aug = Vec::with_capacity(layer.row_len());
        aug.push(1.0);
        aug.extend_from_slice(&h);
        let w = &theta[layer.range()];
        let mut out = vec![0.0; layer.outputs];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &w[i * layer.row_len()..(i + 1) * layer.row_len()];
            *o = row.iter().zip(&aug).map(|(a, b)| a * b).sum();
        }
        h = if l + 1 < n_layers { out.iter().map(|&v| spec.activation.apply(v)).collect() } else { Vec::new() };
        inputs.push(aug);
        pre.push(out);
    }
    Trace { inputs, pre }
}

/// `δ_l = ∂(dzᵀz)/∂pre_l` for every layer, given the output cotangent `dz`.
fn backward_deltas(spec: &ModelSpec, theta: &[f64], trace: &Trace, dz: &[f64]) -> Vec<Vec<f64>> {
    let n_layers = spec.layers.len();
    let mut deltas = vec![Vec::new(); n_layers];
    deltas[n_layers - 1] = dz.to_vec();
    for l in (1..n_layers).rev() {
        let layer = &spec.layers[l];
        let w = &theta[layer.range()];
        let delta = &deltas[l];
        let mut below = vec![0.0; layer.inputs];
        for (i, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[i * layer.row_len() + 1..(i + 1) * layer.row_len()];
            for (b, &wij) in below.iter_mut().zip(row) {
                *b += d * wij;
            }
        }
        for (b, &p) in below.iter_mut().zip(&trace.pre[l - 1]) {
            *b *= spec.activation.derivative(p);
        }
        deltas[l - 1] = below;
    }
    deltas
}

/// Writes `∇θ (dzᵀ z)` into `out` (length P, overwritten).
fn gradient_from_deltas(spec: &ModelSpec, trace: &Trace, deltas: &[Vec<f64>], out: &mut [f64]) {
    for (l, layer) in spec.layers.iter().enumerate() {
        let a = &trace.inputs[l];
        let block = &mut out[layer.range()];
        for (i, &d) in deltas[l].iter().enumerate() {
            let row = &mut block[i * layer.row_len()..(i + 1) * layer.row_len()];
            for (r, &aj) in row.iter_mut().zip(a) {
                *r = d * aj;
            }
        }
    }
}

fn vjp(spec: &ModelSpec, theta: &[f64], trace: &Trace, dz: &[f64]) -> Vec<f64> {
    let deltas = backward_deltas(spec, theta, trace, dz);
    let mut out = vec![0.0; spec.num_params()];
    gradient_from_deltas(spec, trace, &deltas, &mut out);
    out
}

/// Forward-mode product `(∂z/∂θ) v`.
fn jvp(spec: &ModelSpec, theta: &[f64], trace: &Trace, v: &[f64]) -> Vec<f64> {
    let n_layers = spec.layers.len();
    // tangent of the (non-augmented) layer input
    let mut dh = vec![0.0; spec.input_dim()];
    let mut dz = Vec::new();
    for (l, layer) in spec.layers.iter().enumerate() {
        let w = &theta[layer.range()];
        let dw = &v[layer.range()];
        let a = &trace.inputs[l];
        let mut dpre = vec![0.0; layer.outputs];
        for (i, o) in dpre.iter_mut().enumerate() {
            let span = i * layer.row_len()..(i + 1) * layer.row_len();
            let from_weights: f64 = dw[span.clone()].iter().zip(a).map(|(x, y)| x * y).sum();
            let from_input: f64 = w[span][1..].iter().zip(&dh).map(|(x, y)| x * y).sum();
            *o = from_weights + from_input;
        }
        if l + 1 < n_layers {
            dh = dpre.iter().zip(&trace.pre[l]).map(|(d, &p)| d * spec.activation.derivative(p)).collect();
        } else {
            dz = dpre;
        }
    }
    dz
}

/// Loss head evaluated at one output.
struct HeadEval {
    loss: f64,
    /// `∇_z l`.
    dz: Vec<f64>,
    /// Class probabilities (empty for regression).
    probs: Vec<f64>,
}

fn softmax(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    (z.iter().map(|v| (v - lse).exp()).collect(), lse)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

enum Target {
    Class(usize),
    Value(f64),
}

fn target_of(batch: &Batch, n: usize) -> Target {
    match &batch.targets {
        Targets::Classes(c) => Target::Class(c[n]),
        Targets::Values(v) => Target::Value(v[n]),
    }
}

fn head(kind: ModelKind, z: &[f64], target: &Target) -> HeadEval {
    match (kind, target) {
        (ModelKind::MlpSoftmaxCe, Target::Class(y)) => {
            let (p, lse) = softmax(z);
            let mut dz = p.clone();
            dz[*y] -= 1.0;
            HeadEval { loss: lse - z[*y], dz, probs: p }
        }
        (ModelKind::LogisticBinary, Target::Class(y)) => {
            let p = sigmoid(z[0]);
            let yf = *y as f64;
            HeadEval { loss: softplus(z[0]) - yf * z[0], dz: vec![p - yf], probs: vec![1.0 - p, p] }
        }
        (ModelKind::LinearLeastSquares, Target::Value(y)) => {
            let r = z[0] - y;
            HeadEval { loss: 0.5 * r * r, dz: vec![r], probs: Vec::new() }
        }
        _ => unreachable!("targets validated before evaluation"),
    }
}

/// `∇²_z l · u`, which does not depend on the label for any supported head.
fn head_hessian_product(kind: ModelKind, z: &[f64], u: &[f64]) -> Vec<f64> {
    match kind {
        ModelKind::MlpSoftmaxCe => {
            let (p, _) = softmax(z);
            let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
        }
        ModelKind::LogisticBinary => {
            let p = sigmoid(z[0]);
            vec![p * (1.0 - p) * u[0]]
        }
        ModelKind::LinearLeastSquares => u.to_vec(),
    }
}

/// Checks that `θ`, inputs and targets agree with `spec`.
pub fn check_shapes(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch) -> Result<(), ModelError> {
    if theta.len() != spec.num_params() {
        return Err(ModelError::ShapeMismatch { what: "parameter vector", expected: spec.num_params(), got: theta.len() });
    }
    if batch.inputs.ncols() != spec.input_dim() {
        return Err(ModelError::ShapeMismatch {
            what: "input features",
            expected: spec.input_dim(),
            got: batch.inputs.ncols(),
        });
    }
    match (&batch.targets, spec.kind) {
        (Targets::Classes(labels), kind) if kind.is_classification() => {
            let classes = spec.num_classes();
            if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(ModelError::LabelOutOfRange { index, label, classes });
            }
            Ok(())
        }
        (Targets::Values(_), ModelKind::LinearLeastSquares) => Ok(()),
        _ => Err(ModelError::InvalidSpec(format!("targets do not match model kind {}", spec.kind))),
    }
}

/// Per-sample results computed in parallel, gathered in sample order.
fn per_sample<T: Send>(batch: &Batch, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..batch.len()).into_par_iter().map(f).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])
}

// ---------------------------------------------------------------------------
// public operations

/// Outputs, per-sample losses and class probabilities.
pub fn forward(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch) -> Result<ForwardOutput, ModelError> {
    check_shapes(spec, theta, batch)?;
    let th = theta.as_slice();
    let evals = per_sample(batch, |n| {
        let trace = forward_sample(spec, th, &batch.input_row(n));
        let h = head(spec.kind, trace.output(), &target_of(batch, n));
        (trace.output().to_vec(), h)
    });
    let logits = rows_to_matrix(&evals.iter().map(|(z, _)| z.clone()).collect::<Vec<_>>(), spec.output_dim());
    let losses = DenseVector::from_iterator(evals.len(), evals.iter().map(|(_, h)| h.loss));
    let probs = spec
        .kind
        .is_classification()
        .then(|| rows_to_matrix(&evals.iter().map(|(_, h)| h.probs.clone()).collect::<Vec<_>>(), spec.num_classes()));
    Ok(ForwardOutput { logits, losses, probs })
}

/// Sum of per-sample losses.
pub fn total_loss(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch) -> Result<f64, ModelError> {
    Ok(forward(spec, theta, batch)?.losses.sum())
}

/// Per-sample gradients, logits-gradient norms and the total gradient.
pub fn batch_linearize(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
) -> Result<BatchLinearization, ModelError> {
    check_shapes(spec, theta, batch)?;
    let th = theta.as_slice();
    let p = spec.num_params();
    let evals = per_sample(batch, |n| {
        let trace = forward_sample(spec, th, &batch.input_row(n));
        let h = head(spec.kind, trace.output(), &target_of(batch, n));
        let grad = vjp(spec, th, &trace, &h.dz);
        let s = h.dz.iter().map(|v| v * v).sum::<f64>();
        (trace.output().to_vec(), h, grad, s)
    });
    let n = evals.len();
    let jacobian = DenseMatrix::from_fn(n, p, |i, j| evals[i].2[j]);
    let mut total_grad = DenseVector::zeros(p);
    for (_, _, grad, _) in &evals {
        for (t, g) in total_grad.iter_mut().zip(grad) {
            *t += g;
        }
    }
    let logits = rows_to_matrix(&evals.iter().map(|e| e.0.clone()).collect::<Vec<_>>(), spec.output_dim());
    let probs = spec
        .kind
        .is_classification()
        .then(|| rows_to_matrix(&evals.iter().map(|e| e.1.probs.clone()).collect::<Vec<_>>(), spec.num_classes()));
    Ok(BatchLinearization {
        losses: DenseVector::from_iterator(n, evals.iter().map(|e| e.1.loss)),
        jacobian,
        sief: DenseVector::from_iterator(n, evals.iter().map(|e| e.3)),
        total_grad,
        probs,
        logits,
    })
}

/// Exact Fisher-vector product through the generalised Gauss-Newton form
/// `Σ_n J_{z,n}ᵀ (∇²_z l_n) J_{z,n} v`.
pub fn fisher_vector_product(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    v: &DenseVector,
) -> Result<DenseVector, ModelError> {
    check_shapes(spec, theta, batch)?;
    if v.len() != spec.num_params() {
        return Err(ModelError::ShapeMismatch { what: "tangent vector", expected: spec.num_params(), got: v.len() });
    }
    let th = theta.as_slice();
    let vs = v.as_slice();
    let parts = per_sample(batch, |n| {
        let trace = forward_sample(spec, th, &batch.input_row(n));
        let jv = jvp(spec, th, &trace, vs);
        let hjv = head_hessian_product(spec.kind, trace.output(), &jv);
        vjp(spec, th, &trace, &hjv)
    });
    let mut out = DenseVector::zeros(spec.num_params());
    for part in &parts {
        for (o, x) in out.iter_mut().zip(part) {
            *o += x;
        }
    }
    Ok(out)
}

/// Output Jacobian `∂z_n/∂θ` (`out × P`) for sample `n`, one backward pass per output.
pub fn output_jacobian(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    n: usize,
) -> Result<DenseMatrix, ModelError> {
    check_shapes(spec, theta, batch)?;
    let th = theta.as_slice();
    let trace = forward_sample(spec, th, &batch.input_row(n));
    let out = spec.output_dim();
    let rows: Vec<Vec<f64>> = (0..out)
        .map(|c| {
            let mut e = vec![0.0; out];
            e[c] = 1.0;
            vjp(spec, th, &trace, &e)
        })
        .collect();
    Ok(rows_to_matrix(&rows, spec.num_params()))
}

/// `∇θ log p_n(c)` for every class `c` of sample `n`, with the class probabilities.
pub fn class_log_prob_gradients(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    n: usize,
) -> Result<(Vec<f64>, Vec<DenseVector>), ModelError> {
    check_shapes(spec, theta, batch)?;
    if !spec.kind.is_classification() {
        return Err(ModelError::Unsupported("class enumeration"));
    }
    let th = theta.as_slice();
    let trace = forward_sample(spec, th, &batch.input_row(n));
    let classes = spec.num_classes();
    let probs = head(spec.kind, trace.output(), &Target::Class(0)).probs;
    let grads = (0..classes)
        .map(|c| {
            let h = head(spec.kind, trace.output(), &Target::Class(c));
            // ∇ log p(c) = −∇ l(c)
            let g = vjp(spec, th, &trace, &h.dz);
            DenseVector::from_iterator(g.len(), g.into_iter().map(|x| -x))
        })
        .collect();
    Ok((probs, grads))
}

/// Draws `ŷ_n ~ p_n` and returns the pseudo per-sample gradients `∇θ(−log p_n(ŷ_n))`.
pub fn sample_pseudo_gradients(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    seed: u64,
) -> Result<(Vec<usize>, DenseMatrix), ModelError> {
    check_shapes(spec, theta, batch)?;
    if !spec.kind.is_classification() {
        return Err(ModelError::Unsupported("label sampling"));
    }
    let out = forward(spec, theta, batch)?;
    let probs = out.probs.expect("classification kinds produce probabilities");
    let labels = sample_categorical_rows(&probs, seed);
    let pseudo = batch.with_classes(labels.clone());
    let lin = batch_linearize(spec, theta, &pseudo)?;
    Ok((labels, lin.jacobian))
}

/// Inverse-CDF sampling of one class per row of `probs`, sequentially from one seeded stream.
pub fn sample_categorical_rows(probs: &DenseMatrix, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = probs.ncols();
    (0..probs.nrows())
        .map(|n| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for c in 0..classes {
                acc += probs[(n, c)];
                if u < acc {
                    return c;
                }
            }
            // round-off: fall back to the last class with positive mass
            (0..classes).rev().find(|&c| probs[(n, c)] > 0.0).unwrap_or(classes - 1)
        })
        .collect()
}

/// Layer statistics for K-FAC: augmented inputs `[1, h]` (`N × (in+1)`) and
/// the loss gradients w.r.t. the layer pre-activations (`N × out`).
pub fn layer_statistics(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    layer: usize,
) -> Result<(DenseMatrix, DenseMatrix), ModelError> {
    check_shapes(spec, theta, batch)?;
    let Some(info) = spec.layers.get(layer).copied() else {
        return Err(ModelError::ShapeMismatch { what: "layer index", expected: spec.layers.len(), got: layer });
    };
    let th = theta.as_slice();
    let rows = per_sample(batch, |n| {
        let trace = forward_sample(spec, th, &batch.input_row(n));
        let h = head(spec.kind, trace.output(), &target_of(batch, n));
        let deltas = backward_deltas(spec, th, &trace, &h.dz);
        (trace.inputs[layer].clone(), deltas[layer].clone())
    });
    let a = rows_to_matrix(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>(), info.row_len());
    let g = rows_to_matrix(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>(), info.outputs);
    Ok((a, g))
}

/// Central finite-difference gradient of `l_n`; test and self-check oracle.
pub fn finite_difference_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    n: usize,
    step: f64,
) -> Result<DenseVector, ModelError> {
    let single = batch.select(&[n]);
    let base = theta.as_vector();
    let mut grad = DenseVector::zeros(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let lp = total_loss(spec, &ParameterVector(plus), &single)?;
        let lm = total_loss(spec, &ParameterVector(minus), &single)?;
        grad[i] = (lp - lm) / (2.0 * step);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lls_toy() -> (ModelSpec, Batch) {
        let spec = ModelSpec::linear(1);
        let batch =
            Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 1.0]), Targets::Values(vec![0.0, 0.0])).unwrap();
        (spec, batch)
    }

    fn logistic_toy() -> (ModelSpec, Batch) {
        let spec = ModelSpec::logistic(1);
        let batch = Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 2.0]), Targets::Classes(vec![0, 1])).unwrap();
        (spec, batch)
    }

    fn random_mlp(seed: u64, widths: Vec<usize>, n: usize) -> (ModelSpec, ParameterVector, Batch) {
        let spec = ModelSpec::mlp(widths).unwrap();
        let theta = ParameterVector::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let d = spec.input_dim();
        let c = spec.num_classes();
        let inputs = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5));
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        (spec, theta, Batch::new(inputs, Targets::Classes(labels)).unwrap())
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::mlp(vec![3, 1]).is_err());
        assert!(ModelSpec::new(ModelKind::LinearLeastSquares, vec![3, 2], Activation::Identity).is_err());
        assert!(ModelSpec::mlp(vec![3, 0, 2]).is_err());
        assert!(ModelSpec::mlp(vec![3]).is_err());
        let spec = ModelSpec::mlp(vec![3, 5, 4]).unwrap();
        assert_eq!(spec.num_params(), 5 * 4 + 4 * 6);
        assert_eq!(spec.layers()[1].offset, 20);
    }

    #[test]
    fn lls_forward_losses() {
        let (spec, batch) = lls_toy();
        let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).unwrap();
        let out = forward(&spec, &theta, &batch).unwrap();
        assert_eq!(out.losses.as_slice(), &[0.5, 2.0]);
        assert!(out.probs.is_none());
    }

    #[test]
    fn zero_mlp_is_uniform() {
        let (spec, _, batch) = random_mlp(1, vec![3, 4, 5], 6);
        let theta = ParameterVector::zeros(&spec);
        let out = forward(&spec, &theta, &batch).unwrap();
        let probs = out.probs.unwrap();
        for n in 0..6 {
            assert!((out.losses[n] - 5f64.ln()).abs() < 1e-14);
            for c in 0..5 {
                assert!((probs[(n, c)] - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logistic_zero_logit() {
        let (spec, batch) = logistic_toy();
        let out = forward(&spec, &ParameterVector::zeros(&spec), &batch).unwrap();
        assert!((out.losses[0] - 2f64.ln()).abs() < 1e-15 && (out.losses[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.probs.unwrap()[(0, 1)], 0.5);
    }

    #[test]
    fn lls_toy_linearization() {
        let (spec, batch) = lls_toy();
        let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).unwrap();
        let lin = batch_linearize(&spec, &theta, &batch).unwrap();
        assert_eq!(lin.jacobian, DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 2.0]));
        assert_eq!(lin.sief.as_slice(), &[1.0, 4.0]);
        assert_eq!(lin.total_grad.as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn logistic_toy_linearization() {
        let (spec, batch) = logistic_toy();
        let lin = batch_linearize(&spec, &ParameterVector::zeros(&spec), &batch).unwrap();
        assert_eq!(lin.jacobian, DenseMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.5, -1.0]));
        assert_eq!(lin.sief.as_slice(), &[0.25, 0.25]);
        assert_eq!(lin.total_grad.as_slice(), &[0.0, -1.0]);
        for n in 0..2 {
            let fd = finite_difference_gradient(&spec, &ParameterVector::zeros(&spec), &batch, n, 1e-6).unwrap();
            let row: DenseVector = lin.jacobian.row(n).transpose();
            assert!((fd - row).amax() < 1e-8);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        for seed in 0..4 {
            let (spec, theta, batch) = random_mlp(seed, vec![3, 6, 5, 3], 4);
            let lin = batch_linearize(&spec, &theta, &batch).unwrap();
            for n in 0..batch.len() {
                let fd = finite_difference_gradient(&spec, &theta, &batch, n, 1e-6).unwrap();
                let row: DenseVector = lin.jacobian.row(n).transpose();
                let err = (&fd - &row).amax() / row.amax().max(1e-8);
                assert!(err < 1e-5, "seed {seed} sample {n}: relative error {err}");
            }
        }
    }

    #[test]
    fn sief_and_total_grad_consistency() {
        let (spec, theta, batch) = random_mlp(9, vec![4, 8, 3], 7);
        let lin = batch_linearize(&spec, &theta, &batch).unwrap();
        let probs = lin.probs.as_ref().unwrap();
        let Targets::Classes(labels) = &batch.targets else { unreachable!() };
        for n in 0..batch.len() {
            let mut expect = 0.0;
            for c in 0..3 {
                let e = if c == labels[n] { 1.0 } else { 0.0 };
                expect += (probs[(n, c)] - e).powi(2);
            }
            assert!((lin.sief[n] - expect).abs() < 1e-10);
            let row_sum: f64 = probs.row(n).sum();
            assert!((row_sum - 1.0).abs() < 1e-10);
        }
        let g = lin.jacobian.transpose() * DenseVector::from_element(batch.len(), 1.0);
        assert!((g - &lin.total_grad).amax() <= 1e-10 * lin.total_grad.amax());
    }

    #[test]
    fn lls_fisher_vector_product() {
        let (spec, batch) = lls_toy();
        let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).unwrap();
        let fv = fisher_vector_product(&spec, &theta, &batch, &DenseVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(fv.as_slice(), &[3.0, 2.0]);
        let zero = fisher_vector_product(&spec, &theta, &batch, &DenseVector::zeros(2)).unwrap();
        assert_eq!(zero.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn fvp_symmetric_psd() {
        let (spec, theta, batch) = random_mlp(21, vec![3, 5, 4], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let u = DenseVector::from_fn(spec.num_params(), |_, _| rng.random_range(-1.0..1.0));
            let v = DenseVector::from_fn(spec.num_params(), |_, _| rng.random_range(-1.0..1.0));
            let fu = fisher_vector_product(&spec, &theta, &batch, &u).unwrap();
            let fv = fisher_vector_product(&spec, &theta, &batch, &v).unwrap();
            assert!((u.dot(&fv) - v.dot(&fu)).abs() < 1e-8);
            assert!(v.dot(&fv) >= -1e-10);
        }
    }

    #[test]
    fn shape_errors() {
        let (spec, batch) = lls_toy();
        let bad = ParameterVector::from_vector_unchecked(DenseVector::zeros(3));
        assert!(matches!(forward(&spec, &bad, &batch), Err(ModelError::ShapeMismatch { .. })));
        let (mlp, theta, batch3) = random_mlp(2, vec![3, 4, 2], 2);
        let wrong = batch3.with_classes(vec![0, 5]);
        assert!(matches!(batch_linearize(&mlp, &theta, &wrong), Err(ModelError::LabelOutOfRange { .. })));
        assert!(sample_pseudo_gradients(&spec, &ParameterVector::zeros(&spec), &batch, 0).is_err());
    }

    #[test]
    fn uniform_sampling_golden() {
        let probs = DenseMatrix::from_element(12, 3, 1.0 / 3.0);
        let first = sample_categorical_rows(&probs, 42);
        assert_eq!(first, sample_categorical_rows(&probs, 42));
        assert!(first.iter().all(|&c| c < 3));
        assert_eq!(first, vec![2, 2, 1, 1, 0, 0, 0, 2, 2, 0, 1, 2]);
    }

    #[test]
    fn one_hot_sampling_reproduces_empirical_rows() {
        // a strongly confident logistic model: p(y=1|x=2) ≈ 1, p(y=0|x=0) ≈ 1
        let (spec, batch) = logistic_toy();
        let theta = ParameterVector::from_vec(&spec, vec![-800.0, 800.0]).unwrap();
        let (labels, jhat) = sample_pseudo_gradients(&spec, &theta, &batch, 3).unwrap();
        assert_eq!(labels, vec![0, 1]);
        let lin = batch_linearize(&spec, &theta, &batch).unwrap();
        assert_eq!(jhat, lin.jacobian);
    }

    #[test]
    fn sampling_frequency_within_binomial_bounds() {
        let n = 100_000;
        let probs = DenseMatrix::from_fn(n, 2, |_, c| if c == 0 { 0.3 } else { 0.7 });
        let labels = sample_categorical_rows(&probs, 2024);
        let ones = labels.iter().filter(|&&c| c == 1).count() as f64;
        let sigma = (n as f64 * 0.3 * 0.7).sqrt();
        assert!((ones - 0.7 * n as f64).abs() < 3.0 * sigma);
    }

    #[test]
    fn layer_statistics_rebuild_gradient() {
        let (spec, theta, batch) = random_mlp(4, vec![3, 4, 3], 3);
        let lin = batch_linearize(&spec, &theta, &batch).unwrap();
        for (l, layer) in spec.layers().iter().enumerate() {
            let (a, g) = layer_statistics(&spec, &theta, &batch, l).unwrap();
            for n in 0..batch.len() {
                for i in 0..layer.outputs {
                    for j in 0..layer.row_len() {
                        let expect = lin.jacobian[(n, layer.offset + i * layer.row_len() + j)];
                        assert!((g[(n, i)] * a[(n, j)] - expect).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::mlp(vec![10, 20, 3]).unwrap();
        let a = ParameterVector::init(&spec, 5);
        assert_eq!(a, ParameterVector::init(&spec, 5));
        assert_ne!(a, ParameterVector::init(&spec, 6));
        let limit = (6.0f64 / 30.0).sqrt();
        let first = spec.layers()[0];
        for i in 0..first.outputs {
            assert_eq!(a.as_slice()[first.offset + i * first.row_len()], 0.0);
        }
        assert!(a.as_slice()[..first.len()].iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn spec_hash_is_stable_and_distinguishing() {
        let a = ModelSpec::mlp(vec![4, 8, 3]).unwrap();
        let b = ModelSpec::mlp(vec![4, 8, 4]).unwrap();
        assert_eq!(a.hash64(), ModelSpec::mlp(vec![4, 8, 3]).unwrap().hash64());
        assert_ne!(a.hash64(), b.hash64());
    }
}
