//! Candidate parameter updates.
//!
//! Every update returns the raw preconditioned direction; an optimiser applies
//! `θ ← θ − η·direction`. The exact EF and iEF updates are solved in sample
//! space through the Gram matrix `JJᵀ`, SF through the SMW identity, and NGD
//! either against an explicit Fisher or with linear CG on Fisher-vector
//! products.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::curvature::{self, CurvatureError};
use crate::linalg::{self, DenseMatrix, DenseVector, LinalgError};
use crate::models::{self, Batch, BatchLinearization, ModelError, ModelSpec, ParameterVector};

/// Rows whose gradient norm falls below this are treated as converged.
pub const DEGENERATE_ROW_NORM: f64 = 1e-12;

/// CG stops when `rᵀr` or `vᵀ(F+λI)v` drops to this level.
pub const CG_BREAKDOWN: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Curvature(#[from] CurvatureError),
    #[error("damping {lambda} is not allowed for {method}: {requirement}")]
    InvalidDamping { method: Method, lambda: f64, requirement: &'static str },
    #[error("every per-sample gradient is below {DEGENERATE_ROW_NORM}")]
    NoUsableRows,
    #[error("invalid update request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Sgd,
    Ef,
    Ief,
    Sf,
    NgdExact,
    NgdCg,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Sgd, Method::Ef, Method::Ief, Method::Sf, Method::NgdExact, Method::NgdCg];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Ef => "ef",
            Method::Ief => "ief",
            Method::Sf => "sf",
            Method::NgdExact => "ngd-exact",
            Method::NgdCg => "ngd-cg",
        }
    }

    /// Methods whose sample-space solve needs `λ > 0`.
    pub fn needs_positive_damping(self) -> bool {
        matches!(self, Method::Ef | Method::Ief | Method::Sf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = UpdateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UpdateError::InvalidRequest(format!("unknown method `{s}`")))
    }
}

/// Damping `λ`, either absolute or relative to `trace(JJᵀ)/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    Absolute(f64),
    TraceRelative(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::TraceRelative(1e-12)
    }
}

impl Damping {
    /// Absolute `λ` for a batch; the trace scale always comes from the empirical `J`.
    pub fn resolve(&self, lin: &BatchLinearization) -> f64 {
        self.resolve_with_scale(linalg::mean_row_sq_norm(&lin.jacobian))
    }

    pub fn resolve_with_scale(&self, trace_scale: f64) -> f64 {
        match *self {
            Damping::Absolute(lambda) => lambda,
            Damping::TraceRelative(factor) => factor * trace_scale,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Damping::Absolute(v) | Damping::TraceRelative(v) => v,
        }
    }
}

impl fmt::Display for Damping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Damping::Absolute(v) => write!(f, "{v:e}"),
            Damping::TraceRelative(v) => write!(f, "{v:e}*trace"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRequest {
    pub method: Method,
    pub damping: Damping,
    /// Iterations for `ngd-cg`.
    pub cg_iters: usize,
    /// Label-sampling seed for `sf`.
    pub seed: u64,
}

impl UpdateRequest {
    pub fn new(method: Method, damping: Damping) -> Self {
        Self { method, damping, cg_iters: 10, seed: 0 }
    }

    pub fn sgd() -> Self {
        Self::new(Method::Sgd, Damping::Absolute(0.0))
    }

    pub fn with_cg_iters(mut self, iters: usize) -> Self {
        self.cg_iters = iters;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A direction produced by one method; apply as `θ − η·direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub method: Method,
    pub direction: DenseVector,
    pub lambda: f64,
    /// Rows dropped before the solve because their gradient vanished.
    pub dropped_rows: Vec<usize>,
}

impl UpdateVector {
    fn new(method: Method, direction: DenseVector, lambda: f64) -> Result<Self, UpdateError> {
        if direction.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite.into());
        }
        Ok(Self { method, direction, lambda, dropped_rows: Vec::new() })
    }

    pub fn norm(&self) -> f64 {
        self.direction.norm()
    }
}

fn require_positive(method: Method, lambda: f64) -> Result<(), UpdateError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(UpdateError::InvalidDamping { method, lambda, requirement: "must be finite and > 0" })
    }
}

/// Indices of rows with `‖∇θ l_n‖ ≥ DEGENERATE_ROW_NORM`, and the rest.
pub fn split_degenerate_rows(jacobian: &DenseMatrix) -> (Vec<usize>, Vec<usize>) {
    (0..jacobian.nrows()).partition(|&n| jacobian.row(n).norm() >= DEGENERATE_ROW_NORM)
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn sample_space_update(
    method: Method,
    lin: &BatchLinearization,
    lambda: f64,
    target: impl Fn(usize) -> f64,
) -> Result<UpdateVector, UpdateError> {
    let (kept, dropped) = split_degenerate_rows(&lin.jacobian);
    if kept.is_empty() {
        return Err(UpdateError::NoUsableRows);
    }
    require_positive(method, lambda)?;
    let direction = if dropped.is_empty() {
        let rhs = DenseVector::from_fn(lin.num_samples(), |n, _| target(n));
        linalg::woodbury_solve(&lin.jacobian, &rhs, lambda)?
    } else {
        let j = select_rows(&lin.jacobian, &kept);
        let rhs = DenseVector::from_iterator(kept.len(), kept.iter().map(|&n| target(n)));
        linalg::woodbury_solve(&j, &rhs, lambda)?
    };
    let mut update = UpdateVector::new(method, direction, lambda)?;
    update.dropped_rows = dropped;
    Ok(update)
}

/// Plain gradient `g = Jᵀ1`.
pub fn sgd_update(lin: &BatchLinearization) -> UpdateVector {
    UpdateVector { method: Method::Sgd, direction: lin.total_grad.clone(), lambda: 0.0, dropped_rows: Vec::new() }
}

/// Exact EF update `Jᵀ(JJᵀ + λI)⁻¹1`.
pub fn ef_update(lin: &BatchLinearization, lambda: f64) -> Result<UpdateVector, UpdateError> {
    sample_space_update(Method::Ef, lin, lambda, |_| 1.0)
}

/// Exact iEF update `Jᵀ(JJᵀ + λI)⁻¹s`.
pub fn ief_update(lin: &BatchLinearization, lambda: f64) -> Result<UpdateVector, UpdateError> {
    sample_space_update(Method::Ief, lin, lambda, |n| lin.sief[n])
}

/// Sampled-Fisher update `(ĴᵀĴ + λI)⁻¹g` through SMW, never forming `ĴᵀĴ`.
pub fn sf_update(lin: &BatchLinearization, jhat: &DenseMatrix, lambda: f64) -> Result<UpdateVector, UpdateError> {
    if split_degenerate_rows(&lin.jacobian).0.is_empty() {
        return Err(UpdateError::NoUsableRows);
    }
    require_positive(Method::Sf, lambda)?;
    if jhat.ncols() != lin.num_params() {
        return Err(LinalgError::DimensionMismatch { expected: lin.num_params(), got: jhat.ncols() }.into());
    }
    let direction = linalg::smw_solve(jhat, &lin.total_grad, lambda)?;
    UpdateVector::new(Method::Sf, direction, lambda)
}

/// Exact NGD update `(F + λI)⁻¹g` against an explicit Fisher.
pub fn ngd_exact_update(fisher: &DenseMatrix, g: &DenseVector, lambda: f64) -> Result<UpdateVector, UpdateError> {
    if !(lambda >= 0.0) {
        return Err(UpdateError::InvalidDamping { method: Method::NgdExact, lambda, requirement: "must be >= 0" });
    }
    let (direction, used) = linalg::solve_spd_with_ridge(fisher, g, lambda)?;
    UpdateVector::new(Method::NgdExact, direction, used)
}

/// Products with a symmetric PSD curvature operator.
pub trait FisherProduct: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DenseVector) -> DenseVector;
}

impl FisherProduct for DenseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &DenseVector) -> DenseVector {
        self * v
    }
}

/// Exact Fisher of a model on one batch, applied through forward/reverse passes.
#[derive(Debug, Clone, Copy)]
pub struct ModelFisher<'a> {
    spec: &'a ModelSpec,
    theta: &'a ParameterVector,
    batch: &'a Batch,
}

impl<'a> ModelFisher<'a> {
    pub fn new(spec: &'a ModelSpec, theta: &'a ParameterVector, batch: &'a Batch) -> Result<Self, ModelError> {
        models::check_shapes(spec, theta, batch)?;
        Ok(Self { spec, theta, batch })
    }
}

impl FisherProduct for ModelFisher<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn apply(&self, v: &DenseVector) -> DenseVector {
        models::fisher_vector_product(self.spec, self.theta, self.batch, v).expect("shapes checked at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgStop {
    MaxIters,
    /// `rᵀr` or `vᵀ(F+λI)v` hit [`CG_BREAKDOWN`] before this iteration.
    Breakdown { iter: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub update: UpdateVector,
    /// γ of every iterate `x_1, x_2, …`, measured with the undamped operator.
    pub gammas: Vec<f64>,
    pub iterations: usize,
    pub stop: CgStop,
}

/// Linear CG on `(F + λI)x = g` from `x₀ = 0`.
pub fn ngd_cg_update(
    fisher: &impl FisherProduct,
    g: &DenseVector,
    cg_iters: usize,
    lambda: f64,
) -> Result<CgOutcome, UpdateError> {
    if cg_iters == 0 {
        return Err(UpdateError::InvalidRequest("cg_iters must be >= 1".into()));
    }
    if !(lambda >= 0.0) {
        return Err(UpdateError::InvalidDamping { method: Method::NgdCg, lambda, requirement: "must be >= 0" });
    }
    if g.len() != fisher.dim() {
        return Err(LinalgError::DimensionMismatch { expected: fisher.dim(), got: g.len() }.into());
    }
    let p = g.len();
    let mut x = DenseVector::zeros(p);
    // undamped F·x, kept alongside x for the γ trace
    let mut fx = DenseVector::zeros(p);
    let mut r = g.clone();
    let mut v = r.clone();
    let mut rr = r.dot(&r);
    let mut gammas = Vec::with_capacity(cg_iters);
    let mut stop = CgStop::MaxIters;
    for iter in 0..cg_iters {
        let fv = fisher.apply(&v);
        let av = &fv + &v * lambda;
        let vav = v.dot(&av);
        if rr <= CG_BREAKDOWN || vav <= CG_BREAKDOWN {
            stop = CgStop::Breakdown { iter };
            break;
        }
        let alpha = rr / vav;
        x.axpy(alpha, &v, 1.0);
        fx.axpy(alpha, &fv, 1.0);
        r.axpy(-alpha, &av, 1.0);
        let rr_next = r.dot(&r);
        let beta = rr_next / rr;
        v = &r + &v * beta;
        rr = rr_next;
        gammas.push(x.dot(&fx).max(0.0).sqrt() / x.dot(g).abs());
    }
    let iterations = gammas.len();
    let update = UpdateVector::new(Method::NgdCg, x, lambda)?;
    Ok(CgOutcome { update, gammas, iterations, stop })
}

/// `κ_n = Δᵀ∇θl_n / ‖∇θl_n‖`, `None` for rows with vanishing gradient.
pub fn projection_profile(lin: &BatchLinearization, direction: &DenseVector) -> Vec<Option<f64>> {
    let projections = &lin.jacobian * direction;
    lin.jacobian
        .row_iter()
        .zip(projections.iter())
        .map(|(row, &proj)| {
            let norm = row.norm();
            (norm >= DEGENERATE_ROW_NORM).then(|| proj / norm)
        })
        .collect()
}

/// Builds whatever the request needs and produces its update.
pub fn generate_update(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    lin: &BatchLinearization,
    request: &UpdateRequest,
) -> Result<UpdateVector, UpdateError> {
    let lambda = request.damping.resolve(lin);
    match request.method {
        Method::Sgd => Ok(sgd_update(lin)),
        Method::Ef => ef_update(lin, lambda),
        Method::Ief => ief_update(lin, lambda),
        Method::Sf => {
            let (_, jhat) = models::sample_pseudo_gradients(spec, theta, batch, request.seed)?;
            sf_update(lin, &jhat, lambda)
        }
        Method::NgdExact => {
            let fisher = curvature::build_fisher(spec, theta, batch)?;
            ngd_exact_update(&fisher.matrix, &lin.total_grad, lambda)
        }
        Method::NgdCg => {
            let op = ModelFisher::new(spec, theta, batch)?;
            Ok(ngd_cg_update(&op, &lin.total_grad, request.cg_iters, lambda)?.update)
        }
    }
}
