//! The γ indicator and the harness that compares update methods with it.
//!
//! `γ(Δ) = √(ΔᵀFΔ) / |Δᵀg|` is scale invariant and minimised by the exact
//! natural-gradient direction, where `γ² = 1/(gᵀF⁻¹g)`. Under a local
//! quadratic model, `1/(2γ²)` is the best loss reduction along `Δ`.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::DenseVector;
use crate::models::{self, Batch, BatchLinearization, ModelError, ModelSpec, ParameterVector};
use crate::updates::{self, Damping, FisherProduct, Method, ModelFisher, UpdateRequest, DEGENERATE_ROW_NORM};

/// `|Δᵀg|` at or below this makes γ undefined.
pub const ORTHOGONAL_TOL: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("update is orthogonal to the gradient (|Δᵀg| = {dot:e})")]
    OrthogonalUpdate { dot: f64 },
    #[error("no batch has a usable per-sample gradient")]
    DegenerateBatch,
    #[error("sgd must be among the requested methods")]
    MissingSgd,
    #[error("at least one batch is required")]
    NoBatches,
    #[error("invalid sweep grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv output failed: {0}")]
    Csv(String),
}

/// `√(ΔᵀFΔ)/|Δᵀg|`.
pub fn gamma(fisher: &impl FisherProduct, g: &DenseVector, direction: &DenseVector) -> Result<f64, EvalError> {
    let dot = direction.dot(g);
    if !(dot.abs() > ORTHOGONAL_TOL) {
        return Err(EvalError::OrthogonalUpdate { dot });
    }
    let quad = direction.dot(&fisher.apply(direction)).max(0.0);
    Ok(quad.sqrt() / dot.abs())
}

/// Predicted maximal loss reduction `1/(2γ²)` under the local quadratic model.
pub fn lqa_predicted_reduction(gamma: f64) -> f64 {
    0.5 / (gamma * gamma)
}

/// `max_n ‖∇θl_n‖ / min_n ‖∇θl_n‖` over rows with non-vanishing gradient.
pub fn grad_norm_imbalance(lin: &BatchLinearization) -> Option<f64> {
    let norms: Vec<f64> = lin.row_norms().into_iter().filter(|&n| n >= DEGENERATE_ROW_NORM).collect();
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    (!norms.is_empty()).then(|| max / min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorReport {
    pub method: Method,
    pub damping: Damping,
    pub batch_idx: usize,
    /// Absolute λ used for this batch.
    pub lambda: f64,
    pub gamma: Option<f64>,
    pub gamma_ratio_sgd: Option<f64>,
    pub imbalance: Option<f64>,
    /// `"ok"` or the failure message of this cell.
    pub status: String,
}

impl IndicatorReport {
    pub fn is_ok(&self) -> bool {
        self.gamma.is_some()
    }
}

/// Mean and 1-sigma (population) spread over the successful batches of one request.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub damping: Damping,
    pub mean_gamma: Option<f64>,
    pub std_gamma: Option<f64>,
    pub mean_ratio: Option<f64>,
    pub std_ratio: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Batch-major, request order within each batch.
    pub reports: Vec<IndicatorReport>,
    /// One entry per request, in request order.
    pub summaries: Vec<MethodSummary>,
    pub imbalance: Vec<Option<f64>>,
}

impl Evaluation {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Per-batch seed for sampled-Fisher labels.
fn cell_seed(base: u64, batch_idx: usize) -> u64 {
    base ^ (batch_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn evaluate_batch(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &Batch,
    batch_idx: usize,
    requests: &[UpdateRequest],
) -> Result<(Vec<IndicatorReport>, Option<f64>), EvalError> {
    let lin = models::batch_linearize(spec, theta, batch)?;
    let fisher = ModelFisher::new(spec, theta, batch)?;
    let imbalance = grad_norm_imbalance(&lin);
    let mut cells: Vec<(Result<f64, String>, f64)> = requests
        .iter()
        .map(|request| {
            let request = request.with_seed(cell_seed(request.seed, batch_idx));
            let lambda = request.damping.resolve(&lin);
            let result = updates::generate_update(spec, theta, batch, &lin, &request)
                .map_err(|e| e.to_string())
                .and_then(|u| gamma(&fisher, &lin.total_grad, &u.direction).map_err(|e| e.to_string()));
            (result, lambda)
        })
        .collect();
    let sgd_gamma = requests
        .iter()
        .position(|r| r.method == Method::Sgd)
        .and_then(|i| cells[i].0.as_ref().ok().copied());
    let reports = requests
        .iter()
        .zip(cells.drain(..))
        .map(|(request, (result, lambda))| {
            let (gamma, status) = match result {
                Ok(g) => (Some(g), "ok".to_string()),
                Err(msg) => (None, msg),
            };
            IndicatorReport {
                method: request.method,
                damping: request.damping,
                batch_idx,
                lambda,
                gamma,
                gamma_ratio_sgd: gamma.zip(sgd_gamma).map(|(g, s)| g / s),
                imbalance,
                status,
            }
        })
        .collect();
    Ok((reports, imbalance))
}

/// Evaluates every request on every batch; failed cells are recorded, not fatal.
pub fn evaluate_methods(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batches: &[Batch],
    requests: &[UpdateRequest],
) -> Result<Evaluation, EvalError> {
    if batches.is_empty() {
        return Err(EvalError::NoBatches);
    }
    if !requests.iter().any(|r| r.method == Method::Sgd) {
        return Err(EvalError::MissingSgd);
    }
    let per_batch = batches
        .par_iter()
        .enumerate()
        .map(|(i, batch)| evaluate_batch(spec, theta, batch, i, requests))
        .collect::<Result<Vec<_>, _>>()?;
    let imbalance = per_batch.iter().map(|(_, imb)| *imb).collect();
    let reports: Vec<IndicatorReport> = per_batch.into_iter().flat_map(|(r, _)| r).collect();
    let summaries = requests
        .iter()
        .enumerate()
        .map(|(k, request)| {
            let cells: Vec<&IndicatorReport> = reports.iter().skip(k).step_by(requests.len()).collect();
            let gammas: Vec<f64> = cells.iter().filter_map(|c| c.gamma).collect();
            let ratios: Vec<f64> = cells.iter().filter_map(|c| c.gamma_ratio_sgd).collect();
            let (mean_gamma, std_gamma) = mean_std(&gammas);
            let (mean_ratio, std_ratio) = mean_std(&ratios);
            MethodSummary {
                method: request.method,
                damping: request.damping,
                mean_gamma,
                std_gamma,
                mean_ratio,
                std_ratio,
                ok: gammas.len(),
                failed: cells.len() - gammas.len(),
            }
        })
        .collect();
    Ok(Evaluation { reports, summaries, imbalance })
}

/// Log-spaced damping factors evaluated by [`damping_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    /// Strictly positive, ascending.
    pub factors: Vec<f64>,
    /// Factors multiply `trace(JJᵀ)/N` when true.
    pub trace_relative: bool,
}

impl Default for SweepGrid {
    /// `1e-12, 1e-10, …, 1e6` relative to the trace scale.
    fn default() -> Self {
        Self::log_spaced(-12, 6, 10).expect("valid default grid")
    }
}

impl SweepGrid {
    pub fn new(factors: Vec<f64>, trace_relative: bool) -> Result<Self, EvalError> {
        if factors.is_empty() {
            return Err(EvalError::InvalidGrid("no damping values".into()));
        }
        if factors.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(EvalError::InvalidGrid("damping values must be finite and > 0".into()));
        }
        if factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidGrid("damping values must be strictly increasing".into()));
        }
        Ok(Self { factors, trace_relative })
    }

    /// `points` trace-relative values from `10^lo_exp` to `10^hi_exp`.
    pub fn log_spaced(lo_exp: i32, hi_exp: i32, points: usize) -> Result<Self, EvalError> {
        if points < 2 || hi_exp <= lo_exp {
            return Err(EvalError::InvalidGrid("need at least 2 points over a non-empty range".into()));
        }
        let step = (hi_exp - lo_exp) as f64 / (points - 1) as f64;
        let factors = (0..points).map(|i| 10f64.powf(lo_exp as f64 + step * i as f64)).collect();
        Self::new(factors, true)
    }

    pub fn damping(&self, factor: f64) -> Damping {
        if self.trace_relative {
            Damping::TraceRelative(factor)
        } else {
            Damping::Absolute(factor)
        }
    }
}

/// One row of a damping sweep: a (checkpoint, method, λ) cell aggregated over batches.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub checkpoint: String,
    pub method: Method,
    pub lambda: f64,
    pub mean_ratio: Option<f64>,
    pub std_ratio: Option<f64>,
    pub ok: usize,
    pub failed: usize,
}

/// γ ratio vs SGD for each damping in `grid` and each method.
pub fn damping_sweep(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batches: &[Batch],
    grid: &SweepGrid,
    methods: &[Method],
    checkpoint: &str,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut requests = vec![UpdateRequest::sgd()];
    for &method in methods {
        for &factor in &grid.factors {
            requests.push(UpdateRequest::new(method, grid.damping(factor)).with_seed(seed));
        }
    }
    let eval = evaluate_methods(spec, theta, batches, &requests)?;
    Ok(eval
        .summaries
        .iter()
        .skip(1)
        .map(|s| SweepRow {
            checkpoint: checkpoint.to_string(),
            method: s.method,
            lambda: s.damping.value(),
            mean_ratio: s.mean_ratio,
            std_ratio: s.std_ratio,
            ok: s.ok,
            failed: s.failed,
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Per-cell CSV: `checkpoint,method,lambda,batch_idx,gamma,gamma_ratio_sgd,imbalance,status`.
/// Failed cells keep their row with empty numeric fields.
pub fn write_reports_csv<W: Write>(out: W, rows: &[(String, IndicatorReport)]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
    w.write_record(["checkpoint", "method", "lambda", "batch_idx", "gamma", "gamma_ratio_sgd", "imbalance", "status"])
        .map_err(csv_err)?;
    for (checkpoint, r) in rows {
        w.write_record([
            checkpoint.clone(),
            r.method.to_string(),
            format!("{:e}", r.lambda),
            r.batch_idx.to_string(),
            opt(r.gamma),
            opt(r.gamma_ratio_sgd),
            opt(r.imbalance),
            r.status.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

/// Sweep CSV: `checkpoint,method,lambda,mean_ratio,std_ratio,ok,failed`.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
    w.write_record(["checkpoint", "method", "lambda", "mean_ratio", "std_ratio", "ok", "failed"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.checkpoint.clone(),
            r.method.to_string(),
            format!("{:e}", r.lambda),
            opt(r.mean_ratio),
            opt(r.std_ratio),
            r.ok.to_string(),
            r.failed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| EvalError::Csv(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature;
    use crate::linalg::{self, DenseMatrix};
    use crate::models::Targets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lls_toy() -> (ModelSpec, ParameterVector, Batch) {
        let spec = ModelSpec::linear(1);
        let batch =
            Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 1.0]), Targets::Values(vec![0.0, 0.0])).unwrap();
        let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).unwrap();
        (spec, theta, batch)
    }

    fn toy_fisher() -> DenseMatrix {
        DenseMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0])
    }

    fn random_mlp(seed: u64, widths: Vec<usize>, n: usize) -> (ModelSpec, ParameterVector, Batch) {
        let spec = ModelSpec::mlp(widths).unwrap();
        let theta = ParameterVector::init(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let inputs = DenseMatrix::from_fn(n, spec.input_dim(), |_, _| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes())).collect();
        (spec, theta, Batch::new(inputs, Targets::Classes(labels)).unwrap())
    }

    #[test]
    fn gamma_toy_values() {
        let f = toy_fisher();
        let g = DenseVector::from_vec(vec![3.0, 2.0]);
        let ief = gamma(&f, &g, &DenseVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((ief - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        let sgd = gamma(&f, &g, &g).unwrap();
        assert!((sgd * sgd - 34.0 / 169.0).abs() < 1e-15);
        assert!(matches!(
            gamma(&f, &g, &DenseVector::from_vec(vec![2.0, -3.0])),
            Err(EvalError::OrthogonalUpdate { .. })
        ));
    }

    #[test]
    fn gamma_is_scale_invariant() {
        let f = toy_fisher();
        let g = DenseVector::from_vec(vec![3.0, 2.0]);
        let d = DenseVector::from_vec(vec![0.4, -0.1]);
        let base = gamma(&f, &g, &d).unwrap();
        for c in [-1.0, 1e-6, 1e6] {
            assert!((gamma(&f, &g, &(&d * c)).unwrap() - base).abs() <= 1e-10 * base);
        }
    }

    #[test]
    fn natural_gradient_minimises_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DenseMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let f = linalg::symmetrize(a.transpose() * &a) + DenseMatrix::identity(3, 3) * 0.1;
        let g = DenseVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let ngd = linalg::solve_spd(&f, &g, 0.0).unwrap();
        let best = gamma(&f, &g, &ngd).unwrap();
        assert!((best * best - 1.0 / g.dot(&ngd)).abs() < 1e-10);
        for _ in 0..10_000 {
            let d = DenseVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            if let Ok(v) = gamma(&f, &g, &d) {
                assert!(v >= best - 1e-12);
            }
        }
    }

    #[test]
    fn lqa_values() {
        assert_eq!(lqa_predicted_reduction(1.0), 0.5);
        // iEF on the least-squares toy: the full drop 2.5 is predicted exactly
        let pred = lqa_predicted_reduction(1.0 / 5f64.sqrt());
        assert!((pred - 2.5).abs() < 1e-14);
    }

    #[test]
    fn lqa_tracks_line_search_on_softmax_model() {
        // no hidden layer: the Fisher is the exact Hessian of the CE loss
        for seed in 0..4 {
            let (spec, theta, batch) = random_mlp(seed, vec![4, 3], 256);
            let lin = models::batch_linearize(&spec, &theta, &batch).unwrap();
            let fisher = ModelFisher::new(&spec, &theta, &batch).unwrap();
            let u = updates::ief_update(&lin, Damping::TraceRelative(1e-10).resolve(&lin)).unwrap();
            let gam = gamma(&fisher, &lin.total_grad, &u.direction).unwrap();
            let base = lin.total_loss();
            let scale = u.direction.dot(&lin.total_grad) / u.direction.dot(&fisher.apply(&u.direction));
            let best = (0..400)
                .map(|k| scale * 10f64.powf(-2.0 + 4.0 * k as f64 / 399.0))
                .map(|eta| base - models::total_loss(&spec, &theta.stepped(&u.direction, eta), &batch).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let pred = lqa_predicted_reduction(gam);
            assert!((best - pred).abs() <= 0.3 * pred, "seed {seed}: best {best} predicted {pred}");
        }
    }

    #[test]
    fn imbalance_values() {
        let (spec, theta, batch) = lls_toy();
        let lin = models::batch_linearize(&spec, &theta, &batch).unwrap();
        assert!((grad_norm_imbalance(&lin).unwrap() - 8f64.sqrt()).abs() < 1e-14);
        let mut same = lin.clone();
        same.jacobian = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(grad_norm_imbalance(&same), Some(1.0));
    }

    #[test]
    fn evaluate_toy_ratio() {
        let (spec, theta, batch) = lls_toy();
        let requests = [UpdateRequest::sgd(), UpdateRequest::new(Method::Ief, Damping::default())];
        let eval = evaluate_methods(&spec, &theta, &[batch], &requests).unwrap();
        let ratio = eval.reports[1].gamma_ratio_sgd.unwrap();
        let expect = (1.0 / 5f64.sqrt()) / (34f64.sqrt() / 13.0);
        assert!((ratio - expect).abs() < 1e-8);
        assert!((ratio - 0.9971).abs() < 1e-4);
        assert_eq!(eval.reports[0].gamma_ratio_sgd, Some(1.0));
    }

    #[test]
    fn evaluate_requires_sgd_and_batches() {
        let (spec, theta, batch) = lls_toy();
        let ief = [UpdateRequest::new(Method::Ief, Damping::default())];
        assert_eq!(evaluate_methods(&spec, &theta, std::slice::from_ref(&batch), &ief), Err(EvalError::MissingSgd));
        assert_eq!(evaluate_methods(&spec, &theta, &[], &[UpdateRequest::sgd()]), Err(EvalError::NoBatches));
        let twice = [UpdateRequest::sgd(), UpdateRequest::sgd()];
        let eval = evaluate_methods(&spec, &theta, &[batch], &twice).unwrap();
        assert_eq!(eval.reports[0].gamma, eval.reports[1].gamma);
    }

    #[test]
    fn failed_cells_are_recorded() {
        let (spec, theta, batch) = lls_toy();
        // sf is unsupported for least squares: the cell fails, the sweep continues
        let requests = [UpdateRequest::sgd(), UpdateRequest::new(Method::Sf, Damping::default())];
        let eval = evaluate_methods(&spec, &theta, &[batch], &requests).unwrap();
        assert!(eval.reports[0].is_ok());
        assert!(!eval.reports[1].is_ok());
        assert_eq!(eval.summaries[1].failed, 1);
        let mut buf = Vec::new();
        let rows: Vec<(String, IndicatorReport)> = eval.reports.iter().map(|r| ("c0".to_string(), r.clone())).collect();
        write_reports_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let failed_line = text.lines().nth(2).unwrap();
        assert!(failed_line.starts_with("c0,sf,"));
        assert!(failed_line.contains(",,,"));
    }

    #[test]
    fn ngd_exact_is_optimal_among_methods() {
        for seed in 0..5 {
            let (spec, theta, batch) = random_mlp(seed, vec![3, 4, 3], 12);
            let requests: Vec<UpdateRequest> = [Method::Sgd, Method::Ef, Method::Ief, Method::Sf, Method::NgdExact]
                .into_iter()
                .map(|m| UpdateRequest::new(m, Damping::TraceRelative(1e-10)))
                .collect();
            let eval = evaluate_methods(&spec, &theta, &[batch], &requests).unwrap();
            let best = eval.reports[4].gamma.unwrap();
            for r in &eval.reports {
                assert!(best <= r.gamma.unwrap() + 1e-8, "{:?}", eval.reports);
            }
        }
    }

    #[test]
    fn cg_gamma_approaches_exact() {
        let (spec, theta, batch) = random_mlp(8, vec![2, 3, 3], 16);
        let lin = models::batch_linearize(&spec, &theta, &batch).unwrap();
        let f = curvature::build_fisher(&spec, &theta, &batch).unwrap();
        let op = ModelFisher::new(&spec, &theta, &batch).unwrap();
        let exact = updates::ngd_exact_update(&f.matrix, &lin.total_grad, 0.0).unwrap();
        let best = gamma(&op, &lin.total_grad, &exact.direction).unwrap();
        let cg = updates::ngd_cg_update(&op, &lin.total_grad, spec.num_params(), 0.0).unwrap();
        assert!((cg.gammas.last().unwrap() - best).abs() < 1e-6);
        for w in cg.gammas.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn large_damping_limits() {
        let (spec, theta, batch) = random_mlp(2, vec![3, 5, 3], 8);
        let grid = SweepGrid::new(vec![1e12], true).unwrap();
        let rows = damping_sweep(&spec, &theta, &[batch], &grid, &[Method::Ef, Method::Sf], "c", 1).unwrap();
        for r in rows {
            assert!((r.mean_ratio.unwrap() - 1.0).abs() < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn grid_validation() {
        assert_eq!(SweepGrid::default().factors.len(), 10);
        assert!((SweepGrid::default().factors[0] - 1e-12).abs() < 1e-24);
        assert!((SweepGrid::default().factors[9] - 1e6).abs() < 1e-6);
        assert!(SweepGrid::new(vec![1.0, 1.0], true).is_err());
        assert!(SweepGrid::new(vec![0.0, 1.0], true).is_err());
        assert!(SweepGrid::new(vec![], true).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (spec, theta, batch) = random_mlp(5, vec![3, 4, 3], 9);
        let requests: Vec<UpdateRequest> =
            [Method::Sgd, Method::Sf, Method::Ief].into_iter().map(|m| UpdateRequest::new(m, Damping::default())).collect();
        let batches = vec![batch.clone(), batch];
        let a = evaluate_methods(&spec, &theta, &batches, &requests).unwrap();
        let b = evaluate_methods(&spec, &theta, &batches, &requests).unwrap();
        assert_eq!(a, b);
    }
}
