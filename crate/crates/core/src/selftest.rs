//! Invariant suite behind `natgrad selftest`: randomized checks of the exact
//! update laws, matrix identities, γ optimality and the flow bounds.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curvature::{self, KfacVariant, WoodFisherVariant};
use crate::evaluation;
use crate::linalg::{self, DenseMatrix, DenseVector, Dot2};
use crate::models::{self, Batch, BatchLinearization, ModelSpec, ParameterVector, Targets};
use crate::optim::{self, FlowError};
use crate::updates::{self, Damping, DEGENERATE_ROW_NORM};

/// Env var naming a check whose tolerances are forced to fail.
pub const CORRUPT_ENV: &str = "NATGRAD_SELFTEST_CORRUPT";

/// Cap on rejection-sampling draws per check.
const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub label: String,
    pub measured: f64,
    pub tolerance: f64,
}

impl Condition {
    fn new(label: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self { label: label.into(), measured, tolerance }
    }

    pub fn holds(&self) -> bool {
        self.measured <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: &'static str,
    pub name: &'static str,
    pub conditions: Vec<Condition>,
    pub elapsed: Duration,
    pub budget: Duration,
    /// Set when the check could not run at all.
    pub error: Option<String>,
}

impl CheckOutcome {
    pub fn within_budget(&self) -> bool {
        self.elapsed <= self.budget
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && self.within_budget() && self.conditions.iter().all(Condition::holds)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{:<4} {:<34} {}  ", self.id, self.name, verdict)?;
        if let Some(e) = &self.error {
            write!(f, "error: {e}  ")?;
        }
        for c in &self.conditions {
            let mark = if c.holds() { "" } else { " (!)" };
            write!(f, "{} {:.3e} <= {:.0e}{mark}; ", c.label, c.measured, c.tolerance)?;
        }
        write!(f, "{:.2}s/{}s", self.elapsed.as_secs_f64(), self.budget.as_secs())?;
        if !self.within_budget() {
            write!(f, " (over budget)")?;
        }
        Ok(())
    }
}

type CheckFn = fn(&mut ChaCha8Rng) -> Result<Vec<Condition>, String>;

pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    pub budget: Duration,
    run: CheckFn,
}

pub fn checks() -> Vec<Check> {
    let secs = Duration::from_secs;
    vec![
        Check { id: "A1", name: "EF equal-reduction law", budget: secs(5), run: ef_reduction_law },
        Check { id: "A2", name: "iEF scaled-reduction law", budget: secs(5), run: ief_reduction_law },
        Check { id: "A3", name: "least-squares iEF = GN = NGD", budget: secs(5), run: least_squares_equivalence },
        Check { id: "A4", name: "Fisher = GGN products", budget: secs(30), run: fisher_equals_ggn },
        Check { id: "A5", name: "low-rank vs dense solves", budget: secs(10), run: low_rank_solves },
        Check { id: "A6", name: "iEF matrix vs sample-space iEF", budget: secs(10), run: ief_matrix_identity },
        Check { id: "A7", name: "gamma optimality and CG trace", budget: secs(30), run: gamma_optimality },
        Check { id: "A8", name: "iEF flow probability bound", budget: secs(120), run: probability_bound },
        Check { id: "A9", name: "least-squares flow decay bound", budget: secs(60), run: decay_bound },
        Check { id: "A12", name: "single-sample (ie)KFAC exactness", budget: secs(5), run: kfac_single_sample },
        Check { id: "A13", name: "WoodFisher recursion", budget: secs(5), run: woodfisher },
    ]
}

/// Runs one check; `corrupt` forces every tolerance to −∞.
pub fn run_check(check: &Check, seed: u64, corrupt: bool) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let result = (check.run)(&mut rng);
    let elapsed = start.elapsed();
    let (mut conditions, error) = match result {
        Ok(c) => (c, None),
        Err(e) => (Vec::new(), Some(e)),
    };
    if corrupt {
        conditions.iter_mut().for_each(|c| c.tolerance = f64::NEG_INFINITY);
    }
    CheckOutcome { id: check.id, name: check.name, conditions, elapsed, budget: check.budget, error }
}

/// Runs `ids` (all checks when empty); honours [`CORRUPT_ENV`].
pub fn run_all(ids: &[&str], seed: u64) -> Vec<CheckOutcome> {
    let corrupt = std::env::var(CORRUPT_ENV).ok();
    checks()
        .iter()
        .filter(|c| ids.is_empty() || ids.contains(&c.id))
        .map(|c| run_check(c, seed, corrupt.as_deref() == Some(c.id)))
        .collect()
}

// ---------------------------------------------------------------------------
// instance generators

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, d, |_, _| normal(rng))
}

fn random_classifier(rng: &mut ChaCha8Rng, widths: Vec<usize>, n: usize) -> (ModelSpec, ParameterVector, Batch) {
    let spec = ModelSpec::mlp(widths).expect("valid widths");
    let c = spec.num_classes();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    let batch = Batch::new(random_inputs(rng, n, spec.input_dim()), Targets::Classes(labels)).expect("shapes agree");
    let theta = ParameterVector::init(&spec, rng.random());
    (spec, theta, batch)
}

fn random_least_squares(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (ModelSpec, ParameterVector, Batch) {
    let spec = ModelSpec::linear(d);
    let targets = (0..n).map(|_| normal(rng)).collect();
    let batch = Batch::new(random_inputs(rng, n, d), Targets::Values(targets)).expect("shapes agree");
    let theta = ParameterVector::from_vec(&spec, (0..d + 1).map(|_| normal(rng)).collect()).expect("finite");
    (spec, theta, batch)
}

fn gram_condition(lin: &BatchLinearization) -> f64 {
    linalg::spd_condition(&linalg::gram(&lin.jacobian))
}

fn has_degenerate_row(lin: &BatchLinearization) -> bool {
    lin.row_norms().iter().any(|&r| r < DEGENERATE_ROW_NORM)
}

/// Softmax MLPs with `N ≤ 8`, `P ≤ 64` and a Gram condition below `1e6`.
fn full_row_rank_instances(rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<BatchLinearization>, String> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 50 {
        let widths = vec![rng.random_range(2..=4), rng.random_range(2..=5), rng.random_range(2..=4)];
        let n = rng.random_range(1..=8);
        let (spec, theta, batch) = random_classifier(rng, widths, n);
        debug_assert!(spec.num_params() <= 64);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if n <= spec.num_params() && !has_degenerate_row(&lin) && gram_condition(&lin) <= 1e6 {
            out.push(lin);
            if out.len() == count {
                return Ok(out);
            }
        }
    }
    Err(format!("only {} of {count} well-posed instances generated", out.len()))
}

/// LU solve with iterative refinement; independent of the Cholesky paths.
fn dense_oracle(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector, String> {
    let lu = a.clone().lu();
    let mut x = lu.solve(b).ok_or("singular dense system")?;
    for _ in 0..3 {
        let r = b - a * &x;
        x += lu.solve(&r).ok_or("singular dense system")?;
    }
    Ok(x)
}

/// Solves `(AᵀA + λI)x = Bᵀw` by dense LU with refinement whose residuals are
/// taken from the factors `A`, `B` in compensated arithmetic. Never forms
/// `Bᵀw` in working precision, so null-space rounding is not amplified by `1/λ`.
fn refined_normal_solve(a: &DenseMatrix, b: &DenseMatrix, w: &DenseVector, lambda: f64) -> Result<DenseVector, String> {
    let p = a.ncols();
    let residual = |x: &DenseVector| -> DenseVector {
        let ax: Vec<(f64, f64)> = (0..a.nrows())
            .map(|n| {
                let mut acc = Dot2::default();
                (0..p).for_each(|i| acc.add_product(a[(n, i)], x[i]));
                acc.split()
            })
            .collect();
        DenseVector::from_fn(p, |i, _| {
            let mut acc = Dot2::default();
            (0..b.nrows()).for_each(|n| acc.add_product(b[(n, i)], w[n]));
            for (n, &(hi, lo)) in ax.iter().enumerate() {
                acc.add_product(-a[(n, i)], hi);
                acc.add_product(-a[(n, i)], lo);
            }
            acc.add_product(-lambda, x[i]);
            acc.value()
        })
    };
    let lu = with_ridge(&(a.transpose() * a), lambda).lu();
    let mut x = DenseVector::zeros(p);
    for _ in 0..8 {
        x += lu.solve(&residual(&x)).ok_or("singular dense system")?;
    }
    Ok(x)
}

fn with_ridge(m: &DenseMatrix, lambda: f64) -> DenseMatrix {
    m + DenseMatrix::identity(m.nrows(), m.ncols()) * lambda
}

fn rel(a: &DenseVector, b: &DenseVector) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// checks

fn ef_reduction_law(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst: f64 = 0.0;
    for lin in full_row_rank_instances(rng, 100)? {
        let u = updates::ef_update(&lin, Damping::TraceRelative(1e-10).resolve(&lin)).map_err(|e| e.to_string())?;
        let reductions = &lin.jacobian * &u.direction;
        worst = worst.max(reductions.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max));
    }
    Ok(vec![Condition::new("max|Jd-1|", worst, 1e-4)])
}

fn ief_reduction_law(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst: f64 = 0.0;
    for lin in full_row_rank_instances(rng, 100)? {
        let u = updates::ief_update(&lin, Damping::TraceRelative(1e-10).resolve(&lin)).map_err(|e| e.to_string())?;
        let reductions = &lin.jacobian * &u.direction;
        worst = worst.max((reductions - &lin.sief).amax() / lin.sief.amax());
    }
    Ok(vec![Condition::new("max|Jd-s|/max s", worst, 1e-4)])
}

fn least_squares_equivalence(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut update_err: f64 = 0.0;
    let mut matrix_err: f64 = 0.0;
    let mut done = 0;
    for _ in 0..MAX_ATTEMPTS {
        if done == 100 {
            break;
        }
        let d = rng.random_range(1..=6);
        let (spec, theta, batch) = random_least_squares(rng, d, d + 1);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if has_degenerate_row(&lin) || gram_condition(&lin) > 1e6 {
            continue;
        }
        let fisher = curvature::build_fisher(&spec, &theta, &batch).map_err(|e| e.to_string())?.matrix;
        let gn = curvature::build_gn(&spec, &theta, &batch).map_err(|e| e.to_string())?.matrix;
        let ief = curvature::build_ief(&lin).map_err(|e| e.to_string())?.matrix;
        let scale = fisher.amax();
        matrix_err = matrix_err.max((&ief - &fisher).amax() / scale).max((&gn - &fisher).amax() / scale);
        let ngd = updates::ngd_exact_update(&fisher, &lin.total_grad, 0.0).map_err(|e| e.to_string())?;
        // smallest admissible sample-space damping
        let lambda = f64::MIN_POSITIVE.max(1e-300);
        let ief_u = updates::ief_update(&lin, lambda).map_err(|e| e.to_string())?;
        update_err = update_err.max(rel(&ief_u.direction, &ngd.direction));
        done += 1;
    }
    if done < 100 {
        return Err(format!("only {done} of 100 least-squares instances generated"));
    }

    let spec = ModelSpec::linear(1);
    let batch =
        Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 1.0]), Targets::Values(vec![0.0, 0.0])).expect("toy");
    let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).expect("toy");
    let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
    let u = updates::ief_update(&lin, Damping::default().resolve(&lin)).map_err(|e| e.to_string())?;
    let landed = theta.stepped(&u.direction, 1.0);

    Ok(vec![
        Condition::new("iEF vs NGD rel", update_err, 1e-8),
        Condition::new("iEF/GN vs F rel", matrix_err, 1e-8),
        Condition::new("toy step |theta|", landed.as_vector().amax(), 1e-10),
    ])
}

fn fisher_equals_ggn(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let widths = vec![rng.random_range(2..=3), rng.random_range(2..=4), rng.random_range(2..=5)];
        let n = rng.random_range(1..=6);
        let (spec, theta, batch) = random_classifier(rng, widths, n);
        let p = spec.num_params();
        let fisher = curvature::build_fisher(&spec, &theta, &batch).map_err(|e| e.to_string())?.matrix;
        for i in 0..p {
            let mut e = DenseVector::zeros(p);
            e[i] = 1.0;
            let col = models::fisher_vector_product(&spec, &theta, &batch, &e).map_err(|e| e.to_string())?;
            worst = worst.max((col - fisher.column(i)).amax());
        }
    }
    Ok(vec![Condition::new("max|FVP col - F|", worst, 1e-8)])
}

fn low_rank_solves(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst = [0.0f64; 3];
    let mut done = 0;
    for _ in 0..MAX_ATTEMPTS {
        if done == 100 {
            break;
        }
        let widths = vec![rng.random_range(2..=4), rng.random_range(2..=5), rng.random_range(2..=4)];
        let n = rng.random_range(1..=8);
        let (spec, theta, batch) = random_classifier(rng, widths, n);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if has_degenerate_row(&lin) {
            continue;
        }
        let (_, jhat) = models::sample_pseudo_gradients(&spec, &theta, &batch, rng.random()).map_err(|e| e.to_string())?;
        if gram_condition(&lin) > 1e6 || linalg::spd_condition(&linalg::gram(&jhat)) > 1e6 {
            continue;
        }
        let j = &lin.jacobian;
        let ones = DenseVector::from_element(n, 1.0);
        let eye = DenseMatrix::identity(j.ncols(), j.ncols());
        for lambda in [1e-8, 1e-4, 1.0] {
            let e = updates::ef_update(&lin, lambda).map_err(|e| e.to_string())?;
            worst[0] = worst[0].max(rel(&e.direction, &refined_normal_solve(j, j, &ones, lambda)?));
            let i = updates::ief_update(&lin, lambda).map_err(|e| e.to_string())?;
            worst[1] = worst[1].max(rel(&i.direction, &refined_normal_solve(j, j, &lin.sief, lambda)?));
            let s = updates::sf_update(&lin, &jhat, lambda).map_err(|e| e.to_string())?;
            worst[2] = worst[2].max(rel(&s.direction, &refined_normal_solve(&jhat, &eye, &lin.total_grad, lambda)?));
        }
        done += 1;
    }
    if done < 100 {
        return Err(format!("only {done} of 100 instances generated"));
    }
    Ok(vec![
        Condition::new("EF rel", worst[0], 1e-8),
        Condition::new("iEF rel", worst[1], 1e-8),
        Condition::new("SF rel", worst[2], 1e-8),
    ])
}

fn ief_matrix_identity(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst: f64 = 0.0;
    for lin in full_row_rank_instances(rng, 50)? {
        let lambda = Damping::TraceRelative(1e-10).resolve(&lin);
        let ief = curvature::build_ief(&lin).map_err(|e| e.to_string())?.matrix;
        let dense = dense_oracle(&with_ridge(&ief, lambda), &lin.total_grad)?;
        let u = updates::ief_update(&lin, lambda).map_err(|e| e.to_string())?;
        worst = worst.max(rel(&u.direction, &dense));
    }
    Ok(vec![Condition::new("rel", worst, 1e-4)])
}

/// Models whose Fisher can be positive definite. Softmax Fishers are singular
/// along logit shifts and ReLU MLPs along per-unit weight rescalings, so NGD
/// at zero damping is only well posed for single-layer models.
fn explicit_fisher_instance(rng: &mut ChaCha8Rng, family: usize) -> (ModelSpec, ParameterVector, Batch) {
    let d = rng.random_range(2..=6);
    let n = rng.random_range(d + 1..=16);
    if family.is_multiple_of(2) {
        let spec = ModelSpec::logistic(d);
        let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
        let batch = Batch::new(random_inputs(rng, n, d), Targets::Classes(labels)).expect("shapes agree");
        let theta = ParameterVector::from_vec(&spec, (0..d + 1).map(|_| 0.5 * normal(rng)).collect()).expect("finite");
        (spec, theta, batch)
    } else {
        random_least_squares(rng, d, n)
    }
}

fn gamma_optimality(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut excess = f64::NEG_INFINITY;
    let mut rise = f64::NEG_INFINITY;
    let mut cg_gap: f64 = 0.0;
    let mut done = 0;
    let mut per_family = [0usize; 2];
    for attempt in 0..MAX_ATTEMPTS {
        if done == 100 {
            break;
        }
        let (spec, theta, batch) = explicit_fisher_instance(rng, attempt);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        let fisher = curvature::build_fisher(&spec, &theta, &batch).map_err(|e| e.to_string())?.matrix;
        if has_degenerate_row(&lin) || linalg::spd_condition(&fisher) > 1e8 {
            continue;
        }
        let g = &lin.total_grad;
        let ngd = updates::ngd_exact_update(&fisher, g, 0.0).map_err(|e| e.to_string())?;
        let best = evaluation::gamma(&fisher, g, &ngd.direction).map_err(|e| e.to_string())?;
        let lambda = Damping::default().resolve(&lin);
        let cg = updates::ngd_cg_update(&fisher, g, spec.num_params(), 0.0).map_err(|e| e.to_string())?;
        let mut others = vec![
            updates::sgd_update(&lin),
            updates::ef_update(&lin, lambda).map_err(|e| e.to_string())?,
            updates::ief_update(&lin, lambda).map_err(|e| e.to_string())?,
            cg.update.clone(),
        ];
        if spec.kind().is_classification() {
            let (_, jhat) =
                models::sample_pseudo_gradients(&spec, &theta, &batch, rng.random()).map_err(|e| e.to_string())?;
            others.push(updates::sf_update(&lin, &jhat, lambda).map_err(|e| e.to_string())?);
        }
        for u in &others {
            let gm = evaluation::gamma(&fisher, g, &u.direction).map_err(|e| e.to_string())?;
            excess = excess.max(best - gm);
        }
        for w in cg.gammas.windows(2) {
            rise = rise.max(w[1] - w[0]);
        }
        cg_gap = cg_gap.max((cg.gammas.last().copied().unwrap_or(f64::INFINITY) - best).abs());
        per_family[attempt % 2] += 1;
        done += 1;
    }
    if done < 100 || per_family.contains(&0) {
        return Err(format!("only {per_family:?} well-conditioned instances per family generated"));
    }
    Ok(vec![
        Condition::new("gamma_ngd - gamma_m", excess, 1e-8),
        Condition::new("CG gamma rise", rise, 1e-10),
        Condition::new("|gamma_cg - gamma_ngd|", cg_gap, 1e-6),
    ])
}

fn probability_bound(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut margin = f64::INFINITY;
    let mut law: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < 10 {
        attempts += 1;
        if attempts > 40 {
            return Err(format!("only {done} of 10 instances kept full row rank"));
        }
        let d = rng.random_range(2..=4);
        let c = rng.random_range(2..=4);
        // linear softmax: ReLU kinks admit sliding motions that break dl_n/dt = −s_n
        let widths = vec![d, c];
        let n = rng.random_range(1..=4);
        let (spec, theta, batch) = random_classifier(rng, widths, n);
        match optim::ief_flow_bound_check(&spec, &theta, &batch, 20.0, 1e-3) {
            Ok(r) => {
                margin = margin.min(r.min_margin);
                law = law.max(r.max_loss_law_residual);
                done += 1;
            }
            // outside the bound's assumptions
            Err(FlowError::RankDeficiency { .. }) => continue,
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(vec![Condition::new("-min margin", -margin, 1e-4), Condition::new("loss-law residual", law, 1e-3)])
}

fn decay_bound(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut margin = f64::INFINITY;
    let mut done = 0;
    for _ in 0..MAX_ATTEMPTS {
        if done == 10 {
            break;
        }
        let d = rng.random_range(1..=5);
        let n = rng.random_range(1..=d + 1);
        let (spec, theta, batch) = random_least_squares(rng, d, n);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if gram_condition(&lin) > 1e6 {
            continue;
        }
        let r = optim::strong_convex_bound_check(&spec, &theta, &batch, 5.0, 1e-3).map_err(|e| e.to_string())?;
        margin = margin.min(r.min_margin);
        done += 1;
    }
    if done < 10 {
        return Err(format!("only {done} of 10 least-squares flows generated"));
    }
    Ok(vec![Condition::new("-min margin", -margin, 1e-6)])
}

fn kfac_single_sample(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    for _ in 0..MAX_ATTEMPTS {
        if done == 20 {
            break;
        }
        let widths = vec![rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(2..=4)];
        let (spec, theta, batch) = random_classifier(rng, widths, 1);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if has_degenerate_row(&lin) {
            continue;
        }
        let ef = curvature::build_ef(&lin).map_err(|e| e.to_string())?;
        let ief = curvature::build_ief(&lin).map_err(|e| e.to_string())?;
        let layer = rng.random_range(0..spec.layers().len());
        let layout = &spec.layers()[layer];
        let (a, g) = models::layer_statistics(&spec, &theta, &batch, layer).map_err(|e| e.to_string())?;
        let e = curvature::build_kfac_factors(layer, &a, &g, None, KfacVariant::Ekfac).map_err(|e| e.to_string())?;
        let i = curvature::build_kfac_factors(layer, &a, &g, Some(&lin.sief), KfacVariant::Iekfac)
            .map_err(|e| e.to_string())?;
        worst = worst.max((e.block() - ef.layer_block(layout)).amax());
        worst = worst.max((i.block() - ief.layer_block(layout)).amax());
        done += 1;
    }
    if done < 20 {
        return Err(format!("only {done} of 20 layers generated"));
    }
    Ok(vec![Condition::new("max|kron - block|", worst, 1e-10)])
}

fn woodfisher(rng: &mut ChaCha8Rng) -> Result<Vec<Condition>, String> {
    let mut batch_err: f64 = 0.0;
    let mut perm_err: f64 = 0.0;
    let mut done = 0;
    for _ in 0..MAX_ATTEMPTS {
        if done == 20 {
            break;
        }
        let widths = vec![rng.random_range(2..=4), rng.random_range(2..=5), rng.random_range(2..=4)];
        let n = rng.random_range(1..=8);
        let (spec, theta, batch) = random_classifier(rng, widths, n);
        let lin = models::batch_linearize(&spec, &theta, &batch).map_err(|e| e.to_string())?;
        if lin.sief.iter().any(|&s| !(s > 0.0)) {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for variant in [WoodFisherVariant::Ef, WoodFisherVariant::Ief] {
            let rec = curvature::woodfisher_recursion(&lin, variant, None).map_err(|e| e.to_string())?.matrix;
            let perm = curvature::woodfisher_recursion(&lin, variant, Some(&order)).map_err(|e| e.to_string())?.matrix;
            let full = match variant {
                WoodFisherVariant::Ef => curvature::build_ef(&lin),
                WoodFisherVariant::Ief => curvature::build_ief(&lin),
            }
            .map_err(|e| e.to_string())?
            .matrix
                / n as f64;
            batch_err = batch_err.max((&rec - &full).amax());
            perm_err = perm_err.max((&rec - &perm).amax());
        }
        done += 1;
    }
    if done < 20 {
        return Err(format!("only {done} of 20 instances generated"));
    }
    Ok(vec![Condition::new("recursion vs batch", batch_err, 1e-10), Condition::new("permutation", perm_err, 1e-10)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for outcome in run_all(&["A1", "A2", "A3", "A5", "A6", "A12", "A13"], 1) {
            assert!(outcome.passed(), "{outcome}");
        }
    }

    #[test]
    fn corrupted_tolerance_fails() {
        let check = checks().into_iter().find(|c| c.id == "A13").unwrap();
        let outcome = run_check(&check, 1, true);
        assert!(!outcome.passed());
        assert!(outcome.to_string().contains("A13"));
        assert!(outcome.to_string().contains("FAIL"));
    }

    #[test]
    fn condition_rejects_nan() {
        assert!(!Condition::new("x", f64::NAN, 1.0).holds());
    }
}
