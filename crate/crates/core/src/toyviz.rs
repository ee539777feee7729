//! Update vector fields and trajectories on the two 2-parameter toys.
//!
//! Both toys fit `z = θ0 + θ1·x` to two samples: least squares on
//! `(0,0), (1,0)` and logistic regression on `x = 0` (label 0), `x = 2`
//! (label 1). Stored directions are raw updates (`θ ← θ − η·d`), computed in
//! parameter space with no damping except the EF fallback below.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::curvature;
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::models::{self, Batch, BatchLinearization, ModelSpec, ParameterVector, Targets};
use crate::updates::DEGENERATE_ROW_NORM;

/// Relative fallback damping used when a per-sample gradient vanishes.
pub const FALLBACK_DAMPING: f64 = 1e-4;

/// Trajectories stop once the total loss drops below this.
pub const TRAJECTORY_LOSS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Toy {
    LeastSquares,
    Logistic,
}

impl Toy {
    pub fn name(self) -> &'static str {
        match self {
            Toy::LeastSquares => "lls",
            Toy::Logistic => "logistic",
        }
    }

    pub fn spec(self) -> ModelSpec {
        match self {
            Toy::LeastSquares => ModelSpec::linear(1),
            Toy::Logistic => ModelSpec::logistic(1),
        }
    }

    pub fn batch(self) -> Batch {
        match self {
            Toy::LeastSquares => {
                Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 1.0]), Targets::Values(vec![0.0, 0.0]))
            }
            Toy::Logistic => Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 2.0]), Targets::Classes(vec![0, 1])),
        }
        .expect("toy data is well formed")
    }

    /// Lines `a·θ0 + b·θ1 = c` drawn dashed on the figures.
    pub fn dashed_lines(self) -> Vec<[f64; 3]> {
        match self {
            // per-sample optima: θ0 = 0 and θ0 + θ1 = 0
            Toy::LeastSquares => vec![[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
            // decision boundary at x = 1
            Toy::Logistic => vec![[1.0, 1.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldMethod {
    Sgd,
    Ngd,
    Ief,
    Ef,
}

impl FieldMethod {
    pub const ALL: [FieldMethod; 4] = [FieldMethod::Sgd, FieldMethod::Ngd, FieldMethod::Ief, FieldMethod::Ef];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldMethod::Sgd => "sgd",
            FieldMethod::Ngd => "ngd",
            FieldMethod::Ief => "ief",
            FieldMethod::Ef => "ef",
        }
    }
}

impl fmt::Display for FieldMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    pub theta0: (f64, f64),
    pub theta1: (f64, f64),
    pub n0: usize,
    pub n1: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { theta0: (-2.0, 2.0), theta1: (-2.0, 2.0), n0: 41, n1: 41 }
    }
}

fn axis(range: (f64, f64), n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![range.0];
    }
    (0..n).map(|i| range.0 + (i as f64 * (range.1 - range.0)) / (n - 1) as f64).collect()
}

impl GridConfig {
    /// Cell centres, `θ1` varying fastest.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let a = axis(self.theta0, self.n0);
        let b = axis(self.theta1, self.n1);
        a.iter().flat_map(|&t0| b.iter().map(move |&t1| [t0, t1])).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldVector {
    pub method: FieldMethod,
    pub direction: [f64; 2],
    /// Set when a per-sample gradient vanished and the fallback damping was used.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldCell {
    pub theta: [f64; 2],
    pub loss: f64,
    pub vectors: [FieldVector; 4],
}

impl FieldCell {
    pub fn get(&self, method: FieldMethod) -> &FieldVector {
        self.vectors.iter().find(|v| v.method == method).expect("all methods present")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldGrid {
    pub toy: Toy,
    pub grid: GridConfig,
    pub cells: Vec<FieldCell>,
}

fn linearize(toy: Toy, theta: [f64; 2]) -> (ModelSpec, ParameterVector, Batch, BatchLinearization) {
    let spec = toy.spec();
    let batch = toy.batch();
    let params = ParameterVector::from_vec(&spec, theta.to_vec()).expect("two finite parameters");
    let lin = models::batch_linearize(&spec, &params, &batch).expect("toy shapes agree");
    (spec, params, batch, lin)
}

fn damped_solve(m: &DenseMatrix, g: &DenseVector, degenerate: bool) -> DenseVector {
    let ridge = if degenerate {
        FALLBACK_DAMPING * m.diagonal().iter().copied().fold(0.0, f64::max)
    } else {
        0.0
    };
    match linalg::solve_spd(m, g, ridge) {
        Ok(x) => x,
        // both rows vanished: nothing to precondition
        Err(_) => DenseVector::zeros(g.len()),
    }
}

/// All four update directions at one point.
pub fn field_at(toy: Toy, theta: [f64; 2]) -> FieldCell {
    let (spec, params, batch, lin) = linearize(toy, theta);
    let g = &lin.total_grad;
    let (kept, dropped) = crate::updates::split_degenerate_rows(&lin.jacobian);
    let degenerate = !dropped.is_empty();

    let fisher = curvature::build_fisher(&spec, &params, &batch).expect("toy is tiny").matrix;
    let ngd = damped_solve(&fisher, g, false);

    let ef_matrix = linalg::symmetrize(lin.jacobian.transpose() * &lin.jacobian);
    let ef = damped_solve(&ef_matrix, g, degenerate);

    let mut ief_matrix = DenseMatrix::zeros(2, 2);
    for &n in &kept {
        let row: DenseVector = lin.jacobian.row(n).transpose();
        ief_matrix.ger(1.0 / lin.sief[n], &row, &row, 1.0);
    }
    let ief = damped_solve(&linalg::symmetrize(ief_matrix), g, degenerate);

    let pair = |v: &DenseVector| [v[0], v[1]];
    FieldCell {
        theta,
        loss: lin.total_loss(),
        vectors: [
            FieldVector { method: FieldMethod::Sgd, direction: pair(g), degenerate: false },
            FieldVector { method: FieldMethod::Ngd, direction: pair(&ngd), degenerate: false },
            FieldVector { method: FieldMethod::Ief, direction: pair(&ief), degenerate },
            FieldVector { method: FieldMethod::Ef, direction: pair(&ef), degenerate },
        ],
    }
}

pub fn toy_field(toy: Toy, grid: &GridConfig) -> VectorFieldGrid {
    let cells = grid.points().into_par_iter().map(|p| field_at(toy, p)).collect();
    VectorFieldGrid { toy, grid: *grid, cells }
}

pub fn lls_toy_field(grid: &GridConfig) -> VectorFieldGrid {
    toy_field(Toy::LeastSquares, grid)
}

pub fn logistic_toy_field(grid: &GridConfig) -> VectorFieldGrid {
    toy_field(Toy::Logistic, grid)
}

pub fn toy_loss(toy: Toy, theta: [f64; 2]) -> f64 {
    linearize(toy, theta).3.total_loss()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub method: FieldMethod,
    pub start: [f64; 2],
    pub points: Vec<[f64; 2]>,
    pub losses: Vec<f64>,
    pub step_norm: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    /// Index where the loss first stops decreasing (end of the approach phase).
    pub fn approach_end(&self) -> usize {
        self.losses.windows(2).position(|w| w[1] >= w[0]).unwrap_or(self.losses.len() - 1)
    }

    /// Mean absolute heading change (radians) between consecutive steps,
    /// over the approach phase.
    pub fn mean_turn_angle(&self) -> Option<f64> {
        let end = self.approach_end();
        let steps: Vec<[f64; 2]> =
            self.points[..=end].windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
        let turns: Vec<f64> = steps
            .windows(2)
            .map(|w| {
                let cross = w[0][0] * w[1][1] - w[0][1] * w[1][0];
                let dot = w[0][0] * w[1][0] + w[0][1] * w[1][1];
                cross.atan2(dot).abs()
            })
            .collect();
        (!turns.is_empty()).then(|| turns.iter().sum::<f64>() / turns.len() as f64)
    }
}

/// Default trajectory starts.
pub fn default_starts() -> Vec<[f64; 2]> {
    vec![[1.5, 1.5], [-1.5, 1.0], [1.8, -0.5], [-1.0, -1.8], [0.5, -1.5]]
}

/// Euler steps along `−d/‖d‖·step_norm`; stops below [`TRAJECTORY_LOSS_TOL`],
/// on a vanishing direction, or after `max_steps`.
pub fn trace_trajectories(
    toy: Toy,
    method: FieldMethod,
    starts: &[[f64; 2]],
    step_norm: f64,
    max_steps: usize,
) -> Vec<Trajectory> {
    starts
        .par_iter()
        .map(|&start| {
            let mut points = vec![start];
            let mut losses = vec![toy_loss(toy, start)];
            let mut theta = start;
            for _ in 0..max_steps {
                if *losses.last().unwrap() < TRAJECTORY_LOSS_TOL {
                    break;
                }
                let d = field_at(toy, theta).get(method).direction;
                let norm = d[0].hypot(d[1]);
                if !(norm > 0.0) || !norm.is_finite() {
                    break;
                }
                theta = [theta[0] - step_norm * d[0] / norm, theta[1] - step_norm * d[1] / norm];
                points.push(theta);
                losses.push(toy_loss(toy, theta));
            }
            Trajectory { method, start, points, losses, step_norm }
        })
        .collect()
}

/// `theta0,theta1,loss,method,d0,d1,degenerate_flag`.
pub fn write_field_csv<W: Write>(out: W, field: &VectorFieldGrid) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["theta0", "theta1", "loss", "method", "d0", "d1", "degenerate_flag"])?;
    for cell in &field.cells {
        for v in &cell.vectors {
            w.write_record([
                format!("{:e}", cell.theta[0]),
                format!("{:e}", cell.theta[1]),
                format!("{:e}", cell.loss),
                v.method.to_string(),
                format!("{:e}", v.direction[0]),
                format!("{:e}", v.direction[1]),
                u8::from(v.degenerate).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `method,traj_id,step,theta0,theta1`.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[Trajectory]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "traj_id", "step", "theta0", "theta1"])?;
    for (id, t) in trajectories.iter().enumerate() {
        for (step, p) in t.points.iter().enumerate() {
            w.write_record([
                t.method.to_string(),
                id.to_string(),
                step.to_string(),
                format!("{:e}", p[0]),
                format!("{:e}", p[1]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Flags a cell whose EF direction violates `‖d‖ ≥ 1/min_n ‖∇θ l_n‖`
/// (projection `κ_n = 1/‖∇θ l_n‖` onto every sample).
pub fn ef_norm_bound_holds(toy: Toy, theta: [f64; 2], rel_tol: f64) -> bool {
    let (_, _, _, lin) = linearize(toy, theta);
    let norms = lin.row_norms();
    if norms.iter().any(|&n| n < DEGENERATE_ROW_NORM) {
        return true;
    }
    let d = field_at(toy, theta).get(FieldMethod::Ef).direction;
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    d[0].hypot(d[1]) >= (1.0 - rel_tol) / min
}
