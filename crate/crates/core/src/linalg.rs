//! Dense real linear algebra at desk scale.
//!
//! Matrices and vectors are `nalgebra` dynamic types over `f64`. Everything
//! here is a pure function of its inputs. The symmetric solver is a Cholesky
//! factorization of `A + ridge·I` with a single automatic retry at a larger
//! ridge; the low-rank helpers implement the Woodbury and
//! Sherman-Morrison-Woodbury (SMW) forms used by the EF, iEF and SF updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Dense matrix. Indexing is `(row, col)`.
pub type DenseMatrix = DMatrix<f64>;
/// Dense column vector.
pub type DenseVector = DVector<f64>;

/// Relative asymmetry tolerated by [`solve_spd`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative residual above which [`solve_spd`] applies iterative refinement.
const REFINE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("factorization failed even after raising the ridge to {ridge:e}")]
    SingularAfterRidge { ridge: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ridge must be {requirement}, got {ridge:e}")]
    InvalidRidge { ridge: f64, requirement: &'static str },
    #[error("input contains non-finite entries")]
    NonFinite,
}

/// Largest absolute entry, or 0 for an empty matrix.
pub fn max_abs(a: &DenseMatrix) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest `|a_ij - a_ji|` relative to the largest entry of `a`.
pub fn relative_asymmetry(a: &DenseMatrix) -> f64 {
    let scale = max_abs(a);
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

fn check_square_symmetric(a: &DenseMatrix) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare { rows: a.nrows(), cols: a.ncols() });
    }
    let asymmetry = relative_asymmetry(a);
    if asymmetry > SYMMETRY_TOL {
        return Err(LinalgError::NotSymmetric { asymmetry });
    }
    Ok(())
}

fn add_ridge(a: &DenseMatrix, ridge: f64) -> DenseMatrix {
    let mut shifted = a.clone();
    if ridge != 0.0 {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += ridge;
        }
    }
    shifted
}

/// Solves `(A + ridge·I) x = b` for symmetric positive (semi-)definite `A`.
///
/// On a failed factorization the ridge is raised once (to `10·ridge`, or to
/// `ε·max|diag(A)|` when `ridge == 0`) before giving up with
/// [`LinalgError::SingularAfterRidge`].
pub fn solve_spd(a: &DenseMatrix, b: &DenseVector, ridge: f64) -> Result<DenseVector, LinalgError> {
    Ok(solve_spd_with_ridge(a, b, ridge)?.0)
}

/// Like [`solve_spd`] but also returns the ridge that was finally used.
pub fn solve_spd_with_ridge(
    a: &DenseMatrix,
    b: &DenseVector,
    ridge: f64,
) -> Result<(DenseVector, f64), LinalgError> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(LinalgError::InvalidRidge { ridge, requirement: "finite and non-negative" });
    }
    check_square_symmetric(a)?;
    if b.len() != a.nrows() {
        return Err(LinalgError::DimensionMismatch { expected: a.nrows(), got: b.len() });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if a.nrows() == 0 {
        return Ok((DenseVector::zeros(0), ridge));
    }

    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let retry = if ridge > 0.0 { ridge * 10.0 } else { f64::EPSILON * max_diag.max(f64::MIN_POSITIVE) };

    for used in [ridge, retry] {
        let shifted = add_ridge(a, used);
        if let Some(chol) = shifted.clone().cholesky() {
            let mut x = chol.solve(b);
            if x.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let b_norm = b.norm();
            for _ in 0..2 {
                let residual = b - &shifted * &x;
                if b_norm == 0.0 || residual.norm() <= REFINE_TOL * b_norm {
                    break;
                }
                x += chol.solve(&residual);
            }
            return Ok((x, used));
        }
    }
    Err(LinalgError::SingularAfterRidge { ridge: retry })
}

/// Gram matrix `J Jᵀ` of the rows of `j`.
pub fn gram(j: &DenseMatrix) -> DenseMatrix {
    let g = j * j.transpose();
    symmetrize(g)
}

/// `(M + Mᵀ)/2`, removing round-off asymmetry from products like `JᵀJ`.
pub fn symmetrize(m: DenseMatrix) -> DenseMatrix {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Low-rank solve `Jᵀ (J Jᵀ + ridge·I)⁻¹ rhs` in sample space.
///
/// Equal to `(JᵀJ + ridge·I)⁻¹ Jᵀ rhs` for every `ridge > 0`.
pub fn woodbury_solve(j: &DenseMatrix, rhs: &DenseVector, ridge: f64) -> Result<DenseVector, LinalgError> {
    if !(ridge > 0.0) {
        return Err(LinalgError::InvalidRidge { ridge, requirement: "strictly positive" });
    }
    if rhs.len() != j.nrows() {
        return Err(LinalgError::DimensionMismatch { expected: j.nrows(), got: rhs.len() });
    }
    let coeffs = solve_spd(&gram(j), rhs, ridge)?;
    Ok(j.transpose() * coeffs)
}

/// SMW solve `(UᵀU + ridge·I)⁻¹ v = (1/ridge)[v − Uᵀ(UUᵀ + ridge·I)⁻¹ U v]`.
pub fn smw_solve(u: &DenseMatrix, v: &DenseVector, ridge: f64) -> Result<DenseVector, LinalgError> {
    if !(ridge > 0.0) {
        return Err(LinalgError::InvalidRidge { ridge, requirement: "strictly positive" });
    }
    if v.len() != u.ncols() {
        return Err(LinalgError::DimensionMismatch { expected: u.ncols(), got: v.len() });
    }
    // When v lies near the row space of U, v − Uᵀc cancels and any error in c
    // (its f64 rounding included) is amplified by 1/ridge. So c is refined
    // against Ur − ridge·c and kept as an unevaluated sum hi + lo, with
    // r = v − Uᵀc accumulated in compensated arithmetic.
    let m = gram(u);
    let mut hi = solve_spd(&m, &(u * v), ridge)?;
    let mut lo = DenseVector::zeros(hi.len());
    let mut r = compensated_residual(u, v, &hi, &lo);
    for _ in 0..3 {
        let delta = solve_spd(&m, &(u * &r - (&hi + &lo) * ridge), ridge)?;
        for k in 0..hi.len() {
            let (s, e) = two_sum(hi[k], lo[k] + delta[k]);
            hi[k] = s;
            lo[k] = e;
        }
        r = compensated_residual(u, v, &hi, &lo);
    }
    Ok(r / ridge)
}

/// `v − Uᵀ(hi + lo)` with each entry summed in compensated arithmetic.
fn compensated_residual(u: &DenseMatrix, v: &DenseVector, hi: &DenseVector, lo: &DenseVector) -> DenseVector {
    DenseVector::from_fn(u.ncols(), |i, _| {
        let mut acc = Dot2::new(v[i]);
        for n in 0..u.nrows() {
            acc.add_product(-u[(n, i)], hi[n]);
            acc.add_product(-u[(n, i)], lo[n]);
        }
        acc.value()
    })
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

/// Sum of products carried to about twice working precision.
#[derive(Debug, Default, Clone, Copy)]
pub struct Dot2 {
    hi: f64,
    lo: f64,
}

impl Dot2 {
    pub fn new(start: f64) -> Self {
        Self { hi: start, lo: 0.0 }
    }

    pub fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let perr = a.mul_add(b, -p);
        let (s, serr) = two_sum(self.hi, p);
        self.hi = s;
        self.lo += serr + perr;
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    /// Rounded value and the remainder it drops.
    pub fn split(self) -> (f64, f64) {
        let v = self.value();
        (v, (self.hi - v) + self.lo)
    }
}

/// Kronecker product `A ⊗ B`.
///
/// With column-stacking `vec`, `(A ⊗ B) vec(X) = vec(B X Aᵀ)`; with
/// row-stacking `vec` (the parameter layout used by the models),
/// `(A ⊗ B) vec(X) = vec(A X Bᵀ)`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    a.kronecker(b)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let mut values: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

/// Spectral condition number `λ_max/λ_min` of a symmetric PSD matrix.
/// Returns infinity when the smallest eigenvalue is not positive.
pub fn spd_condition(a: &DenseMatrix) -> f64 {
    let values = symmetric_eigenvalues(a);
    match (values.first(), values.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

/// `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn relative_error(a: &DenseVector, b: &DenseVector, floor: f64) -> f64 {
    let diff = (a - b).amax();
    diff / b.amax().max(floor)
}

/// `trace(J Jᵀ)/N`, the mean squared row norm of `j`.
pub fn mean_row_sq_norm(j: &DenseMatrix) -> f64 {
    if j.nrows() == 0 {
        return 0.0;
    }
    j.iter().map(|v| v * v).sum::<f64>() / j.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_solve() {
        let x = solve_spd(&DenseMatrix::identity(2, 2), &DenseVector::from_vec(vec![3.0, 2.0]), 0.0).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn two_by_two_hand_inverse() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 8.0]);
        let b = DenseVector::from_vec(vec![1.0, 1.0]);
        let x = solve_spd(&a, &b, 0.0).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-14 && (x[1] + 0.25).abs() < 1e-14);
        let residual = (&a * &x - &b).norm() / b.norm();
        assert!(residual <= 1e-8);
    }

    #[test]
    fn near_singular_ridge() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = DenseVector::from_vec(vec![1.0, 1.0]);
        let x = solve_spd(&a, &b, 1e-8).unwrap();
        // closed form: (1/(1+1e-8), 1/1e-8)
        assert!((x[0] - 1.0 / (1.0 + 1e-8)).abs() < 1e-4);
        assert!((x[1] - 1e8).abs() / 1e8 < 1e-4);
    }

    #[test]
    fn rejects_bad_shapes() {
        let rect = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            solve_spd(&rect, &DenseVector::zeros(2), 0.0),
            Err(LinalgError::NotSquare { rows: 2, cols: 3 })
        ));
        let asym = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(solve_spd(&asym, &DenseVector::zeros(2), 0.0), Err(LinalgError::NotSymmetric { .. })));
        assert!(matches!(
            solve_spd(&DenseMatrix::identity(2, 2), &DenseVector::zeros(3), 0.0),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn singular_without_ridge_errors() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            solve_spd(&a, &DenseVector::from_vec(vec![1.0, 1.0]), 0.0),
            Err(LinalgError::SingularAfterRidge { .. })
        ));
    }

    #[test]
    fn retry_raises_ridge() {
        // PSD but exactly singular: the zero-ridge attempt fails, the retry succeeds.
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (x, used) = solve_spd_with_ridge(&a, &DenseVector::from_vec(vec![1.0, 1.0]), 0.0).unwrap();
        assert!(used > 0.0);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn woodbury_toy_limit() {
        let j = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 2.0]);
        let x = woodbury_solve(&j, &DenseVector::from_vec(vec![1.0, 1.0]), 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-9 && (x[1] + 0.5).abs() < 1e-9);
        let ident = woodbury_solve(&DenseMatrix::identity(2, 2), &DenseVector::from_vec(vec![0.3, -4.0]), 1e-14).unwrap();
        assert!((ident[0] - 0.3).abs() < 1e-12 && (ident[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn woodbury_requires_positive_ridge() {
        let j = DenseMatrix::identity(2, 2);
        assert!(matches!(
            woodbury_solve(&j, &DenseVector::zeros(2), 0.0),
            Err(LinalgError::InvalidRidge { .. })
        ));
    }

    #[test]
    fn woodbury_matches_dense_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let j = random_matrix(&mut rng, 4, 10);
        let rhs = DenseVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let fast = woodbury_solve(&j, &rhs, 1e-3).unwrap();
        // dense oracle: explicit P×P system
        let dense = solve_spd(&symmetrize(j.transpose() * &j), &(j.transpose() * &rhs), 1e-3).unwrap();
        assert!(relative_error(&fast, &dense, 1e-300) < 1e-8);
    }

    #[test]
    fn smw_with_zero_low_rank_part() {
        let u = DenseMatrix::zeros(3, 4);
        let v = DenseVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let x = smw_solve(&u, &v, 0.5).unwrap();
        assert!((x - &v * 2.0).amax() < 1e-15);
    }

    #[test]
    fn smw_accurate_for_vectors_in_the_row_space() {
        // integer data keeps v = Uᵀa exact, so the cancellation-free form is the oracle
        let u = DenseMatrix::from_row_slice(3, 6, &[1., 2., 0., -1., 3., 1., 0., 1., 4., 2., -2., 1., 2., -1., 1., 0., 1., 3.]);
        let a = DenseVector::from_vec(vec![3.0, -2.0, 5.0]);
        let v = u.transpose() * &a;
        for ridge in [1e-8, 1e-4, 1.0] {
            let expect = u.transpose() * solve_spd(&gram(&u), &a, ridge).unwrap();
            let x = smw_solve(&u, &v, ridge).unwrap();
            assert!((&x - &expect).norm() <= 1e-10 * expect.norm(), "ridge {ridge}: {x} vs {expect}");
        }
    }

    #[test]
    fn kron_identities() {
        let i6 = kron(&DenseMatrix::identity(2, 2), &DenseMatrix::identity(3, 3));
        assert_eq!(i6, DenseMatrix::identity(6, 6));
        let b = DenseMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(kron(&DenseMatrix::from_element(1, 1, 2.0), &b), &b * 2.0);
    }

    #[test]
    fn kron_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 2, 2);
        let b = random_matrix(&mut rng, 3, 3);
        let x = random_matrix(&mut rng, 3, 2);
        // column-stacking vec: nalgebra storage is column-major
        let vec_x = DenseVector::from_column_slice(x.as_slice());
        let lhs = kron(&a, &b) * vec_x;
        let bxa = &b * &x * a.transpose();
        let rhs = DenseVector::from_column_slice(bxa.as_slice());
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn deterministic_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 6, 6);
        let a = symmetrize(&m * m.transpose());
        let b = DenseVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let x1 = solve_spd(&a, &b, 1e-6).unwrap();
        let x2 = solve_spd(&a, &b, 1e-6).unwrap();
        assert_eq!(x1.as_slice(), x2.as_slice());
    }

    #[test]
    fn condition_number() {
        let a = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![1.0, 4.0, 100.0]));
        assert!((spd_condition(&a) - 100.0).abs() < 1e-9);
        assert!(spd_condition(&DenseMatrix::zeros(2, 2)).is_infinite());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn woodbury_identity(seed in any::<u64>(), n in 1usize..6, extra in 0usize..8, log_ridge in -6.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = n + extra;
                let j = random_matrix(&mut rng, n, p);
                let r = DenseVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let ridge = 10f64.powf(log_ridge);
                let low = woodbury_solve(&j, &r, ridge).unwrap();
                let dense = solve_spd(&symmetrize(j.transpose() * &j), &(j.transpose() * &r), ridge).unwrap();
                prop_assert!(relative_error(&low, &dense, 1e-300) < 1e-8);
            }

            #[test]
            fn solution_symmetry(seed in any::<u64>(), n in 1usize..7) {
                // xᵀ A⁻¹ y == yᵀ A⁻¹ x for symmetric A
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_matrix(&mut rng, n, n);
                let a = symmetrize(&m * m.transpose());
                let x = DenseVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let y = DenseVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                let ax = solve_spd(&a, &x, 0.1).unwrap();
                let ay = solve_spd(&a, &y, 0.1).unwrap();
                let lhs = y.dot(&ax);
                let rhs = x.dot(&ay);
                prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }
        }
    }
}
