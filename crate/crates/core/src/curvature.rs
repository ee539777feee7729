//! Explicit curvature matrices for tiny models and Kronecker factors.
//!
//! Parameter blocks use the row-major layout of [`crate::models`], so the
//! per-sample gradient of a layer is `δ ⊗ [1, h]` and its K-FAC block is
//! `G ⊗ A` with `G` built from output gradients and `A` from augmented inputs.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::models::{self, Batch, BatchLinearization, LayerLayout, ModelError, ModelKind, ModelSpec, ParameterVector};

/// Largest parameter count for which explicit `P×P` matrices are built.
pub const MAX_EXPLICIT_PARAMS: usize = 3000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CurvatureError {
    #[error("explicit curvature needs P <= {limit}, got {params}")]
    TooLarge { params: usize, limit: usize },
    #[error("sample {index} has zero logits-gradient norm")]
    ZeroScale { index: usize },
    #[error("factor shapes disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurvatureKind {
    Fisher,
    Ef,
    Ief,
    Gn,
    Sf1,
}

impl fmt::Display for CurvatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CurvatureKind::Fisher => "fisher",
            CurvatureKind::Ef => "ef",
            CurvatureKind::Ief => "ief",
            CurvatureKind::Gn => "gn",
            CurvatureKind::Sf1 => "sf1",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMatrix {
    pub kind: CurvatureKind,
    pub matrix: DenseMatrix,
    pub batch_id: Option<usize>,
}

impl CurvatureMatrix {
    fn new(kind: CurvatureKind, matrix: DenseMatrix) -> Self {
        Self { kind, matrix: linalg::symmetrize(matrix), batch_id: None }
    }

    pub fn with_batch_id(mut self, id: usize) -> Self {
        self.batch_id = Some(id);
        self
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Symmetric to 1e-10 and smallest eigenvalue ≥ −1e-8·largest.
    pub fn satisfies_invariants(&self) -> bool {
        if linalg::relative_asymmetry(&self.matrix) > linalg::SYMMETRY_TOL {
            return false;
        }
        let eig = linalg::symmetric_eigenvalues(&self.matrix);
        match (eig.first(), eig.last()) {
            (Some(&lo), Some(&hi)) => lo >= -1e-8 * hi.abs().max(f64::MIN_POSITIVE),
            _ => true,
        }
    }

    /// Square sub-block of one layer.
    pub fn layer_block(&self, layer: &LayerLayout) -> DenseMatrix {
        self.matrix.view((layer.offset, layer.offset), (layer.len(), layer.len())).into_owned()
    }
}

fn check_size(p: usize) -> Result<(), CurvatureError> {
    if p > MAX_EXPLICIT_PARAMS {
        Err(CurvatureError::TooLarge { params: p, limit: MAX_EXPLICIT_PARAMS })
    } else {
        Ok(())
    }
}

fn sum_ordered(parts: Vec<DenseMatrix>, p: usize) -> DenseMatrix {
    parts.into_iter().fold(DenseMatrix::zeros(p, p), |acc, m| acc + m)
}

/// Exact Fisher `Σ_n Σ_c p_n(c) ∇log p_n(c) ∇log p_n(c)ᵀ` by class
/// enumeration; the unit-variance Gaussian Fisher `Σ ∇z∇zᵀ` for least squares.
pub fn build_fisher(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch) -> Result<CurvatureMatrix, CurvatureError> {
    let p = spec.num_params();
    check_size(p)?;
    if spec.kind() == ModelKind::LinearLeastSquares {
        let gn = build_gn(spec, theta, batch)?;
        return Ok(CurvatureMatrix::new(CurvatureKind::Fisher, gn.matrix));
    }
    models::check_shapes(spec, theta, batch)?;
    let parts = (0..batch.len())
        .into_par_iter()
        .map(|n| {
            let (probs, grads) = models::class_log_prob_gradients(spec, theta, batch, n)?;
            let mut acc = DenseMatrix::zeros(p, p);
            for (pc, grad) in probs.iter().zip(&grads) {
                acc.ger(*pc, grad, grad, 1.0);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(CurvatureMatrix::new(CurvatureKind::Fisher, sum_ordered(parts, p)))
}

/// Gauss-Newton matrix `Σ_n (∂z_n/∂θ)ᵀ(∂z_n/∂θ)`.
pub fn build_gn(spec: &ModelSpec, theta: &ParameterVector, batch: &Batch) -> Result<CurvatureMatrix, CurvatureError> {
    let p = spec.num_params();
    check_size(p)?;
    models::check_shapes(spec, theta, batch)?;
    let parts = (0..batch.len())
        .into_par_iter()
        .map(|n| {
            let jz = models::output_jacobian(spec, theta, batch, n)?;
            Ok(jz.transpose() * jz)
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(CurvatureMatrix::new(CurvatureKind::Gn, sum_ordered(parts, p)))
}

/// Empirical Fisher `JᵀJ`.
pub fn build_ef(lin: &BatchLinearization) -> Result<CurvatureMatrix, CurvatureError> {
    check_size(lin.num_params())?;
    Ok(CurvatureMatrix::new(CurvatureKind::Ef, lin.jacobian.transpose() * &lin.jacobian))
}

/// iEF matrix `Jᵀ diag(s)⁻¹ J`.
pub fn build_ief(lin: &BatchLinearization) -> Result<CurvatureMatrix, CurvatureError> {
    check_size(lin.num_params())?;
    let scaled = rescaled_rows(lin)?;
    Ok(CurvatureMatrix::new(CurvatureKind::Ief, scaled.transpose() * &scaled))
}

/// Sampled Fisher `ĴᵀĴ` from pseudo per-sample gradients.
pub fn build_sampled_fisher(jhat: &DenseMatrix) -> Result<CurvatureMatrix, CurvatureError> {
    check_size(jhat.ncols())?;
    Ok(CurvatureMatrix::new(CurvatureKind::Sf1, jhat.transpose() * jhat))
}

/// Rows `∇θl_n / √s_n`.
fn rescaled_rows(lin: &BatchLinearization) -> Result<DenseMatrix, CurvatureError> {
    if let Some(index) = lin.sief.iter().position(|&s| !(s > 0.0)) {
        return Err(CurvatureError::ZeroScale { index });
    }
    let mut scaled = lin.jacobian.clone();
    for (n, s) in lin.sief.iter().enumerate() {
        scaled.row_mut(n).scale_mut(1.0 / s.sqrt());
    }
    Ok(scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WoodFisherVariant {
    Ef,
    Ief,
}

/// Rank-one accumulation `F_{k+1} = F_k + (1/N) ĝ ĝᵀ` over the samples in `order`
/// (all samples in index order when `None`).
pub fn woodfisher_recursion(
    lin: &BatchLinearization,
    variant: WoodFisherVariant,
    order: Option<&[usize]>,
) -> Result<CurvatureMatrix, CurvatureError> {
    let p = lin.num_params();
    check_size(p)?;
    let rows = match variant {
        WoodFisherVariant::Ef => lin.jacobian.clone(),
        WoodFisherVariant::Ief => rescaled_rows(lin)?,
    };
    let n = rows.nrows();
    let default_order: Vec<usize> = (0..n).collect();
    let order = order.unwrap_or(&default_order);
    let scale = 1.0 / n as f64;
    let mut f = DenseMatrix::zeros(p, p);
    for &i in order {
        let g: DenseVector = rows.row(i).transpose();
        f.ger(scale, &g, &g, 1.0);
    }
    let kind = match variant {
        WoodFisherVariant::Ef => CurvatureKind::Ef,
        WoodFisherVariant::Ief => CurvatureKind::Ief,
    };
    Ok(CurvatureMatrix::new(kind, f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KfacVariant {
    /// Output gradients at sampled labels.
    Kfac,
    /// Output gradients at the empirical labels.
    Ekfac,
    /// Empirical output gradients rescaled by `1/s_n`.
    Iekfac,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactorPair {
    pub layer: usize,
    /// `(in+1)×(in+1)` input factor.
    pub a: DenseMatrix,
    /// `out×out` output-gradient factor.
    pub g: DenseMatrix,
    pub variant: KfacVariant,
}

impl KroneckerFactorPair {
    /// `G ⊗ A`, the layer block under the row-major parameter layout.
    pub fn block(&self) -> DenseMatrix {
        linalg::kron(&self.g, &self.a)
    }
}

/// `A = (1/N)aᵀa`, `G = (1/N)gᵀg` (or `(1/N)gᵀdiag(s)⁻¹g` for ieKFAC).
pub fn build_kfac_factors(
    layer: usize,
    inputs: &DenseMatrix,
    grads: &DenseMatrix,
    sief: Option<&DenseVector>,
    variant: KfacVariant,
) -> Result<KroneckerFactorPair, CurvatureError> {
    let n = inputs.nrows();
    if grads.nrows() != n || n == 0 {
        return Err(CurvatureError::Shape(format!("{} input rows vs {} gradient rows", n, grads.nrows())));
    }
    let inv_n = 1.0 / n as f64;
    let a = linalg::symmetrize(inputs.transpose() * inputs * inv_n);
    let g = match variant {
        KfacVariant::Kfac | KfacVariant::Ekfac => grads.transpose() * grads * inv_n,
        KfacVariant::Iekfac => {
            let s = sief.ok_or_else(|| CurvatureError::Shape("ieKFAC needs the s vector".into()))?;
            if s.len() != n {
                return Err(CurvatureError::Shape(format!("s has {} entries for {} samples", s.len(), n)));
            }
            if let Some(index) = s.iter().position(|&v| !(v > 0.0)) {
                return Err(CurvatureError::ZeroScale { index });
            }
            let mut scaled = grads.clone();
            for (i, v) in s.iter().enumerate() {
                scaled.row_mut(i).scale_mut(1.0 / v.sqrt());
            }
            scaled.transpose() * &scaled * inv_n
        }
    };
    Ok(KroneckerFactorPair { layer, a, g: linalg::symmetrize(g), variant })
}
