//! Linear-span laboratory: least-squares reconstruction, numerical rank,
//! subspace dimension arithmetic and residual profiles over feature stacks.
//!
//! Everything here runs in `f64` regardless of training precision.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{self, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::{ParamSet, Tensor};

/// Default relative tolerance for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Singular values below this fraction of the largest are treated as zero when
/// solving least-squares problems.
const SOLVE_CUTOFF: f64 = 1e-12;

/// Spanning vectors stored as matrix columns, each labelled with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStack {
    columns: DMatrix<f64>,
    labels: Vec<String>,
}

impl VectorStack {
    pub fn empty(len: usize) -> Self {
        VectorStack {
            columns: DMatrix::zeros(len, 0),
            labels: Vec::new(),
        }
    }

    pub fn from_columns(len: usize, columns: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        if columns.len() != labels.len() {
            return Err(Error::invalid("vector stack", "one label per column required"));
        }
        let mut stack = Self::empty(len);
        for (c, l) in columns.into_iter().zip(labels) {
            stack.push(&c, l)?;
        }
        Ok(stack)
    }

    pub fn from_matrix(columns: DMatrix<f64>) -> Self {
        let labels = (0..columns.ncols()).map(|i| format!("v{i}")).collect();
        VectorStack { columns, labels }
    }

    pub fn push(&mut self, column: &[f64], label: impl Into<String>) -> Result<()> {
        if column.len() != self.columns.nrows() {
            return Err(Error::invalid(
                "vector stack",
                format!(
                    "column of length {} does not match stack length {}",
                    column.len(),
                    self.columns.nrows()
                ),
            ));
        }
        if column.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("column `{}`", label.into())));
        }
        let k = self.columns.ncols();
        let m = std::mem::replace(&mut self.columns, DMatrix::zeros(0, 0));
        self.columns = m.insert_column(k, 0.0);
        self.columns.column_mut(k).copy_from_slice(column);
        self.labels.push(label.into());
        Ok(())
    }

    /// Columns of `self` followed by the columns of `other`.
    pub fn union(&self, other: &VectorStack) -> Result<VectorStack> {
        if other.vector_len() != self.vector_len() {
            return Err(Error::invalid("vector stack", "union of stacks with different lengths"));
        }
        let k = self.count();
        let mut columns = DMatrix::zeros(self.vector_len(), k + other.count());
        columns.columns_mut(0, k).copy_from(&self.columns);
        columns.columns_mut(k, other.count()).copy_from(&other.columns);
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        Ok(VectorStack { columns, labels })
    }

    pub fn scaled(&self, c: f64) -> VectorStack {
        VectorStack {
            columns: &self.columns * c,
            labels: self.labels.clone(),
        }
    }

    /// Length of each vector.
    pub fn vector_len(&self) -> usize {
        self.columns.nrows()
    }

    /// Number of vectors.
    pub fn count(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.columns.column(i).iter().copied().collect()
    }
}

/// Thin SVD `m = U diag(s) V^T` with `k = min(rows, cols)` columns in `U`, `V`.
struct Svd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    v: DMatrix<f64>,
}

// nalgebra's bidiagonal SVD loses accuracy on some rank-deficient inputs,
// which is exactly the regime rank and intersection tests probe; faer's is
// used instead.
fn svd(m: &DMatrix<f64>) -> Svd {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 || m.iter().any(|v| !v.is_finite()) {
        return Svd {
            u: DMatrix::zeros(r, 0),
            s: if k == 0 { Vec::new() } else { vec![f64::NAN; k] },
            v: DMatrix::zeros(c, 0),
        };
    }
    let fm = faer::Mat::<f64>::from_fn(r, c, |i, j| m[(i, j)]);
    let d = fm.thin_svd().expect("SVD of a finite matrix converges");
    let (fu, fv) = (d.U(), d.V());
    Svd {
        u: DMatrix::from_fn(r, k, |i, j| fu[(i, j)]),
        s: (0..k).map(|i| d.S()[i]).collect(),
        v: DMatrix::from_fn(c, k, |i, j| fv[(i, j)]),
    }
}

fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    svd(m).s
}

/// Number of singular values above `tol` times the largest one.
pub fn matrix_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = singular_values(m);
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

pub fn numerical_rank(stack: &VectorStack, tol: f64) -> usize {
    matrix_rank(stack.matrix(), tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub lambda: Vec<f64>,
    pub residual: f64,
}

/// Minimum-norm least-squares reconstruction of `y` from the stack's columns.
pub fn least_squares(stack: &VectorStack, y: &[f64]) -> Result<LeastSquares> {
    if y.len() != stack.vector_len() {
        return Err(Error::invalid(
            "least_squares",
            format!("target length {} does not match stack length {}", y.len(), stack.vector_len()),
        ));
    }
    let y = DVector::from_column_slice(y);
    if stack.count() == 0 {
        return Ok(LeastSquares {
            lambda: Vec::new(),
            residual: y.norm(),
        });
    }
    let f = stack.matrix();
    if f.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("least_squares input".into()));
    }
    let d = svd(f);
    let max = d.s.iter().copied().fold(0.0, f64::max);
    // lambda = V diag(1 / s) U^T y over the retained singular values.
    let mut coeffs = d.u.transpose() * &y;
    for (c, &sv) in coeffs.iter_mut().zip(&d.s) {
        *c = if max > 0.0 && sv > SOLVE_CUTOFF * max { *c / sv } else { 0.0 };
    }
    let lambda = &d.v * coeffs;
    let residual = (f * &lambda - &y).norm();
    Ok(LeastSquares {
        lambda: lambda.iter().copied().collect(),
        residual,
    })
}

/// Orthonormal basis of the column space, one column per retained direction.
fn orthonormal_basis(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let d = svd(m);
    let u = d.u;
    let max = d.s.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..d.s.len()).filter(|&i| max > 0.0 && d.s[i] > tol * max).collect();
    let mut basis = DMatrix::zeros(m.nrows(), keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &u.column(i));
    }
    basis
}

/// Dimensions in the identity `dim(U + V) = dim U + dim V - dim(U ∩ V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimSum {
    pub dim_u: usize,
    pub dim_v: usize,
    /// Derived from the identity: `dim_u + dim_v - dim_sum`.
    pub dim_intersection: usize,
    /// Measured independently from the null space of `[Qu, -Qv]`.
    pub dim_intersection_measured: usize,
    pub dim_sum: usize,
    pub holds: bool,
}

/// Checks the subspace dimension identity for `span(U)` and `span(V)`.
///
/// The intersection dimension is measured by pairing: with orthonormal bases
/// `Qu`, `Qv`, every null vector `(a, b)` of `[Qu, -Qv]` gives a common vector
/// `Qu a = Qv b`, so the nullity of that matrix is `dim(U ∩ V)`.
pub fn dim_sum_check(u: &VectorStack, v: &VectorStack, tol: f64) -> Result<DimSum> {
    if u.vector_len() != v.vector_len() {
        return Err(Error::invalid("dim_sum_check", "U and V vectors differ in length"));
    }
    let dim_u = numerical_rank(u, tol);
    let dim_v = numerical_rank(v, tol);
    let dim_sum = numerical_rank(&u.union(v)?, tol);
    let qu = orthonormal_basis(u.matrix(), tol);
    let qv = orthonormal_basis(v.matrix(), tol);
    let k = qu.ncols() + qv.ncols();
    let mut paired = DMatrix::zeros(u.vector_len(), k);
    paired.columns_mut(0, qu.ncols()).copy_from(&qu);
    paired.columns_mut(qu.ncols(), qv.ncols()).copy_from(&(-&qv));
    // Singular values of [Qu, -Qv] are sqrt(1 -+ cos(theta_i)), so an absolute
    // threshold measures principal angles directly.
    let sv = singular_values(&paired);
    let nonzero = sv.iter().filter(|&&s| s > tol.sqrt()).count();
    let dim_intersection_measured = k - nonzero;
    let dim_intersection = (dim_u + dim_v).saturating_sub(dim_sum);
    Ok(DimSum {
        dim_u,
        dim_v,
        dim_intersection,
        dim_intersection_measured,
        dim_sum,
        holds: dim_u + dim_v == dim_sum + dim_intersection_measured,
    })
}

/// Whether `F lambda = y` is consistent, decided two ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub residual: f64,
    pub by_residual: bool,
    pub rank_f: usize,
    pub rank_fy: usize,
    pub by_rank: bool,
}

pub fn consistency(stack: &VectorStack, y: &[f64], tol: f64) -> Result<Consistency> {
    let ls = least_squares(stack, y)?;
    let scale = stack
        .matrix()
        .iter()
        .chain(y)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut augmented = stack.clone();
    augmented.push(y, "y")?;
    let rank_f = numerical_rank(stack, tol);
    let rank_fy = numerical_rank(&augmented, tol);
    Ok(Consistency {
        residual: ls.residual,
        by_residual: ls.residual <= 1e-8 * scale,
        rank_f,
        rank_fy,
        by_rank: rank_f == rank_fy,
    })
}

/// Residuals of `y` against each stage alone and against each cumulative union.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProfile {
    pub per_stage: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub stage_ranks: Vec<usize>,
    pub cumulative_ranks: Vec<usize>,
}

impl ResidualProfile {
    pub fn terminal(&self) -> f64 {
        *self.cumulative.last().expect("at least one stage")
    }

    pub fn best_single(&self) -> f64 {
        self.per_stage.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Whether the cumulative residuals never increase, allowing `slack`.
    pub fn is_non_increasing(&self, slack: f64) -> bool {
        self.cumulative.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

pub fn residual_profile(stages: &[VectorStack], y: &[f64]) -> Result<ResidualProfile> {
    let first = stages
        .first()
        .ok_or_else(|| Error::invalid("residual_profile", "needs at least one stage"))?;
    let mut union = VectorStack::empty(first.vector_len());
    let mut profile = ResidualProfile {
        per_stage: Vec::with_capacity(stages.len()),
        cumulative: Vec::with_capacity(stages.len()),
        stage_ranks: Vec::with_capacity(stages.len()),
        cumulative_ranks: Vec::with_capacity(stages.len()),
    };
    for stage in stages {
        union = union.union(stage)?;
        profile.per_stage.push(least_squares(stage, y)?.residual);
        profile.cumulative.push(least_squares(&union, y)?.residual);
        profile.stage_ranks.push(numerical_rank(stage, DEFAULT_RANK_TOL));
        profile.cumulative_ranks.push(numerical_rank(&union, DEFAULT_RANK_TOL));
    }
    Ok(profile)
}

/// Pre-sigmoid supervision maps of one image, grouped by backbone stage from
/// deep to shallow and flattened at image resolution.
pub fn extract_features<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamSet<T>,
    image: &Tensor<T>,
) -> Result<Vec<VectorStack>> {
    if image.batch() != 1 {
        return Err(Error::invalid("extract_features", "expects a single image"));
    }
    let out = model::forward(spec, params, image)?;
    let len = image.height() * image.width();
    let mut stages: Vec<VectorStack> = (0..spec.stage_count()).map(|_| VectorStack::empty(len)).collect();
    for head in &out.heads {
        if head.logits.height() != image.height() || head.logits.width() != image.width() {
            return Err(Error::invalid(
                "extract_features",
                format!("head `{}` is not at image resolution", head.name),
            ));
        }
        let column: Vec<f64> = head.logits.data().iter().map(|v| v.as_f64()).collect();
        stages[spec.stage_count() - head.stage].push(&column, head.name.clone())?;
    }
    Ok(stages)
}
