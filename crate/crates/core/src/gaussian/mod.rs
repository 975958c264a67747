//! Gaussian laws described by a covariance model and a mean vector.
//!
//! A [`CovSpec`] is either a factor model `X = Γ Z + μ` with `Z ~ N(0, I_d)`
//! or an explicit covariance `Σ`. Rank-deficient laws are ordinary citizens:
//! a factor model with `d < p` has a singular covariance and is still valid.

mod linalg;
mod structure;

pub use linalg::{min_eigenvalue, residual_cov, sqrt_factor, ResidualCov};
pub use structure::{
    check_conditions, correlation, rho_bar, violation_stats, ConditionReport, ViolationStats,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maximum tolerated `|Σ_ij - Σ_ji|` for explicit covariances.
pub const TOL_SYM: f64 = 1e-10;
/// Smallest eigenvalue must be at least `-PSD_REL_TOL * max(1, max diag)`.
pub const PSD_REL_TOL: f64 = 1e-8;
/// A correlation within this distance of one counts as perfect.
pub const TOL_CORR: f64 = 1e-9;
/// Eigenvalues below `RANK_REL_TOL * max(1, λ_max)` are numerically zero.
pub const RANK_REL_TOL: f64 = 1e-10;
/// Smallest acceptable reciprocal condition number for an inverted block.
pub const RCOND_MIN: f64 = 1e-12;

/// How the covariance of a [`CovSpec`] is given.
#[derive(Debug, Clone, PartialEq)]
pub enum CovForm {
    /// `Σ = Γ Γᵀ` with `Γ` of shape `p × d`.
    Factor(DMatrix<f64>),
    /// Symmetric positive semidefinite `Σ` of shape `p × p`.
    Explicit(DMatrix<f64>),
}

/// A validated Gaussian law `N(μ, Σ)`.
///
/// The explicit covariance is materialised once at construction and shared
/// by every consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CovSpecDoc", into = "CovSpecDoc")]
pub struct CovSpec {
    form: CovForm,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    sd: Vec<f64>,
}

impl CovSpec {
    pub fn factor(gamma: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        if gamma.nrows() == 0 {
            return Err(Error::InvalidArgument("dimension p must be at least 1".into()));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor matrix"));
        }
        let sigma = &gamma * gamma.transpose();
        Self::finish(CovForm::Factor(gamma), sigma, mu)
    }

    pub fn explicit(sigma: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        let p = sigma.nrows();
        if p == 0 {
            return Err(Error::InvalidArgument("dimension p must be at least 1".into()));
        }
        if sigma.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: sigma.ncols(),
            });
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let mut asym = 0.0_f64;
        for i in 0..p {
            for j in 0..i {
                asym = asym.max((sigma[(i, j)] - sigma[(j, i)]).abs());
            }
        }
        if asym > TOL_SYM {
            return Err(Error::NotSymmetric(asym));
        }
        if let Some(i) = (0..p).find(|&i| sigma[(i, i)] <= 0.0) {
            return Err(Error::ZeroVariance(i));
        }
        let scale = psd_scale(&sigma);
        // Σ + τI is positive definite iff λ_min(Σ) > -τ.
        let shifted = &sigma + DMatrix::identity(p, p) * (PSD_REL_TOL * scale);
        if shifted.cholesky().is_none() {
            return Err(Error::NotPsd(min_eigenvalue(&sigma)));
        }
        Self::finish(CovForm::Explicit(sigma.clone()), sigma, mu)
    }

    fn finish(form: CovForm, sigma: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        let p = sigma.nrows();
        if mu.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: mu.len(),
            });
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean vector"));
        }
        if let Some(i) = (0..p).find(|&i| sigma[(i, i)] <= 0.0) {
            return Err(Error::ZeroVariance(i));
        }
        let sd = (0..p).map(|i| sigma[(i, i)].sqrt()).collect();
        Ok(Self {
            form,
            mu,
            sigma,
            sd,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn form(&self) -> &CovForm {
        &self.form
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Marginal standard deviations `σ_i`.
    pub fn sd(&self) -> &[f64] {
        &self.sd
    }

    /// Same covariance, new mean.
    pub fn with_mean(&self, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: mu.len(),
            });
        }
        let mut out = self.clone();
        out.mu = mu;
        Ok(out)
    }

    /// Appends exact copies of the coordinates in `idx` after the existing
    /// ones. Copies are perfectly correlated with their originals, which is
    /// how overlapping index sets are encoded over a disjoint partition.
    pub fn duplicate(&self, idx: &[usize]) -> Result<Self> {
        let p = self.dim();
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range")));
        }
        let source: Vec<usize> = (0..p).chain(idx.iter().copied()).collect();
        let mu = DVector::from_iterator(source.len(), source.iter().map(|&i| self.mu[i]));
        match &self.form {
            CovForm::Factor(g) => {
                let rows: Vec<_> = source.iter().map(|&i| g.row(i)).collect();
                Self::factor(DMatrix::from_rows(&rows), mu)
            }
            CovForm::Explicit(s) => {
                let n = source.len();
                let sigma = DMatrix::from_fn(n, n, |r, c| s[(source[r], source[c])]);
                Self::explicit(sigma, mu)
            }
        }
    }

    /// Short content digest used to tie samples back to the law that made them.
    pub fn content_hash(&self) -> String {
        let doc = serde_json::to_vec(self).expect("cov spec serializes");
        let digest = Sha256::digest(&doc);
        hex::encode(&digest[..8])
    }
}

/// Materialised `Σ` (`ΓΓᵀ` for factor models).
pub fn explicit_cov(spec: &CovSpec) -> &DMatrix<f64> {
    &spec.sigma
}

fn psd_scale(sigma: &DMatrix<f64>) -> f64 {
    sigma.diagonal().iter().fold(1.0_f64, |m, &v| m.max(v))
}

/// Disjoint, covering split of `[0, p)` into nonempty `A` and `B`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionDoc")]
pub struct Partition {
    a: Vec<usize>,
    b: Vec<usize>,
    p: usize,
}

#[derive(Deserialize)]
struct PartitionDoc {
    a: Vec<usize>,
    b: Vec<usize>,
    p: usize,
}

impl TryFrom<PartitionDoc> for Partition {
    type Error = Error;
    fn try_from(doc: PartitionDoc) -> Result<Self> {
        Partition::new(doc.a, doc.b, doc.p)
    }
}

impl Partition {
    pub fn new(a: Vec<usize>, b: Vec<usize>, p: usize) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::BadPartition("both sides must be nonempty".into()));
        }
        let mut seen = vec![0u8; p];
        for &i in a.iter().chain(&b) {
            if i >= p {
                return Err(Error::BadPartition(format!("index {i} out of range for p={p}")));
            }
            seen[i] += 1;
        }
        if let Some(i) = seen.iter().position(|&c| c > 1) {
            return Err(Error::BadPartition(format!("index {i} appears more than once")));
        }
        if let Some(i) = seen.iter().position(|&c| c == 0) {
            return Err(Error::BadPartition(format!("index {i} is in neither side")));
        }
        Ok(Self { a, b, p })
    }

    /// `A = [0, k)`, `B = [k, p)`.
    pub fn split_at(k: usize, p: usize) -> Result<Self> {
        Self::new((0..k).collect(), (k..p).collect(), p)
    }

    /// `A` given, `B` its complement in `[0, p)`.
    pub fn from_a(a: Vec<usize>, p: usize) -> Result<Self> {
        let mut in_a = vec![false; p];
        for &i in &a {
            if i < p {
                in_a[i] = true;
            }
        }
        let b = (0..p).filter(|&i| !in_a[i]).collect();
        Self::new(a, b, p)
    }

    pub fn a(&self) -> &[usize] {
        &self.a
    }

    pub fn b(&self) -> &[usize] {
        &self.b
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// The same split with the roles of `A` and `B` exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
            p: self.p,
        }
    }

    pub(crate) fn check_dim(&self, p: usize) -> Result<()> {
        if self.p != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: self.p,
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CovSpecDoc {
    form: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<Vec<f64>>>,
    mu: Vec<f64>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument(format!(
            "{what}: row {r} has {} entries, expected {ncols}",
            rows[r].len()
        )));
    }
    Ok(DMatrix::from_row_iterator(
        nrows,
        ncols,
        rows.iter().flatten().copied(),
    ))
}

impl TryFrom<CovSpecDoc> for CovSpec {
    type Error = Error;
    fn try_from(doc: CovSpecDoc) -> Result<Self> {
        let mu = DVector::from_vec(doc.mu);
        match (doc.form.as_str(), doc.gamma, doc.sigma) {
            ("factor", Some(g), _) => CovSpec::factor(from_rows(&g, "gamma")?, mu),
            ("explicit", _, Some(s)) => CovSpec::explicit(from_rows(&s, "sigma")?, mu),
            (form, _, _) => Err(Error::InvalidArgument(format!(
                "form {form:?} requires its matrix field"
            ))),
        }
    }
}

impl From<CovSpec> for CovSpecDoc {
    fn from(spec: CovSpec) -> Self {
        let mu = spec.mu.iter().copied().collect();
        match &spec.form {
            CovForm::Factor(g) => CovSpecDoc {
                form: "factor".into(),
                gamma: Some(to_rows(g)),
                sigma: None,
                mu,
            },
            CovForm::Explicit(s) => CovSpecDoc {
                form: "explicit".into(),
                gamma: None,
                sigma: Some(to_rows(s)),
                mu,
            },
        }
    }
}
