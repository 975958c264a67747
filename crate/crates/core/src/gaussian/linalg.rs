use nalgebra::{DMatrix, SymmetricEigen};

use super::{explicit_cov, psd_scale, CovSpec, Partition, PSD_REL_TOL, RANK_REL_TOL, RCOND_MIN};
use crate::error::{Block, Error, Result};

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sigma: &DMatrix<f64>) -> f64 {
    sigma
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral square root `L` (`p × r`) with `L Lᵀ = Σ`.
///
/// Eigenvalues below `RANK_REL_TOL · max(1, λ_max)` are treated as zero and
/// their directions dropped, so `r` is the numerical rank.
pub fn sqrt_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: sigma.ncols(),
        });
    }
    let scale = psd_scale(sigma);
    let SymmetricEigen {
        eigenvalues,
        eigenvectors,
    } = sigma.clone().symmetric_eigen();
    let lmin = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if lmin < -PSD_REL_TOL * scale {
        return Err(Error::NotPsd(lmin));
    }
    let lmax = eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let cut = RANK_REL_TOL * lmax.max(1.0);
    let keep: Vec<usize> = (0..p).filter(|&k| eigenvalues[k] > cut).collect();
    let mut out = DMatrix::zeros(p, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let root = eigenvalues[k].sqrt();
        for r in 0..p {
            out[(r, c)] = eigenvectors[(r, k)] * root;
        }
    }
    Ok(out)
}

/// Conditional covariances of each block given the other.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCov {
    /// `Σ_A − Σ_AB Σ_B⁻¹ Σ_BA`
    pub a: DMatrix<f64>,
    /// `Σ_B − Σ_BA Σ_A⁻¹ Σ_AB`
    pub b: DMatrix<f64>,
}

fn submatrix(s: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| s[(rows[r], cols[c])])
}

/// `Σ_own − Σ_own,other Σ_other⁻¹ Σ_other,own`, with `Σ_other` inverted
/// through its Cholesky factor.
fn schur(s: &DMatrix<f64>, own: &[usize], other: &[usize], which: Block) -> Result<DMatrix<f64>> {
    let cond = submatrix(s, other, other);
    let chol = cond.cholesky().ok_or(Error::SingularBlock(which))?;
    let l = chol.l();
    let (lo, hi) = l
        .diagonal()
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    // (min L_ii / max L_ii)² estimates λ_min/λ_max of the block.
    if !(lo > 0.0) || (lo / hi).powi(2) < RCOND_MIN {
        return Err(Error::SingularBlock(which));
    }
    let cross = submatrix(s, other, own);
    let w = l
        .solve_lower_triangular(&cross)
        .ok_or(Error::SingularBlock(which))?;
    let mut out = submatrix(s, own, own) - w.transpose() * w;
    let sym = (&out + out.transpose()) * 0.5;
    out.copy_from(&sym);
    Ok(out)
}

/// Both Schur complements of the partitioned covariance.
///
/// Fails with [`Error::SingularBlock`] naming the block whose inverse is
/// needed when that block is numerically singular; no pseudo-inverse
/// fallback is attempted.
pub fn residual_cov(spec: &CovSpec, part: &Partition) -> Result<ResidualCov> {
    part.check_dim(spec.dim())?;
    let s = explicit_cov(spec);
    let a = schur(s, part.a(), part.b(), Block::B)?;
    let b = schur(s, part.b(), part.a(), Block::A)?;
    Ok(ResidualCov { a, b })
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn reconstruct_err(l: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
        (l * l.transpose() - s).amax()
    }

    #[test]
    fn sqrt_of_identity() {
        let l = sqrt_factor(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(l.ncols(), 3);
        assert!(reconstruct_err(&l, &DMatrix::identity(3, 3)) < 1e-14);
    }

    #[test]
    fn sqrt_of_rank_one() {
        let s = DMatrix::from_element(2, 2, 1.0);
        let l = sqrt_factor(&s).unwrap();
        assert_eq!(l.ncols(), 1);
        assert!((l[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(reconstruct_err(&l, &s) < 1e-12);
    }

    #[test]
    fn sqrt_of_random_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = DMatrix::<f64>::from_fn(10, 3, |_, _| StandardNormal.sample(&mut rng));
        let s = &g * g.transpose();
        let l = sqrt_factor(&s).unwrap();
        assert_eq!(l.ncols(), 3);
        assert!(reconstruct_err(&l, &s) <= 1e-8 * s.diagonal().max());
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(sqrt_factor(&s), Err(Error::NotPsd(_))));
    }

    #[test]
    fn min_eigen_examples() {
        assert!((min_eigenvalue(&DMatrix::identity(4, 4)) - 1.0).abs() < 1e-15);
        for rho in [-0.7, 0.0, 0.3, 0.95] {
            let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            assert!((min_eigenvalue(&s) - (1.0 - f64::abs(rho))).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_schur_complement() {
        let rho = 0.6;
        let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let spec = CovSpec::explicit(s, DVector::zeros(2)).unwrap();
        let r = residual_cov(&spec, &Partition::split_at(1, 2).unwrap()).unwrap();
        assert!((r.a[(0, 0)] - (1.0 - rho * rho)).abs() < 1e-15);
        assert!((r.b[(0, 0)] - (1.0 - rho * rho)).abs() < 1e-15);
    }

    #[test]
    fn zero_cross_block() {
        let r = residual_cov(&identity(4), &Partition::split_at(2, 4).unwrap()).unwrap();
        assert_eq!(r.a, DMatrix::identity(2, 2));
        assert_eq!(r.b, DMatrix::identity(2, 2));
    }

    #[test]
    fn rank_two_residuals_vanish() {
        let r = residual_cov(&rank_two_four(), &Partition::split_at(2, 4).unwrap()).unwrap();
        assert!(r.a.amax() < 1e-12);
        assert!(r.b.amax() < 1e-12);
    }

    #[test]
    fn singular_block_is_reported() {
        let spec = identity(2).duplicate(&[1]).unwrap();
        // B = {1, 2} holds a coordinate and its copy.
        let part = Partition::split_at(1, 3).unwrap();
        assert!(matches!(
            residual_cov(&spec, &part),
            Err(Error::SingularBlock(Block::B))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn sqrt_factor_reconstructs(p in 1usize..=50, rank_frac in 0.05f64..1.0, seed in any::<u64>()) {
            let d = ((p as f64 * rank_frac).ceil() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::<f64>::from_fn(p, d, |_, _| StandardNormal.sample(&mut rng));
            let s = &g * g.transpose();
            let l = sqrt_factor(&s).unwrap();
            prop_assert!(l.ncols() <= d);
            prop_assert!(reconstruct_err(&l, &s) <= 1e-8 * s.diagonal().max());
        }

        #[test]
        fn schur_contracts_diagonal(seed in any::<u64>(), p in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = DMatrix::<f64>::from_fn(p, p + 2, |_, _| StandardNormal.sample(&mut rng));
            let spec = CovSpec::factor(g, DVector::zeros(p)).unwrap();
            let part = Partition::split_at(p / 2, p).unwrap();
            let s = explicit_cov(&spec);
            let r = residual_cov(&spec, &part).unwrap();
            for (k, &i) in part.a().iter().enumerate() {
                prop_assert!(r.a[(k, k)] <= s[(i, i)] + 1e-10);
            }
            for (k, &j) in part.b().iter().enumerate() {
                prop_assert!(r.b[(k, k)] <= s[(j, j)] + 1e-10);
            }
        }
    }
}
