//! Correlation structure across a partition: `ρ̄`, the covariance
//! conditions (A)/(B) with their constant `C_{A,B}`, and violation ratios.

use serde::{Deserialize, Serialize};

use super::{explicit_cov, CovSpec, Partition, TOL_CORR};
use crate::error::{Block, Result};

/// `Corr(X_i, X_j)`.
pub fn correlation(spec: &CovSpec, i: usize, j: usize) -> f64 {
    let sd = spec.sd();
    explicit_cov(spec)[(i, j)] / (sd[i] * sd[j])
}

/// Largest cross-partition correlation, clamped to `[-1, 1]`.
pub fn rho_bar(spec: &CovSpec, part: &Partition) -> Result<f64> {
    part.check_dim(spec.dim())?;
    let mut best = f64::NEG_INFINITY;
    for &i in part.a() {
        for &j in part.b() {
            best = best.max(correlation(spec, i, j));
        }
    }
    Ok(best.clamp(-1.0, 1.0))
}

fn max_abs_cross_corr(spec: &CovSpec, part: &Partition) -> f64 {
    let mut best = 0.0_f64;
    for &i in part.a() {
        for &j in part.b() {
            best = best.max(correlation(spec, i, j).abs());
        }
    }
    best
}

/// Outcome of testing conditions (A) and (B) on a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub cond_a_holds: bool,
    pub cond_b_holds: bool,
    /// `min_{j∈B, i∈A} (σ_j − Σ_ij/σ_j)`, whether or not (A) holds.
    pub c_a: f64,
    /// `min_{i∈A, j∈B} (σ_i − Σ_ij/σ_i)`, whether or not (B) holds.
    pub c_b: f64,
    /// The applicable constant; the larger one when both hold, NaN when neither.
    pub c_ab: f64,
    /// Index set playing `S`: `B` under (A), `A` under (B).
    pub s_set: Vec<Block>,
    pub rho_bar: f64,
    pub has_perfect_cross_corr: bool,
}

impl ConditionReport {
    /// The constants and `S` sides of every condition that holds.
    pub fn applicable(&self) -> Vec<(Block, f64)> {
        let mut out = Vec::new();
        if self.cond_a_holds {
            out.push((Block::B, self.c_a));
        }
        if self.cond_b_holds {
            out.push((Block::A, self.c_b));
        }
        out
    }
}

/// `max_{k,k'∈S} Σ_kk' / σ_k²`
fn max_scaled_within(spec: &CovSpec, set: &[usize]) -> f64 {
    let s = explicit_cov(spec);
    let sd = spec.sd();
    let mut best = f64::NEG_INFINITY;
    for &k in set {
        let v = sd[k] * sd[k];
        for &l in set {
            best = best.max(s[(k, l)] / v);
        }
    }
    best
}

/// `min_{k∈own, l∈other} (σ_k − Σ_kl/σ_k)`
fn min_gap(spec: &CovSpec, own: &[usize], other: &[usize]) -> f64 {
    let s = explicit_cov(spec);
    let sd = spec.sd();
    let mut best = f64::INFINITY;
    for &k in own {
        for &l in other {
            best = best.min(sd[k] - s[(k, l)] / sd[k]);
        }
    }
    best
}

pub fn check_conditions(spec: &CovSpec, part: &Partition) -> Result<ConditionReport> {
    let rho_bar = rho_bar(spec, part)?;
    let c_a = min_gap(spec, part.b(), part.a());
    let c_b = min_gap(spec, part.a(), part.b());
    let cond_a_holds = max_scaled_within(spec, part.b()) <= 1.0 + TOL_CORR && c_a > 0.0;
    let cond_b_holds = max_scaled_within(spec, part.a()) <= 1.0 + TOL_CORR && c_b > 0.0;
    let (c_ab, s_set) = match (cond_a_holds, cond_b_holds) {
        (true, true) => (c_a.max(c_b), vec![Block::B, Block::A]),
        (true, false) => (c_a, vec![Block::B]),
        (false, true) => (c_b, vec![Block::A]),
        (false, false) => (f64::NAN, Vec::new()),
    };
    Ok(ConditionReport {
        cond_a_holds,
        cond_b_holds,
        c_a,
        c_b,
        c_ab,
        s_set,
        rho_bar,
        has_perfect_cross_corr: max_abs_cross_corr(spec, part) >= 1.0 - TOL_CORR,
    })
}

/// Coordinates violating `σ_k − max_l Σ_kl/σ_k > 0` on each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub v_a: Vec<usize>,
    pub v_b: Vec<usize>,
    pub nu_a: f64,
    pub nu_b: f64,
    /// Mean violation over `v_a`; NaN when empty.
    pub m_a: f64,
    pub m_b: f64,
}

fn violations(spec: &CovSpec, own: &[usize], other: &[usize]) -> (Vec<usize>, f64, f64) {
    let s = explicit_cov(spec);
    let sd = spec.sd();
    let mut set = Vec::new();
    let mut total = 0.0;
    for &k in own {
        let worst = other
            .iter()
            .map(|&l| s[(k, l)] / sd[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let q = sd[k] - worst;
        if q <= 0.0 {
            set.push(k);
            total += q;
        }
    }
    let nu = set.len() as f64 / own.len() as f64;
    let mean = if set.is_empty() {
        f64::NAN
    } else {
        total / set.len() as f64
    };
    (set, nu, mean)
}

pub fn violation_stats(spec: &CovSpec, part: &Partition) -> Result<ViolationStats> {
    part.check_dim(spec.dim())?;
    let (v_a, nu_a, m_a) = violations(spec, part.a(), part.b());
    let (v_b, nu_b, m_b) = violations(spec, part.b(), part.a());
    Ok(ViolationStats {
        v_a,
        v_b,
        nu_a,
        nu_b,
        m_a,
        m_b,
    })
}
