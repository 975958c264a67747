//! Anti-concentration bounds for `M_B − M_A`, each with its own
//! applicability check.
//!
//! Every upper bound here is `factor · E · ε / den` for an expected-max term
//! `E` that does not depend on `ε` (the δ-bound adds a constant). The
//! ε-free parts are computed once, by Monte Carlo on common random numbers,
//! and [`BoundCalculator::report`] then evaluates them at any `ε`. Because `ε`
//! enters by one multiplication before the division, doubling `ε` doubles
//! every linear bound exactly.

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Block, Error, Reason, Result};
use crate::gaussian::{
    check_conditions, correlation, explicit_cov, residual_cov, rho_bar, CovSpec, Partition,
    RANK_REL_TOL, TOL_CORR,
};
use crate::levy::{MaxFunctionals, MaxKind};
use crate::rng::{derive, tag};

pub const DEFAULT_N_MC: usize = 200_000;
/// Largest relative spread `(max σ − min σ)/max σ` accepted as equal variances.
pub const HOMOG_REL_TOL: f64 = 1e-9;

/// Monte Carlo settings for the expected-max terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_mc: DEFAULT_N_MC,
            seed: 0,
        }
    }
}

/// 50 log-spaced thresholds in `[1e-3, 1 − 1e-3]`.
pub fn default_delta_grid() -> Vec<f64> {
    let (lo, hi) = (1e-3_f64, 1.0 - 1e-3);
    let n = 50;
    (0..n)
        .map(|i| match i {
            0 => lo,
            i if i == n - 1 => hi,
            i => (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

/// `factor · (emax · ε / den)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBound {
    pub factor: f64,
    pub emax: f64,
    pub den: f64,
}

impl LinearBound {
    pub fn at(&self, eps: f64) -> f64 {
        self.factor * (self.emax * eps / self.den)
    }
}

/// Common marginal standard deviation, or `HeterogeneousVariances`.
fn common_sd(spec: &CovSpec) -> Result<f64> {
    let sd = spec.sd();
    let hi = sd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = sd.iter().copied().fold(f64::INFINITY, f64::min);
    if (hi - lo) / hi > HOMOG_REL_TOL {
        return Err(Error::inapplicable(
            Reason::HeterogeneousVariances,
            format!("standard deviations range over [{lo}, {hi}]"),
        ));
    }
    Ok(hi)
}

fn std_abs(eng: &MaxFunctionals, sets: &[&[usize]]) -> Result<Vec<f64>> {
    let queries: Vec<_> = sets.iter().map(|s| (MaxKind::AbsStandardized, *s)).collect();
    Ok(eng.evaluate(&queries)?.into_iter().map(|e| e.value).collect())
}

fn thm21_terms(spec: &CovSpec, part: &Partition, eng: &MaxFunctionals) -> Result<LinearBound> {
    let sigma = common_sd(spec)?;
    let rb = rho_bar(spec, part)?;
    if rb >= 1.0 - TOL_CORR {
        return Err(Error::inapplicable(
            Reason::PerfectCrossCorrelation,
            format!("largest cross correlation is {rb}"),
        ));
    }
    let e = std_abs(eng, &[part.a(), part.b()])?;
    Ok(LinearBound {
        factor: 7.0,
        emax: e[0].min(e[1]),
        den: (1.0 - rb) * sigma,
    })
}

fn thm31_terms(spec: &CovSpec, part: &Partition, eng: &MaxFunctionals) -> Result<LinearBound> {
    let rep = check_conditions(spec, part)?;
    if rep.has_perfect_cross_corr {
        return Err(Error::inapplicable(
            Reason::PerfectCrossCorrelation,
            "some cross pair has |correlation| = 1",
        ));
    }
    let applicable = rep.applicable();
    if applicable.is_empty() {
        return Err(Error::inapplicable(
            Reason::ConditionFails,
            format!("neither covariance condition holds (C_A = {}, C_B = {})", rep.c_a, rep.c_b),
        ));
    }
    let sides: Vec<&[usize]> = applicable
        .iter()
        .map(|(s, _)| match s {
            Block::A => part.a(),
            Block::B => part.b(),
        })
        .collect();
    let e = std_abs(eng, &sides)?;
    Ok(applicable
        .iter()
        .zip(e)
        .map(|(&(_, c), emax)| LinearBound {
            factor: 2.0,
            emax,
            den: c,
        })
        .min_by(|x, y| x.at(1.0).total_cmp(&y.at(1.0)))
        .expect("at least one condition holds"))
}

/// One `(δ, orientation)` term of the near-perfect-correlation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cor22Candidate {
    pub delta: f64,
    /// `true` when the roles of `A` and `B` were exchanged.
    pub swapped: bool,
    /// Size of the near-duplicate set.
    pub n_near: usize,
    pub first: LinearBound,
    pub omega: f64,
    /// Expected-max gap; absent when the near-duplicate set is empty.
    pub d_delta: Option<f64>,
}

impl Cor22Candidate {
    pub fn at(&self, eps: f64) -> f64 {
        self.first.at(eps) + 2.0 * self.omega
    }
}

/// The minimising term at a given `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cor22Value {
    pub value: f64,
    pub best_delta: f64,
    pub omega_delta: f64,
    pub d_delta: Option<f64>,
    pub swapped: bool,
}

fn best_cor22(cands: &[Cor22Candidate], eps: f64) -> Cor22Value {
    let best = cands
        .iter()
        .min_by(|x, y| x.at(eps).total_cmp(&y.at(eps)))
        .expect("candidates are nonempty");
    Cor22Value {
        value: best.at(eps),
        best_delta: best.delta,
        omega_delta: best.omega,
        d_delta: best.d_delta,
        swapped: best.swapped,
    }
}

/// Every admissible `(δ, orientation)` term.
pub fn cor22_candidates(
    spec: &CovSpec,
    part: &Partition,
    deltas: &[f64],
    eng: &MaxFunctionals,
) -> Result<Vec<Cor22Candidate>> {
    let sigma = common_sd(spec)?;
    if let Some(d) = deltas.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
        return Err(Error::InvalidArgument(format!("delta {d} outside (0, 1)")));
    }
    struct Pending {
        delta: f64,
        swapped: bool,
        n_near: usize,
        rest: usize,
        other: usize,
        sig_rest: usize,
        sig_near: Option<usize>,
    }
    let mut keys: HashMap<(bool, Vec<usize>), usize> = HashMap::new();
    let mut subsets: Vec<(MaxKind, Vec<usize>)> = Vec::new();
    let mut slot = |kind: MaxKind, set: Vec<usize>| -> usize {
        let signed = kind == MaxKind::Signed;
        *keys.entry((signed, set.clone())).or_insert_with(|| {
            subsets.push((kind, set));
            subsets.len() - 1
        })
    };
    let mut pending = Vec::new();
    for (swapped, own, other) in [(false, part.a(), part.b()), (true, part.b(), part.a())] {
        let closest: Vec<f64> = own
            .iter()
            .map(|&i| {
                other
                    .iter()
                    .map(|&j| correlation(spec, i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for &delta in deltas {
            let near: Vec<usize> = own
                .iter()
                .zip(&closest)
                .filter(|(_, &c)| c >= 1.0 - delta)
                .map(|(&i, _)| i)
                .collect();
            if near.len() == own.len() {
                continue;
            }
            let rest: Vec<usize> = own
                .iter()
                .zip(&closest)
                .filter(|(_, &c)| c < 1.0 - delta)
                .map(|(&i, _)| i)
                .collect();
            pending.push(Pending {
                delta,
                swapped,
                n_near: near.len(),
                rest: slot(MaxKind::AbsStandardized, rest.clone()),
                other: slot(MaxKind::AbsStandardized, other.to_vec()),
                sig_rest: slot(MaxKind::Signed, rest),
                sig_near: (!near.is_empty()).then(|| slot(MaxKind::Signed, near)),
            });
        }
    }
    if pending.is_empty() {
        return Err(Error::inapplicable(
            Reason::NoAdmissibleDelta,
            "every threshold marks a whole side as near-duplicate",
        ));
    }
    let queries: Vec<(MaxKind, &[usize])> = subsets.iter().map(|(k, s)| (*k, s.as_slice())).collect();
    let e: Vec<f64> = eng.evaluate(&queries)?.into_iter().map(|x| x.value).collect();
    Ok(pending
        .into_iter()
        .map(|c| {
            let (omega, d_delta) = match c.sig_near {
                None => (0.0, None),
                Some(k) => {
                    let d = e[c.sig_rest] - e[k];
                    let dp = d.max(0.0);
                    ((-dp * dp / (8.0 * sigma * sigma)).exp(), Some(d))
                }
            };
            Cor22Candidate {
                delta: c.delta,
                swapped: c.swapped,
                n_near: c.n_near,
                first: LinearBound {
                    factor: 7.0,
                    emax: e[c.rest].min(e[c.other]),
                    den: c.delta * sigma,
                },
                omega,
                d_delta,
            }
        })
        .collect())
}

fn prop24_terms(spec: &CovSpec, part: &Partition, mc: McConfig) -> Result<LinearBound> {
    let res = residual_cov(spec, part).map_err(|e| match e {
        Error::SingularBlock(b) => {
            Error::inapplicable(Reason::SingularBlock, format!("block {b} cannot be inverted"))
        }
        other => other,
    })?;
    let s = explicit_cov(spec);
    let scale = s.diagonal().iter().fold(1.0_f64, |m, &v| m.max(v));
    let mut sd_min = f64::INFINITY;
    for (name, m) in [("A", &res.a), ("B", &res.b)] {
        for (k, &v) in m.diagonal().iter().enumerate() {
            if v <= RANK_REL_TOL * scale {
                return Err(Error::inapplicable(
                    Reason::ZeroResidualVariance,
                    format!("residual variance of coordinate {k} of block {name} is {v:e}"),
                ));
            }
            sd_min = sd_min.min(v.sqrt());
        }
    }
    let mut emax = f64::INFINITY;
    for (label, m) in [("residual-a", res.a), ("residual-b", res.b)] {
        let n = m.nrows();
        let law = CovSpec::explicit(m, DVector::zeros(n))?;
        let eng = MaxFunctionals::new(&law, mc.n_mc, derive(mc.seed, tag(label)))?;
        let all: Vec<usize> = (0..n).collect();
        emax = emax.min(eng.abs(&all, true)?.value);
    }
    Ok(LinearBound {
        factor: 2.0,
        emax,
        den: sd_min,
    })
}

fn baseline_terms(spec: &CovSpec) -> Result<LinearBound> {
    let eig = explicit_cov(spec).clone().symmetric_eigenvalues();
    let lmin = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let lmax = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lmin <= RANK_REL_TOL * lmax.max(1.0) {
        return Err(Error::inapplicable(
            Reason::SingularCovariance,
            format!("smallest eigenvalue {lmin:e}"),
        ));
    }
    let p = spec.dim() as f64;
    Ok(LinearBound {
        factor: 2.0,
        emax: (2.0 * p.ln()).sqrt() + 2.0,
        den: lmin.sqrt(),
    })
}

fn cor23_terms(spec: &CovSpec, eng: &MaxFunctionals) -> Result<LinearBound> {
    let all: Vec<usize> = (0..spec.dim()).collect();
    let emax = eng.abs(&all, true)?.value;
    let sd_min = spec.sd().iter().copied().fold(f64::INFINITY, f64::min);
    Ok(LinearBound {
        factor: 2.0,
        emax,
        den: sd_min,
    })
}

/// Homogeneous-variance bound `min{E_A, E_B} · 7ε / ((1 − ρ̄)σ)`.
pub fn bound_thm21(spec: &CovSpec, part: &Partition, eps: f64, mc: McConfig) -> Result<f64> {
    let eng = MaxFunctionals::new(spec, mc.n_mc, mc.seed)?;
    Ok(thm21_terms(spec, part, &eng)?.at(eps))
}

/// Near-perfect-correlation bound minimised over `deltas` and both
/// orientations.
pub fn bound_cor22(spec: &CovSpec, part: &Partition, eps: f64, deltas: &[f64], mc: McConfig) -> Result<Cor22Value> {
    let eng = MaxFunctionals::new(spec, mc.n_mc, mc.seed)?;
    Ok(best_cor22(&cor22_candidates(spec, part, deltas, &eng)?, eps))
}

/// Heterogeneous-variance bound `2 E_S ε / C_{A,B}`, smallest over the
/// conditions that hold.
pub fn bound_thm31(spec: &CovSpec, part: &Partition, eps: f64, mc: McConfig) -> Result<f64> {
    let eng = MaxFunctionals::new(spec, mc.n_mc, mc.seed)?;
    Ok(thm31_terms(spec, part, &eng)?.at(eps))
}

/// Conditional bound from the residual laws of each block given the other.
pub fn bound_prop24(spec: &CovSpec, part: &Partition, eps: f64, mc: McConfig) -> Result<f64> {
    Ok(prop24_terms(spec, part, mc)?.at(eps))
}

/// `2ε(√(2 ln p) + 2)/√λ_min(Σ)`.
pub fn bound_baseline_lambda_min(spec: &CovSpec, eps: f64) -> Result<f64> {
    Ok(baseline_terms(spec)?.at(eps))
}

/// Single-maximum bound `2 E max_j |X_j − μ_j|/σ_j · ε / min σ`.
pub fn bound_cor23_single(spec: &CovSpec, eps: f64, mc: McConfig) -> Result<f64> {
    let eng = MaxFunctionals::new(spec, mc.n_mc, mc.seed)?;
    Ok(cor23_terms(spec, &eng)?.at(eps))
}

/// The two constants attached to an exchangeable overlap geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExchangeableBounds {
    pub k: usize,
    pub m: usize,
    pub p: usize,
    /// `k/p`, a lower bound on the concentration function.
    pub lower: f64,
    /// `4k/(p + k)`, the residual term of the matching upper bound.
    pub residual: f64,
}

/// Checks `1 ≤ k < m` with `p = 2m − k`.
pub fn lower_bound_exchangeable(k: usize, p: usize) -> Result<ExchangeableBounds> {
    let bad = |why: String| Error::inapplicable(Reason::BadGeometry, why);
    if k == 0 {
        return Err(bad("overlap k must be at least 1".into()));
    }
    if (p + k) % 2 != 0 {
        return Err(bad(format!("p + k = {} is odd", p + k)));
    }
    let m = (p + k) / 2;
    if k >= m {
        return Err(bad(format!("overlap k = {k} must be below side size m = {m}")));
    }
    Ok(ExchangeableBounds {
        k,
        m,
        p,
        lower: k as f64 / p as f64,
        residual: 4.0 * k as f64 / (p + k) as f64,
    })
}

/// An exchangeable law on `p = 2m − k` coordinates with `A = [0, m)` and
/// `B = [m − k, p)` sharing `k` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ExchangeableDesign {
    base: CovSpec,
    geometry: ExchangeableBounds,
    sigma: f64,
    rho_bar: f64,
}

impl ExchangeableDesign {
    /// `base` must have equal variances and off-diagonal correlations below
    /// one; full permutation invariance is the caller's responsibility.
    pub fn new(base: CovSpec, k: usize) -> Result<Self> {
        let geometry = lower_bound_exchangeable(k, base.dim())?;
        let sigma = common_sd(&base)?;
        let p = base.dim();
        let mut rb = f64::NEG_INFINITY;
        for i in 0..p {
            for j in 0..i {
                rb = rb.max(correlation(&base, i, j));
            }
        }
        if rb >= 1.0 - TOL_CORR {
            return Err(Error::inapplicable(
                Reason::PerfectCrossCorrelation,
                "base law has perfectly correlated coordinates",
            ));
        }
        Ok(Self {
            base,
            geometry,
            sigma,
            rho_bar: rb.clamp(-1.0, 1.0),
        })
    }

    pub fn geometry(&self) -> ExchangeableBounds {
        self.geometry
    }

    pub fn base(&self) -> &CovSpec {
        &self.base
    }

    /// Largest off-diagonal correlation of the base law.
    pub fn rho_bar(&self) -> f64 {
        self.rho_bar
    }

    fn side_a(&self) -> Vec<usize> {
        (0..self.geometry.m).collect()
    }

    fn side_b(&self) -> Vec<usize> {
        (self.geometry.m - self.geometry.k..self.geometry.p).collect()
    }

    fn shared(&self) -> Vec<usize> {
        (self.geometry.m - self.geometry.k..self.geometry.m).collect()
    }

    /// The shared coordinates appended again as exact copies, so the two
    /// sides become a disjoint partition of `p + k` coordinates.
    pub fn encoded(&self) -> Result<(CovSpec, Partition)> {
        let g = self.geometry;
        let spec = self.base.duplicate(&self.shared())?;
        let a = self.side_a();
        let b = (g.m..g.p).chain(g.p..g.p + g.k).collect();
        let part = Partition::new(a, b, g.p + g.k)?;
        Ok((spec, part))
    }

    /// `[E_{A∖N}, E_{B∖N}, E_A, E_B]` on one set of draws.
    fn emax(&self, mc: McConfig) -> Result<[f64; 4]> {
        let eng = MaxFunctionals::new(&self.base, mc.n_mc, mc.seed)?;
        let shared = self.shared();
        let a = self.side_a();
        let b = self.side_b();
        let a_rest: Vec<usize> = a.iter().copied().filter(|i| !shared.contains(i)).collect();
        let b_rest: Vec<usize> = b.iter().copied().filter(|i| !shared.contains(i)).collect();
        let e = std_abs(&eng, &[&a_rest, &b_rest, &a, &b])?;
        Ok([e[0], e[1], e[2], e[3]])
    }

    /// `min{E_{A∖N}, E_{B∖N}} · 7ε/((1 − ρ̄)σ) + 4k/(p + k)`.
    pub fn upper(&self, eps: f64, mc: McConfig) -> Result<f64> {
        let e = self.emax(mc)?;
        let lin = LinearBound {
            factor: 7.0,
            emax: e[0].min(e[1]),
            den: (1.0 - self.rho_bar) * self.sigma,
        };
        Ok(lin.at(eps) + self.geometry.residual)
    }

    /// Bound on `sup_{|t| > ε} P(|M_B − M_A − t| ≤ ε)`:
    /// `min{E_A, E_B} · 14ε/((1 − ρ̄)σ)`.
    pub fn off_center(&self, eps: f64, mc: McConfig) -> Result<f64> {
        let e = self.emax(mc)?;
        Ok(LinearBound {
            factor: 14.0,
            emax: e[2].min(e[3]),
            den: (1.0 - self.rho_bar) * self.sigma,
        }
        .at(eps))
    }
}

/// A bound's value, or why it does not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BoundValue {
    Value { value: f64 },
    Inapplicable { reason: Reason, detail: String },
}

impl BoundValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            BoundValue::Value { value } => Some(*value),
            BoundValue::Inapplicable { .. } => None,
        }
    }

    pub fn reason(&self) -> Option<Reason> {
        match self {
            BoundValue::Value { .. } => None,
            BoundValue::Inapplicable { reason, .. } => Some(*reason),
        }
    }

    fn skipped() -> Self {
        BoundValue::Inapplicable {
            reason: Reason::NotRequested,
            detail: String::new(),
        }
    }
}

type Outcome<T> = std::result::Result<T, (Reason, String)>;

/// Splits inapplicability from genuine failures.
fn outcome<T>(r: Result<T>) -> Result<Outcome<T>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Error::Inapplicable { reason, detail }) => Ok(Err((reason, detail))),
        Err(e) => Err(e),
    }
}

fn to_value(o: &Outcome<LinearBound>, eps: f64) -> BoundValue {
    match o {
        Ok(l) => BoundValue::Value { value: l.at(eps) },
        Err((reason, detail)) => BoundValue::Inapplicable {
            reason: *reason,
            detail: detail.clone(),
        },
    }
}

/// Which bounds a [`BoundCalculator`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSelection {
    pub thm21: bool,
    pub cor22: bool,
    pub thm31: bool,
    pub prop24: bool,
    pub baseline: bool,
    pub cor23: bool,
}

impl Default for BoundSelection {
    fn default() -> Self {
        Self {
            thm21: true,
            cor22: true,
            thm31: true,
            prop24: true,
            baseline: true,
            cor23: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub mc: McConfig,
    pub delta_grid: Vec<f64>,
    pub selection: BoundSelection,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            mc: McConfig::default(),
            delta_grid: default_delta_grid(),
            selection: BoundSelection::default(),
        }
    }
}

/// Every bound at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub thm21: BoundValue,
    pub cor22: BoundValue,
    pub cor22_detail: Option<Cor22Value>,
    pub thm31: BoundValue,
    pub prop24: BoundValue,
    pub baseline: BoundValue,
    pub cor23_single: BoundValue,
    pub lower_exchangeable: Option<ExchangeableBounds>,
    pub mc_meta: McConfig,
}

impl BoundReport {
    /// The upper bounds that apply, by name.
    pub fn applicable(&self) -> Vec<(&'static str, f64)> {
        self.named()
            .into_iter()
            .filter_map(|(n, b)| b.value().map(|v| (n, v)))
            .collect()
    }

    pub fn named(&self) -> [(&'static str, &BoundValue); 6] {
        [
            ("thm21", &self.thm21),
            ("cor22", &self.cor22),
            ("thm31", &self.thm31),
            ("prop24", &self.prop24),
            ("baseline", &self.baseline),
            ("cor23", &self.cor23_single),
        ]
    }

    /// `name:reason` for every bound that was requested but does not apply.
    pub fn flags(&self) -> Vec<String> {
        self.named()
            .into_iter()
            .filter_map(|(n, b)| match b.reason() {
                Some(Reason::NotRequested) | None => None,
                Some(r) => Some(format!("{n}:{r}")),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The ε-free part of every selected bound for one law and partition.
#[derive(Debug, Clone)]
pub struct BoundCalculator {
    thm21: Option<Outcome<LinearBound>>,
    cor22: Option<Outcome<Vec<Cor22Candidate>>>,
    thm31: Option<Outcome<LinearBound>>,
    prop24: Option<Outcome<LinearBound>>,
    baseline: Option<Outcome<LinearBound>>,
    cor23: Option<Outcome<LinearBound>>,
    exchangeable: Option<ExchangeableBounds>,
    mc: McConfig,
}

impl BoundCalculator {
    pub fn new(spec: &CovSpec, part: &Partition, cfg: &BoundConfig) -> Result<Self> {
        part.check_dim(spec.dim())?;
        let sel = cfg.selection;
        let needs_engine = sel.thm21 || sel.cor22 || sel.thm31 || sel.cor23;
        let eng = if needs_engine {
            Some(MaxFunctionals::new(spec, cfg.mc.n_mc, cfg.mc.seed)?)
        } else {
            None
        };
        let eng = eng.as_ref();
        if let Some(e) = eng {
            // Dry run to collect every expected-max query, then one pass.
            e.begin_plan();
            if sel.thm21 {
                let _ = thm21_terms(spec, part, e);
            }
            if sel.thm31 {
                let _ = thm31_terms(spec, part, e);
            }
            if sel.cor23 {
                let _ = cor23_terms(spec, e);
            }
            if sel.cor22 {
                let _ = cor22_candidates(spec, part, &cfg.delta_grid, e);
            }
            e.commit()?;
        }
        let run = |on: bool, f: &dyn Fn() -> Result<LinearBound>| -> Result<Option<Outcome<LinearBound>>> {
            if on {
                Ok(Some(outcome(f())?))
            } else {
                Ok(None)
            }
        };
        let thm21 = run(sel.thm21, &|| thm21_terms(spec, part, eng.expect("engine")))?;
        let thm31 = run(sel.thm31, &|| thm31_terms(spec, part, eng.expect("engine")))?;
        let prop24 = run(sel.prop24, &|| prop24_terms(spec, part, cfg.mc))?;
        let baseline = run(sel.baseline, &|| baseline_terms(spec))?;
        let cor23 = run(sel.cor23, &|| cor23_terms(spec, eng.expect("engine")))?;
        let cor22 = if sel.cor22 {
            Some(outcome(cor22_candidates(
                spec,
                part,
                &cfg.delta_grid,
                eng.expect("engine"),
            ))?)
        } else {
            None
        };
        Ok(Self {
            thm21,
            cor22,
            thm31,
            prop24,
            baseline,
            cor23,
            exchangeable: None,
            mc: cfg.mc,
        })
    }

    /// Attaches the lower bound of an exchangeable overlap design.
    pub fn with_exchangeable(mut self, geometry: ExchangeableBounds) -> Self {
        self.exchangeable = Some(geometry);
        self
    }

    pub fn report(&self, eps: f64) -> Result<BoundReport> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
        }
        let lin = |o: &Option<Outcome<LinearBound>>| o.as_ref().map_or_else(BoundValue::skipped, |o| to_value(o, eps));
        let (cor22, cor22_detail) = match &self.cor22 {
            None => (BoundValue::skipped(), None),
            Some(Err((reason, detail))) => (
                BoundValue::Inapplicable {
                    reason: *reason,
                    detail: detail.clone(),
                },
                None,
            ),
            Some(Ok(c)) => {
                let best = best_cor22(c, eps);
                (BoundValue::Value { value: best.value }, Some(best))
            }
        };
        Ok(BoundReport {
            epsilon: eps,
            thm21: lin(&self.thm21),
            cor22,
            cor22_detail,
            thm31: lin(&self.thm31),
            prop24: lin(&self.prop24),
            baseline: lin(&self.baseline),
            cor23_single: lin(&self.cor23),
            lower_exchangeable: self.exchangeable,
            mc_meta: self.mc,
        })
    }
}

/// All bounds at one `ε` with default settings apart from `mc`.
pub fn bound_report(spec: &CovSpec, part: &Partition, eps: f64, mc: McConfig) -> Result<BoundReport> {
    let cfg = BoundConfig {
        mc,
        ..BoundConfig::default()
    };
    BoundCalculator::new(spec, part, &cfg)?.report(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::fixtures::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const MC: McConfig = McConfig {
        n_mc: 200_000,
        seed: 17,
    };

    fn reason<T: std::fmt::Debug>(r: Result<T>) -> Reason {
        match r {
            Err(Error::Inapplicable { reason, .. }) => reason,
            other => panic!("expected inapplicable, got {other:?}"),
        }
    }

    fn pair(rho: f64) -> CovSpec {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        CovSpec::explicit(s, DVector::zeros(2)).unwrap()
    }

    fn half_normal_mean() -> f64 {
        (2.0 / PI).sqrt()
    }

    #[test]
    fn delta_grid_shape() {
        let g = default_delta_grid();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[49], 1.0 - 1e-3);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn thm21_examples() {
        let part = Partition::split_at(1, 2).unwrap();
        let v = bound_thm21(&identity(2), &part, 0.05, MC).unwrap();
        assert!((v - 7.0 * 0.05 * half_normal_mean()).abs() < 0.002, "{v}");
        assert!((v - 0.2793).abs() < 0.002);

        let fp = Partition::split_at(2, 4).unwrap();
        let v = bound_thm21(&rank_two_four(), &fp, 0.01, MC).unwrap();
        let e = expected_max_abs_pair();
        let want = 7.0 * 0.01 * e / (1.0 - std::f64::consts::FRAC_1_SQRT_2);
        assert!((v - want).abs() < 0.01 * want, "{v} vs {want}");

        let dup = identity(2).duplicate(&[0]).unwrap();
        let dp = Partition::split_at(2, 3).unwrap();
        assert_eq!(reason(bound_thm21(&dup, &dp, 0.05, MC)), Reason::PerfectCrossCorrelation);
    }

    /// E max(|Z1|, |Z2|) for iid standard normals.
    fn expected_max_abs_pair() -> f64 {
        1.128
    }

    #[test]
    fn thm21_requires_equal_variances() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let spec = CovSpec::explicit(s, DVector::zeros(2)).unwrap();
        let part = Partition::split_at(1, 2).unwrap();
        assert_eq!(reason(bound_thm21(&spec, &part, 0.05, MC)), Reason::HeterogeneousVariances);
    }

    #[test]
    fn thm31_examples() {
        let part = Partition::split_at(1, 2).unwrap();
        let v = bound_thm31(&identity(2), &part, 0.05, MC).unwrap();
        assert!((v - 2.0 * half_normal_mean() * 0.05).abs() < 5e-4, "{v}");
        for rho in [-0.5, 0.3, 0.8] {
            let v = bound_thm31(&pair(rho), &part, 0.05, MC).unwrap();
            let want = (8.0 / PI).sqrt() * 0.05 / (1.0 - rho);
            assert!((v - want).abs() < 0.005 * want, "rho={rho}: {v} vs {want}");
        }
        let dup = identity(2).duplicate(&[0]).unwrap();
        let dp = Partition::split_at(2, 3).unwrap();
        assert_eq!(reason(bound_thm31(&dup, &dp, 0.05, MC)), Reason::PerfectCrossCorrelation);
    }

    #[test]
    fn thm31_condition_failure() {
        // Within each side the larger-variance coordinate covaries with the
        // smaller one by more than the smaller variance, so neither side
        // passes its scaling test.
        let sd = [1.0, 2.0, 1.0, 2.0];
        let s = DMatrix::from_fn(4, 4, |i, j| if i == j { sd[i] * sd[i] } else { 0.9 * sd[i] * sd[j] });
        let spec = CovSpec::explicit(s, DVector::zeros(4)).unwrap();
        let part = Partition::split_at(2, 4).unwrap();
        let rep = check_conditions(&spec, &part).unwrap();
        assert!(!rep.cond_a_holds && !rep.cond_b_holds, "{rep:?}");
        assert_eq!(reason(bound_thm31(&spec, &part, 0.05, MC)), Reason::ConditionFails);
    }

    #[test]
    fn prop24_examples() {
        let part = Partition::split_at(1, 2).unwrap();
        for rho in [0.0, 0.5, 0.9] {
            let v = bound_prop24(&pair(rho), &part, 0.05, MC).unwrap();
            let want = 2.0 * half_normal_mean() * 0.05 / (1.0 - rho * rho).sqrt();
            assert!((v - want).abs() < 0.005 * want, "rho={rho}: {v} vs {want}");
        }
        let v = bound_prop24(&identity(4), &Partition::split_at(2, 4).unwrap(), 0.05, MC).unwrap();
        assert!((v - 2.0 * 1.128 * 0.05).abs() < 0.001, "{v}");
        assert_eq!(
            reason(bound_prop24(&rank_two_four(), &Partition::split_at(2, 4).unwrap(), 0.05, MC)),
            Reason::ZeroResidualVariance
        );
        let dup = identity(2).duplicate(&[1]).unwrap();
        assert_eq!(
            reason(bound_prop24(&dup, &Partition::split_at(1, 3).unwrap(), 0.05, MC)),
            Reason::SingularBlock
        );
    }

    #[test]
    fn baseline_examples() {
        let v = bound_baseline_lambda_min(&identity(2), 0.05).unwrap();
        assert!((v - 0.1 * ((2.0 * 2f64.ln()).sqrt() + 2.0)).abs() < 1e-14);
        assert!((v - 0.3177).abs() < 1e-4);
        assert_eq!(
            reason(bound_baseline_lambda_min(&rank_two_four(), 0.05)),
            Reason::SingularCovariance
        );
    }

    #[test]
    fn cor23_examples() {
        let v = bound_cor23_single(&identity(1), 0.05, MC).unwrap();
        assert!((v - 0.0798).abs() < 5e-4, "{v}");
        let v = bound_cor23_single(&identity(2), 0.05, MC).unwrap();
        assert!((v - 0.1128).abs() < 6e-4, "{v}");
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let base = CovSpec::factor(g.clone(), DVector::zeros(2)).unwrap();
        let doubled = CovSpec::factor(g * 2.0, DVector::zeros(2)).unwrap();
        let a = bound_cor23_single(&base, 0.05, MC).unwrap();
        let b = bound_cor23_single(&doubled, 0.05, MC).unwrap();
        assert_eq!(b, a / 2.0);
    }

    #[test]
    fn cor22_without_near_duplicates() {
        let part = Partition::split_at(1, 2).unwrap();
        let deltas = default_delta_grid();
        let c = bound_cor22(&identity(2), &part, 0.05, &deltas, MC).unwrap();
        assert_eq!(c.omega_delta, 0.0);
        assert_eq!(c.best_delta, 1.0 - 1e-3);
        let t21 = bound_thm21(&identity(2), &part, 0.05, MC).unwrap();
        assert!((c.value - t21 / (1.0 - 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn cor22_dominated_near_set() {
        // Coordinate 1 sits 5 above coordinate 0 and is copied into B.
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let base = CovSpec::factor(g, DVector::from_vec(vec![0.0, 5.0])).unwrap();
        let spec = base.duplicate(&[1]).unwrap();
        let part = Partition::split_at(2, 3).unwrap();
        let c = bound_cor22(&spec, &part, 0.05, &default_delta_grid(), MC).unwrap();
        assert_eq!(c.omega_delta, 1.0);
        assert!(c.d_delta.unwrap() < 0.0);
        assert!(c.value >= 2.0);

        // A side made entirely of copies leaves nothing admissible.
        let spec = identity(1).duplicate(&[0]).unwrap();
        let part = Partition::split_at(1, 2).unwrap();
        assert_eq!(
            reason(bound_cor22(&spec, &part, 0.05, &default_delta_grid(), MC)),
            Reason::NoAdmissibleDelta
        );
    }

    #[test]
    fn cor22_on_overlap_design_exceeds_lower_bound() {
        let design = ExchangeableDesign::new(equicorr(14, 0.3), 2).unwrap();
        let (spec, part) = design.encoded().unwrap();
        let c = bound_cor22(&spec, &part, 0.05, &[0.5], MC).unwrap();
        assert!(c.omega_delta > 0.0);
        assert!(c.value >= design.geometry().lower);
    }

    #[test]
    fn exchangeable_geometry() {
        let g = lower_bound_exchangeable(1, 3).unwrap();
        assert_eq!((g.m, g.lower), (2, 1.0 / 3.0));
        let g = lower_bound_exchangeable(2, 14).unwrap();
        assert_eq!((g.m, g.lower, g.residual), (8, 1.0 / 7.0, 0.5));
        assert!(lower_bound_exchangeable(7, 9).is_ok());
        assert_eq!(reason(lower_bound_exchangeable(8, 8)), Reason::BadGeometry);
        assert_eq!(reason(lower_bound_exchangeable(2, 13)), Reason::BadGeometry);
        assert_eq!(reason(lower_bound_exchangeable(0, 4)), Reason::BadGeometry);
    }

    #[test]
    fn exchangeable_encoding_shape() {
        let design = ExchangeableDesign::new(equicorr(14, 0.3), 2).unwrap();
        let (spec, part) = design.encoded().unwrap();
        assert_eq!(spec.dim(), 16);
        assert_eq!(part.a(), &(0..8).collect::<Vec<_>>()[..]);
        assert_eq!(part.b(), &[8, 9, 10, 11, 12, 13, 14, 15]);
        assert_eq!(explicit_cov(&spec)[(6, 14)], 1.0);
        let rep = check_conditions(&spec, &part).unwrap();
        assert!(rep.has_perfect_cross_corr);
        let up = design.upper(0.05, MC).unwrap();
        let off = design.off_center(0.05, MC).unwrap();
        assert!(up > design.geometry().residual && off > 0.0);
    }

    #[test]
    fn report_collects_everything() {
        let rep = bound_report(&rank_two_four(), &Partition::split_at(2, 4).unwrap(), 0.05, McConfig { n_mc: 5000, seed: 1 }).unwrap();
        assert!(rep.thm21.value().is_some());
        assert_eq!(rep.baseline.reason(), Some(Reason::SingularCovariance));
        assert_eq!(rep.prop24.reason(), Some(Reason::ZeroResidualVariance));
        assert!(rep.flags().contains(&"baseline:singular_covariance".to_string()));
        let json = rep.to_json();
        assert!(json.contains("\"status\": \"inapplicable\""));
        assert!(json.contains("\"reason\": \"singular_covariance\""));
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn selection_skips_bounds() {
        let cfg = BoundConfig {
            mc: McConfig { n_mc: 1000, seed: 2 },
            selection: BoundSelection {
                cor22: false,
                prop24: false,
                ..BoundSelection::default()
            },
            ..BoundConfig::default()
        };
        let rep = BoundCalculator::new(&identity(3), &Partition::split_at(1, 3).unwrap(), &cfg)
            .unwrap()
            .report(0.1)
            .unwrap();
        assert_eq!(rep.cor22.reason(), Some(Reason::NotRequested));
        assert!(rep.flags().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn linear_in_eps(rho in -0.15f64..0.95, p in 2usize..6, eps in 1e-3f64..1.0, seed in any::<u64>()) {
            let spec = equicorr(p, rho);
            let part = Partition::split_at(p / 2, p).unwrap();
            let cfg = BoundConfig { mc: McConfig { n_mc: 2000, seed }, ..BoundConfig::default() };
            let calc = BoundCalculator::new(&spec, &part, &cfg).unwrap();
            let one = calc.report(eps).unwrap();
            let two = calc.report(2.0 * eps).unwrap();
            for ((name, a), (_, b)) in one.named().into_iter().zip(two.named()) {
                if name == "cor22" {
                    continue;
                }
                if let (Some(a), Some(b)) = (a.value(), b.value()) {
                    prop_assert_eq!(b, 2.0 * a, "{}", name);
                }
            }
            let eng = MaxFunctionals::new(&spec, 2000, seed).unwrap();
            for c in cor22_candidates(&spec, &part, &cfg.delta_grid, &eng).unwrap() {
                prop_assert_eq!(c.first.at(2.0 * eps), 2.0 * c.first.at(eps));
            }
        }

        #[test]
        fn equal_variance_reduction(rho in -0.15f64..0.95, p in 2usize..7, seed in any::<u64>()) {
            let spec = equicorr(p, rho);
            let part = Partition::split_at(p / 2, p).unwrap();
            let mc = McConfig { n_mc: 1000, seed };
            let t21 = bound_thm21(&spec, &part, 0.05, mc).unwrap();
            let t31 = bound_thm31(&spec, &part, 0.05, mc).unwrap();
            prop_assert_eq!(t31 * 3.5, t21);
        }
    }
}
