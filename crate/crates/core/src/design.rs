//! Covariance designs for the simulation studies.
//!
//! Low-rank designs draw row `i` of the loading matrix from its own stream,
//! so a design at dimension `p` is a prefix of the same design at a larger
//! `p` with the same seed.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::ExchangeableDesign;
use crate::error::{Error, Result};
use crate::gaussian::{CovSpec, Partition};
use crate::rng::{derive, tag, StreamFamily};

pub const DEFAULT_P: usize = 400;
pub const DEFAULT_RANK: usize = 20;
pub const VIOLATION_CORR: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Unit row norms on both sides.
    HomogLowrank,
    /// As `HomogLowrank`, with the first `overlap_k` rows of `B` copied from `A`.
    HomogOverlap,
    /// `B` rows normalised, `A` scaled by its largest row norm.
    #[serde(rename = "heterog_condA", alias = "heterog_cond_a")]
    HeterogCondA,
    /// Equicorrelation with a per-side standard deviation profile.
    HeterogViolation,
    FullrankEquicorr,
    /// Correlation matrix of `ΓΓᵀ + I` with `Γ` of width `p/10`.
    Table1,
    ExchangeableOverlap,
    /// Low-rank unit-variance design split as `A = [0, k0)`.
    K0Split,
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            DesignKind::HomogLowrank => "homog_lowrank",
            DesignKind::HomogOverlap => "homog_overlap",
            DesignKind::HeterogCondA => "heterog_condA",
            DesignKind::HeterogViolation => "heterog_violation",
            DesignKind::FullrankEquicorr => "fullrank_equicorr",
            DesignKind::Table1 => "table1",
            DesignKind::ExchangeableOverlap => "exchangeable_overlap",
            DesignKind::K0Split => "k0_split",
        }
    }
}

impl std::str::FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::BadConfig(format!("unknown design kind {s:?}")))
    }
}

/// Per-side standard deviations for `heterog_violation`. Both sides use
/// the same profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceProfile {
    /// All ones.
    Benchmark,
    /// Half at 0.9, a quarter at 1, a quarter at 10.
    #[serde(rename = "nu_0_75")]
    Nu075,
    /// Three quarters at 0.9, an eighth at 1, an eighth at 15.
    #[serde(rename = "nu_0_875")]
    Nu0875,
    /// Explicit values, one per coordinate of a side.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    #[default]
    Zero,
    /// iid standard exponential means.
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub kind: DesignKind,
    #[serde(default = "default_p")]
    pub p: usize,
    /// Factor rank for the low-rank kinds, default `min(20, p)`; `p/10` for `table1`.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub overlap_k: Option<usize>,
    /// Row norm of the copied rows in `B` (overlap designs).
    #[serde(default)]
    pub overlap_norm_b: Option<f64>,
    #[serde(default)]
    pub k0: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub variance_profile: Option<VarianceProfile>,
    #[serde(default)]
    pub mean: MeanKind,
    /// Seed for the random loadings and means; experiments fill it from
    /// their master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_p() -> usize {
    DEFAULT_P
}

impl DesignConfig {
    pub fn new(kind: DesignKind, p: usize) -> Self {
        Self {
            kind,
            p,
            d: None,
            overlap_k: None,
            overlap_norm_b: None,
            k0: None,
            rho: None,
            variance_profile: None,
            mean: MeanKind::Zero,
            seed: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn rank(mut self, d: usize) -> Self {
        self.d = Some(d);
        self
    }

    pub fn overlap(mut self, k: usize) -> Self {
        self.overlap_k = Some(k);
        self
    }

    pub fn rho(mut self, rho: f64) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn k0(mut self, k0: usize) -> Self {
        self.k0 = Some(k0);
        self
    }

    pub fn profile(mut self, profile: VarianceProfile) -> Self {
        self.variance_profile = Some(profile);
        self
    }

    pub fn mean(mut self, mean: MeanKind) -> Self {
        self.mean = mean;
        self
    }

    /// Short label used as `design_id` in output tables.
    pub fn id(&self) -> String {
        let mut s = format!("{}_p{}", self.kind.name(), self.p);
        if let Some(k) = self.overlap_k {
            s.push_str(&format!("_k{k}"));
        }
        if let Some(k0) = self.k0 {
            s.push_str(&format!("_k0{k0}"));
        }
        if let Some(r) = self.rho {
            s.push_str(&format!("_rho{r}"));
        }
        s
    }
}

/// A generated law with its split and bookkeeping.
#[derive(Debug, Clone)]
pub struct Design {
    pub id: String,
    pub spec: CovSpec,
    pub part: Partition,
    /// Average marginal standard deviation.
    pub sigma_hat: f64,
    /// Set for `exchangeable_overlap`, whose `spec` is the encoded law.
    pub exchangeable: Option<ExchangeableDesign>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadConfig(msg.into())
}

fn half(cfg: &DesignConfig) -> Result<usize> {
    if cfg.p < 2 || cfg.p % 2 != 0 {
        return Err(bad(format!("{}: p must be even and at least 2, got {}", cfg.kind.name(), cfg.p)));
    }
    Ok(cfg.p / 2)
}

fn rank(cfg: &DesignConfig) -> Result<usize> {
    let d = cfg.d.unwrap_or(DEFAULT_RANK.min(cfg.p));
    if d == 0 || d > cfg.p {
        return Err(bad(format!("{}: need 1 ≤ d ≤ p, got d = {d}, p = {}", cfg.kind.name(), cfg.p)));
    }
    Ok(d)
}

fn rho_in(cfg: &DesignConfig, default: Option<f64>) -> Result<f64> {
    let rho = cfg
        .rho
        .or(default)
        .ok_or_else(|| bad(format!("{}: rho is required", cfg.kind.name())))?;
    let floor = if cfg.p > 1 { -1.0 / (cfg.p as f64 - 1.0) } else { -1.0 };
    if !(rho > floor && rho < 1.0) {
        return Err(bad(format!(
            "{}: rho must lie in ({floor}, 1) for p = {}, got {rho}",
            cfg.kind.name(),
            cfg.p
        )));
    }
    Ok(rho)
}

/// `rows × d` standard normal loadings, row `i` from stream `first + i`.
fn loadings(seed: u64, first: usize, rows: usize, d: usize) -> DMatrix<f64> {
    let family = StreamFamily::new(derive(seed, tag("loadings")));
    let mut g = DMatrix::zeros(rows, d);
    for r in 0..rows {
        let mut rng = family.stream((first + r) as u64);
        for c in 0..d {
            g[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }
    g
}

fn row_norms(g: &DMatrix<f64>) -> Vec<f64> {
    g.row_iter().map(|r| r.norm()).collect()
}

fn normalize_rows(g: &mut DMatrix<f64>) {
    for mut r in g.row_iter_mut() {
        let n = r.norm();
        r /= n;
    }
}

fn means(cfg: &DesignConfig, p: usize) -> DVector<f64> {
    match cfg.mean {
        MeanKind::Zero => DVector::zeros(p),
        MeanKind::Exponential => {
            let mut rng = StreamFamily::new(derive(cfg.seed.unwrap_or(0), tag("means"))).stream(0);
            DVector::from_fn(p, |_, _| Exp1.sample(&mut rng))
        }
    }
}

fn profile_sd(profile: &VarianceProfile, h: usize) -> Result<Vec<f64>> {
    let blocks = |parts: &[(usize, usize, f64)]| -> Result<Vec<f64>> {
        let unit = parts.iter().map(|&(_, den, _)| den).max().unwrap_or(1);
        if h % unit != 0 {
            return Err(bad(format!(
                "heterog_violation: side size {h} must be divisible by {unit} for this profile"
            )));
        }
        Ok(parts
            .iter()
            .flat_map(|&(num, den, v)| std::iter::repeat_n(v, h * num / den))
            .collect())
    };
    let sd = match profile {
        VarianceProfile::Benchmark => vec![1.0; h],
        VarianceProfile::Nu075 => blocks(&[(1, 2, 0.9), (1, 4, 1.0), (1, 4, 10.0)])?,
        VarianceProfile::Nu0875 => blocks(&[(3, 4, 0.9), (1, 8, 1.0), (1, 8, 15.0)])?,
        VarianceProfile::Custom(v) => {
            if v.len() != h {
                return Err(bad(format!(
                    "heterog_violation: custom profile needs {h} entries, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(bad("heterog_violation: profile entries must be positive"));
            }
            v.clone()
        }
    };
    Ok(sd)
}

fn equicorr(p: usize, rho: f64, sd: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| if i == j { sd[i] * sd[i] } else { rho * sd[i] * sd[j] })
}

/// Builds the law and split described by `cfg`.
pub fn gen_design(cfg: &DesignConfig) -> Result<Design> {
    let p = cfg.p;
    let seed = cfg.seed.unwrap_or(0);
    if p < 2 {
        return Err(bad(format!("p must be at least 2, got {p}")));
    }
    let mut exchangeable = None;
    let (spec, part) = match cfg.kind {
        DesignKind::HomogLowrank | DesignKind::HomogOverlap | DesignKind::HeterogCondA => {
            let h = half(cfg)?;
            let d = rank(cfg)?;
            let mut ga = loadings(seed, 0, h, d);
            let mut gb = loadings(seed, h, h, d);
            normalize_rows(&mut gb);
            if cfg.kind == DesignKind::HeterogCondA {
                let top = row_norms(&ga).into_iter().fold(0.0, f64::max);
                ga /= top;
            } else {
                normalize_rows(&mut ga);
            }
            if cfg.kind == DesignKind::HomogOverlap {
                let k = cfg.overlap_k.unwrap_or(p / 8);
                if k == 0 || k > h {
                    return Err(bad(format!("homog_overlap: need 1 ≤ overlap_k ≤ p/2 = {h}, got {k}")));
                }
                let scale = cfg.overlap_norm_b.unwrap_or(1.0);
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(bad("homog_overlap: overlap_norm_b must be positive"));
                }
                for r in 0..k {
                    gb.set_row(r, &(ga.row(r) * scale));
                }
            }
            let mut g = DMatrix::zeros(p, d);
            g.rows_mut(0, h).copy_from(&ga);
            g.rows_mut(h, h).copy_from(&gb);
            (CovSpec::factor(g, means(cfg, p))?, Partition::split_at(h, p)?)
        }
        DesignKind::K0Split => {
            let d = rank(cfg)?;
            let k0 = cfg.k0.ok_or_else(|| bad("k0_split: k0 is required"))?;
            if k0 == 0 || k0 >= p {
                return Err(bad(format!("k0_split: need 1 ≤ k0 < p = {p}, got {k0}")));
            }
            let mut g = loadings(seed, 0, p, d);
            normalize_rows(&mut g);
            (CovSpec::factor(g, means(cfg, p))?, Partition::split_at(k0, p)?)
        }
        DesignKind::HeterogViolation => {
            let h = half(cfg)?;
            let rho = rho_in(cfg, Some(VIOLATION_CORR))?;
            let side = profile_sd(cfg.variance_profile.as_ref().unwrap_or(&VarianceProfile::Benchmark), h)?;
            let sd: Vec<f64> = side.iter().chain(&side).copied().collect();
            (
                CovSpec::explicit(equicorr(p, rho, &sd), means(cfg, p))?,
                Partition::split_at(h, p)?,
            )
        }
        DesignKind::FullrankEquicorr => {
            let h = half(cfg)?;
            let rho = rho_in(cfg, None)?;
            (
                CovSpec::explicit(equicorr(p, rho, &vec![1.0; p]), means(cfg, p))?,
                Partition::split_at(h, p)?,
            )
        }
        DesignKind::Table1 => {
            let h = half(cfg)?;
            let w = cfg.d.unwrap_or((p / 10).max(1));
            if w == 0 || w > p {
                return Err(bad(format!("table1: need 1 ≤ d ≤ p, got d = {w}")));
            }
            let g = loadings(seed, 0, p, w);
            // Rows of [Γ | I] scaled to unit norm give the correlation of ΓΓᵀ + I.
            let mut f = DMatrix::zeros(p, w + p);
            f.columns_mut(0, w).copy_from(&g);
            for i in 0..p {
                f[(i, w + i)] = 1.0;
            }
            normalize_rows(&mut f);
            (CovSpec::factor(f, means(cfg, p))?, Partition::split_at(h, p)?)
        }
        DesignKind::ExchangeableOverlap => {
            let k = cfg
                .overlap_k
                .ok_or_else(|| bad("exchangeable_overlap: overlap_k is required"))?;
            let rho = rho_in(cfg, None)?;
            if cfg.mean != MeanKind::Zero {
                return Err(bad("exchangeable_overlap: means must be zero"));
            }
            let base = CovSpec::explicit(equicorr(p, rho, &vec![1.0; p]), DVector::zeros(p))?;
            let ex = ExchangeableDesign::new(base, k).map_err(|e| bad(format!("exchangeable_overlap: {e}")))?;
            let encoded = ex.encoded()?;
            exchangeable = Some(ex);
            encoded
        }
    };
    let sigma_hat = spec.sd().iter().sum::<f64>() / spec.dim() as f64;
    Ok(Design {
        id: cfg.id(),
        spec,
        part,
        sigma_hat,
        exchangeable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{correlation, explicit_cov, min_eigenvalue, rho_bar, violation_stats, CovForm};

    fn unit_diag(spec: &CovSpec) {
        for (i, s) in spec.sd().iter().enumerate() {
            assert!((s - 1.0).abs() < 1e-12, "sd[{i}] = {s}");
        }
    }

    #[test]
    fn lowrank_unit_rows() {
        let d = gen_design(&DesignConfig::new(DesignKind::HomogLowrank, 8).rank(3).seed(1)).unwrap();
        unit_diag(&d.spec);
        assert_eq!(d.part.a(), &[0, 1, 2, 3]);
        assert_eq!(d.part.b(), &[4, 5, 6, 7]);
        assert!(matches!(d.spec.form(), CovForm::Factor(g) if g.ncols() == 3));
        assert!(rho_bar(&d.spec, &d.part).unwrap() < 1.0 - 1e-9);
    }

    #[test]
    fn overlap_adds_one_perfect_pair() {
        let d = gen_design(&DesignConfig::new(DesignKind::HomogOverlap, 8).rank(3).overlap(1).seed(2)).unwrap();
        unit_diag(&d.spec);
        let mut perfect = vec![];
        for &i in d.part.a() {
            for &j in d.part.b() {
                if correlation(&d.spec, i, j) > 1.0 - 1e-12 {
                    perfect.push((i, j));
                }
            }
        }
        assert_eq!(perfect, vec![(0, 4)]);
    }

    #[test]
    fn cond_a_scaling() {
        let d = gen_design(&DesignConfig::new(DesignKind::HeterogCondA, 40).seed(3)).unwrap();
        let sd = d.spec.sd();
        assert!(sd[..20].iter().all(|&s| s <= 1.0 + 1e-12));
        assert!((sd[..20].iter().fold(0.0_f64, |m, &s| m.max(s)) - 1.0).abs() < 1e-12);
        assert!(sd[20..].iter().all(|&s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn violation_profiles() {
        let d = gen_design(&DesignConfig::new(DesignKind::HeterogViolation, 16).profile(VarianceProfile::Nu075)).unwrap();
        let v = violation_stats(&d.spec, &d.part).unwrap();
        assert_eq!(v.nu_a, 0.75);
        assert!((v.m_a - (-8.067)).abs() < 5e-4);
        let d = gen_design(&DesignConfig::new(DesignKind::HeterogViolation, 32).profile(VarianceProfile::Nu0875)).unwrap();
        let v = violation_stats(&d.spec, &d.part).unwrap();
        assert_eq!(v.nu_b, 0.875);
        assert!((v.m_b - (-12.586)).abs() < 5e-4);
        let e = gen_design(&DesignConfig::new(DesignKind::HeterogViolation, 12).profile(VarianceProfile::Nu0875));
        assert!(matches!(e, Err(Error::BadConfig(m)) if m.contains("divisible")));
    }

    #[test]
    fn table1_is_a_full_rank_correlation() {
        let d = gen_design(&DesignConfig::new(DesignKind::Table1, 50).seed(4)).unwrap();
        unit_diag(&d.spec);
        let s = explicit_cov(&d.spec);
        assert!(min_eigenvalue(s) > 0.0);
        // Independent oracle: build ΓΓᵀ + I and normalise it directly.
        let g = loadings(4, 0, 50, 5);
        let raw = &g * g.transpose() + DMatrix::identity(50, 50);
        for i in 0..50 {
            for j in 0..50 {
                let want = raw[(i, j)] / (raw[(i, i)] * raw[(j, j)]).sqrt();
                assert!((s[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exchangeable_encoding() {
        let d = gen_design(&DesignConfig::new(DesignKind::ExchangeableOverlap, 14).overlap(2).rho(0.3)).unwrap();
        assert_eq!(d.spec.dim(), 16);
        assert_eq!(d.part.a().len(), 8);
        assert_eq!(d.part.b().len(), 8);
        let g = d.exchangeable.unwrap().geometry();
        assert_eq!((g.m, g.k, g.p), (8, 2, 14));
    }

    #[test]
    fn k0_split_and_nesting() {
        let small = gen_design(&DesignConfig::new(DesignKind::K0Split, 25).k0(20).seed(5)).unwrap();
        let big = gen_design(&DesignConfig::new(DesignKind::K0Split, 60).k0(20).seed(5)).unwrap();
        assert_eq!(small.part.a().len(), 20);
        let (CovForm::Factor(a), CovForm::Factor(b)) = (small.spec.form(), big.spec.form()) else {
            panic!("factor form expected");
        };
        assert_eq!(a, &b.rows(0, 25).into_owned());
    }

    #[test]
    fn exponential_means_are_deterministic() {
        let cfg = DesignConfig::new(DesignKind::HomogLowrank, 10).rank(3).mean(MeanKind::Exponential).seed(6);
        let a = gen_design(&cfg).unwrap();
        let b = gen_design(&cfg).unwrap();
        assert_eq!(a.spec, b.spec);
        assert!(a.spec.mu().iter().all(|&m| m > 0.0));
    }

    #[test]
    fn bad_configs_name_the_constraint() {
        let cases = [
            (DesignConfig::new(DesignKind::HomogLowrank, 7), "even"),
            (DesignConfig::new(DesignKind::HomogLowrank, 8).rank(9), "d ≤ p"),
            (DesignConfig::new(DesignKind::HomogOverlap, 8).rank(3).overlap(5), "overlap_k"),
            (DesignConfig::new(DesignKind::K0Split, 8).rank(3), "k0"),
            (DesignConfig::new(DesignKind::FullrankEquicorr, 8), "rho"),
            (DesignConfig::new(DesignKind::FullrankEquicorr, 8).rho(1.0), "rho"),
            (DesignConfig::new(DesignKind::ExchangeableOverlap, 14).overlap(14).rho(0.3), "overlap"),
        ];
        for (cfg, needle) in cases {
            match gen_design(&cfg) {
                Err(Error::BadConfig(m)) => assert!(m.contains(needle), "{m}"),
                other => panic!("{:?}: {:?}", cfg.kind, other.map(|d| d.id)),
            }
        }
    }

    #[test]
    fn config_json() {
        let cfg: DesignConfig = serde_json::from_str(r#"{"kind":"heterog_violation","p":16,"variance_profile":"nu_0_75"}"#).unwrap();
        assert_eq!(cfg.variance_profile, Some(VarianceProfile::Nu075));
        assert!(serde_json::from_str::<DesignConfig>(r#"{"kind":"table1","bogus":1}"#).is_err());
        assert_eq!("heterog_condA".parse::<DesignKind>().unwrap(), DesignKind::HeterogCondA);
        assert_eq!("k0_split".parse::<DesignKind>().unwrap(), DesignKind::K0Split);
        let cfg: DesignConfig = serde_json::from_str(r#"{"kind":"heterog_cond_a"}"#).unwrap();
        assert_eq!(cfg.p, DEFAULT_P);
    }
}
