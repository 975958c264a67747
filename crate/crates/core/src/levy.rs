//! Empirical Lévy concentration, density curves and Monte Carlo expected
//! maxima.
//!
//! The default estimator scans an equidistant t-grid from the smallest to the
//! largest realisation (both endpoints included) and reports the largest
//! fraction of draws within `ε` of a grid point. It can only under-estimate
//! the supremum; [`levy_exact`] gives the exact sliding-window maximum for
//! comparison.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::CovSpec;
use crate::report::{fmt_num, CsvTable};
use crate::sampler::{mean_sd, DiffSample, Sampler};

pub const DEFAULT_GRID: usize = 1000;
pub const DEFAULT_KDE_POINTS: usize = 512;
/// Samples smaller than this are refused by [`density_curve`].
pub const MIN_KDE_SAMPLE: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyEstimate {
    pub epsilon: f64,
    pub value: f64,
    pub argmax_t: f64,
    /// Position of `argmax_t` on the grid; for [`levy_exact`] the rank of
    /// the draw that opens the best window.
    pub argmax_index: usize,
    /// 0 for the exact estimator.
    pub grid_points: usize,
    pub n_rep: usize,
    /// Binomial standard error `sqrt(v(1−v)/n)` at the reported value.
    pub se_hint: f64,
}

fn binomial_se(v: f64, n: usize) -> f64 {
    (v * (1.0 - v) / n as f64).sqrt()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    Ok(())
}

/// A sorted sample expressed as offsets from its minimum, with the t-grid
/// `u_i = i · step` laid over `[0, max − min]`.
struct GridScan {
    offsets: Vec<f64>,
    origin: f64,
    step: f64,
    grid: usize,
}

impl GridScan {
    fn new(values: &[f64], grid: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("statistic sample"));
        }
        if grid == 0 {
            return Err(Error::InvalidArgument("grid_points must be at least 1".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let origin = sorted[0];
        let range = sorted[sorted.len() - 1] - origin;
        let step = if grid > 1 { range / (grid - 1) as f64 } else { 0.0 };
        let offsets = sorted.iter().map(|v| v - origin).collect();
        Ok(Self {
            offsets,
            origin,
            step,
            grid,
        })
    }

    fn n(&self) -> usize {
        self.offsets.len()
    }

    /// `#{k : |r_k − u| ≤ ε}` by two binary searches. Both predicates are
    /// monotone in `r_k` under rounding, so the count is exact with respect
    /// to the floating-point test.
    fn count(&self, u: f64, eps: f64) -> usize {
        let lo = self.offsets.partition_point(|&r| r - u < -eps);
        let hi = self.offsets.partition_point(|&r| r - u <= eps);
        hi.saturating_sub(lo)
    }

    fn best(&self, eps: f64, keep: impl Fn(f64) -> bool) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..self.grid {
            let u = i as f64 * self.step;
            if !keep(self.origin + u) {
                continue;
            }
            let c = self.count(u, eps);
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        best
    }

    fn estimate(&self, eps: f64, (index, count): (usize, usize)) -> LevyEstimate {
        let value = count as f64 / self.n() as f64;
        LevyEstimate {
            epsilon: eps,
            value,
            argmax_t: self.origin + index as f64 * self.step,
            argmax_index: index,
            grid_points: self.grid,
            n_rep: self.n(),
            se_hint: binomial_se(value, self.n()),
        }
    }
}

/// Grid estimate of `sup_t P(|D − t| ≤ ε)` for a max-difference sample.
pub fn levy_hat(diffs: &DiffSample, eps: f64, grid_points: usize) -> Result<LevyEstimate> {
    levy_hat_single(&diffs.values, eps, grid_points)
}

/// [`levy_hat`] over an arbitrary statistic vector.
pub fn levy_hat_single(values: &[f64], eps: f64, grid_points: usize) -> Result<LevyEstimate> {
    check_eps(eps)?;
    let scan = GridScan::new(values, grid_points)?;
    let best = scan.best(eps, |_| true).expect("grid is nonempty");
    Ok(scan.estimate(eps, best))
}

/// One estimate per `ε`, all on the same t-grid, so the values are
/// nondecreasing in `ε`.
pub fn levy_curve(values: &[f64], epsilons: &[f64], grid_points: usize) -> Result<Vec<LevyEstimate>> {
    for e in epsilons {
        check_eps(*e)?;
    }
    if epsilons.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("epsilons must be sorted".into()));
    }
    let scan = GridScan::new(values, grid_points)?;
    Ok(epsilons
        .iter()
        .map(|&e| scan.estimate(e, scan.best(e, |_| true).expect("grid is nonempty")))
        .collect())
}

/// Grid estimate of `sup_{|t| > ε} P(|D − t| ≤ ε)`, the mass near points
/// bounded away from zero. `None` when no grid point satisfies `|t| > ε`.
pub fn off_center_sup(values: &[f64], eps: f64, grid_points: usize) -> Result<Option<LevyEstimate>> {
    check_eps(eps)?;
    let scan = GridScan::new(values, grid_points)?;
    Ok(scan
        .best(eps, |t| t.abs() > eps)
        .map(|best| scan.estimate(eps, best)))
}

/// Exact sliding-window maximiser: the best interval `[t − ε, t + ε]` can
/// always be slid right until its left end meets a draw.
pub fn levy_exact(values: &[f64], eps: f64) -> Result<LevyEstimate> {
    check_eps(eps)?;
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistic sample"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let width = 2.0 * eps;
    let mut best = (0, 0);
    let mut j = 0;
    for i in 0..sorted.len() {
        j = j.max(i);
        while j < sorted.len() && sorted[j] - sorted[i] <= width {
            j += 1;
        }
        if j - i > best.1 {
            best = (i, j - i);
        }
    }
    let n = sorted.len();
    let value = best.1 as f64 / n as f64;
    Ok(LevyEstimate {
        epsilon: eps,
        value,
        argmax_t: sorted[best.0] + eps,
        argmax_index: best.0,
        grid_points: 0,
        n_rep: n,
        se_hint: binomial_se(value, n),
    })
}

/// Lévy sweep as a table with columns `epsilon, levy, se, argmax_t`.
pub fn levy_table(estimates: &[LevyEstimate]) -> CsvTable {
    let mut t = CsvTable::new(&["epsilon", "levy", "se", "argmax_t"]);
    for e in estimates {
        t.push(vec![
            fmt_num(e.epsilon),
            fmt_num(e.value),
            fmt_num(e.se_hint),
            fmt_num(e.argmax_t),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub normalized: bool,
}

impl DensityCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Number of strict local maxima above 1% of the peak height.
    pub fn mode_count(&self) -> usize {
        let peak = self.density.iter().copied().fold(0.0, f64::max);
        self.density
            .windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2] && w[1] > 0.01 * peak)
            .count()
    }

    pub fn table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["x", "y"]);
        for (x, y) in self.grid.iter().zip(&self.density) {
            t.push(vec![fmt_num(*x), fmt_num(*y)]);
        }
        t
    }
}

/// Gaussian-kernel density estimate with Silverman's bandwidth
/// `1.06 · sd · n^{-1/5}`, evaluated on `grid_points` equidistant points
/// spanning the sample plus four bandwidths either side.
pub fn density_curve(values: &[f64], normalize: bool, grid_points: usize) -> Result<DensityCurve> {
    if values.len() < MIN_KDE_SAMPLE {
        return Err(Error::InvalidArgument(format!(
            "density estimation needs at least {MIN_KDE_SAMPLE} draws, got {}",
            values.len()
        )));
    }
    if grid_points < 2 {
        return Err(Error::InvalidArgument("grid_points must be at least 2".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistic sample"));
    }
    let (mean, sd) = mean_sd(values);
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample);
    }
    let mut xs: Vec<f64> = if normalize {
        values.iter().map(|v| (v - mean) / sd).collect()
    } else {
        values.to_vec()
    };
    xs.sort_by(f64::total_cmp);
    let spread = if normalize { 1.0 } else { sd };
    let n = xs.len() as f64;
    let h = 1.06 * spread * n.powf(-0.2);
    let lo = xs[0] - 4.0 * h;
    let hi = xs[xs.len() - 1] + 4.0 * h;
    let step = (hi - lo) / (grid_points - 1) as f64;
    let grid: Vec<f64> = (0..grid_points).map(|i| lo + i as f64 * step).collect();
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    // Kernel mass beyond 9 bandwidths is below 1e-17 of the peak.
    let cut = 9.0 * h;
    let density = grid
        .par_iter()
        .map(|&x| {
            let a = xs.partition_point(|&v| v < x - cut);
            let b = xs.partition_point(|&v| v <= x + cut);
            xs[a..b]
                .iter()
                .map(|&v| {
                    let z = (x - v) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
        normalized: normalize,
    })
}

/// Monte Carlo estimate of an expected maximum over `subset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMax {
    pub subset: Vec<usize>,
    pub value: f64,
    pub se: f64,
    pub n_mc: usize,
    pub standardized: bool,
}

/// Which maximum a query asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaxKind {
    /// `max |X_l − μ_l| / σ_l`
    AbsStandardized,
    /// `max |X_l − μ_l|`
    AbsRaw,
    /// `max X_l`
    Signed,
}

/// Common-random-number engine for expected maxima.
///
/// Every query is answered from the same draws (fixed by `seed`), so
/// estimates for nested subsets are ordered exactly as the true values are,
/// and bounds that share an expected-max term agree bit for bit.
#[derive(Debug)]
pub struct MaxFunctionals {
    sampler: Sampler,
    mu: Vec<f64>,
    sd: Vec<f64>,
    n_mc: usize,
    seed: u64,
    memo: Mutex<Memo>,
}

type QueryKey = (MaxKind, Vec<usize>);

/// Answers already computed, plus the queries recorded while planning.
#[derive(Debug, Clone, Default)]
struct Memo {
    done: HashMap<QueryKey, ExpectedMax>,
    planning: bool,
    planned: Vec<QueryKey>,
}

impl Clone for MaxFunctionals {
    fn clone(&self) -> Self {
        Self {
            sampler: self.sampler.clone(),
            mu: self.mu.clone(),
            sd: self.sd.clone(),
            n_mc: self.n_mc,
            seed: self.seed,
            memo: Mutex::new(self.memo.lock().expect("memo lock").clone()),
        }
    }
}

impl MaxFunctionals {
    pub fn new(spec: &CovSpec, n_mc: usize, seed: u64) -> Result<Self> {
        if n_mc == 0 {
            return Err(Error::InvalidArgument("n_mc must be at least 1".into()));
        }
        Ok(Self {
            sampler: Sampler::new(spec)?,
            mu: spec.mu().iter().copied().collect(),
            sd: spec.sd().to_vec(),
            n_mc,
            seed,
            memo: Mutex::new(Memo::default()),
        })
    }

    /// Until [`MaxFunctionals::commit`], [`MaxFunctionals::evaluate`] only
    /// records its queries and answers them with zeros. Running a set of
    /// computations once in this mode and then again after `commit` costs a
    /// single pass over the draws.
    pub fn begin_plan(&self) {
        let mut m = self.memo.lock().expect("memo lock");
        m.planning = true;
        m.planned.clear();
    }

    /// Leaves planning mode and answers every recorded query in one pass.
    pub fn commit(&self) -> Result<()> {
        let planned = {
            let mut m = self.memo.lock().expect("memo lock");
            m.planning = false;
            std::mem::take(&mut m.planned)
        };
        let queries: Vec<(MaxKind, &[usize])> = planned.iter().map(|(k, s)| (*k, s.as_slice())).collect();
        self.evaluate(&queries).map(|_| ())
    }

    pub fn n_mc(&self) -> usize {
        self.n_mc
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Answers several queries in one pass over the draws. Answers are
    /// memoised; since every pass sees the same draws and reduces them in
    /// the same order, a memoised answer equals a fresh one bit for bit.
    pub fn evaluate(&self, queries: &[(MaxKind, &[usize])]) -> Result<Vec<ExpectedMax>> {
        let p = self.mu.len();
        for (_, subset) in queries {
            if subset.is_empty() {
                return Err(Error::EmptySubset);
            }
            if let Some(&bad) = subset.iter().find(|&&i| i >= p) {
                return Err(Error::InvalidArgument(format!("index {bad} out of range for p={p}")));
            }
        }
        let mut memo = self.memo.lock().expect("memo lock");
        if memo.planning {
            for (k, s) in queries {
                memo.planned.push((*k, s.to_vec()));
            }
            return Ok(queries
                .iter()
                .map(|(kind, subset)| ExpectedMax {
                    subset: subset.to_vec(),
                    value: 0.0,
                    se: 0.0,
                    n_mc: self.n_mc,
                    standardized: *kind == MaxKind::AbsStandardized,
                })
                .collect());
        }
        let mut missing: Vec<(MaxKind, &[usize])> = Vec::new();
        let mut seen = HashSet::new();
        for &(k, s) in queries {
            let key = (k, s.to_vec());
            if !memo.done.contains_key(&key) && seen.insert(key) {
                missing.push((k, s));
            }
        }
        if !missing.is_empty() {
            for e in self.compute(&missing)? {
                memo.done.insert((e.0, e.1.subset.clone()), e.1);
            }
        }
        Ok(queries
            .iter()
            .map(|(k, s)| memo.done[&(*k, s.to_vec())].clone())
            .collect())
    }

    fn compute(&self, queries: &[(MaxKind, &[usize])]) -> Result<Vec<(MaxKind, ExpectedMax)>> {
        let p = self.mu.len();
        let q = queries.len();
        // Per block: (sum, sum of squares) for every query.
        let partials = self.sampler.map_blocks(self.n_mc, self.seed, true, |rows| {
            let mut acc = vec![(0.0_f64, 0.0_f64); q];
            for row in rows.chunks_exact(p) {
                for (slot, (kind, subset)) in acc.iter_mut().zip(queries) {
                    let m = subset
                        .iter()
                        .map(|&l| match kind {
                            MaxKind::AbsStandardized => row[l].abs() / self.sd[l],
                            MaxKind::AbsRaw => row[l].abs(),
                            MaxKind::Signed => row[l] + self.mu[l],
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    slot.0 += m;
                    slot.1 += m * m;
                }
            }
            acc
        })?;
        let n = self.n_mc as f64;
        Ok(queries
            .iter()
            .enumerate()
            .map(|(k, (kind, subset))| {
                let (s, ss) = partials
                    .iter()
                    .fold((0.0, 0.0), |(a, b), blk| (a + blk[k].0, b + blk[k].1));
                let mean = s / n;
                let var = if self.n_mc > 1 {
                    ((ss - n * mean * mean) / (n - 1.0)).max(0.0)
                } else {
                    0.0
                };
                (
                    *kind,
                    ExpectedMax {
                        subset: subset.to_vec(),
                        value: mean,
                        se: (var / n).sqrt(),
                        n_mc: self.n_mc,
                        standardized: *kind == MaxKind::AbsStandardized,
                    },
                )
            })
            .collect())
    }

    pub fn abs(&self, subset: &[usize], standardized: bool) -> Result<ExpectedMax> {
        let kind = if standardized {
            MaxKind::AbsStandardized
        } else {
            MaxKind::AbsRaw
        };
        Ok(self.evaluate(&[(kind, subset)])?.remove(0))
    }

    pub fn signed(&self, subset: &[usize]) -> Result<ExpectedMax> {
        Ok(self.evaluate(&[(MaxKind::Signed, subset)])?.remove(0))
    }
}

/// `E max_{l ∈ subset} |X_l − μ_l| (/σ_l)`.
pub fn expected_max_abs(
    spec: &CovSpec,
    subset: &[usize],
    n_mc: usize,
    seed: u64,
    standardized: bool,
) -> Result<ExpectedMax> {
    MaxFunctionals::new(spec, n_mc, seed)?.abs(subset, standardized)
}

/// `E max_{l ∈ subset} X_l`, means included.
pub fn expected_max_signed(spec: &CovSpec, subset: &[usize], n_mc: usize, seed: u64) -> Result<ExpectedMax> {
    MaxFunctionals::new(spec, n_mc, seed)?.signed(subset)
}
