//! Experiment orchestration: configuration, the individual studies and the
//! run manifest.
//!
//! Every study returns [`CsvTable`]s whose numeric content depends only on
//! the configuration, never on the thread count or the clock.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bootstrap::{
    argmax_prob, clt_rate, moment_scales, multiplier_replicates, observed_process, BootstrapResult, CltRate,
    CltRateInputs, DataMatrix, Multiplier, DEFAULT_QUANTILES,
};
use crate::bounds::{default_delta_grid, BoundCalculator, BoundConfig, BoundReport, BoundSelection, McConfig, DEFAULT_N_MC};
use crate::design::{gen_design, Design, DesignConfig, DesignKind};
use crate::error::{Error, Result};
use crate::gaussian::{check_conditions, explicit_cov, rho_bar, CovSpec, Partition};
use crate::levy::{levy_curve, LevyEstimate, DEFAULT_GRID};
use crate::report::{fmt_num, json_hash, CsvTable};
use crate::rng::{derive, tag};
use crate::sampler::max_diff_streamed;

pub const DEFAULT_N_REP: usize = 2000;
pub const DEFAULT_EPSILONS: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];
pub const DEFAULT_B_REPS: usize = 5000;

fn default_n_rep() -> usize {
    DEFAULT_N_REP
}
fn default_epsilons() -> Vec<f64> {
    DEFAULT_EPSILONS.to_vec()
}
fn default_grid() -> usize {
    DEFAULT_GRID
}
fn default_n_mc() -> usize {
    DEFAULT_N_MC
}

/// One JSON document describing a run. Command-line flags override its
/// fields, which override the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_rep")]
    pub n_rep: usize,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Monte Carlo size for the expected maxima inside the bounds.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub design: Option<DesignConfig>,
    #[serde(default)]
    pub bounds: BoundSelection,
    #[serde(default)]
    pub delta_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub reps: Option<usize>,
    pub eps: Option<Vec<f64>>,
    pub grid: Option<usize>,
    pub threads: Option<usize>,
}

#[derive(Deserialize)]
struct ManifestDoc {
    config: ExperimentConfig,
}

impl ExperimentConfig {
    /// Parses a config document. A run manifest is accepted too, in which
    /// case its config snapshot is used.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::BadConfig(format!("invalid JSON: {e}")))?;
        let parsed = if value.get("config_hash").is_some() && value.get("config").is_some() {
            serde_json::from_value::<ManifestDoc>(value).map(|m| m.config)
        } else {
            serde_json::from_value::<ExperimentConfig>(value)
        };
        parsed.map_err(|e| Error::BadConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(r) = o.reps {
            self.n_rep = r;
        }
        if let Some(e) = &o.eps {
            self.epsilons = e.clone();
        }
        if let Some(g) = o.grid {
            self.grid = g;
        }
        if let Some(t) = o.threads {
            self.threads = Some(t);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.n_rep < 2 {
            return bad(format!("n_rep must be at least 2, got {}", self.n_rep));
        }
        if self.grid == 0 {
            return bad("grid must be at least 1".into());
        }
        if self.epsilons.is_empty() {
            return bad("epsilons must not be empty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return bad(format!("epsilons must be positive, got {e}"));
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if self.n_mc == 0 {
            return bad("n_mc must be at least 1".into());
        }
        if let Some(d) = &self.delta_grid {
            if d.is_empty() || d.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
                return bad("delta_grid entries must lie in (0, 1)".into());
            }
        }
        Ok(())
    }

    /// Sorted, deduplicated epsilons.
    pub fn sorted_epsilons(&self) -> Vec<f64> {
        let mut e = self.epsilons.clone();
        e.sort_by(f64::total_cmp);
        e.dedup();
        e
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn hash(&self) -> String {
        json_hash(self)
    }

    /// The design block with its seed filled from the master seed.
    pub fn design_config(&self) -> Result<DesignConfig> {
        let mut d = self
            .design
            .clone()
            .ok_or_else(|| Error::BadConfig("a design section is required for this command".into()))?;
        if d.seed.is_none() {
            d.seed = Some(derive(self.seed, tag("design")));
        }
        Ok(d)
    }

    pub fn bound_config(&self) -> BoundConfig {
        BoundConfig {
            mc: McConfig {
                n_mc: self.n_mc,
                seed: derive(self.seed, tag("bounds")),
            },
            delta_grid: self.delta_grid.clone().unwrap_or_else(default_delta_grid),
            selection: self.bounds,
        }
    }
}

impl Design {
    /// Wraps an arbitrary law and split.
    pub fn custom(id: impl Into<String>, spec: CovSpec, part: Partition) -> Result<Self> {
        part_check(&spec, &part)?;
        let sigma_hat = spec.sd().iter().sum::<f64>() / spec.dim() as f64;
        Ok(Design {
            id: id.into(),
            spec,
            part,
            sigma_hat,
            exchangeable: None,
        })
    }
}

fn part_check(spec: &CovSpec, part: &Partition) -> Result<()> {
    if part.p() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: part.p(),
        });
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").cdf(x)
}

/// `2Φ(ε/s) − 1` where `s` is the standard deviation of `X_b − X_a`, for
/// designs with one coordinate per side; NaN otherwise.
pub fn analytic_levy(design: &Design, eps: f64) -> f64 {
    let (a, b) = (design.part.a(), design.part.b());
    if a.len() != 1 || b.len() != 1 {
        return f64::NAN;
    }
    let s = explicit_cov(&design.spec);
    let (i, j) = (a[0], b[0]);
    let var = s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)];
    if var <= 0.0 {
        return 1.0;
    }
    2.0 * std_normal_cdf(eps / var.sqrt()) - 1.0
}

fn rho_bar_or_nan(design: &Design) -> f64 {
    rho_bar(&design.spec, &design.part).unwrap_or(f64::NAN)
}

/// Lévy curve of `M_B − M_A` with one row per `ε`.
///
/// Columns: `design_id, p, epsilon, norm_eps, levy_hat, se, n_rep, rho_bar,
/// analytic`, where `norm_eps = sqrt(ln p) ε / σ̂`.
pub fn run_levy_experiment(design: &Design, epsilons: &[f64], n_rep: usize, grid: usize, seed: u64) -> Result<CsvTable> {
    let diffs = max_diff_streamed(&design.spec, &design.part, n_rep, seed)?;
    let curve = levy_curve(&diffs.values, epsilons, grid)?;
    let p = design.spec.dim();
    let scale = (p as f64).ln().sqrt() / design.sigma_hat;
    let rb = rho_bar_or_nan(design);
    let mut t = CsvTable::new(&[
        "design_id", "p", "epsilon", "norm_eps", "levy_hat", "se", "n_rep", "rho_bar", "analytic",
    ]);
    for e in &curve {
        t.push(vec![
            design.id.clone(),
            p.to_string(),
            fmt_num(e.epsilon),
            fmt_num(scale * e.epsilon),
            fmt_num(e.value),
            fmt_num(e.se_hint),
            n_rep.to_string(),
            fmt_num(rb),
            fmt_num(analytic_levy(design, e.epsilon)),
        ]);
    }
    Ok(t)
}

/// Empirical concentration next to every bound at one `ε`.
#[derive(Debug, Clone)]
pub struct BoundsComparison {
    pub levy: LevyEstimate,
    pub report: BoundReport,
    /// Bound values at `ε`.
    pub compare: CsvTable,
    /// Everything divided by `ε`.
    pub ratios: CsvTable,
}

pub fn run_bounds_compare(
    design: &Design,
    eps: f64,
    n_rep: usize,
    grid: usize,
    seed: u64,
    cfg: &BoundConfig,
) -> Result<BoundsComparison> {
    let diffs = max_diff_streamed(&design.spec, &design.part, n_rep, seed)?;
    let levy = levy_curve(&diffs.values, &[eps], grid)?.remove(0);
    let mut calc = BoundCalculator::new(&design.spec, &design.part, cfg)?;
    if let Some(ex) = &design.exchangeable {
        calc = calc.with_exchangeable(ex.geometry());
    }
    let report = calc.report(eps)?;
    let p = design.spec.dim();
    let value = |b: &crate::bounds::BoundValue| b.value().unwrap_or(f64::NAN);

    let mut compare = CsvTable::new(&[
        "design_id",
        "p",
        "epsilon",
        "empirical_levy",
        "se",
        "thm21",
        "cor22",
        "thm31",
        "prop24",
        "baseline",
        "cor23_single",
        "flags",
    ]);
    let mut row = vec![
        design.id.clone(),
        p.to_string(),
        fmt_num(eps),
        fmt_num(levy.value),
        fmt_num(levy.se_hint),
    ];
    row.extend(report.named().iter().map(|(_, b)| fmt_num(value(b))));
    row.push(report.flags().join(";"));
    compare.push(row);

    let mut ratios = CsvTable::new(&["design_id", "p", "epsilon", "empirical_ratio", "thm31", "prop24", "baseline"]);
    ratios.push(vec![
        design.id.clone(),
        p.to_string(),
        fmt_num(eps),
        fmt_num(levy.value / eps),
        fmt_num(value(&report.thm31) / eps),
        fmt_num(value(&report.prop24) / eps),
        fmt_num(value(&report.baseline) / eps),
    ]);
    Ok(BoundsComparison {
        levy,
        report,
        compare,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    /// Equicorrelated unit-variance laws over a grid of `ρ`.
    RhoSweepFullrank,
    /// Independent low-rank designs, each with its own `ρ̄`.
    RhoSweepLowrank,
    /// Fixed `|A| = k0` while `p` grows.
    K0Sweep,
}

fn default_scaling_p() -> usize {
    crate::design::DEFAULT_P
}
fn default_rho_min() -> f64 {
    0.9
}
fn default_rho_max() -> f64 {
    0.99
}
fn default_points() -> usize {
    10
}
fn default_designs() -> usize {
    20
}
fn default_k0() -> usize {
    20
}
fn default_ps() -> Vec<usize> {
    vec![25, 30, 40, 60, 80, 120]
}
fn default_scaling_eps() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub kind: ScalingKind,
    #[serde(default = "default_scaling_p")]
    pub p: usize,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "default_rho_min")]
    pub rho_min: f64,
    #[serde(default = "default_rho_max")]
    pub rho_max: f64,
    /// Number of equidistant `ρ` values (full-rank sweep).
    #[serde(default = "default_points")]
    pub points: usize,
    /// Number of random designs (low-rank sweep).
    #[serde(default = "default_designs")]
    pub designs: usize,
    #[serde(default = "default_k0")]
    pub k0: usize,
    #[serde(default = "default_ps")]
    pub ps: Vec<usize>,
    #[serde(default = "default_scaling_eps")]
    pub epsilon: f64,
}

impl ScalingConfig {
    pub fn new(kind: ScalingKind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults deserialize")
    }

    /// `points` equidistant values from `rho_min` to `rho_max` inclusive.
    pub fn rho_grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.rho_min];
        }
        let step = (self.rho_max - self.rho_min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.rho_min + step * i as f64).collect()
    }
}

/// Columns: `kind, design_id, p, rho, rho_bar, inv_sqrt_gap, inv_gap,
/// epsilon, levy_hat, se, n_rep, analytic`, with `gap = 1 − ρ̄`.
///
/// All points share the sampling seed, so nested designs see common random
/// numbers.
pub fn run_scaling_study(cfg: &ScalingConfig, n_rep: usize, grid: usize, seed: u64) -> Result<CsvTable> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::BadConfig(format!("scaling epsilon must be positive, got {}", cfg.epsilon)));
    }
    let mut t = CsvTable::new(&[
        "kind", "design_id", "p", "rho", "rho_bar", "inv_sqrt_gap", "inv_gap", "epsilon", "levy_hat", "se", "n_rep",
        "analytic",
    ]);
    let kind_name = serde_json::to_value(cfg.kind).expect("kind serializes");
    let kind_name = kind_name.as_str().expect("string kind").to_string();
    let sample_seed = derive(seed, tag("scaling"));
    let mut point = |design: &Design, rho: f64| -> Result<()> {
        let diffs = max_diff_streamed(&design.spec, &design.part, n_rep, sample_seed)?;
        let e = levy_curve(&diffs.values, &[cfg.epsilon], grid)?.remove(0);
        let rb = rho_bar_or_nan(design);
        t.push(vec![
            kind_name.clone(),
            design.id.clone(),
            design.spec.dim().to_string(),
            fmt_num(rho),
            fmt_num(rb),
            fmt_num(1.0 / (1.0 - rb).sqrt()),
            fmt_num(1.0 / (1.0 - rb)),
            fmt_num(cfg.epsilon),
            fmt_num(e.value),
            fmt_num(e.se_hint),
            n_rep.to_string(),
            fmt_num(analytic_levy(design, cfg.epsilon)),
        ]);
        Ok(())
    };
    match cfg.kind {
        ScalingKind::RhoSweepFullrank => {
            if !(cfg.rho_min < cfg.rho_max || cfg.points == 1) || cfg.points == 0 {
                return Err(Error::BadConfig("need rho_min < rho_max and points ≥ 1".into()));
            }
            for rho in cfg.rho_grid() {
                let d = gen_design(&DesignConfig::new(DesignKind::FullrankEquicorr, cfg.p).rho(rho))?;
                point(&d, rho)?;
            }
        }
        ScalingKind::RhoSweepLowrank => {
            if cfg.designs == 0 {
                return Err(Error::BadConfig("designs must be at least 1".into()));
            }
            for i in 0..cfg.designs {
                let mut dc = DesignConfig::new(DesignKind::HomogLowrank, cfg.p).seed(derive(seed, i as u64));
                dc.d = cfg.d;
                let mut d = gen_design(&dc)?;
                d.id = format!("{}_r{i}", d.id);
                point(&d, f64::NAN)?;
            }
        }
        ScalingKind::K0Sweep => {
            if let Some(&p) = cfg.ps.iter().find(|&&p| p <= cfg.k0) {
                return Err(Error::BadConfig(format!("k0_sweep: every p must exceed k0 = {}, got {p}", cfg.k0)));
            }
            let design_seed = derive(seed, tag("design"));
            for &p in &cfg.ps {
                let mut dc = DesignConfig::new(DesignKind::K0Split, p).k0(cfg.k0).seed(design_seed);
                dc.d = cfg.d;
                point(&gen_design(&dc)?, f64::NAN)?;
            }
        }
    }
    Ok(t)
}

fn default_b_reps() -> usize {
    DEFAULT_B_REPS
}
fn default_quantiles() -> Vec<f64> {
    DEFAULT_QUANTILES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    /// CSV with one observation per row.
    pub data: PathBuf,
    /// Columns forming `A`; `B` is the rest.
    pub a: Vec<usize>,
    #[serde(default = "default_b_reps")]
    pub b_reps: usize,
    #[serde(default = "default_multiplier")]
    pub multiplier: Multiplier,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub shift: Option<Vec<f64>>,
}

fn default_multiplier() -> Multiplier {
    Multiplier::Gaussian
}

/// Bootstrap output with the rate diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDemo {
    #[serde(flatten)]
    pub result: BootstrapResult,
    pub n: usize,
    pub p: usize,
    /// `M_A − M_B` of the observed process.
    pub observed_diff: f64,
    pub clt_inputs: Option<CltRateInputs>,
    pub clt_rate: Option<CltRate>,
    pub clt_note: Option<String>,
}

pub fn run_bootstrap_demo(cfg: &BootstrapConfig, seed: u64) -> Result<BootstrapDemo> {
    let shift = cfg.shift.clone().map(DVector::from_vec);
    let data = DataMatrix::from_csv_path(&cfg.data, shift)?;
    let part = Partition::from_a(cfg.a.clone(), data.p()).map_err(|e| Error::BadConfig(e.to_string()))?;
    bootstrap_on(&data, &part, cfg.b_reps, cfg.multiplier, &cfg.quantiles, seed)
}

/// [`run_bootstrap_demo`] on data already in memory.
pub fn bootstrap_on(
    data: &DataMatrix,
    part: &Partition,
    b_reps: usize,
    multiplier: Multiplier,
    quantiles: &[f64],
    seed: u64,
) -> Result<BootstrapDemo> {
    let reps = multiplier_replicates(data, b_reps, seed, multiplier)?;
    let result = argmax_prob(&reps, part, quantiles)?;
    let y = observed_process(data);
    let max_of = |idx: &[usize]| idx.iter().map(|&j| y[j]).fold(f64::NEG_INFINITY, f64::max);
    let observed_diff = max_of(part.a()) - max_of(part.b());

    let n = data.n();
    let p = data.p();
    let centered = data.centered();
    let cov: DMatrix<f64> = centered.transpose() * &centered / n as f64;
    let sd: Vec<f64> = (0..p).map(|j| cov[(j, j)].sqrt()).collect();
    let (b_n, b0) = moment_scales(data);
    let root = (n as f64).sqrt();
    let (clt_inputs, clt, note) = if sd.iter().any(|&s| s <= 0.0) {
        (None, None, Some("a column has zero sample variance".to_string()))
    } else {
        let emax_s = (0..b_reps)
            .map(|r| {
                (0..p)
                    .map(|j| (reps.values[(r, j)] - root * data.shift()[j]).abs() / sd[j])
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / b_reps as f64;
        let c_ab = CovSpec::explicit(cov, DVector::zeros(p))
            .and_then(|s| check_conditions(&s, part))
            .map(|r| r.applicable().into_iter().map(|(_, c)| c).fold(f64::NEG_INFINITY, f64::max))
            .unwrap_or(f64::NEG_INFINITY);
        if c_ab > 0.0 {
            let inputs = CltRateInputs {
                b_n,
                b0,
                n,
                p,
                c_ab,
                emax_s,
            };
            (Some(inputs), Some(clt_rate(&inputs)?), None)
        } else {
            (
                None,
                None,
                Some("the covariance condition fails for the sample covariance".to_string()),
            )
        }
    };
    Ok(BootstrapDemo {
        result,
        n,
        p,
        observed_diff,
        clt_inputs,
        clt_rate: clt,
        clt_note: note,
    })
}

/// Outcome of the thread-count reproducibility check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub threads: [usize; 2],
    pub bytes: usize,
    pub sha256: [String; 2],
    pub identical: bool,
}

/// The two-coordinate law used by the analytic checks: `ρ = 0.5`,
/// `σ = (1, 1.5)`, means `(0.3, −0.2)`.
pub fn selftest_design() -> Result<Design> {
    let (s0, s1, rho) = (1.0, 1.5, 0.5);
    let sigma = DMatrix::from_row_slice(2, 2, &[s0 * s0, rho * s0 * s1, rho * s0 * s1, s1 * s1]);
    let spec = CovSpec::explicit(sigma, DVector::from_vec(vec![0.3, -0.2]))?;
    Design::custom("analytic_pair", spec, Partition::split_at(1, 2)?)
}

/// Runs the analytic-pair Lévy table with 1 and 8 threads and compares the
/// CSV bytes.
pub fn selftest(seed: u64, n_rep: usize) -> Result<SelftestReport> {
    let design = selftest_design()?;
    let eps = [0.01, 0.05, 0.2];
    let run = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        pool.install(|| run_levy_experiment(&design, &eps, n_rep, DEFAULT_GRID, seed))
            .map(|t| t.to_csv_string())
    };
    let one = run(1)?;
    let eight = run(8)?;
    Ok(SelftestReport {
        threads: [1, 8],
        bytes: one.len(),
        sha256: [json_hash(&one), json_hash(&eight)],
        identical: one == eight,
    })
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            started_unix: unix_now(),
            finished_unix: f64::NAN,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Writes `table` to `dir/name` with its sidecar and records both.
    pub fn write_table(&mut self, dir: &Path, name: &str, table: &CsvTable) -> Result<PathBuf> {
        let path = dir.join(name);
        let side = table.write(&path, self.seed, &self.config_hash)?;
        self.outputs.push(path.clone());
        self.outputs.push(side);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Stamps the finish time and writes `dir/manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
