//! Multiplier bootstrap for the sign of `M_A − M_B` of a normalised sum.
//!
//! Given rows `ξ_1, …, ξ_n` and a shift `a`, replicate `b` is
//! `X̂ = n^{-1/2} Σ_i w_i (ξ_i − ξ̄) + √n · a` with iid multipliers `w_i` of
//! mean 0 and variance 1. Replicate `b` reads its `n` weights from stream
//! `b` of the seed, and replicates are produced in fixed blocks, so the
//! output does not depend on the thread count.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Partition;
use crate::rng::StreamFamily;
use crate::sampler::{SampleBatch, BLOCK_ROWS};

pub const DEFAULT_QUANTILES: [f64; 7] = [0.01, 0.05, 0.1, 0.5, 0.9, 0.95, 0.99];

/// `n × p` observations with the shift vector `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    xi: DMatrix<f64>,
    shift: DVector<f64>,
}

impl DataMatrix {
    pub fn new(xi: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if xi.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 observations, got {}",
                xi.nrows()
            )));
        }
        if xi.ncols() == 0 {
            return Err(Error::InvalidArgument("need at least one column".into()));
        }
        if shift.len() != xi.ncols() {
            return Err(Error::DimensionMismatch {
                expected: xi.ncols(),
                got: shift.len(),
            });
        }
        if xi.iter().chain(shift.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("data matrix"));
        }
        Ok(Self { xi, shift })
    }

    /// Uses the rows of a sample batch as observations.
    pub fn from_batch(batch: &SampleBatch, shift: DVector<f64>) -> Result<Self> {
        let xi = DMatrix::from_row_slice(batch.n_rep(), batch.p(), batch.as_slice());
        Self::new(xi, shift)
    }

    /// Reads a CSV file; see [`read_csv_matrix`].
    pub fn from_csv_path(path: &Path, shift: Option<DVector<f64>>) -> Result<Self> {
        let xi = read_csv_matrix(std::fs::File::open(path)?)?;
        let p = xi.ncols();
        Self::new(xi, shift.unwrap_or_else(|| DVector::zeros(p)))
    }

    pub fn n(&self) -> usize {
        self.xi.nrows()
    }

    pub fn p(&self) -> usize {
        self.xi.ncols()
    }

    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn with_shift(&self, shift: DVector<f64>) -> Result<Self> {
        Self::new(self.xi.clone(), shift)
    }

    pub fn column_means(&self) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_iterator(self.p(), self.xi.column_iter().map(|c| c.sum() / n))
    }

    /// `ξ_i − ξ̄`
    pub fn centered(&self) -> DMatrix<f64> {
        let mean = self.column_means();
        let mut c = self.xi.clone();
        for (j, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[j]);
        }
        c
    }
}

/// Parses `n` rows of `p` numeric fields. A first row that does not parse
/// is taken as a header; any later bad field is reported with its 1-based
/// line and column.
pub fn read_csv_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(k as u64 + 1, |p| p.line());
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, String>> = rec
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => Err(format!("non-finite value {v}")),
                Err(_) => Err(format!("cannot parse {f:?} as a number")),
            })
            .collect();
        if k == 0 && parsed.iter().any(|r| r.is_err()) {
            continue;
        }
        let w = *width.get_or_insert(parsed.len());
        if parsed.len() != w {
            return Err(Error::Parse {
                line,
                column: parsed.len().min(w) + 1,
                message: format!("expected {w} fields, found {}", parsed.len()),
            });
        }
        for (c, r) in parsed.into_iter().enumerate() {
            values.push(r.map_err(|message| Error::Parse {
                line,
                column: c + 1,
                message,
            })?);
        }
        rows += 1;
    }
    let p = width.ok_or(Error::EmptySample)?;
    Ok(DMatrix::from_row_slice(rows, p, &values))
}

/// `Y_j = n^{-1/2} Σ_i (ξ_ij + a_j)`.
pub fn observed_process(data: &DataMatrix) -> DVector<f64> {
    let root = (data.n() as f64).sqrt();
    DVector::from_iterator(
        data.p(),
        (0..data.p()).map(|j| {
            let a = data.shift[j];
            data.xi.column(j).iter().map(|x| x + a).sum::<f64>() / root
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Multiplier {
    Gaussian,
    /// `4κ − 1` with `κ ~ Beta(1/2, 3/2)` (mean 1/4, variance 1/16).
    Beta,
}

impl std::str::FromStr for Multiplier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Multiplier::Gaussian),
            "beta" => Ok(Multiplier::Beta),
            other => Err(Error::InvalidArgument(format!("unknown multiplier {other:?}"))),
        }
    }
}

/// Mean and standard deviation of `Beta(1/2, 3/2)`.
pub const BETA_MEAN: f64 = 0.25;
pub const BETA_SD: f64 = 0.25;

/// `n` standardised multipliers from stream `stream` of `seed`.
pub fn multiplier_weights(multiplier: Multiplier, n: usize, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = StreamFamily::new(seed).stream(stream);
    match multiplier {
        Multiplier::Gaussian => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        Multiplier::Beta => {
            let beta = Beta::new(0.5, 1.5).expect("valid beta parameters");
            (0..n)
                .map(|_| (beta.sample(&mut rng) - BETA_MEAN) / BETA_SD)
                .collect()
        }
    }
}

/// `B × p` bootstrap replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicates {
    pub values: DMatrix<f64>,
    pub multiplier: Multiplier,
    pub seed: u64,
}

pub fn multiplier_replicates(
    data: &DataMatrix,
    b_reps: usize,
    seed: u64,
    multiplier: Multiplier,
) -> Result<Replicates> {
    if b_reps == 0 {
        return Err(Error::InvalidArgument("b_reps must be at least 1".into()));
    }
    let n = data.n();
    let p = data.p();
    let centered = data.centered();
    let root = (n as f64).sqrt();
    let offset: Vec<f64> = data.shift.iter().map(|a| root * a).collect();
    let blocks: Vec<DMatrix<f64>> = (0..b_reps.div_ceil(BLOCK_ROWS))
        .into_par_iter()
        .map(|block| {
            let first = block * BLOCK_ROWS;
            let rows = BLOCK_ROWS.min(b_reps - first);
            let mut w = DMatrix::<f64>::zeros(rows, n);
            for r in 0..rows {
                let weights = multiplier_weights(multiplier, n, seed, (first + r) as u64);
                for (i, v) in weights.into_iter().enumerate() {
                    w[(r, i)] = v;
                }
            }
            let mut x = w * &centered;
            for (j, mut col) in x.column_iter_mut().enumerate() {
                for v in col.iter_mut() {
                    *v = *v / root + offset[j];
                }
            }
            x
        })
        .collect();
    let mut values = DMatrix::zeros(b_reps, p);
    for (block, x) in blocks.into_iter().enumerate() {
        let first = block * BLOCK_ROWS;
        values.rows_mut(first, x.nrows()).copy_from(&x);
    }
    Ok(Replicates {
        values,
        multiplier,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `M_A − M_B` per replicate.
    #[serde(skip)]
    pub diffs: Vec<f64>,
    pub prob: f64,
    pub quantiles: Vec<Quantile>,
    pub b_reps: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
}

/// Linear interpolation between order statistics (the common "type 7"
/// definition).
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Share of replicates with `M_A − M_B > 0` (strictly), plus quantiles of
/// the difference.
pub fn argmax_prob(reps: &Replicates, part: &Partition, levels: &[f64]) -> Result<BootstrapResult> {
    part.check_dim(reps.values.ncols())?;
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("quantile level {l} outside [0, 1]")));
    }
    let max_of = |row: usize, idx: &[usize]| {
        idx.iter()
            .map(|&j| reps.values[(row, j)])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let b = reps.values.nrows();
    let diffs: Vec<f64> = (0..b).map(|r| max_of(r, part.a()) - max_of(r, part.b())).collect();
    let prob = diffs.iter().filter(|&&d| d > 0.0).count() as f64 / b as f64;
    let mut sorted = diffs.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = levels
        .iter()
        .map(|&level| Quantile {
            level,
            value: quantile_sorted(&sorted, level),
        })
        .collect();
    Ok(BootstrapResult {
        diffs,
        prob,
        quantiles,
        b_reps: b,
        multiplier: reps.multiplier,
        seed: reps.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CltRateInputs {
    pub b_n: f64,
    pub b0: f64,
    pub n: usize,
    pub p: usize,
    pub c_ab: f64,
    pub emax_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltRate {
    /// `emax_s / c_ab · (b_n² ln³(pn) / n)^{1/4}` with the unknown leading
    /// constant set to one.
    pub value: f64,
    pub label: String,
    /// `b_n² ln⁵(pn) > n`: the sample-size requirement fails with constant one.
    pub small_sample_warning: bool,
    /// `1 − 1/(2n⁴) − 1/n − 3 (b_n² ln³(pn)/n)^{1/2}`, the probability
    /// attached to the bootstrap statement. May be negative.
    pub event_probability: f64,
}

pub fn clt_rate(inputs: &CltRateInputs) -> Result<CltRate> {
    let CltRateInputs {
        b_n,
        n,
        p,
        c_ab,
        emax_s,
        ..
    } = *inputs;
    if !(b_n >= 1.0) {
        return Err(Error::InvalidArgument(format!("b_n must be at least 1, got {b_n}")));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be positive".into()));
    }
    if !(c_ab > 0.0) {
        return Err(Error::InvalidArgument(format!("c_ab must be positive, got {c_ab}")));
    }
    let nf = n as f64;
    let lg = (p as f64 * nf).ln();
    let core = b_n * b_n * lg.powi(3) / nf;
    Ok(CltRate {
        value: emax_s / c_ab * core.powf(0.25),
        label: "modulo constant".into(),
        small_sample_warning: b_n * b_n * lg.powi(5) > nf,
        event_probability: 1.0 - 1.0 / (2.0 * nf.powi(4)) - 1.0 / nf - 3.0 * core.sqrt(),
    })
}

/// Smallest `B ≥ 1` with `max_j n⁻¹ Σ_i exp(|ξ_ij − ξ̄_j| / B) ≤ 2`, the
/// sample analogue of the exponential moment condition; and
/// `b0 = sqrt(max_j n⁻¹ Σ_i (ξ_ij − ξ̄_j)⁴) / B`.
pub fn moment_scales(data: &DataMatrix) -> (f64, f64) {
    let c = data.centered();
    let n = data.n() as f64;
    let worst = |b: f64| {
        c.column_iter()
            .map(|col| col.iter().map(|x| (x.abs() / b).exp()).sum::<f64>() / n)
            .fold(0.0, f64::max)
    };
    let mut hi = 1.0;
    while worst(hi) > 2.0 {
        hi *= 2.0;
    }
    let b_n = if hi == 1.0 {
        1.0
    } else {
        let mut lo = hi / 2.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if worst(mid) > 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi.max(1.0)
    };
    let m4 = c
        .column_iter()
        .map(|col| col.iter().map(|x| x.powi(4)).sum::<f64>() / n)
        .fold(0.0, f64::max);
    (b_n, m4.sqrt() / b_n)
}
