//! Seeded Monte Carlo draws of `X = L Z + μ` and their max-difference
//! statistics.
//!
//! Rows are produced in fixed blocks of [`BLOCK_ROWS`]; replicate `k` always
//! reads its standard normals from stream `k` of the seed's
//! [`StreamFamily`], and each block is an independent unit of work. The
//! batch is therefore bit-identical for any thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{sqrt_factor, CovForm, CovSpec, Partition};
use crate::rng::{StreamFamily, NORMAL_METHOD};

pub const BLOCK_ROWS: usize = 256;

/// `n_rep × p` draws stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    n_rep: usize,
    p: usize,
    data: Vec<f64>,
    seed: u64,
    spec_hash: String,
}

/// Sidecar describing a binary batch dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub n_rep: usize,
    pub p: usize,
    pub seed: u64,
    pub spec_hash: String,
    #[serde(default)]
    pub normal_method: String,
}

impl SampleBatch {
    /// Wraps existing row-major data.
    pub fn from_rows(n_rep: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rep * p {
            return Err(Error::DimensionMismatch {
                expected: n_rep * p,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample batch"));
        }
        Ok(Self {
            n_rep,
            p,
            data,
            seed: 0,
            spec_hash: String::new(),
        })
    }

    pub fn n_rep(&self) -> usize {
        self.n_rep
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec_hash(&self) -> &str {
        &self.spec_hash
    }

    pub fn normal_method(&self) -> &'static str {
        NORMAL_METHOD
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.p..(k + 1) * self.p]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn meta(&self) -> BatchMeta {
        BatchMeta {
            n_rep: self.n_rep,
            p: self.p,
            seed: self.seed,
            spec_hash: self.spec_hash.clone(),
            normal_method: NORMAL_METHOD.to_string(),
        }
    }

    /// Writes little-endian `f64` rows to `path` and the JSON sidecar next to it.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        let meta = File::create(sidecar_path(path))?;
        serde_json::to_writer_pretty(meta, &self.meta())?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let meta: BatchMeta = serde_json::from_reader(File::open(sidecar_path(path))?)?;
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() != meta.n_rep * meta.p * 8 {
            return Err(Error::DimensionMismatch {
                expected: meta.n_rep * meta.p * 8,
                got: bytes.len(),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut batch = Self::from_rows(meta.n_rep, meta.p, data)?;
        batch.seed = meta.seed;
        batch.spec_hash = meta.spec_hash;
        Ok(batch)
    }
}

/// `foo.bin` -> `foo.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Prepared square-root factor of a law, reusable across many draws.
#[derive(Debug, Clone)]
pub struct Sampler {
    /// `Lᵀ`, shape `r × p`.
    factor_t: DMatrix<f64>,
    mu: Vec<f64>,
    spec_hash: String,
}

impl Sampler {
    pub fn new(spec: &CovSpec) -> Result<Self> {
        let factor = match spec.form() {
            CovForm::Factor(g) => g.clone(),
            CovForm::Explicit(s) => sqrt_factor(s)?,
        };
        Ok(Self {
            factor_t: factor.transpose(),
            mu: spec.mu().iter().copied().collect(),
            spec_hash: spec.content_hash(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Number of latent normals per draw.
    pub fn latent_dim(&self) -> usize {
        self.factor_t.nrows()
    }

    pub fn sample(&self, n_rep: usize, seed: u64) -> Result<SampleBatch> {
        self.draw(n_rep, seed, true)
    }

    /// Draws of `X − μ`. Same streams as [`Sampler::sample`], so
    /// `sample(n, s)` equals `sample_centered(n, s) + μ` up to one rounding.
    pub fn sample_centered(&self, n_rep: usize, seed: u64) -> Result<SampleBatch> {
        self.draw(n_rep, seed, false)
    }

    fn check_reps(n_rep: usize) -> Result<()> {
        if n_rep == 0 {
            return Err(Error::InvalidArgument("n_rep must be at least 1".into()));
        }
        Ok(())
    }

    /// Fills `out` (whole rows) with block `block` of the draw.
    fn fill_block(&self, family: &StreamFamily, block: usize, out: &mut [f64], add_mean: bool) {
        let p = self.dim();
        let r = self.latent_dim();
        let rows = out.len() / p;
        let first = block * BLOCK_ROWS;
        let mut z = DMatrix::<f64>::zeros(rows, r);
        for i in 0..rows {
            let mut rng = family.stream((first + i) as u64);
            for c in 0..r {
                z[(i, c)] = StandardNormal.sample(&mut rng);
            }
        }
        let x = if r == 0 {
            DMatrix::zeros(rows, p)
        } else {
            z * &self.factor_t
        };
        for i in 0..rows {
            let dst = &mut out[i * p..(i + 1) * p];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = if add_mean { x[(i, j)] + self.mu[j] } else { x[(i, j)] };
            }
        }
    }

    fn draw(&self, n_rep: usize, seed: u64, add_mean: bool) -> Result<SampleBatch> {
        Self::check_reps(n_rep)?;
        let p = self.dim();
        let family = StreamFamily::new(seed);
        let mut data = vec![0.0; n_rep * p];
        data.par_chunks_mut(BLOCK_ROWS * p)
            .enumerate()
            .for_each(|(block, out)| self.fill_block(&family, block, out, add_mean));
        Ok(SampleBatch {
            n_rep,
            p,
            data,
            seed,
            spec_hash: self.spec_hash.clone(),
        })
    }

    /// Streams the draw block by block without materialising it.
    ///
    /// `f` sees the row-major rows of one block (the same rows
    /// [`Sampler::sample`] or [`Sampler::sample_centered`] would produce);
    /// results come back in block order, so a sequential fold over them is
    /// deterministic for any thread count.
    pub fn map_blocks<T, F>(&self, n_rep: usize, seed: u64, centered: bool, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&[f64]) -> T + Sync,
    {
        Self::check_reps(n_rep)?;
        let p = self.dim();
        let family = StreamFamily::new(seed);
        let blocks = n_rep.div_ceil(BLOCK_ROWS);
        Ok((0..blocks)
            .into_par_iter()
            .map(|block| {
                let rows = BLOCK_ROWS.min(n_rep - block * BLOCK_ROWS);
                let mut buf = vec![0.0; rows * p];
                self.fill_block(&family, block, &mut buf, !centered);
                f(&buf)
            })
            .collect())
    }
}

/// One-shot draw of `n_rep` vectors from `spec`.
pub fn sample(spec: &CovSpec, n_rep: usize, seed: u64) -> Result<SampleBatch> {
    Sampler::new(spec)?.sample(n_rep, seed)
}

/// Realisations of `M_B − M_A`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffSample {
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub partition: Partition,
}

fn max_over(row: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Sample mean and (n−1)-denominator standard deviation.
pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn max_diff(batch: &SampleBatch, part: &Partition) -> Result<DiffSample> {
    part.check_dim(batch.p())?;
    let values: Vec<f64> = batch
        .rows()
        .map(|row| max_over(row, part.b()) - max_over(row, part.a()))
        .collect();
    let (mean, sd) = mean_sd(&values);
    Ok(DiffSample {
        values,
        mean,
        sd,
        partition: part.clone(),
    })
}

/// [`max_diff`] computed block by block without keeping the draws.
pub fn max_diff_streamed(spec: &CovSpec, part: &Partition, n_rep: usize, seed: u64) -> Result<DiffSample> {
    part.check_dim(spec.dim())?;
    let p = spec.dim();
    let blocks = Sampler::new(spec)?.map_blocks(n_rep, seed, false, |buf| {
        buf.chunks_exact(p)
            .map(|row| max_over(row, part.b()) - max_over(row, part.a()))
            .collect::<Vec<f64>>()
    })?;
    let values: Vec<f64> = blocks.into_iter().flatten().collect();
    let (mean, sd) = mean_sd(&values);
    Ok(DiffSample {
        values,
        mean,
        sd,
        partition: part.clone(),
    })
}

/// Row maxima over all coordinates (the single-maximum statistic).
pub fn row_max(batch: &SampleBatch) -> Vec<f64> {
    batch
        .rows()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Index of the first maximal entry.
pub(crate) fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// 1 where the row maximiser (lowest index on ties) lies in `subset`.
pub fn argmax_indicator(batch: &SampleBatch, subset: &[usize]) -> Result<Vec<u8>> {
    let mut member = vec![false; batch.p()];
    for &i in subset {
        if i >= batch.p() {
            return Err(Error::InvalidArgument(format!(
                "subset index {i} out of range for p={}",
                batch.p()
            )));
        }
        member[i] = true;
    }
    Ok(batch
        .rows()
        .map(|row| member[first_argmax(row)] as u8)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::explicit_cov;
    use crate::gaussian::fixtures::*;
    use nalgebra::DVector;

    #[test]
    fn rejects_zero_reps() {
        assert!(sample(&identity(2), 0, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = rank_two_four();
        let a = sample(&spec, 700, 3).unwrap();
        let b = sample(&spec, 700, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&spec, 700, 4).unwrap());
        assert_eq!(a.spec_hash(), spec.content_hash());
    }

    #[test]
    fn prefix_stable_across_lengths() {
        let spec = equicorr(3, 0.4);
        let short = sample(&spec, 300, 9).unwrap();
        let long = sample(&spec, 1000, 9).unwrap();
        assert_eq!(short.as_slice(), &long.as_slice()[..900]);
    }

    #[test]
    fn thread_count_does_not_change_batch() {
        let spec = equicorr(5, 0.2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample(&spec, 3000, 77).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn streamed_blocks_match_batch() {
        let spec = rank_two_four();
        let sampler = Sampler::new(&spec).unwrap();
        let batch = sampler.sample_centered(600, 2).unwrap();
        let blocks = sampler.map_blocks(600, 2, true, |rows| rows.to_vec()).unwrap();
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks.concat(), batch.as_slice());
    }

    #[test]
    fn streamed_diff_matches_batch() {
        let spec = rank_two_four().with_mean(DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4])).unwrap();
        let part = Partition::split_at(2, 4).unwrap();
        let direct = max_diff(&sample(&spec, 700, 3).unwrap(), &part).unwrap();
        assert_eq!(max_diff_streamed(&spec, &part, 700, 3).unwrap(), direct);
    }

    #[test]
    fn mean_of_scalar_law() {
        let spec = CovSpec::explicit(DMatrix::identity(1, 1), DVector::from_element(1, 5.0)).unwrap();
        let batch = sample(&spec, 1_000_000, 12).unwrap();
        let m = batch.as_slice().iter().sum::<f64>() / 1e6;
        assert!((m - 5.0).abs() < 0.004, "{m}");
    }

    #[test]
    fn empirical_covariance_matches() {
        let spec = rank_two_four();
        let n = 200_000;
        let batch = sample(&spec, n, 5).unwrap();
        let s = explicit_cov(&spec);
        let p = spec.dim();
        for i in 0..p {
            for j in 0..=i {
                let prods: Vec<f64> = batch.rows().map(|r| r[i] * r[j]).collect();
                let (m, sd) = mean_sd(&prods);
                let se = sd / (n as f64).sqrt();
                assert!((m - s[(i, j)]).abs() < 5.0 * se, "({i},{j}) {m} vs {}", s[(i, j)]);
            }
        }
    }

    #[test]
    fn max_diff_single_row() {
        let batch = SampleBatch::from_rows(1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        let d = max_diff(&batch, &Partition::split_at(1, 3).unwrap()).unwrap();
        assert_eq!(d.values, vec![2.0]);
        assert!(max_diff(&batch, &Partition::split_at(1, 4).unwrap()).is_err());
    }

    #[test]
    fn duplicated_sides_give_exact_zero() {
        let spec = equicorr(3, 0.5);
        let g = crate::gaussian::sqrt_factor(explicit_cov(&spec)).unwrap();
        let base = CovSpec::factor(g, DVector::from_vec(vec![0.3, -1.0, 2.0])).unwrap();
        let dup = base.duplicate(&[0, 1, 2]).unwrap();
        let batch = sample(&dup, 2000, 8).unwrap();
        let d = max_diff(&batch, &Partition::split_at(3, 6).unwrap()).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_shift_cancels_exactly() {
        let spec = equicorr(4, 0.3);
        let part = Partition::split_at(2, 4).unwrap();
        let base = sample(&spec, 5000, 21).unwrap();
        let shifted = sample(&spec.with_mean(DVector::from_element(4, 1024.0)).unwrap(), 5000, 21).unwrap();
        // Only exactly representable shifts cancel bit-for-bit; compare the
        // difference after removing the common offset.
        let d0 = max_diff(&base, &part).unwrap();
        let d1 = max_diff(&shifted, &part).unwrap();
        for (a, b) in d0.values.iter().zip(&d1.values) {
            assert!((a - b).abs() <= 1024.0 * 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn iid_pair_difference_sd() {
        let batch = sample(&identity(2), 100_000, 31).unwrap();
        let d = max_diff(&batch, &Partition::split_at(1, 2).unwrap()).unwrap();
        assert!((d.sd - 2f64.sqrt()).abs() < 0.01, "{}", d.sd);
    }

    #[test]
    fn argmax_indicator_examples() {
        let n = 100_000;
        let batch = sample(&identity(2), n, 41).unwrap();
        let ind = argmax_indicator(&batch, &[0]).unwrap();
        let m = ind.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.005);
        assert!(argmax_indicator(&batch, &[0, 1]).unwrap().iter().all(|&v| v == 1));
        assert!(argmax_indicator(&batch, &[2]).is_err());

        let batch = sample(&equicorr(4, 0.6), n, 42).unwrap();
        let ind = argmax_indicator(&batch, &[0]).unwrap();
        let m = ind.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((m - 0.25).abs() < 0.005, "{m}");
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let batch = SampleBatch::from_rows(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_indicator(&batch, &[0]).unwrap(), vec![1]);
        assert_eq!(argmax_indicator(&batch, &[1]).unwrap(), vec![0]);
    }

    #[test]
    fn binary_dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let batch = sample(&rank_two_four(), 257, 13).unwrap();
        batch.write_binary(&path).unwrap();
        let meta: BatchMeta =
            serde_json::from_reader(File::open(dir.path().join("batch.json")).unwrap()).unwrap();
        assert_eq!((meta.n_rep, meta.p, meta.seed), (257, 4, 13));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 257 * 4 * 8);
        assert_eq!(SampleBatch::read_binary(&path).unwrap(), batch);
    }
}
