//! Kernels, Gram matrices and mean-embedding statistics.
//!
//! Every RKHS quantity is reduced to sums of kernel evaluations; feature
//! maps are never materialized. Sample sets carrying weights are treated as
//! exact discrete distributions, in which case the "unbiased" squared norm
//! is the exact population value.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};

/// Rows per parallel work unit when filling Gram matrices.
pub const GRAM_BLOCK_ROWS: usize = 256;

/// Minimum squared embedding norm accepted in cosine denominators.
pub const MIN_SQNORM: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// exp(−γ‖x − y‖₂²)
    Rbf { gamma: f64 },
    /// exp(−γ‖x − y‖₁)
    Laplacian { gamma: f64 },
    /// (γ⟨x, y⟩ + c)^degree
    Polynomial { gamma: f64, c: f64, degree: u32 },
    /// ⟨x, y⟩ / (‖x‖‖y‖)
    Cosine,
    /// 1 if x and y are bitwise identical, else 0
    DeltaDiscrete,
    /// Product of the base kernel over coordinate blocks; `None` splits
    /// every coordinate into its own block.
    TensorPower { base: Box<KernelSpec>, blocks: Option<Vec<Vec<usize>>> },
    /// ⟨x, y⟩; used for covariance-style checks.
    Linear,
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Self {
        KernelSpec::Rbf { gamma }
    }

    pub fn tensor(base: KernelSpec) -> Self {
        KernelSpec::TensorPower { base: Box::new(base), blocks: None }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("kernel parameter {name} must be positive, got {v}")))
            }
        };
        match self {
            KernelSpec::Rbf { gamma } | KernelSpec::Laplacian { gamma } => positive("gamma", *gamma),
            KernelSpec::Polynomial { gamma, c, degree } => {
                positive("gamma", *gamma)?;
                positive("c", *c)?;
                if *degree == 0 {
                    return Err(Error::InvalidArgument("kernel parameter degree must be positive".into()));
                }
                Ok(())
            }
            KernelSpec::TensorPower { base, blocks } => {
                if matches!(**base, KernelSpec::TensorPower { .. }) {
                    return Err(Error::InvalidArgument("nested tensor kernels are not supported".into()));
                }
                if let Some(blocks) = blocks {
                    if blocks.iter().any(Vec::is_empty) {
                        return Err(Error::InvalidArgument("tensor blocks must be nonempty".into()));
                    }
                }
                base.validate()
            }
            KernelSpec::Cosine | KernelSpec::DeltaDiscrete | KernelSpec::Linear => Ok(()),
        }
    }

    /// Value of k(x, x), when it does not depend on x.
    pub fn constant_diagonal(&self) -> Option<f64> {
        match self {
            KernelSpec::Rbf { .. } | KernelSpec::Laplacian { .. } | KernelSpec::DeltaDiscrete | KernelSpec::Cosine => {
                Some(1.0)
            }
            KernelSpec::TensorPower { base, .. } => base.constant_diagonal(),
            _ => None,
        }
    }

    fn needs_nonzero(&self) -> bool {
        match self {
            KernelSpec::Cosine => true,
            KernelSpec::TensorPower { base, .. } => base.needs_nonzero(),
            _ => false,
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn raw_eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match k {
        KernelSpec::Rbf { gamma } => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            (-gamma * d2).exp()
        }
        KernelSpec::Laplacian { gamma } => {
            let d1: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
            (-gamma * d1).exp()
        }
        KernelSpec::Polynomial { gamma, c, degree } => (gamma * dot(x, y) + c).powi(*degree as i32),
        KernelSpec::Cosine => dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt()),
        KernelSpec::DeltaDiscrete => {
            if x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()) {
                1.0
            } else {
                0.0
            }
        }
        KernelSpec::Linear => dot(x, y),
        KernelSpec::TensorPower { base, blocks } => match blocks {
            None => x.iter().zip(y).map(|(a, b)| raw_eval(base, &[*a], &[*b])).product(),
            Some(blocks) => blocks
                .iter()
                .map(|b| {
                    let xb: Vec<f64> = b.iter().map(|&i| x[i]).collect();
                    let yb: Vec<f64> = b.iter().map(|&i| y[i]).collect();
                    raw_eval(base, &xb, &yb)
                })
                .product(),
        },
    }
}

fn check_point(k: &KernelSpec, x: &[f64]) -> Result<()> {
    if let KernelSpec::TensorPower { blocks: Some(blocks), .. } = k {
        if let Some(&bad) = blocks.iter().flatten().find(|&&i| i >= x.len()) {
            return Err(Error::InvalidArgument(format!("tensor block index {bad} out of range")));
        }
    }
    if k.needs_nonzero() {
        let zero = match k {
            KernelSpec::TensorPower { blocks: None, .. } => x.contains(&0.0),
            KernelSpec::TensorPower { blocks: Some(blocks), .. } => {
                blocks.iter().any(|b| b.iter().all(|&i| x[i] == 0.0))
            }
            _ => x.iter().all(|v| *v == 0.0),
        };
        if zero {
            return Err(Error::InvalidArgument("cosine kernel is undefined for a zero vector".into()));
        }
    }
    Ok(())
}

/// k(x, y).
pub fn eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    k.validate()?;
    check_point(k, x)?;
    check_point(k, y)?;
    Ok(raw_eval(k, x, y))
}

pub(crate) fn check_sets(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    k.validate()?;
    for p in x.points().iter().chain(y.points()) {
        check_point(k, p)?;
    }
    Ok(())
}

/// Pairwise kernel values between two sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub row_id: Option<String>,
    pub col_id: Option<String>,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

pub fn gram(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<GramMatrix> {
    check_sets(k, x, y)?;
    let cols = y.len();
    let mut values = vec![0.0; x.len() * cols];
    values
        .par_chunks_mut(GRAM_BLOCK_ROWS * cols.max(1))
        .enumerate()
        .for_each(|(block, chunk)| {
            for (r, row) in chunk.chunks_mut(cols).enumerate() {
                let xi = &x.points()[block * GRAM_BLOCK_ROWS + r];
                for (v, yj) in row.iter_mut().zip(y.points()) {
                    *v = raw_eval(k, xi, yj);
                }
            }
        });
    Ok(GramMatrix {
        rows: x.len(),
        cols,
        values,
        row_id: x.id().map(str::to_owned),
        col_id: y.id().map(str::to_owned),
    })
}

fn weight(set: &SampleSet, i: usize) -> f64 {
    match set.weights() {
        Some(w) => w[i],
        None => 1.0 / set.len() as f64,
    }
}

/// Weighted mean of k over all pairs: ⟨μ̂_X, μ̂_Y⟩ with V-statistic weights.
/// Rows are summed independently and combined in index order.
pub(crate) fn mean_pair_sum(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> f64 {
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let xi = &x.points()[i];
            let s: f64 = y.points().iter().enumerate().map(|(j, yj)| weight(y, j) * raw_eval(k, xi, yj)).sum();
            weight(x, i) * s
        })
        .collect();
    rows.iter().sum()
}

/// (1/(n(n−1))) Σ_{i≠j} k(x_i, x_j) for unweighted sets.
pub(crate) fn offdiag_mean(k: &KernelSpec, x: &SampleSet) -> f64 {
    let n = x.len();
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.points()[i];
            x.points().iter().enumerate().filter(|(j, _)| *j != i).map(|(_, xj)| raw_eval(k, xi, xj)).sum::<f64>()
        })
        .collect();
    rows.iter().sum::<f64>() / (n as f64 * (n as f64 - 1.0))
}

/// Squared embedding norm with the U-statistic for unweighted sets and the
/// exact value for weighted sets.
pub(crate) fn sqnorm_unbiased_raw(k: &KernelSpec, x: &SampleSet) -> Result<f64> {
    if x.is_weighted() {
        return Ok(mean_pair_sum(k, x, x));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("the unbiased squared norm needs at least 2 samples".into()));
    }
    Ok(offdiag_mean(k, x))
}

/// RKHS inner-product estimates for a sample set X against Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// U-statistic estimate of ‖μ_X‖²; may be negative.
    pub sqnorm_unbiased: f64,
    /// V-statistic estimate of ‖μ_X‖²; nonnegative for p.s.d. kernels.
    pub sqnorm_biased: f64,
    /// ⟨μ̂_X, μ̂_Y⟩.
    pub cross_inner: f64,
}

impl EmbeddingStats {
    pub fn unbiased_is_negative(&self) -> bool {
        self.sqnorm_unbiased < 0.0
    }
}

pub fn embedding_stats(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<EmbeddingStats> {
    check_sets(k, x, y)?;
    Ok(EmbeddingStats {
        sqnorm_unbiased: sqnorm_unbiased_raw(k, x)?,
        sqnorm_biased: mean_pair_sum(k, x, x),
        cross_inner: mean_pair_sum(k, x, y),
    })
}

fn single(y: &[f64]) -> Result<SampleSet> {
    SampleSet::new(vec![y.to_vec()])
}

/// Kernel score ‖μ̂_X‖² − 2⟨μ̂_X, φ(y)⟩ of the sample-based prediction X.
pub fn kernel_score(k: &KernelSpec, x: &SampleSet, y: &[f64]) -> Result<f64> {
    let target = single(y)?;
    check_sets(k, x, &target)?;
    Ok(sqnorm_unbiased_raw(k, x)? - 2.0 * mean_pair_sum(k, x, &target))
}

/// Mean kernel score over a set of targets: the plugin expected score.
pub fn expected_kernel_score(k: &KernelSpec, x: &SampleSet, targets: &SampleSet) -> Result<f64> {
    check_sets(k, x, targets)?;
    Ok(sqnorm_unbiased_raw(k, x)? - 2.0 * mean_pair_sum(k, x, targets))
}

/// Kernel entropy −‖μ̂_X‖² (U-statistic).
pub fn kernel_entropy(k: &KernelSpec, x: &SampleSet) -> Result<f64> {
    check_sets(k, x, x)?;
    Ok(-sqnorm_unbiased_raw(k, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Unbiased,
    Biased,
}

/// Squared maximum mean discrepancy between the embeddings of X and Y.
pub fn mmd2(k: &KernelSpec, x: &SampleSet, y: &SampleSet, mode: Estimator) -> Result<f64> {
    check_sets(k, x, y)?;
    let cross = mean_pair_sum(k, x, y);
    Ok(match mode {
        Estimator::Biased => (mean_pair_sum(k, x, x) + mean_pair_sum(k, y, y) - 2.0 * cross).max(0.0),
        Estimator::Unbiased => sqnorm_unbiased_raw(k, x)? + sqnorm_unbiased_raw(k, y)? - 2.0 * cross,
    })
}

fn norms(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<(f64, f64, f64)> {
    check_sets(k, x, y)?;
    let nx = mean_pair_sum(k, x, x);
    let ny = mean_pair_sum(k, y, y);
    for (name, v) in [("X", nx), ("Y", ny)] {
        if v <= MIN_SQNORM {
            return Err(Error::DegenerateNorm(format!("squared embedding norm of {name} is {v:e}")));
        }
    }
    Ok((nx, ny, mean_pair_sum(k, x, y)))
}

/// Cosine similarity of the (V-statistic) mean embeddings, clamped to [−1, 1].
pub fn cosine_similarity(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let (nx, ny, cross) = norms(k, x, y)?;
    Ok((cross / (nx * ny).sqrt()).clamp(-1.0, 1.0))
}

/// Expected kernel spherical score −⟨μ̂_X, μ̂_Y⟩ / ‖μ̂_X‖ of prediction X
/// against targets Y.
pub fn eks(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let (nx, _, cross) = norms(k, x, y)?;
    Ok(-cross / nx.sqrt())
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Rbf { gamma } => write!(f, "rbf:gamma={gamma}"),
            KernelSpec::Laplacian { gamma } => write!(f, "laplacian:gamma={gamma}"),
            KernelSpec::Polynomial { gamma, c, degree } => write!(f, "poly:gamma={gamma},c={c},degree={degree}"),
            KernelSpec::Cosine => f.write_str("cosine"),
            KernelSpec::DeltaDiscrete => f.write_str("delta"),
            KernelSpec::Linear => f.write_str("linear"),
            KernelSpec::TensorPower { base, blocks: None } => write!(f, "tensor:base={base}"),
            KernelSpec::TensorPower { base, blocks: Some(blocks) } => {
                let b: Vec<String> = blocks
                    .iter()
                    .map(|blk| blk.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join("+"))
                    .collect();
                write!(f, "tensor:blocks={};base={base}", b.join("|"))
            }
        }
    }
}

fn param(params: &[(&str, &str)], name: &str) -> Result<Option<f64>> {
    params
        .iter()
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad value for {name}: '{v}'"))))
        .transpose()
}

/// Parses `rbf:gamma=0.5`, `laplacian:gamma=1`, `poly:gamma=1,c=1,degree=2`,
/// `cosine`, `delta`, `linear`, `tensor:base=rbf:gamma=1` and
/// `tensor:blocks=1+2|3;base=delta` (1-based coordinates).
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (family, rest) = s.split_once(':').unwrap_or((s, ""));
        if family == "tensor" {
            let (blocks, base) = if let Some(b) = rest.strip_prefix("blocks=") {
                let (blocks, base) = b
                    .split_once(";base=")
                    .ok_or_else(|| Error::InvalidArgument("tensor kernel needs ';base='".into()))?;
                let parsed = blocks
                    .split('|')
                    .map(|blk| {
                        blk.split('+')
                            .map(|i| match i.trim().parse::<usize>() {
                                Ok(v) if v >= 1 => Ok(v - 1),
                                _ => Err(Error::InvalidArgument(format!("bad tensor block index '{i}'"))),
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                (Some(parsed), base)
            } else {
                let base = rest
                    .strip_prefix("base=")
                    .ok_or_else(|| Error::InvalidArgument("tensor kernel needs 'base='".into()))?;
                (None, base)
            };
            let spec = KernelSpec::TensorPower { base: Box::new(base.parse()?), blocks };
            spec.validate()?;
            return Ok(spec);
        }
        let params: Vec<(&str, &str)> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',')
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim(), v.trim()))
                        .ok_or_else(|| Error::InvalidArgument(format!("bad kernel parameter '{kv}'")))
                })
                .collect::<Result<_>>()?
        };
        let gamma = param(&params, "gamma")?;
        let spec = match family {
            "rbf" => KernelSpec::Rbf { gamma: gamma.unwrap_or(1.0) },
            "laplacian" => KernelSpec::Laplacian { gamma: gamma.unwrap_or(1.0) },
            "poly" | "polynomial" => {
                let degree = param(&params, "degree")?.unwrap_or(2.0);
                if degree.fract() != 0.0 || degree < 1.0 {
                    return Err(Error::InvalidArgument(format!("polynomial degree must be a positive integer, got {degree}")));
                }
                KernelSpec::Polynomial {
                    gamma: gamma.unwrap_or(1.0),
                    c: param(&params, "c")?.unwrap_or(1.0),
                    degree: degree as u32,
                }
            }
            "cosine" => KernelSpec::Cosine,
            "delta" => KernelSpec::DeltaDiscrete,
            "linear" => KernelSpec::Linear,
            other => return Err(Error::InvalidArgument(format!("unknown kernel family '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for KernelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KernelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
