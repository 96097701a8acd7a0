//! HSIC and centered kernel alignment, CKA-based clustering of coordinates,
//! and the per-cluster factorization of cosine similarity and EKS under
//! tensor-power kernels.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};

/// Marginal HSIC values at or below this are treated as a constant variable.
pub const MIN_HSIC: f64 = 1e-15;

fn check_paired(x: &SampleSet, y: &SampleSet) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("HSIC needs at least 2 paired observations".into()));
    }
    if x.is_weighted() || y.is_weighted() {
        return Err(Error::InvalidArgument("HSIC takes paired samples, not weighted distributions".into()));
    }
    Ok(())
}

/// Doubly centered Gram matrix HKH, row major.
fn centered_gram(k: &KernelSpec, x: &SampleSet) -> Result<Vec<f64>> {
    let g = kernels::gram(k, x, x)?;
    let n = x.len();
    let row_means: Vec<f64> = g.values.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut out = g.values;
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            // K is symmetric, so column means equal row means
            *v += grand - row_means[i] - row_means[j];
        }
    });
    Ok(out)
}

fn frobenius(a: &[f64], b: &[f64], n: usize) -> f64 {
    let rows: Vec<f64> = a
        .par_chunks(n)
        .zip(b.par_chunks(n))
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u * v).sum())
        .collect();
    rows.iter().sum::<f64>() / (n * n) as f64
}

/// Biased HSIC estimate (1/n²) tr(KHLH).
pub fn hsic(kx: &KernelSpec, ky: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    check_paired(x, y)?;
    let a = centered_gram(kx, x)?;
    let b = centered_gram(ky, y)?;
    Ok(frobenius(&a, &b, x.len()))
}

fn cka_from(xy: f64, xx: f64, yy: f64) -> Result<f64> {
    for (name, v) in [("X", xx), ("Y", yy)] {
        if v <= MIN_HSIC {
            return Err(Error::DegenerateVariable(format!("{name} is constant under its kernel (HSIC {v:e})")));
        }
    }
    Ok((xy / (xx * yy).sqrt()).clamp(0.0, 1.0))
}

/// HSIC normalized to [0, 1].
pub fn cka(kx: &KernelSpec, ky: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    check_paired(x, y)?;
    let a = centered_gram(kx, x)?;
    let b = centered_gram(ky, y)?;
    let n = x.len();
    cka_from(frobenius(&a, &b, n), frobenius(&a, &a, n), frobenius(&b, &b, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub values: Vec<Vec<f64>>,
    /// Coordinates that are constant under the kernel; their off-diagonal
    /// entries are 0.
    pub constant: Vec<usize>,
}

impl CkaMatrix {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Pairwise CKA between the coordinates of `samples`, each coordinate
/// treated as a one-dimensional variable under `base`.
pub fn cka_matrix(samples: &SampleSet, base: &KernelSpec) -> Result<CkaMatrix> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("CKA needs at least 2 observations".into()));
    }
    if samples.is_weighted() {
        return Err(Error::InvalidArgument("CKA takes samples, not weighted distributions".into()));
    }
    base.validate()?;
    let d = samples.dim();
    let n = samples.len();
    let cols: Vec<SampleSet> = (0..d).map(|c| samples.select(&[c])).collect::<Result<_>>()?;
    let self_hsic: Vec<f64> = cols
        .par_iter()
        .map(|c| centered_gram(base, c).map(|g| frobenius(&g, &g, n)))
        .collect::<Result<_>>()?;
    let constant: Vec<usize> = (0..d).filter(|&i| self_hsic[i] <= MIN_HSIC).collect();

    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .filter(|(i, j)| self_hsic[*i] > MIN_HSIC && self_hsic[*j] > MIN_HSIC)
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let a = centered_gram(base, &cols[i])?;
            let b = centered_gram(base, &cols[j])?;
            cka_from(frobenius(&a, &b, n), self_hsic[i], self_hsic[j])
        })
        .collect::<Result<_>>()?;

    let mut m = vec![vec![0.0; d]; d];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (&(i, j), v) in pairs.iter().zip(values) {
        m[i][j] = v;
        m[j][i] = v;
    }
    Ok(CkaMatrix { values: m, constant })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionPartition {
    /// Disjoint clusters covering every coordinate, each sorted, ordered by
    /// smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub tau: f64,
}

/// Average-linkage agglomerative clustering on 1 − CKA, merging while the
/// closest pair of clusters is within 1 − τ. Ties go to the pair with the
/// lowest indices.
pub fn cluster_dimensions(matrix: &CkaMatrix, tau: f64) -> Result<DimensionPartition> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let d = matrix.dim();
    let m = &matrix.values;
    let mut clusters: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    let linkage = |a: &[usize], b: &[usize]| {
        let total: f64 = a.iter().flat_map(|&i| b.iter().map(move |&j| 1.0 - m[i][j])).sum();
        total / (a.len() * b.len()) as f64
    };
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let v = linkage(&clusters[i], &clusters[j]);
                if best.is_none_or(|(b, _, _)| v < b) {
                    best = Some((v, i, j));
                }
            }
        }
        match best {
            Some((v, i, j)) if v <= 1.0 - tau => {
                let merged = clusters.remove(j);
                clusters[i].extend(merged);
                clusters[i].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(DimensionPartition { clusters, tau })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisentangleMode {
    Cosine,
    Eks,
}

impl fmt::Display for DisentangleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisentangleMode::Cosine => "cosine",
            DisentangleMode::Eks => "eks",
        })
    }
}

impl FromStr for DisentangleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DisentangleMode::Cosine),
            "eks" => Ok(DisentangleMode::Eks),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}', expected cosine or eks"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub mode: DisentangleMode,
    pub clusters: Vec<Vec<usize>>,
    pub factors: Vec<f64>,
    /// Sample counts (X, Y) used for every cluster factor.
    pub sample_counts: Vec<[usize; 2]>,
    pub product: f64,
    pub full: f64,
    pub residual: f64,
}

fn evaluate(mode: DisentangleMode, k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    match mode {
        DisentangleMode::Cosine => kernels::cosine_similarity(k, x, y),
        DisentangleMode::Eks => kernels::eks(k, x, y),
    }
}

/// Combines per-cluster factors. EKS factors are negative, so their
/// magnitudes multiply and the sign is restored once.
pub fn combine(mode: DisentangleMode, factors: &[f64]) -> f64 {
    match mode {
        DisentangleMode::Cosine => factors.iter().product(),
        DisentangleMode::Eks => -factors.iter().map(|f| -f).product::<f64>(),
    }
}

/// Cosine similarity (or EKS) of X against Y under the tensor-power kernel
/// of `base`, per cluster and over all coordinates.
pub fn disentangled_cosine(
    base: &KernelSpec,
    partition: &DimensionPartition,
    x: &SampleSet,
    y: &SampleSet,
    mode: DisentangleMode,
) -> Result<DisentangleReport> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    let mut covered: Vec<usize> = partition.clusters.iter().flatten().copied().collect();
    covered.sort_unstable();
    if covered != (0..x.dim()).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument("partition must cover every coordinate exactly once".into()));
    }
    let k = KernelSpec::tensor(base.clone());
    let factors: Vec<f64> = partition
        .clusters
        .par_iter()
        .enumerate()
        .map(|(c, coords)| {
            evaluate(mode, &k, &x.select(coords)?, &y.select(coords)?).map_err(|e| match e {
                Error::DegenerateNorm(msg) => Error::DegenerateNorm(format!("cluster {c} {coords:?}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let full = evaluate(mode, &k, x, y)?;
    let product = combine(mode, &factors);
    Ok(DisentangleReport {
        mode,
        clusters: partition.clusters.clone(),
        sample_counts: vec![[x.len(), y.len()]; factors.len()],
        factors,
        product,
        full,
        residual: (product - full).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Seed;
    use crate::numeric::pearson;
    use crate::synth::{Block, ProductWorld};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn gaussian(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = Seed(seed).rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }

    fn matrix(values: Vec<Vec<f64>>) -> CkaMatrix {
        CkaMatrix { values, constant: vec![] }
    }

    #[test]
    fn hsic_basics() {
        let x = SampleSet::from_scalars(&gaussian(1, 50)).unwrap();
        let c = SampleSet::from_scalars(&[3.0; 50]).unwrap();
        let k = KernelSpec::rbf(1.0);
        assert!(hsic(&k, &k, &x, &c).unwrap().abs() < 1e-15);
        assert!(hsic(&k, &k, &x, &x).unwrap() > 0.0);
        assert!(matches!(cka(&k, &k, &x, &c), Err(Error::DegenerateVariable(_))));
        assert!((cka(&k, &k, &x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_hsic_is_squared_covariance() {
        let xs = gaussian(2, 40);
        let ys: Vec<f64> = gaussian(3, 40).iter().zip(&xs).map(|(e, x)| 0.5 * x + e).collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        let (x, y) = (SampleSet::from_scalars(&xs).unwrap(), SampleSet::from_scalars(&ys).unwrap());
        let k = KernelSpec::Linear;
        assert!((hsic(&k, &k, &x, &y).unwrap() - cov * cov).abs() < 1e-12);
        let r = pearson(&xs, &ys);
        assert!((cka(&k, &k, &x, &y).unwrap() - r * r).abs() < 1e-10);
    }

    #[test]
    fn delta_cka_ignores_relabeling() {
        let mut rng = Seed(4).rng();
        use rand::Rng;
        let xs: Vec<f64> = (0..60).map(|_| rng.random_range(0..4) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| if rng.random::<f64>() < 0.7 { x } else { rng.random_range(0..4) as f64 }).collect();
        let relabel: Vec<f64> = xs.iter().map(|x| x.powi(3) + 10.0).collect();
        let k = KernelSpec::DeltaDiscrete;
        let y = SampleSet::from_scalars(&ys).unwrap();
        let a = cka(&k, &k, &SampleSet::from_scalars(&xs).unwrap(), &y).unwrap();
        let b = cka(&k, &k, &SampleSet::from_scalars(&relabel).unwrap(), &y).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((a - cka(&k, &k, &y, &SampleSet::from_scalars(&xs).unwrap()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn matrix_duplicates_and_constants() {
        let a = gaussian(5, 30);
        let b = gaussian(6, 30);
        let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![a[i], a[i], b[i], 1.0]).collect();
        let m = cka_matrix(&SampleSet::new(pts).unwrap(), &KernelSpec::rbf(1.0)).unwrap();
        assert!((m.values[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(m.constant, vec![3]);
        for i in 0..4 {
            for j in 0..4 {
                assert!((m.values[i][j] - m.values[j][i]).abs() < 1e-12);
            }
        }
        let p = cluster_dimensions(&m, 0.5).unwrap();
        assert!(p.clusters.contains(&vec![3]));
    }

    #[test]
    fn clustering_extremes() {
        let eye = matrix(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(cluster_dimensions(&eye, 0.3).unwrap().clusters.len(), 3);
        let ones = matrix(vec![vec![1.0; 3]; 3]);
        assert_eq!(cluster_dimensions(&ones, 0.3).unwrap().clusters, vec![vec![0, 1, 2]]);
        assert!(cluster_dimensions(&ones, 1.0).is_err());
    }

    #[test]
    fn planted_blocks() {
        // coordinates 0 and 2 form one block, 1 and 3 the other
        let block = [0, 1, 0, 1];
        let v = |i: usize, j: usize| if i == j { 1.0 } else if block[i] == block[j] { 0.8 } else { 0.05 };
        let m = matrix((0..4).map(|i| (0..4).map(|j| v(i, j)).collect()).collect());
        assert_eq!(cluster_dimensions(&m, 0.3).unwrap().clusters, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn single_cluster_has_no_residual() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1, (i % 3) as f64]).collect();
        let x = SampleSet::new(pts.clone()).unwrap();
        let y = SampleSet::new(pts.iter().map(|p| vec![p[0] + 0.3, p[1]]).collect()).unwrap();
        let part = DimensionPartition { clusters: vec![vec![0, 1]], tau: 0.5 };
        for mode in [DisentangleMode::Cosine, DisentangleMode::Eks] {
            let r = disentangled_cosine(&KernelSpec::rbf(1.0), &part, &x, &y, mode).unwrap();
            assert_eq!(r.residual, 0.0);
        }
        let bad = DimensionPartition { clusters: vec![vec![0]], tau: 0.5 };
        assert!(disentangled_cosine(&KernelSpec::rbf(1.0), &bad, &x, &y, DisentangleMode::Cosine).is_err());
    }

    fn world() -> ProductWorld {
        ProductWorld::new(vec![
            Block { atoms: vec![vec![0.0], vec![1.0], vec![2.0]], x: vec![0.2, 0.3, 0.5], y: vec![0.4, 0.4, 0.2] },
            Block { atoms: vec![vec![0.0], vec![1.0]], x: vec![0.9, 0.1], y: vec![0.5, 0.5] },
            Block { atoms: vec![vec![0.0], vec![1.0]], x: vec![0.35, 0.65], y: vec![0.6, 0.4] },
        ])
        .unwrap()
    }

    #[test]
    fn product_worlds_factorize_and_refine() {
        let w = world();
        let (x, y) = w.joint_sets().unwrap();
        let fine = DimensionPartition { clusters: w.partition(), tau: 0.5 };
        let coarse = DimensionPartition { clusters: vec![vec![0], vec![1, 2]], tau: 0.5 };
        for base in [KernelSpec::DeltaDiscrete, KernelSpec::rbf(0.7)] {
            for mode in [DisentangleMode::Cosine, DisentangleMode::Eks] {
                let a = disentangled_cosine(&base, &fine, &x, &y, mode).unwrap();
                let b = disentangled_cosine(&base, &coarse, &x, &y, mode).unwrap();
                assert!(a.residual < 1e-10, "{mode} {}", a.residual);
                assert!((a.product - b.product).abs() < 1e-10);
            }
        }
        // EKS / ‖μ_Y‖ = cosine
        let base = KernelSpec::DeltaDiscrete;
        let e = disentangled_cosine(&base, &fine, &x, &y, DisentangleMode::Eks).unwrap();
        let c = disentangled_cosine(&base, &fine, &x, &y, DisentangleMode::Cosine).unwrap();
        let (full_e, _) = w.enumerate_eks(&base).unwrap();
        assert!((e.full - full_e).abs() < 1e-12);
        // with the delta kernel ‖μ_Y‖² is the sum of squared joint masses
        let sq: f64 = y.weights().unwrap().iter().map(|v| v * v).sum();
        assert!((-e.full / sq.sqrt() - c.full).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clustering_is_permutation_equivariant(
            upper in prop::collection::vec(0.0f64..1.0, 10),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
            tau in 0.1f64..0.9,
        ) {
            let mut m = vec![vec![1.0; 5]; 5];
            let mut it = upper.iter();
            for i in 0..5 {
                for j in i + 1..5 {
                    let v = *it.next().unwrap();
                    m[i][j] = v;
                    m[j][i] = v;
                }
            }
            let permuted: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| m[perm[i]][perm[j]]).collect()).collect();
            let a = cluster_dimensions(&matrix(m), tau).unwrap();
            let b = cluster_dimensions(&matrix(permuted), tau).unwrap();
            let mut mapped: Vec<Vec<usize>> = b.clusters.iter().map(|c| {
                let mut v: Vec<usize> = c.iter().map(|&i| perm[i]).collect();
                v.sort_unstable();
                v
            }).collect();
            mapped.sort_by_key(|c| c[0]);
            prop_assert_eq!(a.clusters, mapped);
        }
    }
}
