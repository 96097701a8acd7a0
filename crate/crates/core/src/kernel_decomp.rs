//! Bias-variance(-covariance) decompositions of the kernel score for
//! ensembles of sample-based predictions.
//!
//! Every quantity reduces to inner products between mean embeddings, so the
//! module first builds the matrix of pairwise inner products between all
//! sample sets of the grid and the target set, then does the algebra on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EnsembleGrid, SampleSet};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// V-statistic norms; the decomposition identity holds exactly.
    Plugin,
    /// U-statistic squared norms on the diagonal. Point estimates only:
    /// the variance term may come out negative.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub m: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub n_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub bias: f64,
    /// Variance term. For the covariance form this is (1/m)·avg member variance.
    pub variance: f64,
    /// Covariance term (1 − 1/m)·avg member covariance; only in the covariance form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<f64>,
    pub noise: f64,
    pub total: f64,
    pub estimator_mode: EstimatorMode,
    pub counts: Counts,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_covariance: Option<f64>,
}

impl DecompositionReport {
    /// bias + variance [+ covariance] + noise − total.
    pub fn residual(&self) -> f64 {
        self.bias + self.variance + self.covariance.unwrap_or(0.0) + self.noise - self.total
    }
}

/// Inner products between the mean embeddings of `sets` and of `target`.
struct InnerProducts {
    n: usize,
    /// n x n, row major
    sets: Vec<f64>,
    cross: Vec<f64>,
    target: f64,
}

impl InnerProducts {
    fn get(&self, a: usize, b: usize) -> f64 {
        self.sets[a * self.n + b]
    }
}

fn sqnorm(k: &KernelSpec, x: &SampleSet, mode: EstimatorMode) -> Result<f64> {
    match mode {
        EstimatorMode::Plugin => Ok(kernels::mean_pair_sum(k, x, x)),
        EstimatorMode::Unbiased => kernels::sqnorm_unbiased_raw(k, x),
    }
}

fn inner_products(
    k: &KernelSpec,
    sets: &[&SampleSet],
    target: &SampleSet,
    mode: EstimatorMode,
) -> Result<InnerProducts> {
    k.validate()?;
    let n = sets.len();
    for s in sets {
        kernels::check_sets(k, s, target)?;
    }
    // upper triangle including the diagonal, filled in parallel, mirrored below
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            if a == b {
                sqnorm(k, sets[a], mode)
            } else {
                Ok(kernels::mean_pair_sum(k, sets[a], sets[b]))
            }
        })
        .collect::<Result<_>>()?;
    let mut mat = vec![0.0; n * n];
    for (&(a, b), v) in pairs.iter().zip(values) {
        mat[a * n + b] = v;
        mat[b * n + a] = v;
    }
    let cross: Vec<f64> = sets.par_iter().map(|s| kernels::mean_pair_sum(k, s, target)).collect();
    Ok(InnerProducts { n, sets: mat, cross, target: sqnorm(k, target, mode)? })
}

/// Kernel-score bias-variance decomposition over the m members of a
/// single-replicate grid.
pub fn ks_bvd(
    k: &KernelSpec,
    ensemble: &EnsembleGrid,
    targets: &SampleSet,
    mode: EstimatorMode,
) -> Result<DecompositionReport> {
    if ensemble.replicates() != 1 {
        return Err(Error::InvalidArgument(format!(
            "the bias-variance decomposition takes one replicate per member, got {}",
            ensemble.replicates()
        )));
    }
    let sets: Vec<&SampleSet> = (0..ensemble.members()).map(|i| ensemble.get(i, 0)).collect();
    let ip = inner_products(k, &sets, targets, mode)?;
    let m = sets.len() as f64;

    let mean_sq: f64 = (0..ip.n).map(|a| ip.get(a, a)).sum::<f64>() / m;
    let all: f64 = (0..ip.n).map(|a| (0..ip.n).map(|b| ip.get(a, b)).sum::<f64>()).sum::<f64>() / (m * m);
    let mean_cross = ip.cross.iter().sum::<f64>() / m;

    Ok(DecompositionReport {
        bias: all - 2.0 * mean_cross + ip.target,
        variance: mean_sq - all,
        covariance: None,
        noise: -ip.target,
        total: mean_sq - 2.0 * mean_cross,
        estimator_mode: mode,
        counts: Counts { m: sets.len(), r: 1, n_target: targets.len() },
        avg_variance: None,
        avg_covariance: None,
    })
}

/// Bias-variance-covariance decomposition for the ensemble-mean predictor,
/// with member expectations estimated over R ≥ 2 replicates.
pub fn ks_bvc(
    k: &KernelSpec,
    ensemble: &EnsembleGrid,
    targets: &SampleSet,
    mode: EstimatorMode,
) -> Result<DecompositionReport> {
    let (m, r) = (ensemble.members(), ensemble.replicates());
    if r < 2 {
        return Err(Error::InvalidArgument(format!(
            "member variance needs at least 2 replicates, got {r}"
        )));
    }
    let sets: Vec<&SampleSet> = (0..m).flat_map(|i| (0..r).map(move |j| (i, j))).map(|(i, j)| ensemble.get(i, j)).collect();
    let ip = inner_products(k, &sets, targets, mode)?;
    let idx = |member: usize, rep: usize| member * r + rep;
    let (mf, rf) = (m as f64, r as f64);

    // ⟨v̄_k, v̄_l⟩ and (1/R)Σ_r ⟨v_kr, v_lr⟩
    let mut a = vec![0.0; m * m];
    let mut bar = vec![0.0; m * m];
    for kk in 0..m {
        for l in 0..m {
            let mut same = 0.0;
            let mut all = 0.0;
            for r1 in 0..r {
                same += ip.get(idx(kk, r1), idx(l, r1));
                for r2 in 0..r {
                    all += ip.get(idx(kk, r1), idx(l, r2));
                }
            }
            bar[kk * m + l] = all / (rf * rf);
            a[kk * m + l] = same / rf - bar[kk * m + l];
        }
    }
    let avg_var = (0..m).map(|i| a[i * m + i]).sum::<f64>() / mf;
    let avg_cov = if m > 1 {
        let off: f64 = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * m + j]).sum();
        off / (mf * (mf - 1.0))
    } else {
        0.0
    };
    let wbar_sq = bar.iter().sum::<f64>() / (mf * mf);
    let mean_cross = ip.cross.iter().sum::<f64>() / (mf * rf);

    // replicate mixtures w_r = (1/m)Σ_k v_kr
    let mut total = 0.0;
    for rep in 0..r {
        let mut sq = 0.0;
        let mut cr = 0.0;
        for kk in 0..m {
            cr += ip.cross[idx(kk, rep)];
            for l in 0..m {
                sq += ip.get(idx(kk, rep), idx(l, rep));
            }
        }
        total += sq / (mf * mf) - 2.0 * cr / mf;
    }
    total /= rf;

    Ok(DecompositionReport {
        bias: wbar_sq - 2.0 * mean_cross + ip.target,
        variance: avg_var / mf,
        covariance: Some((1.0 - 1.0 / mf) * avg_cov),
        noise: -ip.target,
        total,
        estimator_mode: mode,
        counts: Counts { m, r, n_target: targets.len() },
        avg_variance: Some(avg_var),
        avg_covariance: Some(avg_cov),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub id: String,
    pub entropy: f64,
    pub variance: f64,
}

/// Per-instance kernel entropy of the pooled member samples and plugin
/// variance across all sample sets of the instance's grid.
///
/// Unweighted sets are pooled and scored with the U-statistic; if any set is
/// an exact distribution the entropy of the equal-weight mixture is exact.
pub fn uncertainty_profile(k: &KernelSpec, instances: &[(String, EnsembleGrid)]) -> Result<Vec<UncertaintyRow>> {
    instances
        .par_iter()
        .map(|(id, grid)| {
            let sets: Vec<&SampleSet> = grid.rows().iter().flatten().collect();
            let ip = inner_products(k, &sets, sets[0], EstimatorMode::Plugin)?;
            let n = sets.len() as f64;
            let mean_sq = (0..ip.n).map(|a| ip.get(a, a)).sum::<f64>() / n;
            let all = ip.sets.iter().sum::<f64>() / (n * n);
            let entropy = if sets.iter().any(|s| s.is_weighted()) {
                -all
            } else {
                kernels::kernel_entropy(k, &SampleSet::pooled(sets.iter().copied())?)?
            };
            Ok(UncertaintyRow { id: id.clone(), entropy, variance: mean_sq - all })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn pmf_set(p: &[f64]) -> SampleSet {
        SampleSet::weighted((0..p.len()).map(|i| vec![i as f64]).collect(), p.to_vec()).unwrap()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_sets(rng: &mut impl Rng, count: usize, size: usize, shift: f64) -> Vec<SampleSet> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..count)
            .map(|_| {
                let c = shift * rng.random::<f64>();
                SampleSet::new((0..size).map(|_| vec![c + normal.sample(rng), normal.sample(rng)]).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_member_equal_to_target() {
        let t = SampleSet::from_scalars(&[0.0, 1.0, 1.0, 2.0]).unwrap();
        let grid = EnsembleGrid::from_members(vec![t.clone()]).unwrap();
        let rep = ks_bvd(&KernelSpec::DeltaDiscrete, &grid, &t, EstimatorMode::Plugin).unwrap();
        assert!(rep.bias.abs() < 1e-15);
        assert!(rep.variance.abs() < 1e-15);
        assert!((rep.total - rep.noise).abs() < 1e-15);
    }

    #[test]
    fn delta_matches_pmf_enumeration() {
        // with the delta kernel the mean embedding is the pmf vector itself
        let members = [vec![0.2, 0.3, 0.5], vec![0.6, 0.1, 0.3], vec![0.1, 0.1, 0.8]];
        let q = vec![0.3, 0.3, 0.4];
        let grid = EnsembleGrid::from_members(members.iter().map(|p| pmf_set(p)).collect()).unwrap();
        let rep = ks_bvd(&KernelSpec::DeltaDiscrete, &grid, &pmf_set(&q), EstimatorMode::Plugin).unwrap();

        let mean: Vec<f64> = (0..3).map(|i| members.iter().map(|p| p[i]).sum::<f64>() / 3.0).collect();
        let diff: Vec<f64> = mean.iter().zip(&q).map(|(a, b)| a - b).collect();
        let bias = dot(&diff, &diff);
        let variance = members
            .iter()
            .map(|p| {
                let d: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
                dot(&d, &d)
            })
            .sum::<f64>()
            / 3.0;
        // expected score Σ_y q_y (‖p‖² − 2 p_y), averaged over members
        let total = members.iter().map(|p| (0..3).map(|y| q[y] * (dot(p, p) - 2.0 * p[y])).sum::<f64>()).sum::<f64>() / 3.0;
        assert!((rep.bias - bias).abs() < 1e-12);
        assert!((rep.variance - variance).abs() < 1e-12);
        assert!((rep.noise + dot(&q, &q)).abs() < 1e-12);
        assert!((rep.total - total).abs() < 1e-12);
    }

    #[test]
    fn bvd_rejects_replicates() {
        let s = SampleSet::from_scalars(&[0.0, 1.0]).unwrap();
        let grid = EnsembleGrid::new(vec![vec![s.clone(), s.clone()]]).unwrap();
        assert!(ks_bvd(&KernelSpec::rbf(1.0), &grid, &s, EstimatorMode::Plugin).is_err());
        let one = EnsembleGrid::from_members(vec![s.clone()]).unwrap();
        assert!(ks_bvc(&KernelSpec::rbf(1.0), &one, &s, EstimatorMode::Plugin).is_err());
    }

    #[test]
    fn rbf_identities() {
        let mut rng = Seed(11).rng();
        let k = KernelSpec::rbf(0.5);
        for _ in 0..20 {
            let t = random_sets(&mut rng, 1, 15, 0.0).remove(0);
            let grid = EnsembleGrid::from_members(random_sets(&mut rng, 4, 10, 2.0)).unwrap();
            let rep = ks_bvd(&k, &grid, &t, EstimatorMode::Plugin).unwrap();
            assert!(rep.residual().abs() < 1e-10);
            assert!(rep.variance >= -1e-12);
            let rows: Vec<Vec<SampleSet>> = (0..3).map(|_| random_sets(&mut rng, 3, 8, 2.0)).collect();
            let grid = EnsembleGrid::new(rows).unwrap();
            let rep = ks_bvc(&k, &grid, &t, EstimatorMode::Plugin).unwrap();
            assert!(rep.residual().abs() < 1e-10);
            // unbiased mode substitutes the same diagonal everywhere, so the algebra still closes
            let rep = ks_bvc(&k, &grid, &t, EstimatorMode::Unbiased).unwrap();
            assert!(rep.residual().abs() < 1e-10);
        }
    }

    #[test]
    fn identical_replicates_have_no_spread() {
        let mut rng = Seed(3).rng();
        let sets = random_sets(&mut rng, 3, 6, 1.0);
        let rows: Vec<Vec<SampleSet>> = sets.iter().map(|s| vec![s.clone(); 4]).collect();
        let grid = EnsembleGrid::new(rows).unwrap();
        let t = random_sets(&mut rng, 1, 6, 0.0).remove(0);
        let rep = ks_bvc(&KernelSpec::rbf(1.0), &grid, &t, EstimatorMode::Plugin).unwrap();
        assert!(rep.variance.abs() < 1e-12);
        assert!(rep.covariance.unwrap().abs() < 1e-12);
    }

    #[test]
    fn duplicated_members_are_fully_covariant() {
        let mut rng = Seed(5).rng();
        let reps = random_sets(&mut rng, 5, 6, 3.0);
        let grid = EnsembleGrid::new(vec![reps.clone(), reps]).unwrap();
        let t = random_sets(&mut rng, 1, 6, 0.0).remove(0);
        let rep = ks_bvc(&KernelSpec::rbf(1.0), &grid, &t, EstimatorMode::Plugin).unwrap();
        assert!((rep.avg_covariance.unwrap() - rep.avg_variance.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn independent_members_have_small_covariance() {
        let mut rng = Seed(8).rng();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let p = 0.2 + 0.6 * rng.random::<f64>();
            let pts: Vec<Vec<f64>> = (0..10).map(|_| vec![if rng.random::<f64>() < p { 1.0 } else { 0.0 }]).collect();
            SampleSet::new(pts).unwrap()
        };
        let rows: Vec<Vec<SampleSet>> = (0..3).map(|_| (0..50).map(|_| draw(&mut rng)).collect()).collect();
        let grid = EnsembleGrid::new(rows).unwrap();
        let t = SampleSet::from_scalars(&[0.0, 1.0]).unwrap();
        let rep = ks_bvc(&KernelSpec::DeltaDiscrete, &grid, &t, EstimatorMode::Plugin).unwrap();
        assert!(rep.avg_covariance.unwrap().abs() < rep.avg_variance.unwrap() / 3.0);
    }

    #[test]
    fn single_member_bvc_collapses() {
        let mut rng = Seed(9).rng();
        let grid = EnsembleGrid::new(vec![random_sets(&mut rng, 4, 5, 2.0)]).unwrap();
        let t = random_sets(&mut rng, 1, 5, 0.0).remove(0);
        let rep = ks_bvc(&KernelSpec::rbf(1.0), &grid, &t, EstimatorMode::Plugin).unwrap();
        assert_eq!(rep.covariance, Some(0.0));
        assert!((rep.variance - rep.avg_variance.unwrap()).abs() < 1e-15);
        assert!(rep.residual().abs() < 1e-10);
    }

    #[test]
    fn degenerate_profile() {
        let s = SampleSet::new(vec![vec![1.0, 2.0]; 3]).unwrap();
        let grid = EnsembleGrid::from_members(vec![s.clone(), s]).unwrap();
        let k = KernelSpec::rbf(1.0);
        let rows = uncertainty_profile(&k, &[("a".into(), grid)]).unwrap();
        assert!((rows[0].entropy + 1.0).abs() < 1e-15);
        assert!(rows[0].variance.abs() < 1e-15);
    }

    #[test]
    fn wider_spread_has_higher_entropy() {
        let mut rng = Seed(21).rng();
        let k = KernelSpec::rbf(0.5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut inst = Vec::new();
        for i in 0..40 {
            let scale = if i % 2 == 0 { 0.3 } else { 2.0 };
            let sets: Vec<SampleSet> = (0..3)
                .map(|_| SampleSet::new((0..10).map(|_| vec![scale * normal.sample(&mut rng)]).collect()).unwrap())
                .collect();
            inst.push((i.to_string(), EnsembleGrid::from_members(sets).unwrap()));
        }
        let rows = uncertainty_profile(&k, &inst).unwrap();
        let mean = |parity: usize| rows.iter().enumerate().filter(|(i, _)| i % 2 == parity).map(|(_, r)| r.entropy).sum::<f64>() / 20.0;
        assert!(mean(1) > mean(0));
    }

    proptest! {
        #[test]
        fn member_order_does_not_matter(seed in 0u64..1000, rot in 1usize..4) {
            let mut rng = Seed(seed).rng();
            let sets = random_sets(&mut rng, 4, 5, 2.0);
            let t = random_sets(&mut rng, 1, 5, 0.0).remove(0);
            let k = KernelSpec::rbf(0.7);
            let mut rotated = sets.clone();
            rotated.rotate_left(rot);
            let a = ks_bvd(&k, &EnsembleGrid::from_members(sets).unwrap(), &t, EstimatorMode::Plugin).unwrap();
            let b = ks_bvd(&k, &EnsembleGrid::from_members(rotated).unwrap(), &t, EstimatorMode::Plugin).unwrap();
            for (x, y) in [(a.bias, b.bias), (a.variance, b.variance), (a.noise, b.noise), (a.total, b.total)] {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
