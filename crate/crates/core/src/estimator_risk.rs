//! Calibration estimation functions h(p, p′) = ⟨p − ĉ(p), p′ − ĉ(p′)⟩, their
//! mean-squared-error risk on pairs, and a train/validation/test pipeline
//! that selects among them.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{kd_conditional, temperature_scale};
use crate::data::{LabeledPredictionSet, SimplexVector};
use crate::error::{Error, Result};

/// A closed-form conditional P(Y | f(X) = p).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "map", rename_all = "snake_case")]
pub enum ExactConditional {
    /// c(p) = p: the model is calibrated.
    Identity,
    /// c(p) = TS_alpha(p).
    Temperature { alpha: f64 },
}

impl ExactConditional {
    pub fn apply(&self, p: &SimplexVector) -> Result<SimplexVector> {
        match *self {
            ExactConditional::Identity => Ok(p.clone()),
            ExactConditional::Temperature { alpha } => temperature_scale(p, alpha),
        }
    }
}

/// Hyperparameters of a calibration estimation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HSpec {
    Oracle { conditional: ExactConditional },
    /// Label frequencies in `bins` uniform bins of the first coordinate.
    Binned { bins: usize },
    Kde { h: f64 },
    /// Ridge regression of centered one-hot labels with an RBF kernel on the simplex.
    Krr { lambda: f64, gamma: f64 },
}

impl HSpec {
    /// Model complexity used to break validation-risk ties: fewer bins,
    /// wider bandwidths and stronger ridge penalties are simpler.
    pub fn complexity(&self) -> f64 {
        match *self {
            HSpec::Oracle { .. } => 0.0,
            HSpec::Binned { bins } => bins as f64,
            HSpec::Kde { h } => 1.0 / h,
            HSpec::Krr { lambda, .. } => 1.0 / lambda,
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
            }
        };
        match *self {
            HSpec::Oracle { conditional: ExactConditional::Temperature { alpha } } => positive(alpha, "oracle alpha"),
            HSpec::Oracle { .. } => Ok(()),
            HSpec::Binned { bins } => positive(bins as f64, "bin count"),
            HSpec::Kde { h } => positive(h, "bandwidth"),
            HSpec::Krr { lambda, gamma } => positive(lambda, "lambda").and(positive(gamma, "gamma")),
        }
    }
}

impl fmt::Display for HSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HSpec::Oracle { .. } => f.write_str("oracle"),
            HSpec::Binned { bins } => write!(f, "binned:bins={bins}"),
            HSpec::Kde { h } => write!(f, "kde:h={h}"),
            HSpec::Krr { lambda, gamma } => write!(f, "krr:lambda={lambda},gamma={gamma}"),
        }
    }
}

#[derive(Debug, Clone)]
enum Model {
    Oracle(ExactConditional),
    Binned { table: Vec<Vec<f64>> },
    Kde { train: LabeledPredictionSet, h: f64 },
    Krr { centers: Vec<SimplexVector>, coef: DMatrix<f64>, mean: Vec<f64>, gamma: f64 },
}

/// A fitted calibration estimation function.
#[derive(Debug, Clone)]
pub struct CalibrationEstimationFunction {
    spec: HSpec,
    model: Model,
    train_id: Option<String>,
}

fn rbf(gamma: f64, a: &SimplexVector, b: &SimplexVector) -> f64 {
    let d2: f64 = a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).powi(2)).sum();
    (-gamma * d2).exp()
}

fn first_coord_bin(p: &SimplexVector, bins: usize) -> usize {
    ((p.probs()[0] * bins as f64).floor() as usize).min(bins - 1)
}

/// Clips negative entries and renormalizes; falls back to `fallback` if
/// nothing positive is left.
fn project(v: &[f64], fallback: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total > 0.0 {
        clipped.iter().map(|x| x / total).collect()
    } else {
        fallback.to_vec()
    }
}

/// Fits ĉ on `train`.
pub fn fit(spec: &HSpec, train: &LabeledPredictionSet) -> Result<CalibrationEstimationFunction> {
    spec.validate()?;
    let d = train.classes();
    let freq = train.label_frequencies();
    let model = match *spec {
        HSpec::Oracle { conditional } => Model::Oracle(conditional),
        HSpec::Binned { bins } => {
            let mut counts = vec![vec![0.0; d]; bins];
            for (p, y) in train.iter() {
                counts[first_coord_bin(p, bins)][y] += 1.0;
            }
            let table = counts
                .into_iter()
                .map(|c| {
                    let total: f64 = c.iter().sum();
                    if total > 0.0 { c.iter().map(|v| v / total).collect() } else { freq.clone() }
                })
                .collect();
            Model::Binned { table }
        }
        HSpec::Kde { h } => Model::Kde { train: train.clone(), h },
        HSpec::Krr { lambda, gamma } => {
            let n = train.len();
            let preds = train.predictions();
            let mut k = DMatrix::from_fn(n, n, |i, j| rbf(gamma, &preds[i], &preds[j]));
            for i in 0..n {
                k[(i, i)] += lambda;
            }
            let targets = DMatrix::from_fn(n, d, |i, c| f64::from(u8::from(train.labels()[i] == c)) - freq[c]);
            let chol = k.cholesky().ok_or(Error::SingularRidge(lambda))?;
            let coef = chol.solve(&targets);
            if coef.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularRidge(lambda));
            }
            Model::Krr { centers: preds.to_vec(), coef, mean: freq, gamma }
        }
    };
    Ok(CalibrationEstimationFunction { spec: spec.clone(), model, train_id: train.provenance().map(str::to_owned) })
}

impl CalibrationEstimationFunction {
    pub fn spec(&self) -> &HSpec {
        &self.spec
    }

    /// The fitted conditional-mean model ĉ(p).
    pub fn conditional(&self, p: &SimplexVector) -> Result<Vec<f64>> {
        match &self.model {
            Model::Oracle(c) => Ok(c.apply(p)?.into_inner()),
            Model::Binned { table } => Ok(table[first_coord_bin(p, table.len())].clone()),
            Model::Kde { train, h } => Ok(kd_conditional(train, p, *h)?.probs.into_inner()),
            Model::Krr { centers, coef, mean, gamma } => {
                let kv = DVector::from_iterator(centers.len(), centers.iter().map(|c| rbf(*gamma, c, p)));
                let out = coef.tr_mul(&kv);
                let raw: Vec<f64> = mean.iter().zip(out.iter()).map(|(m, o)| m + o).collect();
                Ok(project(&raw, mean))
            }
        }
    }

    /// p − ĉ(p)
    pub fn residual(&self, p: &SimplexVector) -> Result<Vec<f64>> {
        Ok(p.probs().iter().zip(self.conditional(p)?).map(|(a, b)| a - b).collect())
    }

    pub fn h(&self, p: &SimplexVector, q: &SimplexVector) -> Result<f64> {
        Ok(dot(&self.residual(p)?, &self.residual(q)?))
    }

    /// Mean of h(f_i, f_i): the squared L2 calibration-error estimate.
    pub fn diagonal_mean(&self, data: &LabeledPredictionSet) -> Result<f64> {
        let terms: Vec<f64> = data
            .predictions()
            .par_iter()
            .map(|p| self.residual(p).map(|r| dot(&r, &r)))
            .collect::<Result<_>>()?;
        Ok(terms.iter().sum::<f64>() / data.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pair_risk(h: &CalibrationEstimationFunction, data: &LabeledPredictionSet) -> Result<f64> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument("the pair risk needs at least 2 instances".into()));
    }
    let targets: Vec<Vec<f64>> = data
        .iter()
        .map(|(p, y)| p.probs().iter().enumerate().map(|(c, v)| v - f64::from(u8::from(c == y))).collect())
        .collect();
    let resid: Vec<Vec<f64>> = data.predictions().par_iter().map(|p| h.residual(p)).collect::<Result<_>>()?;
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(&targets[i], &targets[j]) - dot(&resid[i], &resid[j])).powi(2))
                .sum()
        })
        .collect();
    Ok(rows.iter().sum::<f64>() / (n as f64 * (n as f64 - 1.0)))
}

/// Mean squared error of h against ⟨f_i − e_{y_i}, f_j − e_{y_j}⟩ over all
/// ordered pairs i ≠ j. `data` must not be the set h was fitted on.
pub fn empirical_ce_risk(h: &CalibrationEstimationFunction, data: &LabeledPredictionSet) -> Result<f64> {
    if let (Some(a), Some(b)) = (h.train_id.as_deref(), data.provenance()) {
        if a == b {
            return Err(Error::OverlappingSplits(format!("risk evaluated on the training set '{a}'")));
        }
    }
    pair_risk(h, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRisk {
    pub name: String,
    pub hyperparams: HSpec,
    pub train_risk: f64,
    pub val_risk: f64,
    pub test_risk: f64,
    pub test_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub candidates: Vec<CandidateRisk>,
    pub chosen: String,
    /// L2 calibration-error estimate of the chosen candidate on the test split.
    pub test_ce: f64,
}

impl RiskReport {
    pub fn winner(&self) -> &CandidateRisk {
        self.candidates.iter().find(|c| c.name == self.chosen).expect("chosen candidate is listed")
    }
}

fn check_splits(splits: [&LabeledPredictionSet; 3]) -> Result<()> {
    let names = ["train", "validation", "test"];
    let ids: Vec<&str> = splits
        .iter()
        .zip(names)
        .map(|(s, name)| {
            s.provenance()
                .ok_or_else(|| Error::OverlappingSplits(format!("the {name} split has no provenance id")))
        })
        .collect::<Result<_>>()?;
    for i in 0..3 {
        for j in i + 1..3 {
            if ids[i] == ids[j] {
                return Err(Error::OverlappingSplits(format!(
                    "{} and {} splits share the id '{}'",
                    names[i], names[j], ids[i]
                )));
            }
        }
    }
    Ok(())
}

/// Fits every candidate on `train`, ranks by validation risk and reports
/// the winner's test CE as the square root of its test diagonal mean.
pub fn pipeline(
    candidates: &[HSpec],
    train: &LabeledPredictionSet,
    val: &LabeledPredictionSet,
    test: &LabeledPredictionSet,
) -> Result<RiskReport> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    check_splits([train, val, test])?;
    let rows: Vec<CandidateRisk> = candidates
        .par_iter()
        .map(|spec| {
            let h = fit(spec, train)?;
            Ok(CandidateRisk {
                name: spec.name(),
                hyperparams: spec.clone(),
                train_risk: pair_risk(&h, train)?,
                val_risk: empirical_ce_risk(&h, val)?,
                test_risk: empirical_ce_risk(&h, test)?,
                test_ce: h.diagonal_mean(test)?.max(0.0).sqrt(),
            })
        })
        .collect::<Result<_>>()?;
    let best = select(&rows);
    Ok(RiskReport { chosen: best.name.clone(), test_ce: best.test_ce, candidates: rows.clone() })
}

/// Lowest validation risk, then lowest complexity, then name.
fn select(rows: &[CandidateRisk]) -> &CandidateRisk {
    rows.iter()
        .min_by(|a, b| {
            a.val_risk
                .total_cmp(&b.val_risk)
                .then(a.hyperparams.complexity().total_cmp(&b.hyperparams.complexity()))
                .then(a.name.cmp(&b.name))
        })
        .expect("nonempty candidate list")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Seed;
    use crate::synth::gen_calibrated;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    fn fixture() -> LabeledPredictionSet {
        LabeledPredictionSet::new(
            vec![sv(&[0.7, 0.2, 0.1]), sv(&[0.1, 0.6, 0.3]), sv(&[0.3, 0.3, 0.4]), sv(&[0.5, 0.25, 0.25])],
            vec![0, 2, 2, 1],
        )
        .unwrap()
    }

    #[test]
    fn oracle_diagonal_is_squared_distance() {
        let h = fit(&HSpec::Oracle { conditional: ExactConditional::Temperature { alpha: 0.5 } }, &fixture()).unwrap();
        let p = sv(&[0.8, 0.2]);
        let c = temperature_scale(&p, 0.5).unwrap();
        let expected: f64 = p.probs().iter().zip(c.probs()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((h.h(&p, &p).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kde_on_single_point_is_that_label() {
        let one = LabeledPredictionSet::new(vec![sv(&[0.3, 0.7])], vec![0]).unwrap();
        let h = fit(&HSpec::Kde { h: 0.1 }, &one).unwrap();
        assert_eq!(h.conditional(&sv(&[0.9, 0.1])).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn krr_limit_is_label_frequency() {
        let data = fixture();
        let h = fit(&HSpec::Krr { lambda: 1e12, gamma: 5.0 }, &data).unwrap();
        let c = h.conditional(&sv(&[0.2, 0.2, 0.6])).unwrap();
        for (a, b) in c.iter().zip([0.25, 0.25, 0.5]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn risk_matches_double_loop() {
        let data = fixture();
        let h = fit(&HSpec::Binned { bins: 2 }, &data.clone().with_provenance("train")).unwrap();
        // brute force with every quantity recomputed from scratch
        let mut total = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let (pi, pj) = (&data.predictions()[i], &data.predictions()[j]);
                let mut t = 0.0;
                for c in 0..3 {
                    let ei = if data.labels()[i] == c { 1.0 } else { 0.0 };
                    let ej = if data.labels()[j] == c { 1.0 } else { 0.0 };
                    t += (pi.probs()[c] - ei) * (pj.probs()[c] - ej);
                }
                total += (t - h.h(pi, pj).unwrap()).powi(2);
            }
        }
        let got = empirical_ce_risk(&h, &data).unwrap();
        assert!((got - total / 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_risk_cases() {
        // one-hot predictions with correct labels: every target is zero and h ≡ 0
        let data = LabeledPredictionSet::new(vec![sv(&[1.0, 0.0]), sv(&[0.0, 1.0]), sv(&[1.0, 0.0])], vec![0, 1, 0]).unwrap();
        let h = fit(&HSpec::Oracle { conditional: ExactConditional::Identity }, &data).unwrap();
        assert_eq!(empirical_ce_risk(&h, &data).unwrap(), 0.0);
        let one = LabeledPredictionSet::new(vec![sv(&[1.0, 0.0])], vec![0]).unwrap();
        assert!(empirical_ce_risk(&h, &one).is_err());
    }

    #[test]
    fn splits_must_be_distinct() {
        let a = fixture().with_provenance("a");
        let b = fixture().with_provenance("b");
        let cands = [HSpec::Kde { h: 0.1 }];
        assert!(matches!(pipeline(&cands, &a, &b, &a), Err(Error::OverlappingSplits(_))));
        assert!(pipeline(&cands, &a, &b, &fixture()).is_err());
        let h = fit(&cands[0], &a).unwrap();
        assert!(empirical_ce_risk(&h, &a).is_err());
    }

    #[test]
    fn single_candidate_wins_and_runs_repeat() {
        let split = |s: u64, name: &str| gen_calibrated(3, 200, 1.0, Seed(s)).unwrap().data.with_provenance(name);
        let (tr, va, te) = (split(1, "tr"), split(2, "va"), split(3, "te"));
        let r = pipeline(&[HSpec::Binned { bins: 5 }], &tr, &va, &te).unwrap();
        assert_eq!(r.chosen, "binned:bins=5");
        let cands = [HSpec::Kde { h: 0.05 }, HSpec::Krr { lambda: 1.0, gamma: 5.0 }, HSpec::Binned { bins: 10 }];
        assert_eq!(pipeline(&cands, &tr, &va, &te).unwrap(), pipeline(&cands, &tr, &va, &te).unwrap());
    }

    #[test]
    fn ties_prefer_simpler_models() {
        let row = |spec: HSpec, val: f64| CandidateRisk {
            name: spec.name(),
            hyperparams: spec,
            train_risk: 0.0,
            val_risk: val,
            test_risk: 0.0,
            test_ce: 0.0,
        };
        let rows = vec![
            row(HSpec::Binned { bins: 10 }, 0.5),
            row(HSpec::Kde { h: 0.2 }, 0.5),
            row(HSpec::Binned { bins: 5 }, 0.5),
            row(HSpec::Kde { h: 0.01 }, 0.7),
        ];
        assert_eq!(select(&rows).name, "binned:bins=5");
        let rows = vec![row(HSpec::Kde { h: 0.25 }, 0.5), row(HSpec::Binned { bins: 10 }, 0.5)];
        assert_eq!(select(&rows).name, "kde:h=0.25");
        // equal complexity falls through to the name
        let rows = vec![row(HSpec::Kde { h: 1.0 }, 0.5), row(HSpec::Binned { bins: 1 }, 0.5)];
        assert_eq!(select(&rows).name, "binned:bins=1");
    }

    proptest! {
        #[test]
        fn fitted_h_is_symmetric(seed in 0u64..200, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let train = gen_calibrated(2, 40, 1.0, Seed(seed)).unwrap().data;
            let (p, q) = (sv(&[a, 1.0 - a]), sv(&[b, 1.0 - b]));
            for spec in [
                HSpec::Binned { bins: 4 },
                HSpec::Kde { h: 0.1 },
                HSpec::Krr { lambda: 0.5, gamma: 5.0 },
                HSpec::Oracle { conditional: ExactConditional::Temperature { alpha: 2.0 } },
            ] {
                let h = fit(&spec, &train).unwrap();
                prop_assert!((h.h(&p, &q).unwrap() - h.h(&q, &p).unwrap()).abs() < 1e-15);
                prop_assert!(h.h(&p, &p).unwrap() >= 0.0);
            }
        }
    }
}
