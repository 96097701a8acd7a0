//! Calibration-error estimators, sharpness, temperature scaling and the
//! calibration-improvement check.
//!
//! Conditional label distributions given a prediction are estimated with a
//! Dirichlet-kernel Nadaraya–Watson ratio. The normalizing constant of the
//! kernel depends only on the query, so the ratio works on the unnormalized
//! log-weights Σ_i (x_i / h) ln y_i with the maximum subtracted.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::{LabeledPredictionSet, SimplexVector};
use crate::error::{Error, Result};
use crate::numeric::golden_section;
use crate::scores::{self, ScoreKind};

/// Lower clamp for simplex entries inside the Dirichlet kernel.
pub const DIRICHLET_FLOOR: f64 = 1e-10;
/// Smoothing mass added to estimated conditionals before a KL divergence.
pub const LOG_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "bins", rename_all = "snake_case")]
pub enum BinningScheme {
    UniformWidth(usize),
    EqualMass(usize),
}

impl BinningScheme {
    pub fn bins(&self) -> usize {
        match *self {
            BinningScheme::UniformWidth(m) | BinningScheme::EqualMass(m) => m,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bins() == 0 {
            return Err(Error::InvalidArgument("need at least one bin".into()));
        }
        Ok(())
    }

    /// Bin index of every value. Uniform bins assume values in [0, 1];
    /// equal-mass bins work on ranks and accept any finite values.
    pub fn assign(&self, values: &[f64]) -> Result<Vec<usize>> {
        self.validate()?;
        let m = self.bins();
        match *self {
            BinningScheme::UniformWidth(_) => Ok(values
                .iter()
                .map(|&v| ((v.clamp(0.0, 1.0) * m as f64).floor() as usize).min(m - 1))
                .collect()),
            BinningScheme::EqualMass(_) => {
                let n = values.len();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
                let mut out = vec![0; n];
                let mut run_bin = 0;
                for (rank, &i) in order.iter().enumerate() {
                    // equal values share the bin of the first of their run
                    if rank == 0 || values[i] != values[order[rank - 1]] {
                        run_bin = rank * m / n;
                    }
                    out[i] = run_bin;
                }
                Ok(out)
            }
        }
    }
}

impl fmt::Display for BinningScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinningScheme::UniformWidth(m) => write!(f, "uniform:{m}"),
            BinningScheme::EqualMass(m) => write!(f, "mass:{m}"),
        }
    }
}

impl FromStr for BinningScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad binning scheme '{s}', expected uniform:M or mass:M"));
        let (mode, m) = s.split_once(':').ok_or_else(bad)?;
        let m: usize = m.trim().parse().map_err(|_| bad())?;
        let scheme = match mode.trim() {
            "uniform" => BinningScheme::UniformWidth(m),
            "mass" | "equal-mass" => BinningScheme::EqualMass(m),
            _ => return Err(bad()),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdeConvention {
    /// The sum over training points includes the query's own point.
    #[default]
    LeaveSelfIn,
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub estimator: String,
    pub value: f64,
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ScoreKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<BinningScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convention: Option<KdeConvention>,
    /// Instances whose conditional fell back to uniform.
    pub fallbacks: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub acc: f64,
    pub conf: f64,
}

/// Per-bin accuracy and mean confidence of the top label.
pub fn reliability(data: &LabeledPredictionSet, scheme: BinningScheme) -> Result<Vec<ReliabilityBin>> {
    let conf: Vec<f64> = data.predictions().iter().map(SimplexVector::confidence).collect();
    let assigned = scheme.assign(&conf)?;
    let m = scheme.bins();
    let mut count = vec![0usize; m];
    let mut correct = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for (i, (p, y)) in data.iter().enumerate() {
        let b = assigned[i];
        count[b] += 1;
        correct[b] += usize::from(p.argmax() == y);
        conf_sum[b] += conf[i];
        lo[b] = lo[b].min(conf[i]);
        hi[b] = hi[b].max(conf[i]);
    }
    let mut prev_hi = 0.0;
    let mut out = Vec::with_capacity(m);
    for b in 0..m {
        let (bin_lo, bin_hi) = match scheme {
            BinningScheme::UniformWidth(_) => (b as f64 / m as f64, (b + 1) as f64 / m as f64),
            BinningScheme::EqualMass(_) if count[b] == 0 => (prev_hi, prev_hi),
            BinningScheme::EqualMass(_) => (lo[b], hi[b]),
        };
        prev_hi = bin_hi;
        let c = count[b] as f64;
        out.push(ReliabilityBin {
            bin_lo,
            bin_hi,
            count: count[b],
            acc: if count[b] > 0 { correct[b] as f64 / c } else { 0.0 },
            conf: if count[b] > 0 { conf_sum[b] / c } else { 0.0 },
        });
    }
    Ok(out)
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("exponent must be a finite p >= 1, got {p}")));
    }
    Ok(())
}

/// Binned L^p top-label calibration error.
pub fn tce_binned(p_exp: f64, data: &LabeledPredictionSet, scheme: BinningScheme) -> Result<CalibrationReport> {
    check_exponent(p_exp)?;
    let n = data.len() as f64;
    let value = reliability(data, scheme)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.acc - b.conf).abs().powf(p_exp))
        .sum::<f64>()
        .powf(1.0 / p_exp);
    Ok(CalibrationReport {
        estimator: "tce".into(),
        value,
        p: p_exp,
        kind: None,
        bins: Some(scheme),
        bandwidth: None,
        convention: None,
        fallbacks: 0,
        n: data.len(),
    })
}

fn check_bandwidth(h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    Ok(())
}

/// Log-density of Dir(x / h + 1) at y.
pub fn log_dirichlet_kernel(x: &SimplexVector, y: &SimplexVector, h: f64) -> Result<f64> {
    check_bandwidth(h)?;
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    let alpha: Vec<f64> = x.probs().iter().map(|xi| xi / h + 1.0).collect();
    let norm = ln_gamma(alpha.iter().sum()) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let body: f64 = alpha
        .iter()
        .zip(y.probs())
        .map(|(a, yi)| (a - 1.0) * yi.max(DIRICHLET_FLOOR).ln())
        .sum();
    Ok(norm + body)
}

/// Dirichlet kernel with concentration x / h + 1, evaluated at y.
pub fn dirichlet_kernel(x: &SimplexVector, y: &SimplexVector, h: f64) -> Result<f64> {
    Ok(log_dirichlet_kernel(x, y, h)?.exp())
}

/// A conditional-distribution estimate; `fallback` marks a uniform
/// substitute for a vanishing kernel denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional {
    pub probs: SimplexVector,
    pub fallback: bool,
}

/// Kernel density-ratio model of P(Y | f(X) = query) over a training set.
struct KdeModel<'a> {
    data: &'a LabeledPredictionSet,
    h: f64,
    /// ln max(f_j, floor), row major n x d
    logs: Vec<f64>,
}

impl<'a> KdeModel<'a> {
    fn new(data: &'a LabeledPredictionSet, h: f64) -> Result<Self> {
        check_bandwidth(h)?;
        let logs = data
            .predictions()
            .iter()
            .flat_map(|p| p.probs().iter().map(|v| v.max(DIRICHLET_FLOOR).ln()))
            .collect();
        Ok(Self { data, h, logs })
    }

    fn conditional(&self, query: &SimplexVector, exclude: Option<usize>) -> Result<Conditional> {
        let d = self.data.classes();
        if query.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: query.dim() });
        }
        let scale: Vec<f64> = query.probs().iter().map(|q| q / self.h).collect();
        let n = self.data.len();
        let logw: Vec<f64> = (0..n)
            .map(|j| {
                if Some(j) == exclude {
                    return f64::NEG_INFINITY;
                }
                let row = &self.logs[j * d..(j + 1) * d];
                scale.iter().zip(row).map(|(s, l)| s * l).sum()
            })
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut acc = vec![0.0; d];
        if max.is_finite() {
            for (w, &y) in logw.iter().zip(self.data.labels()) {
                acc[y] += (w - max).exp();
            }
        }
        match SimplexVector::from_weights(&acc) {
            Ok(probs) => Ok(Conditional { probs, fallback: false }),
            Err(_) => Ok(Conditional { probs: SimplexVector::uniform(d)?, fallback: true }),
        }
    }
}

/// Kernel density-ratio estimate of the label distribution given the
/// prediction `query`.
pub fn kd_conditional(data: &LabeledPredictionSet, query: &SimplexVector, h: f64) -> Result<Conditional> {
    KdeModel::new(data, h)?.conditional(query, None)
}

/// Estimated conditionals at every training prediction.
pub fn fitted_conditionals(
    data: &LabeledPredictionSet,
    h: f64,
    convention: KdeConvention,
) -> Result<Vec<Conditional>> {
    let model = KdeModel::new(data, h)?;
    data.predictions()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let exclude = (convention == KdeConvention::LeaveOneOut).then_some(i);
            model.conditional(p, exclude)
        })
        .collect()
}

fn check_pair_count(data: &LabeledPredictionSet) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("the estimator needs at least 2 instances".into()));
    }
    Ok(())
}

fn kde_report(estimator: &str, value: f64, p: f64, kind: Option<ScoreKind>, h: f64, convention: KdeConvention, fallbacks: usize, n: usize) -> CalibrationReport {
    CalibrationReport {
        estimator: estimator.into(),
        value,
        p,
        kind,
        bins: None,
        bandwidth: Some(h),
        convention: Some(convention),
        fallbacks,
        n,
    }
}

/// Canonical L^p calibration error with Dirichlet-kernel conditionals.
pub fn cce_kde(p_exp: f64, data: &LabeledPredictionSet, h: f64, convention: KdeConvention) -> Result<CalibrationReport> {
    check_exponent(p_exp)?;
    check_pair_count(data)?;
    let cond = fitted_conditionals(data, h, convention)?;
    let terms: Vec<f64> = data
        .predictions()
        .iter()
        .zip(&cond)
        .map(|(f, c)| f.probs().iter().zip(c.probs.probs()).map(|(a, b)| (a - b).abs().powf(p_exp)).sum())
        .collect();
    let value = (terms.iter().sum::<f64>() / data.len() as f64).powf(1.0 / p_exp);
    let fallbacks = cond.iter().filter(|c| c.fallback).count();
    Ok(kde_report("cce", value, p_exp, None, h, convention, fallbacks, data.len()))
}

fn smooth(kind: ScoreKind, c: &SimplexVector) -> Result<SimplexVector> {
    if kind != ScoreKind::Log {
        return Ok(c.clone());
    }
    let d = c.dim() as f64;
    SimplexVector::new(c.probs().iter().map(|v| (v + LOG_SMOOTHING) / (1.0 + d * LOG_SMOOTHING)).collect())
}

/// Mean divergence between predictions and their estimated conditionals.
pub fn proper_ce(kind: ScoreKind, data: &LabeledPredictionSet, h: f64, convention: KdeConvention) -> Result<CalibrationReport> {
    check_pair_count(data)?;
    let cond = fitted_conditionals(data, h, convention)?;
    let mut total = 0.0;
    for (f, c) in data.predictions().iter().zip(&cond) {
        total += scores::divergence(kind, f, &smooth(kind, &c.probs)?)?;
    }
    let fallbacks = cond.iter().filter(|c| c.fallback).count();
    Ok(kde_report("proper", total / data.len() as f64, 1.0, Some(kind), h, convention, fallbacks, data.len()))
}

/// Mean divergence between the marginal label frequency and the estimated
/// conditionals.
pub fn sharpness(kind: ScoreKind, data: &LabeledPredictionSet, h: f64, convention: KdeConvention) -> Result<f64> {
    check_pair_count(data)?;
    let cond = fitted_conditionals(data, h, convention)?;
    let marginal = smooth(kind, &SimplexVector::from_weights(&data.label_frequencies())?)?;
    let mut total = 0.0;
    for c in &cond {
        total += scores::divergence(kind, &marginal, &smooth(kind, &c.probs)?)?;
    }
    Ok(total / data.len() as f64)
}

/// Temperature scaling p_i^α / Σ_j p_j^α. Zero entries stay zero.
pub fn temperature_scale(p: &SimplexVector, alpha: f64) -> Result<SimplexVector> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature alpha must be positive, got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(p.clone());
    }
    // dividing by the largest entry first keeps p^α away from underflow
    let top = p.confidence();
    let w: Vec<f64> = p.probs().iter().map(|&v| if v == 0.0 { 0.0 } else { (v / top).powf(alpha) }).collect();
    SimplexVector::from_weights(&w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub alpha: f64,
    pub risk_before: f64,
    pub risk_after: f64,
}

fn scaled_risk(kind: ScoreKind, data: &LabeledPredictionSet, alpha: f64) -> Result<f64> {
    let terms: Vec<f64> = data
        .predictions()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(p, &y)| scores::score(kind, &temperature_scale(p, alpha)?, y))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / data.len() as f64)
}

/// Temperature minimizing the empirical risk, searched over log10 α ∈ [−3, 3].
pub fn fit_temperature(kind: ScoreKind, data: &LabeledPredictionSet) -> Result<TemperatureFit> {
    check_pair_count(data)?;
    let risk_before = scaled_risk(kind, data, 1.0)?;
    let mut failure = None;
    let (log_alpha, risk) = golden_section(
        |t| match scaled_risk(kind, data, 10f64.powf(t)) {
            Ok(r) if r.is_nan() => f64::INFINITY,
            Ok(r) => r,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        },
        -3.0,
        3.0,
        1e-4,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    if risk < risk_before {
        Ok(TemperatureFit { alpha: 10f64.powf(log_alpha), risk_before, risk_after: risk })
    } else {
        Ok(TemperatureFit { alpha: 1.0, risk_before, risk_after: risk_before })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub risk_delta: f64,
    pub ce_delta: f64,
    pub gap: f64,
}

/// Compares the empirical risk change of TS_α ∘ f with the change in
/// calibration error computed from the exact conditionals.
///
/// Temperature scaling is injective, so conditioning on TS_α(f) is
/// conditioning on f and the exact conditionals carry over unchanged.
pub fn improvement_check(
    kind: ScoreKind,
    data: &LabeledPredictionSet,
    conditionals: &[SimplexVector],
    alpha: f64,
) -> Result<ImprovementReport> {
    if conditionals.len() != data.len() {
        return Err(Error::DimensionMismatch { expected: data.len(), got: conditionals.len() });
    }
    let terms: Vec<(f64, f64)> = data
        .predictions()
        .par_iter()
        .zip(data.labels().par_iter())
        .zip(conditionals.par_iter())
        .map(|((f, &y), c)| {
            let g = temperature_scale(f, alpha)?;
            let risk = scores::score(kind, &g, y)? - scores::score(kind, f, y)?;
            let ce = scores::divergence(kind, &g, c)? - scores::divergence(kind, f, c)?;
            Ok((risk, ce))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    let risk_delta = terms.iter().map(|t| t.0).sum::<f64>() / n;
    let ce_delta = terms.iter().map(|t| t.1).sum::<f64>() / n;
    Ok(ImprovementReport { risk_delta, ce_delta, gap: (risk_delta - ce_delta).abs() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyLevel {
    pub count: usize,
    pub predicted_entropy: f64,
    pub conditional_entropy: f64,
}

impl EntropyLevel {
    pub fn holds(&self, slack: f64) -> bool {
        self.predicted_entropy <= self.conditional_entropy + slack
    }
}

/// Groups instances into equal-mass bins of predicted entropy and compares
/// the mean predicted entropy with the entropy of the pooled label
/// frequencies in each bin. Empty bins are omitted.
pub fn aleatoric_inequality_check(kind: ScoreKind, data: &LabeledPredictionSet, levels: usize) -> Result<Vec<EntropyLevel>> {
    let ent: Vec<f64> = data.predictions().iter().map(|p| scores::entropy(kind, p)).collect();
    let assigned = BinningScheme::EqualMass(levels).assign(&ent)?;
    let d = data.classes();
    let mut counts = vec![vec![0.0; d]; levels];
    let mut ent_sum = vec![0.0; levels];
    let mut size = vec![0usize; levels];
    for (i, &y) in data.labels().iter().enumerate() {
        let b = assigned[i];
        counts[b][y] += 1.0;
        ent_sum[b] += ent[i];
        size[b] += 1;
    }
    let mut out = Vec::new();
    for b in (0..levels).filter(|&b| size[b] > 0) {
        out.push(EntropyLevel {
            count: size[b],
            predicted_entropy: ent_sum[b] / size[b] as f64,
            conditional_entropy: scores::entropy(kind, &SimplexVector::from_weights(&counts[b])?),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    fn set(preds: &[&[f64]], labels: &[usize]) -> LabeledPredictionSet {
        LabeledPredictionSet::new(preds.iter().map(|p| sv(p)).collect(), labels.to_vec()).unwrap()
    }

    #[test]
    fn tce_trivial_cases() {
        let one = set(&[&[1.0, 0.0]], &[0]);
        assert_eq!(tce_binned(1.0, &one, BinningScheme::UniformWidth(10)).unwrap().value, 0.0);
        let wrong = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[1, 0]);
        assert_eq!(tce_binned(1.0, &wrong, BinningScheme::UniformWidth(1)).unwrap().value, 1.0);
    }

    #[test]
    fn tce_hand_tally() {
        // bins [0, .5) and [.5, 1]; with d = 3 a confidence of 0.4 lands in the first
        let data = set(
            &[&[0.4, 0.3, 0.3], &[0.3, 0.4, 0.3], &[0.6, 0.2, 0.2], &[0.2, 0.7, 0.1], &[0.1, 0.1, 0.8], &[0.9, 0.05, 0.05]],
            &[0, 2, 0, 0, 2, 0],
        );
        // bin 0: conf .4 .4, correct 1 of 2 -> |0.5 - 0.4| = 0.1, weight 2/6
        // bin 1: conf .6 .7 .8 .9 -> mean .75, correct 3 of 4 -> 0
        let expected = 2.0 / 6.0 * (0.5f64 - 0.4).abs() + 4.0 / 6.0 * (0.75f64 - (0.6 + 0.7 + 0.8 + 0.9) / 4.0).abs();
        let got = tce_binned(1.0, &data, BinningScheme::UniformWidth(2)).unwrap().value;
        assert!((got - expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn single_bin_is_accuracy_gap() {
        let data = set(&[&[0.7, 0.3], &[0.4, 0.6], &[0.55, 0.45]], &[0, 0, 1]);
        let got = tce_binned(1.0, &data, BinningScheme::UniformWidth(1)).unwrap().value;
        assert_eq!(got, (1.0f64 / 3.0 - (0.7 + 0.6 + 0.55) / 3.0).abs());
    }

    #[test]
    fn scheme_sensitivity_fixture() {
        // ten confident correct predictions at 0.91 and ten wrong at 0.99
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let c = if i < 10 { 0.91 } else { 0.99 };
            preds.push(sv(&[c, 1.0 - c]));
            labels.push(if i < 10 { 0 } else { 1 });
        }
        let data = LabeledPredictionSet::new(preds, labels).unwrap();
        let uniform = tce_binned(1.0, &data, BinningScheme::UniformWidth(10)).unwrap().value;
        let mass = tce_binned(1.0, &data, BinningScheme::EqualMass(10)).unwrap().value;
        assert!((uniform - mass).abs() > 0.05, "{uniform} {mass}");
    }

    #[test]
    fn equal_mass_partition() {
        let vals = [0.3, 0.1, 0.3, 0.3, 0.9, 0.5];
        let bins = BinningScheme::EqualMass(3).assign(&vals).unwrap();
        // sorted: .1 .3 .3 .3 .5 .9 -> targets 0 0 1 1 2 2; the .3 run starts at bin 0
        assert_eq!(bins, vec![0, 0, 0, 0, 2, 2]);
        let rel = reliability(&set(&[&[0.6, 0.4], &[0.9, 0.1]], &[0, 1]), BinningScheme::EqualMass(4)).unwrap();
        assert_eq!(rel.iter().map(|b| b.count).sum::<usize>(), 2);
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("uniform:10".parse::<BinningScheme>().unwrap(), BinningScheme::UniformWidth(10));
        assert_eq!("mass:5".parse::<BinningScheme>().unwrap(), BinningScheme::EqualMass(5));
        assert!("uniform:0".parse::<BinningScheme>().is_err());
        assert!("width:3".parse::<BinningScheme>().is_err());
    }

    #[test]
    fn dirichlet_kernel_values() {
        let x = sv(&[0.5, 0.5]);
        let y = sv(&[0.3, 0.7]);
        assert!((dirichlet_kernel(&x, &y, 0.5).unwrap() - 6.0 * 0.3 * 0.7).abs() < 1e-12);
        let a = dirichlet_kernel(&x, &y, 0.2).unwrap();
        let b = dirichlet_kernel(&x, &sv(&[0.7, 0.3]), 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
        let flat = dirichlet_kernel(&sv(&[0.2, 0.3, 0.5]), &sv(&[0.1, 0.6, 0.3]), 1e8).unwrap();
        assert!((flat - 2.0).abs() < 1e-6);
        assert!(dirichlet_kernel(&x, &y, 0.0).is_err());
    }

    #[test]
    fn kd_conditional_trivial() {
        let one = set(&[&[0.2, 0.8]], &[0]);
        let c = kd_conditional(&one, &sv(&[0.9, 0.1]), 0.1).unwrap();
        assert_eq!(c.probs.probs(), &[1.0, 0.0]);
        let same = set(&[&[0.2, 0.8], &[0.6, 0.4], &[0.5, 0.5]], &[1, 1, 1]);
        let c = kd_conditional(&same, &sv(&[0.9, 0.1]), 0.05).unwrap();
        assert_eq!(c.probs.probs(), &[0.0, 1.0]);
        assert!(!c.fallback);
        // leave-one-out on a single point has nothing left
        let loo = fitted_conditionals(&one, 0.1, KdeConvention::LeaveOneOut).unwrap();
        assert!(loo[0].fallback);
    }

    #[test]
    fn maximally_miscalibrated_cce() {
        let data = set(&[&[1.0, 0.0, 0.0][..]; 5], &[1; 5]);
        let r = cce_kde(2.0, &data, 0.05, KdeConvention::LeaveSelfIn).unwrap();
        assert!((r.value - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn duplicated_atom_cce_is_zero() {
        let p = [0.25, 0.75];
        let data = set(&[&p[..]; 4], &[0, 1, 1, 1]);
        let r = cce_kde(2.0, &data, 0.01, KdeConvention::LeaveSelfIn).unwrap();
        assert!(r.value < 1e-12);
    }

    #[test]
    fn brier_proper_ce_is_squared_cce() {
        let data = set(&[&[0.7, 0.3], &[0.4, 0.6], &[0.55, 0.45], &[0.1, 0.9]], &[0, 0, 1, 1]);
        for conv in [KdeConvention::LeaveSelfIn, KdeConvention::LeaveOneOut] {
            let cce = cce_kde(2.0, &data, 0.2, conv).unwrap().value;
            let pce = proper_ce(ScoreKind::Brier, &data, 0.2, conv).unwrap().value;
            assert!((cce * cce - pce).abs() < 1e-12);
            let kl = proper_ce(ScoreKind::Log, &data, 0.2, conv).unwrap().value;
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn temperature_values() {
        let p = sv(&[0.8, 0.2]);
        assert_eq!(temperature_scale(&p, 1.0).unwrap(), p);
        let t = temperature_scale(&p, 2.0).unwrap();
        assert!((t.probs()[0] - 0.64 / 0.68).abs() < 1e-15);
        let u = SimplexVector::uniform(4).unwrap();
        for a in [0.1, 3.0, 50.0] {
            let s = temperature_scale(&u, a).unwrap();
            assert!(s.probs().iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        assert!(temperature_scale(&p, 0.0).is_err());
        let z = temperature_scale(&sv(&[0.0, 0.3, 0.7]), 0.5).unwrap();
        assert_eq!(z.probs()[0], 0.0);
    }

    #[test]
    fn improvement_identity_trivial() {
        let data = set(&[&[0.7, 0.3], &[0.4, 0.6]], &[0, 1]);
        let c = vec![sv(&[0.6, 0.4]), sv(&[0.5, 0.5])];
        let r = improvement_check(ScoreKind::Brier, &data, &c, 1.0).unwrap();
        assert_eq!((r.risk_delta, r.ce_delta), (0.0, 0.0));
    }

    #[test]
    fn degenerate_single_level() {
        let data = set(&[&[0.7, 0.3][..]; 10], &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        let levels = aleatoric_inequality_check(ScoreKind::Log, &data, 5).unwrap();
        assert_eq!(levels.len(), 1);
        assert_eq!(levels[0].count, 10);
        let h = scores::entropy(ScoreKind::Log, &sv(&[0.6, 0.4]));
        assert!((levels[0].conditional_entropy - h).abs() < 1e-15);
    }

    fn interior(d: usize) -> impl Strategy<Value = SimplexVector> {
        prop::collection::vec(1e-3f64..1.0, d).prop_map(|w| SimplexVector::from_weights(&w).unwrap())
    }

    fn argmax_set(p: &SimplexVector) -> Vec<usize> {
        let top = p.confidence();
        (0..p.dim()).filter(|&i| p.probs()[i] == top).collect()
    }

    proptest! {
        #[test]
        fn temperature_keeps_argmax(p in (2usize..6).prop_flat_map(interior), alpha in 0.05f64..20.0) {
            prop_assert_eq!(argmax_set(&p), argmax_set(&temperature_scale(&p, alpha).unwrap()));
        }

        #[test]
        fn temperature_composes(p in (2usize..6).prop_flat_map(interior), a in 0.2f64..4.0, b in 0.2f64..4.0) {
            let two = temperature_scale(&temperature_scale(&p, a).unwrap(), b).unwrap();
            let one = temperature_scale(&p, a * b).unwrap();
            for (x, y) in two.probs().iter().zip(one.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn conditional_is_on_simplex(
            preds in prop::collection::vec(interior(3), 1..20),
            q in interior(3),
            h in 0.01f64..1.0,
        ) {
            let labels = (0..preds.len()).map(|i| i % 3).collect();
            let data = LabeledPredictionSet::new(preds, labels).unwrap();
            let c = kd_conditional(&data, &q, h).unwrap();
            prop_assert!((c.probs.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn uniform_bins_partition(vals in prop::collection::vec(0.0f64..=1.0, 1..50), m in 1usize..20) {
            let bins = BinningScheme::UniformWidth(m).assign(&vals).unwrap();
            prop_assert!(bins.iter().all(|&b| b < m));
            for (v, b) in vals.iter().zip(&bins) {
                prop_assert!(*v >= *b as f64 / m as f64 - 1e-15);
            }
        }
    }
}
