//! Bregman divergences, convex conjugates, Bregman Information and the
//! dual-space bias-variance decomposition of classification scores.
//!
//! The dual map of a score sends a prediction P to the function
//! y ↦ −S(P, y). For the log score these are the log-probabilities, stored
//! in a mean-zero gauge; for the Brier score the primal coordinates are
//! used directly, which changes the generator only by an affine term and
//! leaves every divergence untouched.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Seed, SimplexVector};
use crate::error::{Error, Result};
use crate::numeric;
use crate::scores::{self, ScoreKind};

/// Log-kind operations reject members with an entry below this value.
pub const LOG_BOUNDARY: f64 = 1e-12;

/// Scalar convex generators with closed-form conjugates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator1D {
    /// x ln x + (1 − x) ln(1 − x) on (0, 1); conjugate ln(1 + eᵗ).
    NegBinaryEntropy,
    /// x² on ℝ; conjugate t²/4.
    Square,
}

impl Generator1D {
    pub fn in_domain(self, x: f64) -> bool {
        match self {
            Generator1D::NegBinaryEntropy => x > 0.0 && x < 1.0,
            Generator1D::Square => x.is_finite(),
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            Generator1D::NegBinaryEntropy => x * x.ln() + (1.0 - x) * (1.0 - x).ln(),
            Generator1D::Square => x * x,
        }
    }

    pub fn gradient(self, x: f64) -> f64 {
        match self {
            Generator1D::NegBinaryEntropy => (x / (1.0 - x)).ln(),
            Generator1D::Square => 2.0 * x,
        }
    }

    pub fn conjugate(self, t: f64) -> f64 {
        match self {
            Generator1D::NegBinaryEntropy => softplus(t),
            Generator1D::Square => t * t / 4.0,
        }
    }

    pub fn conjugate_gradient(self, t: f64) -> f64 {
        match self {
            Generator1D::NegBinaryEntropy => 1.0 / (1.0 + (-t).exp()),
            Generator1D::Square => t / 2.0,
        }
    }

    fn check(self, x: f64) -> Result<()> {
        if self.in_domain(x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain(x))
        }
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// D_g(x, y) = g(y) − g(x) − g′(x)(y − x).
pub fn bregman_1d(g: Generator1D, x: f64, y: f64) -> Result<f64> {
    g.check(x)?;
    g.check(y)?;
    Ok(g.value(y) - g.value(x) - g.gradient(x) * (y - x))
}

fn conjugate_bregman(g: Generator1D, a: f64, b: f64) -> f64 {
    g.conjugate(b) - g.conjugate(a) - g.conjugate_gradient(a) * (b - a)
}

/// Both sides of the argument-flip identity D_g(x, y) = D_{g*}(g′(y), g′(x)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlipCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

pub fn dual_flip_check(g: Generator1D, x: f64, y: f64) -> Result<FlipCheck> {
    let lhs = bregman_1d(g, x, y)?;
    let rhs = conjugate_bregman(g, g.gradient(y), g.gradient(x));
    Ok(FlipCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// |D_g(x, y) − (∫ₓʸ g′ − g′(x)(y − x))| with the integral by adaptive quadrature.
pub fn integral_representation_check(g: Generator1D, x: f64, y: f64) -> Result<f64> {
    let direct = bregman_1d(g, x, y)?;
    let integral = numeric::integrate(|t| g.gradient(t), x, y, 1e-13);
    Ok((direct - (integral - g.gradient(x) * (y - x))).abs())
}

/// Dual coordinates of a prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualVector {
    kind: ScoreKind,
    coords: Vec<f64>,
}

impl DualVector {
    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

fn supported(kind: ScoreKind) -> Result<()> {
    match kind {
        ScoreKind::Brier | ScoreKind::Log => Ok(()),
        ScoreKind::Spherical => Err(Error::InvalidArgument(
            "the spherical score has no dual-space decomposition here".into(),
        )),
    }
}

fn check_interior(p: &SimplexVector) -> Result<()> {
    let m = p.min_entry();
    if m < LOG_BOUNDARY {
        return Err(Error::Boundary { value: m, threshold: LOG_BOUNDARY });
    }
    Ok(())
}

fn gauge(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

pub fn to_dual(kind: ScoreKind, p: &SimplexVector) -> Result<DualVector> {
    supported(kind)?;
    let coords = match kind {
        ScoreKind::Log => {
            check_interior(p)?;
            gauge(p.probs().iter().map(|x| x.ln()).collect())
        }
        _ => p.probs().to_vec(),
    };
    Ok(DualVector { kind, coords })
}

pub fn from_dual(dual: &DualVector) -> Result<SimplexVector> {
    match dual.kind {
        ScoreKind::Log => {
            let max = dual.coords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = dual.coords.iter().map(|c| (c - max).exp()).collect();
            SimplexVector::from_weights(&w)
        }
        _ => SimplexVector::new(dual.coords.clone()),
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Conjugate of the negative entropy evaluated at dual coordinates.
fn conjugate_value(kind: ScoreKind, coords: &[f64]) -> f64 {
    match kind {
        ScoreKind::Log => log_sum_exp(coords),
        _ => coords.iter().map(|x| x * x).sum(),
    }
}

fn mean_dual(kind: ScoreKind, members: &[SimplexVector]) -> Result<Vec<f64>> {
    let d = members[0].dim();
    let mut mean = vec![0.0; d];
    for p in members {
        if p.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.dim() });
        }
        for (m, c) in mean.iter_mut().zip(to_dual(kind, p)?.coords) {
            *m += c;
        }
    }
    let m = members.len() as f64;
    mean.iter_mut().for_each(|x| *x /= m);
    Ok(mean)
}

/// Empirical Bregman Information (1/m)Σ G*(S(p_k)) − G*((1/m)Σ S(p_k)).
pub fn bregman_information(kind: ScoreKind, members: &[SimplexVector]) -> Result<f64> {
    supported(kind)?;
    if members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    let mean = mean_dual(kind, members)?;
    let mut avg = 0.0;
    for p in members {
        avg += conjugate_value(kind, to_dual(kind, p)?.coords());
    }
    avg /= members.len() as f64;
    Ok(avg - conjugate_value(kind, &mean))
}

/// Bias, variance, noise and total of a decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub bias: f64,
    pub variance: f64,
    pub noise: f64,
    pub total: f64,
}

/// Decomposes the expected score of an ensemble (taken as the empirical
/// law of the prediction) against the exact target `q`.
pub fn bvd_classification(kind: ScoreKind, members: &[SimplexVector], q: &SimplexVector) -> Result<Decomposition> {
    supported(kind)?;
    if members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    if q.dim() != members[0].dim() {
        return Err(Error::DimensionMismatch { expected: members[0].dim(), got: q.dim() });
    }
    let mean = DualVector { kind, coords: mean_dual(kind, members)? };
    // The mean dual prediction mapped back to the simplex.
    let central = from_dual(&mean)?;
    let bias = scores::divergence(kind, &central, q)?;
    let variance = bregman_information(kind, members)?;
    let noise = scores::entropy(kind, q);
    let mut total = 0.0;
    for p in members {
        total += scores::expected_score(kind, p, q)?;
    }
    total /= members.len() as f64;
    Ok(Decomposition { bias, variance, noise, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BernoulliBvd {
    pub empirical_variance: f64,
    pub theoretical_variance: f64,
    pub bias: f64,
    pub noise: f64,
    pub empirical_mean: f64,
}

/// Simulates `trials` draws of the mean of `n` Bernoulli(p) observations.
pub fn bernoulli_bvd(p: f64, n: usize, trials: usize, seed: Seed) -> Result<BernoulliBvd> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!("p must lie in (0, 1), got {p}")));
    }
    if n == 0 || trials == 0 {
        return Err(Error::InvalidArgument("n and trials must be positive".into()));
    }
    let estimates: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed.stream(t);
            let hits = (0..n).filter(|_| rng.random::<f64>() < p).count();
            hits as f64 / n as f64
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / trials as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / trials as f64;
    Ok(BernoulliBvd {
        empirical_variance: var,
        theoretical_variance: p * (1.0 - p) / n as f64,
        bias: 0.0,
        noise: p * (1.0 - p),
        empirical_mean: mean,
    })
}
