//! Proper scores for classification: Brier, log and spherical, with their
//! entropy and divergence functions.
//!
//! | kind      | S(P, y)            | H(Q)          | D(P, Q)                  |
//! |-----------|--------------------|---------------|--------------------------|
//! | Brier     | Σ P_i² − 2 P_y     | −Σ Q_i²       | ‖P − Q‖²                 |
//! | Log       | −ln P_y            | −Σ Q_i ln Q_i | Σ Q_i ln(Q_i / P_i)      |
//! | Spherical | −P_y / ‖P‖         | −‖Q‖          | (1 − cos(P, Q)) ‖Q‖      |
//!
//! H(Q) is the expected score of Q under itself, so the expected score of a
//! prediction P against a target Q is D(P, Q) + H(Q).
//!
//! Logarithms are natural (nats). Diverging log scores and KL divergences
//! are returned as `f64::INFINITY`; callers that need finite values smooth
//! their inputs explicitly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledPredictionSet, SimplexVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Brier,
    Log,
    Spherical,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Brier, ScoreKind::Log, ScoreKind::Spherical];
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Brier => "brier",
            ScoreKind::Log => "log",
            ScoreKind::Spherical => "spherical",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "brier" => Ok(ScoreKind::Brier),
            "log" => Ok(ScoreKind::Log),
            "spherical" => Ok(ScoreKind::Spherical),
            other => Err(Error::InvalidArgument(format!("unknown score kind '{other}'"))),
        }
    }
}

fn sqnorm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum()
}

fn check_dims(p: &SimplexVector, q: &SimplexVector) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch { expected: p.dim(), got: q.dim() });
    }
    Ok(())
}

/// Score of prediction `p` for the 0-based outcome `y`.
pub fn score(kind: ScoreKind, p: &SimplexVector, y: usize) -> Result<f64> {
    let probs = p.probs();
    if y >= probs.len() {
        return Err(Error::ClassOutOfRange { index: y, classes: probs.len() });
    }
    Ok(match kind {
        ScoreKind::Brier => sqnorm(probs) - 2.0 * probs[y],
        ScoreKind::Log => {
            if probs[y] == 0.0 {
                f64::INFINITY
            } else {
                -probs[y].ln()
            }
        }
        ScoreKind::Spherical => -probs[y] / sqnorm(probs).sqrt(),
    })
}

/// Entropy function: Shannon entropy, −Σp² and −‖p‖ for the three kinds.
/// Concave in p; equals the expected score E_{Y~p}[S(p, Y)].
pub fn entropy(kind: ScoreKind, p: &SimplexVector) -> f64 {
    let probs = p.probs();
    match kind {
        ScoreKind::Brier => -sqnorm(probs),
        ScoreKind::Log => -probs.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>(),
        ScoreKind::Spherical => -sqnorm(probs).sqrt(),
    }
}

/// Divergence D(p, q) between prediction `p` and target `q`.
pub fn divergence(kind: ScoreKind, p: &SimplexVector, q: &SimplexVector) -> Result<f64> {
    check_dims(p, q)?;
    let (pp, qq) = (p.probs(), q.probs());
    Ok(match kind {
        ScoreKind::Brier => pp.iter().zip(qq).map(|(a, b)| (a - b).powi(2)).sum(),
        ScoreKind::Log => {
            let mut total = 0.0;
            for (&pi, &qi) in pp.iter().zip(qq) {
                if qi == 0.0 {
                    continue;
                }
                if pi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += qi * (qi / pi).ln();
            }
            total.max(0.0)
        }
        ScoreKind::Spherical => {
            let np = sqnorm(pp).sqrt();
            let nq = sqnorm(qq).sqrt();
            let cos = (pp.iter().zip(qq).map(|(a, b)| a * b).sum::<f64>() / (np * nq)).clamp(-1.0, 1.0);
            (1.0 - cos) * nq
        }
    })
}

/// Expected score E_{Y~q}[S(p, Y)], evaluated as D(p, q) + H(q).
pub fn expected_score(kind: ScoreKind, p: &SimplexVector, q: &SimplexVector) -> Result<f64> {
    Ok(divergence(kind, p, q)? + entropy(kind, q))
}

/// Mean score over a labeled dataset.
pub fn empirical_risk(kind: ScoreKind, data: &LabeledPredictionSet) -> Result<f64> {
    Ok(per_instance_scores(kind, data)?.iter().sum::<f64>() / data.len() as f64)
}

pub fn per_instance_scores(kind: ScoreKind, data: &LabeledPredictionSet) -> Result<Vec<f64>> {
    data.iter().map(|(p, y)| score(kind, p, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sv(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    fn brute_expected(kind: ScoreKind, p: &SimplexVector, q: &SimplexVector) -> f64 {
        q.probs()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(y, &w)| w * score(kind, p, y).unwrap())
            .sum()
    }

    #[test]
    fn brier_values() {
        assert_eq!(score(ScoreKind::Brier, &sv(&[0.0, 1.0, 0.0]), 1).unwrap(), -1.0);
        let s = score(ScoreKind::Brier, &sv(&[0.8, 0.2]), 0).unwrap();
        assert!((s + 0.92).abs() < 1e-15);
    }

    #[test]
    fn log_values() {
        let u = SimplexVector::uniform(5).unwrap();
        for y in 0..5 {
            assert!((score(ScoreKind::Log, &u, y).unwrap() - 5f64.ln()).abs() < 1e-15);
        }
        assert_eq!(score(ScoreKind::Log, &sv(&[1.0, 0.0]), 1).unwrap(), f64::INFINITY);
        assert!(score(ScoreKind::Log, &u, 5).is_err());
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(ScoreKind::Brier, &sv(&[1.0, 0.0])), -1.0);
        let u4 = SimplexVector::uniform(4).unwrap();
        assert!((entropy(ScoreKind::Log, &u4) - 4f64.ln()).abs() < 1e-15);
        for d in 2..7 {
            let u = SimplexVector::uniform(d).unwrap();
            assert!((entropy(ScoreKind::Spherical, &u) + 1.0 / (d as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn divergence_values() {
        let p = sv(&[0.8, 0.2]);
        for kind in ScoreKind::ALL {
            assert!(divergence(kind, &p, &p).unwrap().abs() < 1e-15);
        }
        assert_eq!(divergence(ScoreKind::Brier, &sv(&[1.0, 0.0]), &sv(&[0.0, 1.0])).unwrap(), 2.0);
        // KL(q || p) summed term by term.
        let q = sv(&[0.5, 0.5]);
        let kl = 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln();
        assert!((divergence(ScoreKind::Log, &p, &q).unwrap() - kl).abs() < 1e-15);
        assert_eq!(divergence(ScoreKind::Log, &sv(&[1.0, 0.0]), &q).unwrap(), f64::INFINITY);
        // zero target mass contributes nothing
        let d = divergence(ScoreKind::Log, &q, &sv(&[1.0, 0.0])).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn expected_score_matches_brute_force() {
        let p = sv(&[0.8, 0.2]);
        let q = sv(&[0.5, 0.5]);
        for kind in ScoreKind::ALL {
            let e = expected_score(kind, &p, &q).unwrap();
            assert!((e - brute_expected(kind, &p, &q)).abs() < 1e-12, "{kind}");
            assert!((expected_score(kind, &q, &q).unwrap() - entropy(kind, &q)).abs() < 1e-15);
        }
    }

    #[test]
    fn empirical_risk_basics() {
        let one = LabeledPredictionSet::new(vec![sv(&[0.0, 1.0])], vec![1]).unwrap();
        assert_eq!(empirical_risk(ScoreKind::Brier, &one).unwrap(), -1.0);
        let data = LabeledPredictionSet::new(vec![sv(&[0.7, 0.3]), sv(&[0.1, 0.9])], vec![0, 0]).unwrap();
        let doubled = LabeledPredictionSet::new(
            [data.predictions(), data.predictions()].concat(),
            [data.labels(), data.labels()].concat(),
        )
        .unwrap();
        for kind in ScoreKind::ALL {
            let a = empirical_risk(kind, &data).unwrap();
            let b = empirical_risk(kind, &doubled).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn interior(d: usize) -> impl Strategy<Value = SimplexVector> {
        prop::collection::vec(1e-3f64..1.0, d).prop_map(|w| SimplexVector::from_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn brute_force_expected_score((p, q) in (2usize..6).prop_flat_map(|d| (interior(d), interior(d)))) {
            for kind in ScoreKind::ALL {
                let e = expected_score(kind, &p, &q).unwrap();
                prop_assert!((e - brute_expected(kind, &p, &q)).abs() < 1e-12);
            }
        }

        #[test]
        fn negative_entropy_convex(
            (p, q) in (2usize..6).prop_flat_map(|d| (interior(d), interior(d))),
            lambda in 0.0f64..1.0,
        ) {
            let mix: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let mix = SimplexVector::new(mix).unwrap();
            for kind in ScoreKind::ALL {
                let lhs = -entropy(kind, &mix);
                let rhs = lambda * -entropy(kind, &p) + (1.0 - lambda) * -entropy(kind, &q);
                prop_assert!(lhs <= rhs + 1e-12);
            }
        }
    }
}
