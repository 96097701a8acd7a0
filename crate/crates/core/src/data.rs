//! Value types and dataset containers shared by every module.
//!
//! Class labels are 0-based in memory. Files use 1-based labels and the
//! conversion happens in [`crate::io`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accepted deviation of a probability row's mass from 1 at construction.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Rows whose mass deviates from 1 by more than this are renormalized.
const RENORMALIZE_ABOVE: f64 = 1e-15;

/// A probability vector on the simplex with at least two classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidSimplex(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidSimplex(format!("entry {bad} is negative or not finite")));
        }
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidSimplex(format!("mass {mass}")));
        }
        let probs = if (mass - 1.0).abs() > RENORMALIZE_ABOVE {
            probs.into_iter().map(|p| p / mass).collect()
        } else {
            probs
        };
        Ok(Self(probs))
    }

    /// Uniform distribution over `d` classes.
    pub fn uniform(d: usize) -> Result<Self> {
        Self::new(vec![1.0 / d as f64; d])
    }

    /// Point mass on class `index` (0-based).
    pub fn one_hot(d: usize, index: usize) -> Result<Self> {
        if index >= d {
            return Err(Error::ClassOutOfRange { index, classes: d });
        }
        let mut v = vec![0.0; d];
        v[index] = 1.0;
        Self::new(v)
    }

    /// Normalizes a nonnegative weight vector onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidSimplex(format!("weights sum to {total}")));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Largest probability.
    pub fn confidence(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Smallest entry; used by log-score boundary checks.
    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl<'de> Deserialize<'de> for SimplexVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        SimplexVector::new(v).map_err(serde::de::Error::custom)
    }
}

impl AsRef<[f64]> for SimplexVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Predictions paired with 0-based class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPredictionSet {
    predictions: Vec<SimplexVector>,
    labels: Vec<usize>,
    provenance: Option<String>,
}

impl LabeledPredictionSet {
    pub fn new(predictions: Vec<SimplexVector>, labels: Vec<usize>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Empty("prediction set"));
        }
        if predictions.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: predictions.len(),
                got: labels.len(),
            });
        }
        let d = predictions[0].dim();
        for p in &predictions {
            if p.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: p.dim() });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= d) {
            return Err(Error::ClassOutOfRange { index: bad, classes: d });
        }
        Ok(Self { predictions, labels, provenance: None })
    }

    /// Attaches a provenance id, used to check that pipeline splits are disjoint.
    pub fn with_provenance(mut self, id: impl Into<String>) -> Self {
        self.provenance = Some(id.into());
        self
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.predictions[0].dim()
    }

    pub fn predictions(&self) -> &[SimplexVector] {
        &self.predictions
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SimplexVector, usize)> {
        self.predictions.iter().zip(self.labels.iter().copied())
    }

    /// Empirical label frequencies.
    pub fn label_frequencies(&self) -> Vec<f64> {
        let mut freq = vec![0.0; self.classes()];
        for &y in &self.labels {
            freq[y] += 1.0;
        }
        let n = self.len() as f64;
        freq.iter_mut().for_each(|f| *f /= n);
        freq
    }

    /// Applies `map` to every prediction, keeping labels and provenance.
    pub fn map_predictions<F>(&self, map: F) -> Result<Self>
    where
        F: Fn(&SimplexVector) -> Result<SimplexVector>,
    {
        let predictions = self.predictions.iter().map(map).collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(predictions, self.labels.clone())?;
        out.provenance = self.provenance.clone();
        Ok(out)
    }
}

/// A finite collection of points in R^q.
///
/// When `weights` is set the set describes an exact discrete distribution
/// over its points instead of an i.i.d. sample; embedding statistics then
/// use the weighted population sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    id: Option<String>,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("sample set"));
        }
        let q = points[0].len();
        if q == 0 {
            return Err(Error::InvalidArgument("points must have at least one coordinate".into()));
        }
        for p in &points {
            if p.len() != q {
                return Err(Error::DimensionMismatch { expected: q, got: p.len() });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument("sample entries must be finite".into()));
            }
        }
        Ok(Self { points, weights: None, id: None })
    }

    /// A weighted set of atoms describing an exact discrete distribution.
    pub fn weighted(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let mut set = Self::new(points)?;
        if weights.len() != set.points.len() {
            return Err(Error::DimensionMismatch {
                expected: set.points.len(),
                got: weights.len(),
            });
        }
        let pmf = SimplexVector::from_weights(&weights)
            .or_else(|_| {
                // a single atom is a valid point mass even though the simplex needs d >= 2
                if weights.len() == 1 && weights[0] > 0.0 {
                    Ok(SimplexVector(vec![1.0]))
                } else {
                    Err(Error::InvalidArgument("weights must be nonnegative with positive sum".into()))
                }
            })?;
        set.weights = Some(pmf.into_inner());
        Ok(set)
    }

    /// Scalar samples as one-dimensional points.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn id(&self) -> Option<&str> {
        self.id.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Restricts every point to the given coordinates, keeping weights.
    pub fn select(&self, coords: &[usize]) -> Result<Self> {
        if let Some(&bad) = coords.iter().find(|&&c| c >= self.dim()) {
            return Err(Error::InvalidArgument(format!("coordinate {bad} out of range")));
        }
        if coords.is_empty() {
            return Err(Error::InvalidArgument("empty coordinate selection".into()));
        }
        let points = self
            .points
            .iter()
            .map(|p| coords.iter().map(|&c| p[c]).collect())
            .collect();
        Ok(Self { points, weights: self.weights.clone(), id: self.id.clone() })
    }

    /// Multiset union of unweighted sets.
    pub fn pooled<'a, I>(sets: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a SampleSet>,
    {
        let mut points = Vec::new();
        for s in sets {
            if s.is_weighted() {
                return Err(Error::InvalidArgument("cannot pool weighted sample sets".into()));
            }
            points.extend(s.points.iter().cloned());
        }
        Self::new(points)
    }
}

/// An m x R grid of sample sets: member index by replicate index.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleGrid {
    members: Vec<Vec<SampleSet>>,
}

impl EnsembleGrid {
    pub fn new(members: Vec<Vec<SampleSet>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("ensemble members"));
        }
        let r = members[0].len();
        if r == 0 {
            return Err(Error::Empty("ensemble replicates"));
        }
        for (k, row) in members.iter().enumerate() {
            if row.len() != r {
                return Err(Error::RaggedGrid(format!(
                    "member {} has {} replicates, member 1 has {}",
                    k + 1,
                    row.len(),
                    r
                )));
            }
        }
        let q = members[0][0].dim();
        for set in members.iter().flatten() {
            if set.dim() != q {
                return Err(Error::DimensionMismatch { expected: q, got: set.dim() });
            }
        }
        Ok(Self { members })
    }

    /// A single-replicate grid from one sample set per member.
    pub fn from_members(sets: Vec<SampleSet>) -> Result<Self> {
        Self::new(sets.into_iter().map(|s| vec![s]).collect())
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    pub fn replicates(&self) -> usize {
        self.members[0].len()
    }

    pub fn dim(&self) -> usize {
        self.members[0][0].dim()
    }

    pub fn get(&self, member: usize, replicate: usize) -> &SampleSet {
        &self.members[member][replicate]
    }

    pub fn rows(&self) -> &[Vec<SampleSet>] {
        &self.members
    }
}

/// Root seed of every stochastic operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent stream number `index` under this seed.
    pub fn stream(self, index: u64) -> ChaCha8Rng {
        let mut rng = self.rng();
        rng.set_stream(index);
        rng
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}
