//! Synthetic data with exact ground truth: calibrated and temperature-
//! miscalibrated classifiers, and finite-support distributions whose kernel
//! quantities can be enumerated exactly.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::calibration::temperature_scale;
use crate::data::{LabeledPredictionSet, SampleSet, Seed, SimplexVector};
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec};

/// Largest support of a single enumerable distribution.
pub const MAX_ATOMS: usize = 8;
/// Largest joint support of a product world.
pub const MAX_JOINT_ATOMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum Scenario {
    PerfectlyCalibrated { alpha: f64 },
    TemperatureMiscalibrated { alpha: f64, ts_alpha: f64 },
}

/// Predictions and labels together with the exact conditional label
/// distribution given each prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedBundle {
    pub data: LabeledPredictionSet,
    pub conditionals: Vec<SimplexVector>,
    pub scenario: Scenario,
    pub seed: Seed,
}

impl CalibratedBundle {
    /// Exact P(Y | f(X) = p) for any prediction p of this scenario.
    pub fn conditional(&self, p: &SimplexVector) -> Result<SimplexVector> {
        match self.scenario {
            Scenario::PerfectlyCalibrated { .. } => Ok(p.clone()),
            Scenario::TemperatureMiscalibrated { ts_alpha, .. } => temperature_scale(p, 1.0 / ts_alpha),
        }
    }

    /// Monte-Carlo squared canonical CE: mean ‖f_i − c(f_i)‖².
    pub fn squared_ce(&self) -> f64 {
        let total: f64 = self
            .data
            .predictions()
            .iter()
            .zip(&self.conditionals)
            .map(|(f, c)| f.probs().iter().zip(c.probs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        total / self.data.len() as f64
    }
}

fn check_shape(d: usize, n: usize, alpha: f64) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {d}")));
    }
    if n == 0 {
        return Err(Error::Empty("synthetic sample"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    Ok(())
}

fn dirichlet<R: Rng>(rng: &mut R, gamma: &Gamma<f64>, d: usize) -> SimplexVector {
    loop {
        let w: Vec<f64> = (0..d).map(|_| gamma.sample(rng)).collect();
        // tiny concentrations can underflow every draw; redraw then
        if let Ok(p) = SimplexVector::from_weights(&w) {
            return p;
        }
    }
}

fn categorical<R: Rng>(rng: &mut R, p: &SimplexVector) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.probs().iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative mass: take the last class with mass
    p.probs().iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

fn draw(d: usize, n: usize, alpha: f64, seed: Seed) -> Result<(Vec<SimplexVector>, Vec<usize>)> {
    check_shape(d, n, alpha)?;
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seed.rng();
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p = dirichlet(&mut rng, &gamma, d);
        labels.push(categorical(&mut rng, &p));
        probs.push(p);
    }
    Ok((probs, labels))
}

/// P ~ Dir(α·1), Y ~ Cat(P), prediction f = P.
pub fn gen_calibrated(d: usize, n: usize, alpha: f64, seed: Seed) -> Result<CalibratedBundle> {
    let (probs, labels) = draw(d, n, alpha, seed)?;
    Ok(CalibratedBundle {
        data: LabeledPredictionSet::new(probs.clone(), labels)?,
        conditionals: probs,
        scenario: Scenario::PerfectlyCalibrated { alpha },
        seed,
    })
}

/// Like [`gen_calibrated`] but the prediction is TS_{ts_alpha}(P); the
/// exact conditional is then TS_{1/ts_alpha}(f) = P.
pub fn gen_miscalibrated(d: usize, n: usize, alpha: f64, ts_alpha: f64, seed: Seed) -> Result<CalibratedBundle> {
    if !(ts_alpha > 0.0) || !ts_alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("ts_alpha must be positive, got {ts_alpha}")));
    }
    let (probs, labels) = draw(d, n, alpha, seed)?;
    let preds = probs.iter().map(|p| temperature_scale(p, ts_alpha)).collect::<Result<Vec<_>>>()?;
    Ok(CalibratedBundle {
        data: LabeledPredictionSet::new(preds, labels)?,
        conditionals: probs,
        scenario: Scenario::TemperatureMiscalibrated { alpha, ts_alpha },
        seed,
    })
}

/// All points of the simplex lattice {k / steps}^d, d ≤ 3.
pub fn simplex_lattice(d: usize, steps: usize) -> Result<Vec<SimplexVector>> {
    if !(2..=3).contains(&d) {
        return Err(Error::InvalidArgument(format!("lattice enumeration supports 2 or 3 classes, got {d}")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("lattice needs at least one step".into()));
    }
    let s = steps as f64;
    let mut out = Vec::new();
    for i in 0..=steps {
        if d == 2 {
            out.push(SimplexVector::new(vec![i as f64 / s, (steps - i) as f64 / s])?);
            continue;
        }
        for j in 0..=steps - i {
            let k = steps - i - j;
            out.push(SimplexVector::new(vec![i as f64 / s, j as f64 / s, k as f64 / s])?);
        }
    }
    Ok(out)
}

/// Exact squared CE E‖f − TS_{1/ts_alpha}(f)‖² when the prediction law is
/// uniform on the simplex lattice with `steps` subdivisions.
pub fn lattice_squared_ce(d: usize, steps: usize, ts_alpha: f64) -> Result<f64> {
    let pts = simplex_lattice(d, steps)?;
    let mut total = 0.0;
    for f in &pts {
        let c = temperature_scale(f, 1.0 / ts_alpha)?;
        total += f.probs().iter().zip(c.probs()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / pts.len() as f64)
}

fn check_pmf(atoms: usize, pmf: &[f64], what: &str) -> Result<()> {
    if pmf.len() != atoms {
        return Err(Error::InvalidArgument(format!("{what} has {} masses for {atoms} atoms", pmf.len())));
    }
    if pmf.iter().any(|&w| !(w >= 0.0)) || (pmf.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector")));
    }
    Ok(())
}

/// Prediction members and a target, all given as exact pmfs over a shared
/// finite support.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePmfWorld {
    atoms: Vec<Vec<f64>>,
    members: Vec<Vec<f64>>,
    target: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    /// Expected kernel score of each member against the target.
    KernelScore,
    /// ‖μ_member − μ_target‖² per member.
    Mmd2,
    /// Cosine similarity of each member with the target.
    Cosine,
    /// bias, variance, noise, total of the members' decomposition.
    BvdFields,
}

impl DiscretePmfWorld {
    pub fn new(atoms: Vec<Vec<f64>>, members: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() || members.is_empty() {
            return Err(Error::Empty("discrete world"));
        }
        if atoms.len() > MAX_ATOMS {
            return Err(Error::BudgetExceeded { needed: atoms.len(), max: MAX_ATOMS });
        }
        for m in &members {
            check_pmf(atoms.len(), m, "member pmf")?;
        }
        check_pmf(atoms.len(), &target, "target pmf")?;
        Ok(Self { atoms, members, target })
    }

    /// Atoms 0, 1, … encoded as scalars.
    pub fn on_indices(members: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let atoms = (0..target.len()).map(|i| vec![i as f64]).collect();
        Self::new(atoms, members, target)
    }

    pub fn member_set(&self, k: usize) -> Result<SampleSet> {
        SampleSet::weighted(self.atoms.clone(), self.members[k].clone())
    }

    pub fn target_set(&self) -> Result<SampleSet> {
        SampleSet::weighted(self.atoms.clone(), self.target.clone())
    }

    pub fn members(&self) -> usize {
        self.members.len()
    }

    /// Σ_a Σ_b p_a q_b k(atom_a, atom_b).
    fn inner(&self, k: &KernelSpec, p: &[f64], q: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (a, pa) in self.atoms.iter().zip(p) {
            for (b, qb) in self.atoms.iter().zip(q) {
                total += pa * qb * kernels::eval(k, a, b)?;
            }
        }
        Ok(total)
    }

    /// Exact population values by double sums over atoms. Vector-valued
    /// quantities list one entry per member; `BvdFields` returns
    /// [bias, variance, noise, total].
    pub fn enumerate_expected(&self, k: &KernelSpec, quantity: Quantity) -> Result<Vec<f64>> {
        let q = &self.target;
        let qq = self.inner(k, q, q)?;
        match quantity {
            Quantity::KernelScore => self
                .members
                .iter()
                .map(|p| Ok(self.inner(k, p, p)? - 2.0 * self.inner(k, p, q)?))
                .collect(),
            Quantity::Mmd2 => self
                .members
                .iter()
                .map(|p| Ok(self.inner(k, p, p)? + qq - 2.0 * self.inner(k, p, q)?))
                .collect(),
            Quantity::Cosine => self
                .members
                .iter()
                .map(|p| Ok(self.inner(k, p, q)? / (self.inner(k, p, p)? * qq).sqrt()))
                .collect(),
            Quantity::BvdFields => {
                let m = self.members.len() as f64;
                let mean: Vec<f64> = (0..self.atoms.len())
                    .map(|a| self.members.iter().map(|p| p[a]).sum::<f64>() / m)
                    .collect();
                // the mean embedding is the embedding of the mean pmf
                let mm = self.inner(k, &mean, &mean)?;
                let bias = mm - 2.0 * self.inner(k, &mean, q)? + qq;
                let mut variance = 0.0;
                let mut total = 0.0;
                for p in &self.members {
                    let diff: Vec<f64> = p.iter().zip(&mean).map(|(a, b)| a - b).collect();
                    variance += self.inner(k, &diff, &diff)?;
                    total += self.inner(k, p, p)? - 2.0 * self.inner(k, p, q)?;
                }
                Ok(vec![bias, variance / m, -qq, total / m])
            }
        }
    }
}

/// One independent block of a product world: a finite support with pmfs
/// for the generated (X) and reference (Y) distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub atoms: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// X and Y whose coordinates split into independent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductWorld {
    blocks: Vec<Block>,
}

impl ProductWorld {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Empty("product world blocks"));
        }
        let mut joint = 1usize;
        for b in &blocks {
            if b.atoms.is_empty() || b.atoms.len() > MAX_ATOMS {
                return Err(Error::BudgetExceeded { needed: b.atoms.len(), max: MAX_ATOMS });
            }
            check_pmf(b.atoms.len(), &b.x, "block X pmf")?;
            check_pmf(b.atoms.len(), &b.y, "block Y pmf")?;
            joint = joint.saturating_mul(b.atoms.len());
        }
        if joint > MAX_JOINT_ATOMS {
            return Err(Error::BudgetExceeded { needed: joint, max: MAX_JOINT_ATOMS });
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Coordinate indices of each block in the joint vector.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.blocks
            .iter()
            .map(|b| {
                let w = b.atoms[0].len();
                let idx = (start..start + w).collect();
                start += w;
                idx
            })
            .collect()
    }

    /// Exact joint distributions of X and Y as weighted sample sets over
    /// the Cartesian product of the block supports.
    pub fn joint_sets(&self) -> Result<(SampleSet, SampleSet)> {
        let mut points: Vec<Vec<f64>> = vec![Vec::new()];
        let mut wx = vec![1.0];
        let mut wy = vec![1.0];
        for b in &self.blocks {
            let mut np = Vec::new();
            let (mut nx, mut ny) = (Vec::new(), Vec::new());
            for (i, p) in points.iter().enumerate() {
                for (a, atom) in b.atoms.iter().enumerate() {
                    np.push([p.as_slice(), atom.as_slice()].concat());
                    nx.push(wx[i] * b.x[a]);
                    ny.push(wy[i] * b.y[a]);
                }
            }
            points = np;
            wx = nx;
            wy = ny;
        }
        Ok((SampleSet::weighted(points.clone(), wx)?, SampleSet::weighted(points, wy)?))
    }

    /// Exact EKS under the tensor kernel over the full joint support and
    /// per block: (full, factors).
    pub fn enumerate_eks(&self, base: &KernelSpec) -> Result<(f64, Vec<f64>)> {
        let (x, y) = self.joint_sets()?;
        let full = eks_by_enumeration(&KernelSpec::tensor(base.clone()), &x, &y)?;
        let factors = self
            .blocks
            .iter()
            .map(|b| {
                let bx = SampleSet::weighted(b.atoms.clone(), b.x.clone())?;
                let by = SampleSet::weighted(b.atoms.clone(), b.y.clone())?;
                eks_by_enumeration(&KernelSpec::tensor(base.clone()), &bx, &by)
            })
            .collect::<Result<_>>()?;
        Ok((full, factors))
    }
}

fn eks_by_enumeration(k: &KernelSpec, x: &SampleSet, y: &SampleSet) -> Result<f64> {
    let wx = x.weights().expect("weighted");
    let wy = y.weights().expect("weighted");
    let mut xx = 0.0;
    let mut xy = 0.0;
    for (a, pa) in x.points().iter().zip(wx) {
        for (b, pb) in x.points().iter().zip(wx) {
            xx += pa * pb * kernels::eval(k, a, b)?;
        }
        for (b, qb) in y.points().iter().zip(wy) {
            xy += pa * qb * kernels::eval(k, a, b)?;
        }
    }
    Ok(-xy / xx.sqrt())
}
