//! Exact verification of the information-theoretic inequalities behind the
//! decoupling objective, by enumeration over small discrete alphabets.
//!
//! Natural logarithms throughout, with 0·ln 0 taken as 0.

use crate::{Error, Result};
use rand::Rng;
use serde::Serialize;

pub const MAX_ALPHABET: usize = 16;
pub const SLACK_TOLERANCE: f64 = 1e-9;
const SUM_TOLERANCE: f64 = 1e-12;

/// A finite joint probability table p(u, v), rows indexed by u.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(rows: usize, cols: usize, p: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows > MAX_ALPHABET || cols > MAX_ALPHABET {
            return Err(Error::Parameter(format!(
                "joint table must be between 1x1 and {MAX_ALPHABET}x{MAX_ALPHABET}, got {rows}x{cols}"
            )));
        }
        if p.len() != rows * cols {
            return Err(Error::Shape(format!("{rows}x{cols} table needs {} entries, got {}", rows * cols, p.len())));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("joint entries must be finite and non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Parameter(format!("joint table sums to {total}, not 1")));
        }
        Ok(Self { rows, cols, p })
    }

    /// Normalize arbitrary non-negative weights into a joint table.
    pub fn from_weights(rows: usize, cols: usize, w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter("weights must have a positive sum".into()));
        }
        Self::new(rows, cols, w.into_iter().map(|v| v / total).collect())
    }

    /// A table with independent uniform(0, 1) weights, normalized.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::from_weights(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.p[u * self.cols + v]
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        (0..self.rows).map(|u| (0..self.cols).map(|v| self.get(u, v)).sum()).collect()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        (0..self.cols).map(|v| (0..self.rows).map(|u| self.get(u, v)).sum()).collect()
    }
}

fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|v| xlnx(*v)).sum::<f64>()
}

/// Plug-in mutual information between the row and column variables.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let pu = joint.row_marginal();
    let pv = joint.col_marginal();
    let mut mi = 0.0;
    for (u, pu) in pu.iter().enumerate() {
        for (v, pv) in pv.iter().enumerate() {
            let p = joint.get(u, v);
            if p > 0.0 {
                mi += p * (p / (pu * pv)).ln();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    /// Set when the right-hand side is infinite.
    pub infinite: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + SLACK_TOLERANCE,
            infinite: rhs.is_infinite(),
        }
    }

    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// I(S;A) ≤ ln|A| − E_s H(A | S = s), for a joint with rows S and columns A.
pub fn verify_entropy_bound(joint_sa: &DiscreteJoint) -> BoundCheck {
    let ps = joint_sa.row_marginal();
    let conditional_entropy: f64 = ps
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(s, p)| {
            let cond: Vec<f64> = (0..joint_sa.cols()).map(|a| joint_sa.get(s, a) / p).collect();
            p * entropy(&cond)
        })
        .sum();
    BoundCheck::new(mutual_information(joint_sa), (joint_sa.cols() as f64).ln() - conditional_entropy)
}

/// Conditionals p(S | x) for every x together with the marginal p(x).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub p_x: Vec<f64>,
    pub conditionals: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(p_x: Vec<f64>, conditionals: Vec<Vec<f64>>) -> Result<Self> {
        let valid = |p: &[f64]| {
            p.iter().all(|v| v.is_finite() && *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE
        };
        if p_x.is_empty() || p_x.len() != conditionals.len() || p_x.len() > MAX_ALPHABET {
            return Err(Error::Shape("need one conditional per x, between 1 and 16 of them".into()));
        }
        let width = conditionals[0].len();
        if width == 0 || width > MAX_ALPHABET || conditionals.iter().any(|c| c.len() != width) {
            return Err(Error::Shape("conditionals must share one alphabet of size 1..=16".into()));
        }
        if !valid(&p_x) || !conditionals.iter().all(|c| valid(c)) {
            return Err(Error::Parameter("p(x) and every p(S|x) must be probability vectors".into()));
        }
        Ok(Self { p_x, conditionals })
    }

    /// Random ensemble with |X| and |S| drawn from 1..=max_size.
    pub fn random(max_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let nx = rng.random_range(1..=max_size);
        let ns = rng.random_range(1..=max_size);
        let mut simplex = |n: usize| {
            let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect::<Vec<_>>()
        };
        let p_x = simplex(nx);
        let conditionals = (0..nx).map(|_| simplex(ns)).collect();
        Self::new(p_x, conditionals)
    }

    pub fn joint(&self) -> Result<DiscreteJoint> {
        let cols = self.conditionals[0].len();
        let p = self
            .p_x
            .iter()
            .zip(&self.conditionals)
            .flat_map(|(px, c)| c.iter().map(move |v| px * v))
            .collect();
        DiscreteJoint::from_weights(self.p_x.len(), cols, p)
    }
}

/// KL(p ‖ q); infinite when q vanishes where p does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| if *q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
        .sum()
}

/// I(X;S) ≤ E_x E_x' KL(p(S|x) ‖ p(S|x')).
pub fn verify_kl_bound(ensemble: &Ensemble) -> Result<BoundCheck> {
    let lhs = mutual_information(&ensemble.joint()?);
    let mut rhs = 0.0;
    for (px, c) in ensemble.p_x.iter().zip(&ensemble.conditionals) {
        for (py, d) in ensemble.p_x.iter().zip(&ensemble.conditionals) {
            if *px > 0.0 && *py > 0.0 {
                rhs += px * py * kl_divergence(c, d);
            }
        }
    }
    Ok(BoundCheck::new(lhs, rhs))
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    pub infinite: usize,
    pub worst_slack: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn summarize(name: &'static str, checks: &[BoundCheck]) -> SuiteReport {
    SuiteReport {
        name,
        trials: checks.len(),
        violations: checks.iter().filter(|c| !c.holds).count(),
        infinite: checks.iter().filter(|c| c.infinite).count(),
        worst_slack: checks.iter().map(BoundCheck::slack).fold(f64::INFINITY, f64::min),
    }
}

/// Entropy bound over `trials` random (S, A) tables with alphabets up to 8.
pub fn entropy_bound_suite(trials: usize, rng: &mut impl Rng) -> Result<SuiteReport> {
    let checks = (0..trials)
        .map(|_| {
            let (s, a) = (rng.random_range(1..=8), rng.random_range(1..=8));
            Ok(verify_entropy_bound(&DiscreteJoint::random(s, a, rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("entropy-bound", &checks))
}

/// KL bound over `trials` random ensembles with |X|, |S| up to 8.
pub fn kl_bound_suite(trials: usize, rng: &mut impl Rng) -> Result<SuiteReport> {
    let checks = (0..trials)
        .map(|_| verify_kl_bound(&Ensemble::random(8, rng)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("kl-bound", &checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn rejects_invalid_tables() {
        assert!(DiscreteJoint::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(DiscreteJoint::new(17, 1, vec![1.0 / 17.0; 17]).is_err());
        assert!(Ensemble::new(vec![1.0], vec![vec![0.5, 0.5], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn infinite_kl_is_flagged_and_holds() {
        let e = Ensemble::new(vec![0.5, 0.5], vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let c = verify_kl_bound(&e).unwrap();
        assert!(c.infinite && c.holds);
    }

    #[test]
    fn suites_are_deterministic() {
        let a = entropy_bound_suite(20, &mut stream_rng(3, 0)).unwrap();
        let b = entropy_bound_suite(20, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(a.worst_slack.to_bits(), b.worst_slack.to_bits());
    }
}
