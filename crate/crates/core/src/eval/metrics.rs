//! Feature-space metrics for generated motion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

pub const R_PRECISION_BATCH: usize = 32;
const EIGEN_FLOOR: f64 = -1e-6;

pub type Features = [Vec<f64>];

fn check_rows(name: &str, rows: &Features, min: usize) -> Result<usize> {
    if rows.len() < min {
        return Err(Error::Parameter(format!("{name} needs at least {min} feature rows, got {}", rows.len())));
    }
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f) {
        return Err(Error::Shape(format!("{name}: feature rows differ in width")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name}: non-finite feature value")));
    }
    Ok(f)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn mean_and_cov(rows: &Features) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let f = rows[0].len();
    let x = DMatrix::from_fn(n, f, |i, j| rows[i][j]);
    let mu = DVector::from_fn(f, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..f {
        let m = mu[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric eigenvalues with small negatives clamped to zero.
fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < EIGEN_FLOOR {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v} below {EIGEN_FLOOR}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// The trace of (Σa Σb)^½ is taken as the trace of (Σa^½ Σb Σa^½)^½, whose
/// argument is symmetric, so both square roots come from symmetric
/// eigendecompositions.
pub fn fid(a: &Features, b: &Features) -> Result<f64> {
    let f = check_rows("fid", a, 2)?;
    if check_rows("fid", b, 2)? != f {
        return Err(Error::Shape("fid: feature sets differ in width".into()));
    }
    if a.len() <= f || b.len() <= f {
        log::warn!("fid on {} and {} samples of width {f}: covariances are rank deficient", a.len(), b.len());
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let ea = clamped_eigen(&cov_a, "covariance")?;
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt)) * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &cov_b * &sqrt_a;
    let cross: f64 = clamped_eigen(&inner, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Motion-to-text retrieval accuracy at top 1, 2 and 3 within batches of 32.
pub fn r_precision(text: &Features, motion: &Features) -> Result<[f64; 3]> {
    if text.len() != motion.len() {
        return Err(Error::Shape("r_precision: text and motion counts differ".into()));
    }
    let f = check_rows("r_precision", text, R_PRECISION_BATCH)?;
    if check_rows("r_precision", motion, R_PRECISION_BATCH)? != f {
        return Err(Error::Shape("r_precision: feature widths differ".into()));
    }
    let batches = text.len() / R_PRECISION_BATCH;
    let mut hits = [0usize; 3];
    for b in 0..batches {
        let lo = b * R_PRECISION_BATCH;
        for i in lo..lo + R_PRECISION_BATCH {
            let own = distance(&motion[i], &text[i]);
            // Rank of the true text; ties count against it.
            let closer = (lo..lo + R_PRECISION_BATCH)
                .filter(|j| *j != i && distance(&motion[i], &text[*j]) <= own)
                .count();
            for (k, h) in hits.iter_mut().enumerate() {
                if closer <= k {
                    *h += 1;
                }
            }
        }
    }
    let n = (batches * R_PRECISION_BATCH) as f64;
    Ok(hits.map(|h| h as f64 / n))
}

/// Mean Euclidean distance over matched pairs.
pub fn mm_dist(text: &Features, motion: &Features) -> Result<f64> {
    if text.len() != motion.len() {
        return Err(Error::Shape("mm_dist: text and motion counts differ".into()));
    }
    check_rows("mm_dist", text, 1)?;
    check_rows("mm_dist", motion, 1)?;
    Ok(text.iter().zip(motion).map(|(t, m)| distance(t, m)).sum::<f64>() / text.len() as f64)
}

/// Mean distance over `n_pairs` random pairs.
///
/// With at least `2·n_pairs` rows the pairs are disjoint; otherwise each pair
/// is drawn independently, still without repeating an index inside a pair.
pub fn diversity(features: &Features, n_pairs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    check_rows("diversity", features, 2)?;
    if n_pairs == 0 {
        return Err(Error::Parameter("diversity needs at least one pair".into()));
    }
    let n = features.len();
    let mut total = 0.0;
    if n >= 2 * n_pairs {
        let idx = sample(rng, n, 2 * n_pairs).into_vec();
        for p in idx.chunks(2) {
            total += distance(&features[p[0]], &features[p[1]]);
        }
    } else {
        log::warn!("diversity: {n} rows cannot form {n_pairs} disjoint pairs; pairs may overlap");
        for _ in 0..n_pairs {
            let p = sample(rng, n, 2).into_vec();
            total += distance(&features[p[0]], &features[p[1]]);
        }
    }
    Ok(total / n_pairs as f64)
}

/// Mean within-group pairwise distance, averaged over groups.
///
/// Each group holds the features of several generations for one prompt.
pub fn multimodality(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Parameter("multimodality needs at least one prompt".into()));
    }
    let mut total = 0.0;
    for g in groups {
        check_rows("multimodality", g, 2)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                sum += distance(&g[i], &g[j]);
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean and 95% interval of one metric over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// 1.96 · sample std / √R.
    pub half_width: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(metric: &str, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter(format!("{metric}: no repetitions")));
        }
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            metric: metric.to_string(),
            mean,
            half_width: 1.96 * std / r.sqrt(),
            values,
        })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.half_width, self.mean + self.half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    /// One line per metric: name, mean, interval, repetitions.
    pub fn to_text(&self) -> String {
        let mut out = format!("config_hash {}\nseeds {:?}\n", self.config_hash, self.seeds);
        for m in &self.metrics {
            out.push_str(&format!(
                "{:<14} {:>12.6} ± {:.6} (R={})\n",
                m.metric,
                m.mean,
                m.half_width,
                m.values.len()
            ));
        }
        out
    }
}

/// Everything one repetition's metrics are computed from.
pub struct EvalSet<'a> {
    pub real_motion: &'a Features,
    pub generated_motion: &'a Features,
    pub text: &'a Features,
    /// Repeated generations per prompt; empty when not computed.
    pub multimodal_groups: &'a [Vec<Vec<f64>>],
    pub diversity_pairs: usize,
}

pub trait Metric: Send + Sync {
    fn compute(&self, set: &EvalSet, rng: &mut ChaCha8Rng) -> Result<f64>;
}

struct Fid;
impl Metric for Fid {
    fn compute(&self, set: &EvalSet, _rng: &mut ChaCha8Rng) -> Result<f64> {
        fid(set.real_motion, set.generated_motion)
    }
}

struct TopK(usize);
impl Metric for TopK {
    fn compute(&self, set: &EvalSet, _rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(r_precision(set.text, set.generated_motion)?[self.0 - 1])
    }
}

struct MmDist;
impl Metric for MmDist {
    fn compute(&self, set: &EvalSet, _rng: &mut ChaCha8Rng) -> Result<f64> {
        mm_dist(set.text, set.generated_motion)
    }
}

struct Diversity;
impl Metric for Diversity {
    fn compute(&self, set: &EvalSet, rng: &mut ChaCha8Rng) -> Result<f64> {
        diversity(set.generated_motion, set.diversity_pairs, rng)
    }
}

struct MModality;
impl Metric for MModality {
    fn compute(&self, set: &EvalSet, _rng: &mut ChaCha8Rng) -> Result<f64> {
        multimodality(set.multimodal_groups)
    }
}

type Boxed = Box<dyn Metric>;

pub fn metrics() -> Registry<dyn Metric> {
    Registry::new("metric")
        .register("fid", "Fréchet distance between real and generated motion features", |_| -> Result<Boxed> {
            Ok(Box::new(Fid))
        })
        .register("top1", "R-precision at 1", |_| -> Result<Boxed> { Ok(Box::new(TopK(1))) })
        .register("top2", "R-precision at 2", |_| -> Result<Boxed> { Ok(Box::new(TopK(2))) })
        .register("top3", "R-precision at 3", |_| -> Result<Boxed> { Ok(Box::new(TopK(3))) })
        .register("mm-dist", "mean text-motion feature distance", |_| -> Result<Boxed> { Ok(Box::new(MmDist)) })
        .register("diversity", "mean distance of random generated pairs", |_| -> Result<Boxed> {
            Ok(Box::new(Diversity))
        })
        .register("multimodality", "mean distance between generations for one prompt", |_| -> Result<Boxed> {
            Ok(Box::new(MModality))
        })
}

