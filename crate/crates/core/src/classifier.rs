//! Attribute classifiers: the proxy network h(A|S) used inside decoupling
//! training, the same topology applied to raw motion for evaluation, and a
//! strictly linear probe for post-hoc decoupling diagnostics.

use candle_core::{DType, Tensor, D};
use candle_nn::ops::{log_softmax, softmax};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{device, scalar, Adam, Conv1d, Linear, ParamStore, ResBlock};

/// Convolutional trunk + temporal mean pooling + linear head.
///
/// The trunk mirrors the VQVAE encoder: an input convolution, `n_down`
/// stride-2 stages each followed by a residual block, and an output
/// convolution. Inputs are `(batch, time, channels)`.
#[derive(Clone)]
pub struct ConvClassifier {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, ResBlock)>,
    conv_out: Conv1d,
    pub head: Linear,
    in_channels: usize,
    n_classes: usize,
}

impl ConvClassifier {
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        width: usize,
        n_down: usize,
        n_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv_in = Conv1d::new(ps, &format!("{prefix}.conv_in"), in_channels, width, 3, 1, 1, rng)?;
        let mut stages = Vec::with_capacity(n_down);
        for i in 0..n_down {
            stages.push((
                Conv1d::new(ps, &format!("{prefix}.down{i}"), width, width, 4, 2, 1, rng)?,
                ResBlock::new(ps, &format!("{prefix}.res{i}"), width, rng)?,
            ));
        }
        if n_down == 0 {
            stages.push((
                Conv1d::new(ps, &format!("{prefix}.mix"), width, width, 3, 1, 1, rng)?,
                ResBlock::new(ps, &format!("{prefix}.res0"), width, rng)?,
            ));
        }
        Ok(Self {
            conv_in,
            stages,
            conv_out: Conv1d::new(ps, &format!("{prefix}.conv_out"), width, width, 3, 1, 1, rng)?,
            head: Linear::new(ps, &format!("{prefix}.head"), width, n_classes, rng)?,
            in_channels,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Pooled trunk features, `(batch, width)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, c) = x.dims3()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "classifier expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut h = self.conv_in.forward(&x.transpose(1, 2)?)?.relu()?;
        for (down, res) in &self.stages {
            h = res.forward(&down.forward(&h)?.relu()?)?;
        }
        let h = self.conv_out.forward(&h.relu()?)?.relu()?;
        Ok(h.mean(D::Minus1)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }

    /// Softmax class probabilities, `(batch, n_classes)`.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax(&self.logits(x)?, D::Minus1)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits: Vec<Vec<f32>> = self.logits(x)?.to_vec2()?;
        Ok(logits.iter().map(|row| argmax(row)).collect())
    }
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, classes) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(l) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::Schema(format!("label {l} outside [0, {classes})")));
    }
    let idx = Tensor::from_vec(labels.iter().map(|l| *l as u32).collect::<Vec<_>>(), (b, 1), &device())?;
    let picked = log_softmax(logits, D::Minus1)?.gather(&idx, 1)?;
    Ok(picked.neg()?.mean_all()?)
}

/// One supervised step of `h` on embeddings cut off from the encoder graph.
/// Returns the cross-entropy before the step.
pub fn update_classifier(h: &ConvClassifier, opt: &mut Adam, embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let loss = cross_entropy(&h.logits(&embeddings.detach())?, labels)?;
    let value = scalar(&loss)?;
    if !value.is_finite() {
        return Err(Error::Numerical("classifier cross-entropy is not finite".into()));
    }
    opt.backward_step(&loss)?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression trained by full-batch gradient descent
/// on standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Shape("probe needs one label per feature row".into()));
        }
        if labels.iter().any(|l| *l >= n_classes) {
            return Err(Error::Schema("probe label out of range".into()));
        }
        let first = labels[0];
        if labels.iter().all(|l| *l == first) {
            return Err(Error::Corpus("probe training split contains a single class".into()));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in features {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for row in features {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if s.sqrt() < 1e-8 { 1.0 } else { s.sqrt() };
        }
        let mut probe = Self {
            mean,
            std,
            weights: vec![vec![0.0; dim]; n_classes],
            bias: vec![0.0; n_classes],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![vec![0.0; dim]; n_classes];
            let mut gb = vec![0.0; n_classes];
            for (x, &y) in xs.iter().zip(labels) {
                let p = probe.probabilities_std(x);
                for k in 0..n_classes {
                    let g = p[k] - if k == y { 1.0 } else { 0.0 };
                    gb[k] += g / n;
                    for (gwk, xv) in gw[k].iter_mut().zip(x) {
                        *gwk += g * xv / n;
                    }
                }
            }
            for k in 0..n_classes {
                probe.bias[k] -= cfg.learning_rate * gb[k];
                for (w, g) in probe.weights[k].iter_mut().zip(&gw[k]) {
                    *w -= cfg.learning_rate * (g + cfg.l2 * *w);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probabilities_std(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / total).collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let p = self.probabilities_std(&self.standardize(row));
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, l)| self.predict(f) == **l)
            .count();
        hits as f64 / features.len() as f64
    }
}

/// Held-out accuracy of a fresh linear probe for every attribute head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub heads: Vec<String>,
    pub accuracy: Vec<f64>,
}

impl ProbeReport {
    pub fn accuracy_of(&self, head: &str) -> Option<f64> {
        self.heads.iter().position(|h| h == head).map(|i| self.accuracy[i])
    }
}

/// Train a probe per attribute head on `train` rows and score it on `test` rows.
pub fn linear_probe(
    schema: &crate::schema::AttributeSchema,
    train: (&[Vec<f64>], &[crate::schema::AttributeLabel]),
    test: (&[Vec<f64>], &[crate::schema::AttributeLabel]),
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut accuracy = Vec::with_capacity(schema.heads.len());
    for (h, head) in schema.heads.iter().enumerate() {
        let ytr: Vec<usize> = train.1.iter().map(|l| l.value(h)).collect();
        let yte: Vec<usize> = test.1.iter().map(|l| l.value(h)).collect();
        let probe = LinearProbe::fit(train.0, &ytr, head.cardinality, cfg)?;
        accuracy.push(probe.accuracy(test.0, &yte));
    }
    Ok(ProbeReport {
        heads: schema.heads.iter().map(|h| h.name.clone()).collect(),
        accuracy,
    })
}

/// Shuffle labels in place; used to calibrate probes against chance.
pub fn shuffled_labels<T: Clone>(labels: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out = labels.to_vec();
    out.shuffle(rng);
    out
}

pub fn tensor_rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerConfig;
    use crate::rng::stream_rng;
    use crate::schema::{AttributeLabel, AttributeSchema};
    use rand::Rng;

    fn small(rng_seed: u64) -> (ParamStore, ConvClassifier) {
        let mut ps = ParamStore::new();
        let h = ConvClassifier::new(&mut ps, "cls", 4, 8, 0, 8, &mut stream_rng(rng_seed, 0)).unwrap();
        (ps, h)
    }

    #[test]
    fn zero_head_gives_uniform_output() {
        let (_, h) = small(0);
        h.head.weight.set(&h.head.weight.zeros_like().unwrap()).unwrap();
        h.head.bias.set(&h.head.bias.zeros_like().unwrap()).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 5, 4), &device()).unwrap();
        let p: Vec<Vec<f32>> = h.classify(&x).unwrap().to_vec2().unwrap();
        for row in p {
            for v in row {
                assert!((v - 0.125).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn outputs_are_distributions_and_deterministic() {
        let (_, h) = small(1);
        let x = Tensor::from_vec((0..60).map(|i| (i as f32 * 0.37).sin() * 3.0).collect::<Vec<_>>(), (3, 5, 4), &device()).unwrap();
        let a: Vec<Vec<f32>> = h.classify(&x).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = h.classify(&x).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
        for row in a {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        let wrong = Tensor::zeros((1, 5, 3), DType::F32, &device()).unwrap();
        assert!(matches!(h.classify(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let uniform = Tensor::zeros((4, 8), DType::F32, &device()).unwrap();
        let ce = scalar(&cross_entropy(&uniform, &[0, 3, 7, 2]).unwrap()).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-6);
        let confident = Tensor::new(&[[100f32, 0.0], [0.0, 100.0]], &device()).unwrap();
        assert!(scalar(&cross_entropy(&confident, &[0, 1]).unwrap()).unwrap() < 1e-6);
        assert!(matches!(cross_entropy(&uniform, &[0, 1, 2, 8]), Err(Error::Schema(_))));
    }

    #[test]
    fn update_touches_only_classifier_parameters() {
        let (mut ps, h) = small(2);
        let mut rng = stream_rng(9, 0);
        let enc = Linear::new(&mut ps, "enc.proj", 4, 4, &mut rng).unwrap();
        let before = ps.checksum(&["enc."]).unwrap();
        let cls_before = ps.checksum(&["cls."]).unwrap();
        let mut opt = Adam::new(ps.vars_with_prefix(&["cls."]), &OptimizerConfig { learning_rate: 1e-2, ..Default::default() }).unwrap();
        let x = Tensor::randn(0f32, 1.0, (6, 5, 4), &device()).unwrap();
        let s = enc.forward(&x).unwrap();
        update_classifier(&h, &mut opt, &s, &[0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(ps.checksum(&["enc."]).unwrap(), before);
        assert_ne!(ps.checksum(&["cls."]).unwrap(), cls_before);
    }

    #[test]
    fn successive_updates_mostly_decrease_ce_on_fixed_batch() {
        let mut non_increasing = 0;
        for trial in 0..100u64 {
            let mut ps = ParamStore::new();
            let mut rng = stream_rng(trial, 0);
            let h = ConvClassifier::new(&mut ps, "cls", 4, 8, 0, 8, &mut rng).unwrap();
            let mut opt = Adam::new(ps.vars_with_prefix(&["cls."]), &OptimizerConfig::default()).unwrap();
            let data: Vec<f32> = (0..8 * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(data, (8, 5, 4), &device()).unwrap();
            let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..8)).collect();
            let first = update_classifier(&h, &mut opt, &x, &labels).unwrap();
            let second = update_classifier(&h, &mut opt, &x, &labels).unwrap();
            let third = scalar(&cross_entropy(&h.logits(&x).unwrap(), &labels).unwrap()).unwrap();
            if second <= first && third <= second {
                non_increasing += 1;
            }
        }
        assert!(non_increasing >= 95, "{non_increasing} of 100");
    }

    #[test]
    fn probe_separable_and_degenerate_cases() {
        let schema = AttributeSchema::default();
        let labels: Vec<AttributeLabel> = (0..64).map(|i| AttributeLabel::age_gender(i % 4, (i / 4) % 2)).collect();
        let one_hot = |l: &AttributeLabel| {
            let mut v = vec![0.0; 6];
            v[l.value(0)] = 1.0;
            v[4 + l.value(1)] = 1.0;
            v
        };
        let feats: Vec<Vec<f64>> = labels.iter().map(one_hot).collect();
        let report = linear_probe(&schema, (&feats, &labels), (&feats, &labels), &ProbeConfig::default()).unwrap();
        assert_eq!(report.accuracy, vec![1.0, 1.0]);
        let single: Vec<AttributeLabel> = (0..10).map(|_| AttributeLabel::age_gender(1, 0)).collect();
        let f: Vec<Vec<f64>> = single.iter().map(one_hot).collect();
        assert!(matches!(
            linear_probe(&schema, (&f, &single), (&f, &single), &ProbeConfig::default()),
            Err(Error::Corpus(_))
        ));
    }

    #[test]
    fn probe_on_shuffled_labels_is_near_chance() {
        let schema = AttributeSchema::default();
        let n_train = 400;
        let n_test = 400;
        let mut gender_acc = Vec::new();
        let mut age_acc = Vec::new();
        for seed in 0..20u64 {
            let mut rng = stream_rng(seed, 1);
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n_train + n_test {
                let label = AttributeLabel::age_gender(i % 4, (i / 4) % 2);
                let mut f: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                f[0] += label.value(1) as f64 * 3.0;
                f[1] += label.value(0) as f64 * 3.0;
                rows.push(f);
                labels.push(label);
            }
            let shuffled = shuffled_labels(&labels, &mut rng);
            let r = linear_probe(
                &schema,
                (&rows[..n_train], &shuffled[..n_train]),
                (&rows[n_train..], &shuffled[n_train..]),
                &ProbeConfig::default(),
            )
            .unwrap();
            gender_acc.push(r.accuracy_of("gender").unwrap());
            age_acc.push(r.accuracy_of("age_group").unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // Binomial standard error of the mean over 20 seeds x 400 test rows.
        let se = |p: f64| (p * (1.0 - p) / (20.0 * n_test as f64)).sqrt();
        assert!((mean(&gender_acc) - 0.5).abs() < 3.0 * se(0.5) + 0.01, "{}", mean(&gender_acc));
        assert!((mean(&age_acc) - 0.25).abs() < 3.0 * se(0.25) + 0.01, "{}", mean(&age_acc));
    }
}
