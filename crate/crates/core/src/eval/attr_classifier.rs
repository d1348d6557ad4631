//! Attribute classifier on raw motions, trained with ground-truth labels.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{argmax, cross_entropy, ConvClassifier};
use crate::corpus::{ChannelStats, Corpus};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{device, scalar, Adam, OptimizerConfig, ParamStore};
use crate::rng::stream_rng;
use crate::schema::{AttributeLabel, AttributeSchema};
use crate::vqvae::train::BatchSampler;

pub const CHECKPOINT_KIND: &str = "attr-classifier";
const STREAM_INIT: u64 = 31;
const STREAM_BATCHES: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeClassifierConfig {
    pub width: usize,
    pub n_down: usize,
    pub window: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for AttributeClassifierConfig {
    fn default() -> Self {
        Self {
            width: 64,
            n_down: 2,
            window: 64,
            batch_size: 32,
            steps: 400,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetadata {
    pub config: AttributeClassifierConfig,
    pub schema: AttributeSchema,
    pub channels: usize,
    pub channel_stats: Option<ChannelStats>,
    pub history: Vec<f32>,
}

/// One trunk with a logit slice per attribute head.
pub struct AttributeClassifier {
    pub meta: ClassifierMetadata,
    params: ParamStore,
    net: ConvClassifier,
}

impl AttributeClassifier {
    fn new(meta: ClassifierMetadata) -> Result<Self> {
        let cfg = &meta.config;
        let mut ps = ParamStore::new();
        let net = ConvClassifier::new(
            &mut ps,
            "ac",
            meta.channels,
            cfg.width,
            cfg.n_down,
            meta.schema.one_hot_width(),
            &mut stream_rng(cfg.seed, STREAM_INIT),
        )?;
        Ok(Self { meta, params: ps, net })
    }

    fn head_logits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let logits = self.net.logits(x)?;
        let mut start = 0;
        let mut out = Vec::new();
        for h in &self.meta.schema.heads {
            out.push(logits.narrow(1, start, h.cardinality)?);
            start += h.cardinality;
        }
        Ok(out)
    }

    fn loss(&self, x: &Tensor, labels: &[AttributeLabel]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (k, logits) in self.head_logits(x)?.iter().enumerate() {
            let y: Vec<usize> = labels.iter().map(|l| l.value(k)).collect();
            let ce = cross_entropy(logits, &y)?;
            total = Some(match total {
                Some(t) => (t + ce)?,
                None => ce,
            });
        }
        total.ok_or_else(|| Error::Schema("schema has no attribute heads".into()))
    }

    /// Predicted labels for motions in the training space.
    pub fn predict_normalized(&self, motions: &[&MotionSequence]) -> Result<Vec<AttributeLabel>> {
        let mut out = Vec::with_capacity(motions.len());
        for m in motions {
            if m.channels() != self.meta.channels {
                return Err(Error::Shape(format!(
                    "classifier expects {} channels, motion has {}",
                    self.meta.channels,
                    m.channels()
                )));
            }
            let x = Tensor::from_vec(m.values().to_vec(), (1, m.frames(), m.channels()), &device())?;
            let values = self
                .head_logits(&x)?
                .iter()
                .map(|t| Ok(argmax(&t.squeeze(0)?.to_vec1::<f32>()?)))
                .collect::<Result<Vec<_>>>()?;
            out.push(self.meta.schema.label(&values)?);
        }
        Ok(out)
    }

    /// Predicted labels for raw (denormalized) motions.
    pub fn predict(&self, motions: &[MotionSequence]) -> Result<Vec<AttributeLabel>> {
        let normalized = match &self.meta.channel_stats {
            Some(stats) => motions.iter().map(|m| stats.normalize(m)).collect::<Result<Vec<_>>>()?,
            None => motions.to_vec(),
        };
        self.predict_normalized(&normalized.iter().collect::<Vec<_>>())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CHECKPOINT_KIND,
            self.meta.schema.hash(),
            config_hash.to_string(),
            serde_json::to_value(&self.meta).map_err(|e| Error::Config(e.to_string()))?,
        );
        ckpt.tensors = self.params.named_tensors()?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(ckpt.metadata()?)?;
        model.params.load(&ckpt.tensors)?;
        Ok(model)
    }
}

/// Supervised training on windows of the training split, summed per-head cross-entropy.
pub fn train_attribute_classifier(cfg: &AttributeClassifierConfig, corpus: &Corpus) -> Result<AttributeClassifier> {
    if cfg.width == 0 || cfg.window == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("classifier width, window and batch size must be positive".into()));
    }
    let mut model = AttributeClassifier::new(ClassifierMetadata {
        config: cfg.clone(),
        schema: corpus.schema().clone(),
        channels: corpus.manifest.channels,
        channel_stats: corpus.manifest.channel_stats.clone(),
        history: Vec::new(),
    })?;
    let mut history = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        let mut sampler = BatchSampler::new(corpus, cfg.window, stream_rng(cfg.seed, STREAM_BATCHES))?;
        let mut opt = Adam::new(model.params.vars_with_prefix(&["ac."]), &cfg.optimizer)?;
        for step in 0..cfg.steps {
            let (x, labels) = sampler.next(corpus, cfg.batch_size)?;
            let loss = model.loss(&x, &labels)?;
            let value = scalar(&loss)? as f32;
            if !value.is_finite() {
                return Err(Error::NonFinite { term: "classifier cross-entropy", iteration: step });
            }
            opt.backward_step(&loss)?;
            history.push(value);
        }
    }
    model.meta.history = history;
    Ok(model)
}
