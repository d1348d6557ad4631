//! Contrastive text/motion feature extractor used by every metric.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::{tensor_rows_f64, ConvClassifier};
use crate::corpus::{ChannelStats, Corpus, Split};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::{device, scalar, Adam, Mlp, OptimizerConfig, ParamStore};
use crate::rng::stream_rng;
use crate::transformer::text::{BagOfWords, TextEncoder, Vocabulary};
use crate::vqvae::train::BatchSampler;

pub const CHECKPOINT_KIND: &str = "eval-extractor";
const STREAM_INIT: u64 = 21;
const STREAM_TEXT_INIT: u64 = 22;
const STREAM_BATCHES: u64 = 23;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    pub feature_width: usize,
    pub width: usize,
    pub n_down: usize,
    pub text_width: usize,
    pub margin: f64,
    pub window: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        Self {
            feature_width: 64,
            width: 64,
            n_down: 2,
            text_width: 64,
            margin: 0.5,
            window: 64,
            batch_size: 32,
            steps: 600,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_width == 0 || self.width == 0 || self.text_width == 0 || self.window == 0 {
            return Err(Error::Config("feature extractor widths and window must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive training needs batches of at least 2".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorMetadata {
    pub config: FeatureExtractorConfig,
    pub channels: usize,
    pub vocabulary: Vocabulary,
    /// Statistics that map raw motions into the space the extractor was trained in.
    pub channel_stats: Option<ChannelStats>,
    pub history: Vec<f32>,
}

pub struct FeatureExtractor {
    pub meta: ExtractorMetadata,
    params: ParamStore,
    motion: ConvClassifier,
    text: BagOfWords,
    text_head: Mlp,
}

impl FeatureExtractor {
    fn new(meta: ExtractorMetadata) -> Result<Self> {
        let cfg = &meta.config;
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let motion = ConvClassifier::new(&mut ps, "fe.motion", meta.channels, cfg.width, cfg.n_down, cfg.feature_width, &mut rng)?;
        let text_head = Mlp::new(&mut ps, "fe.text_head", cfg.text_width, cfg.width, cfg.feature_width, &mut rng)?;
        let text = BagOfWords::new(
            &mut ps,
            "fe.text",
            meta.vocabulary.clone(),
            cfg.text_width,
            &mut stream_rng(cfg.seed, STREAM_TEXT_INIT),
        )?;
        Ok(Self {
            meta,
            params: ps,
            motion,
            text,
            text_head,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.meta.config.feature_width
    }

    /// `(B, T, C)` motions in the training space to `(B, F)` features.
    pub fn embed_motion(&self, x: &Tensor) -> Result<Tensor> {
        self.motion.logits(x)
    }

    pub fn embed_text(&self, prompts: &[&str]) -> Result<Tensor> {
        self.text_head.forward(&self.text.encode(prompts)?)
    }

    /// Features of motions already in the training space, batched by length.
    pub fn motion_features(&self, motions: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(motions.len());
        let mut start = 0;
        while start < motions.len() {
            let len = motions[start].frames();
            let mut end = start + 1;
            while end < motions.len() && end - start < 64 && motions[end].frames() == len {
                end += 1;
            }
            let group = &motions[start..end];
            for m in group {
                if m.channels() != self.meta.channels {
                    return Err(Error::Shape(format!(
                        "extractor expects {} channels, motion has {}",
                        self.meta.channels,
                        m.channels()
                    )));
                }
            }
            let data: Vec<f32> = group.iter().flat_map(|m| m.values().iter().copied()).collect();
            let x = Tensor::from_vec(data, (group.len(), len, self.meta.channels), &device())?;
            out.extend(tensor_rows_f64(&self.embed_motion(&x)?)?);
            start = end;
        }
        Ok(out)
    }

    /// Features of raw (denormalized) motions.
    pub fn raw_motion_features(&self, motions: &[MotionSequence]) -> Result<Vec<Vec<f64>>> {
        let normalized = match &self.meta.channel_stats {
            Some(stats) => motions.iter().map(|m| stats.normalize(m)).collect::<Result<Vec<_>>>()?,
            None => motions.to_vec(),
        };
        self.motion_features(&normalized.iter().collect::<Vec<_>>())
    }

    pub fn text_features(&self, prompts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(256) {
            out.extend(tensor_rows_f64(&self.embed_text(chunk)?)?);
        }
        Ok(out)
    }

    /// Features of every record of one corpus split, in split order.
    pub fn corpus_features(&self, corpus: &Corpus, split: Split) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let idx = corpus.split_indices(split);
        let motions: Vec<&MotionSequence> = idx.iter().map(|i| corpus.motion(*i)).collect();
        let texts: Vec<&str> = idx.iter().map(|i| corpus.records()[*i].text.as_str()).collect();
        Ok((self.motion_features(&motions)?, self.text_features(&texts)?))
    }

    pub fn to_checkpoint(&self, schema_hash: &str, config_hash: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CHECKPOINT_KIND,
            schema_hash.to_string(),
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

/// Squared distance for matched pairs plus a squared hinge at `margin` for
/// each motion against the next row's text (a roll of the batch). Rolled
/// negatives whose text equals the positive text are masked out.
pub fn contrastive_loss(motion: &Tensor, text: &Tensor, texts: &[&str], margin: f64) -> Result<Tensor> {
    let b = motion.dim(0)?;
    let pos = (motion - text)?.sqr()?.sum(D::Minus1)?.mean_all()?;
    let rolled = Tensor::cat(&[text.narrow(0, 1, b - 1)?, text.narrow(0, 0, 1)?], 0)?;
    let d_neg = ((motion - rolled)?.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?;
    let hinge = (d_neg.neg()? + margin)?.relu()?.sqr()?;
    let mask: Vec<f32> = (0..b).map(|i| f32::from(texts[i] != texts[(i + 1) % b])).collect();
    let n_neg: f32 = mask.iter().sum();
    if n_neg == 0.0 {
        return Ok(pos);
    }
    let mask = Tensor::from_vec(mask, b, &device())?.to_dtype(hinge.dtype())?;
    Ok((pos + ((hinge * mask)?.sum_all()? / f64::from(n_neg))?)?)
}

pub fn train_feature_extractor(cfg: &FeatureExtractorConfig, corpus: &Corpus) -> Result<FeatureExtractor> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Corpus("feature extractor needs at least 2 records".into()));
    }
    let train = corpus.split_indices(Split::Train);
    let vocab = Vocabulary::build(train.iter().map(|i| corpus.records()[*i].text.as_str()));
    let model = FeatureExtractor::new(ExtractorMetadata {
        config: cfg.clone(),
        channels: corpus.manifest.channels,
        vocabulary: vocab,
        channel_stats: corpus.manifest.channel_stats.clone(),
        history: Vec::with_capacity(cfg.steps),
    })?;
    let mut history = Vec::with_capacity(cfg.steps);
    if cfg.steps > 0 {
        let mut sampler = BatchSampler::new(corpus, cfg.window, stream_rng(cfg.seed, STREAM_BATCHES))?;
        let mut opt = Adam::new(model.params.vars_with_prefix(&["fe."]), &cfg.optimizer)?;
        for step in 0..cfg.steps {
            let (x, idx) = sampler.next_indexed(corpus, cfg.batch_size)?;
            let texts: Vec<&str> = idx.iter().map(|i| corpus.records()[*i].text.as_str()).collect();
            let loss = contrastive_loss(&model.embed_motion(&x)?, &model.embed_text(&texts)?, &texts, cfg.margin)?;
            let value = scalar(&loss)? as f32;
            if !value.is_finite() {
                return Err(Error::NonFinite { term: "contrastive", iteration: step });
            }
            opt.backward_step(&loss)?;
            if step % 200 == 0 {
                log::info!("feature extractor step {step}: loss {value:.4}");
            }
            history.push(value);
        }
    }
    let mut model = model;
    model.meta.history = history;
    Ok(model)
}
