//! Generators, attribute judges, the attribute-control protocol and the
//! repeated metric evaluation.

use std::path::Path;
use std::sync::Arc;

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attr_classifier::AttributeClassifier;
use super::extractor::FeatureExtractor;
use super::metrics::{metrics, EvalSet, MetricReport, MetricSummary};
use crate::corpus::{Corpus, NewRecord, Split};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::nn::device;
use crate::registry::Registry;
use crate::rng::stream_rng;
use crate::schema::{AttributeLabel, AttributeSchema};
use crate::synth::{oracle_attributes, SynthSpec};
use crate::transformer::{generate_motion, TrainedTransformer};
use crate::vqvae::TrainedVqvae;

const STREAM_TARGETS: u64 = 41;
const STREAM_GENERATE: u64 = 42;
const STREAM_METRICS: u64 = 43;

/// Produces a raw (denormalized) motion for corpus record `index` under `attributes`.
pub trait MotionGenerator: Send + Sync {
    fn generate(&self, corpus: &Corpus, index: usize, attributes: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<MotionSequence>;
}

fn raw_motion(corpus: &Corpus, index: usize) -> Result<MotionSequence> {
    let m = corpus.motion(index);
    match &corpus.manifest.channel_stats {
        Some(stats) => stats.denormalize(m),
        None => Ok(m.clone()),
    }
}

/// Returns the real motion; ignores the requested attributes.
pub struct Identity;

impl MotionGenerator for Identity {
    fn generate(&self, corpus: &Corpus, index: usize, _attributes: &AttributeLabel, _rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
        raw_motion(corpus, index)
    }
}

/// Text to tokens with the transformer, tokens to motion with the decoder.
pub struct Pipeline {
    pub vqvae: Arc<TrainedVqvae>,
    pub transformer: Arc<TrainedTransformer>,
}

impl MotionGenerator for Pipeline {
    fn generate(&self, corpus: &Corpus, index: usize, attributes: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
        let rec = &corpus.records()[index];
        let d = self.vqvae.model.config.downsample_factor;
        let length = rec.length.div_ceil(d).min(self.transformer.model.config.max_tokens);
        generate_motion(&rec.text, attributes, &self.vqvae, &self.transformer, length, rng)
    }
}

/// Tokens of the real motion, decoded under the requested attributes.
pub struct Reconstruction {
    pub vqvae: Arc<TrainedVqvae>,
}

impl MotionGenerator for Reconstruction {
    fn generate(&self, corpus: &Corpus, index: usize, attributes: &AttributeLabel, _rng: &mut ChaCha8Rng) -> Result<MotionSequence> {
        let m = corpus.motion(index);
        let x = Tensor::from_vec(m.values().to_vec(), (1, m.frames(), m.channels()), &device())?;
        let y = self.vqvae.model.reconstruct(&x, std::slice::from_ref(attributes))?.squeeze(0)?;
        let out = MotionSequence::new(m.frames(), m.channels(), y.flatten_all()?.to_vec1()?, m.frame_rate_hz())?;
        match &self.vqvae.meta.channel_stats {
            Some(stats) => stats.denormalize(&out),
            None => Ok(out),
        }
    }
}

#[derive(Clone, Default)]
pub struct GeneratorContext {
    pub vqvae: Option<Arc<TrainedVqvae>>,
    pub transformer: Option<Arc<TrainedTransformer>>,
}

type BoxedGenerator = Box<dyn MotionGenerator>;

fn need<T: Clone>(v: &Option<T>, what: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("this choice needs a {what}")))
}

pub fn generators() -> Registry<dyn MotionGenerator, GeneratorContext> {
    Registry::new("generator")
        .register("pipeline", "transformer tokens decoded with the requested attributes", |c: &GeneratorContext| -> Result<BoxedGenerator> {
            Ok(Box::new(Pipeline {
                vqvae: need(&c.vqvae, "VQVAE checkpoint")?,
                transformer: need(&c.transformer, "transformer checkpoint")?,
            }))
        })
        .register("reconstruction", "real motion re-decoded with the requested attributes", |c: &GeneratorContext| -> Result<BoxedGenerator> {
            Ok(Box::new(Reconstruction {
                vqvae: need(&c.vqvae, "VQVAE checkpoint")?,
            }))
        })
        .register("identity", "real motion, attributes ignored", |_| -> Result<BoxedGenerator> { Ok(Box::new(Identity)) })
}

/// Reads attributes off raw motions.
pub trait AttributeJudge: Send + Sync {
    fn schema(&self) -> &AttributeSchema;
    fn judge(&self, motions: &[MotionSequence]) -> Result<Vec<AttributeLabel>>;
}

/// The closed-form inverse of the synthetic generator.
pub struct OracleJudge {
    pub spec: SynthSpec,
    schema: AttributeSchema,
}

impl OracleJudge {
    pub fn new(spec: SynthSpec) -> Self {
        let schema = spec.schema();
        Self { spec, schema }
    }
}

impl AttributeJudge for OracleJudge {
    fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    fn judge(&self, motions: &[MotionSequence]) -> Result<Vec<AttributeLabel>> {
        Ok(motions.iter().map(|m| oracle_attributes(m, &self.spec).label).collect())
    }
}

pub struct ClassifierJudge(pub Arc<AttributeClassifier>);

impl AttributeJudge for ClassifierJudge {
    fn schema(&self) -> &AttributeSchema {
        &self.0.meta.schema
    }

    fn judge(&self, motions: &[MotionSequence]) -> Result<Vec<AttributeLabel>> {
        self.0.predict(motions)
    }
}

#[derive(Clone, Default)]
pub struct JudgeContext {
    pub synth: Option<SynthSpec>,
    pub classifier: Option<Arc<AttributeClassifier>>,
}

type BoxedJudge = Box<dyn AttributeJudge>;

pub fn judges() -> Registry<dyn AttributeJudge, JudgeContext> {
    Registry::new("attribute judge")
        .register("oracle", "closed-form recovery for the synthetic corpus", |c: &JudgeContext| -> Result<BoxedJudge> {
            Ok(Box::new(OracleJudge::new(need(&c.synth, "synthetic corpus spec")?)))
        })
        .register("classifier", "trained raw-motion attribute classifier", |c: &JudgeContext| -> Result<BoxedJudge> {
            Ok(Box::new(ClassifierJudge(need(&c.classifier, "attribute classifier checkpoint")?)))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    True,
    Shuffled,
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Self::True),
            "shuffled" => Ok(Self::Shuffled),
            _ => Err(Error::Config(format!("unknown protocol mode {s:?}; expected true or shuffled"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub value: usize,
    pub name: String,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub head: String,
    /// Agreement with the control input over every generated motion.
    pub accuracy: f64,
    /// Mean of the per-group accuracies over groups that were targeted.
    pub group_mean: f64,
    pub groups: Vec<GroupAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mode: ControlMode,
    pub records: usize,
    pub heads: Vec<HeadAccuracy>,
}

impl ProtocolReport {
    pub fn accuracy_of(&self, head: &str) -> Option<f64> {
        self.heads.iter().find(|h| h.head == head).map(|h| h.accuracy)
    }
}

/// Uniform draw over every head independently.
pub fn random_label(schema: &AttributeSchema, rng: &mut impl Rng) -> AttributeLabel {
    let values: Vec<usize> = schema.heads.iter().map(|h| rng.random_range(0..h.cardinality)).collect();
    schema.label(&values).expect("values drawn within cardinality")
}

/// Generate for every record of `split` under its true attributes or a
/// uniformly random target, judge the outputs, and score agreement with the
/// control input.
pub fn attribute_control_protocol(
    generator: &dyn MotionGenerator,
    corpus: &Corpus,
    split: Split,
    judge: &dyn AttributeJudge,
    mode: ControlMode,
    seed: u64,
) -> Result<ProtocolReport> {
    let schema = corpus.schema();
    if judge.schema().hash() != schema.hash() {
        return Err(Error::Schema("attribute judge schema differs from the corpus schema".into()));
    }
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::Corpus("protocol split is empty".into()));
    }
    let mut target_rng = stream_rng(seed, STREAM_TARGETS);
    let mut gen_rng = stream_rng(seed, STREAM_GENERATE);
    let mut targets = Vec::with_capacity(idx.len());
    let mut motions = Vec::with_capacity(idx.len());
    for i in &idx {
        let target = match mode {
            ControlMode::True => corpus.records()[*i].attributes.clone(),
            ControlMode::Shuffled => random_label(schema, &mut target_rng),
        };
        motions.push(generator.generate(corpus, *i, &target, &mut gen_rng)?);
        targets.push(target);
    }
    let judged = judge.judge(&motions)?;
    let heads = schema
        .heads
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let mut count = vec![0usize; h.cardinality];
            let mut hit = vec![0usize; h.cardinality];
            for (t, j) in targets.iter().zip(&judged) {
                count[t.value(k)] += 1;
                hit[t.value(k)] += usize::from(t.value(k) == j.value(k));
            }
            let groups: Vec<GroupAccuracy> = (0..h.cardinality)
                .map(|v| GroupAccuracy {
                    value: v,
                    name: h.value_names.get(v).cloned().unwrap_or_else(|| v.to_string()),
                    count: count[v],
                    accuracy: if count[v] > 0 { hit[v] as f64 / count[v] as f64 } else { 0.0 },
                })
                .collect();
            let seen: Vec<&GroupAccuracy> = groups.iter().filter(|g| g.count > 0).collect();
            HeadAccuracy {
                head: h.name.clone(),
                accuracy: hit.iter().sum::<usize>() as f64 / targets.len() as f64,
                group_mean: seen.iter().map(|g| g.accuracy).sum::<f64>() / seen.len() as f64,
                groups,
            }
        })
        .collect();
    Ok(ProtocolReport {
        mode,
        records: idx.len(),
        heads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repetitions: usize,
    pub diversity_pairs: usize,
    /// Prompts used for multimodality; 0 skips the metric.
    pub multimodality_prompts: usize,
    pub multimodality_reps: usize,
    pub metrics: Vec<String>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repetitions: 20,
            diversity_pairs: 300,
            multimodality_prompts: 100,
            multimodality_reps: 10,
            metrics: ["fid", "top1", "top2", "top3", "mm-dist", "diversity", "multimodality"]
                .map(String::from)
                .to_vec(),
            seed: 0,
        }
    }
}

/// Every configured metric over `repetitions` seeded generation rounds on one split.
///
/// Repetition `r` uses seed `seed + r` for generation and metric sampling.
pub fn evaluate(
    extractor: &FeatureExtractor,
    generator: &dyn MotionGenerator,
    corpus: &Corpus,
    split: Split,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<MetricReport> {
    if cfg.repetitions == 0 {
        return Err(Error::Config("evaluation needs at least one repetition".into()));
    }
    let registry = metrics();
    let chosen = cfg
        .metrics
        .iter()
        .map(|name| Ok((name.clone(), registry.build(name, &())?)))
        .collect::<Result<Vec<_>>>()?;
    let wants_mm = cfg.metrics.iter().any(|m| m == "multimodality");
    if wants_mm && (cfg.multimodality_prompts == 0 || cfg.multimodality_reps < 2) {
        return Err(Error::Config("multimodality needs prompts and at least 2 repetitions per prompt".into()));
    }
    let idx = corpus.split_indices(split);
    let (real, text) = extractor.corpus_features(corpus, split)?;
    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|r| cfg.seed + r).collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.repetitions); chosen.len()];
    for &seed in &seeds {
        let mut gen_rng = stream_rng(seed, STREAM_GENERATE);
        let motions = idx
            .iter()
            .map(|i| generator.generate(corpus, *i, &corpus.records()[*i].attributes, &mut gen_rng))
            .collect::<Result<Vec<_>>>()?;
        let generated = extractor.raw_motion_features(&motions)?;
        let mut groups = Vec::new();
        if wants_mm {
            for i in idx.iter().take(cfg.multimodality_prompts) {
                let outs = (0..cfg.multimodality_reps as u64)
                    .map(|k| {
                        let mut rng = stream_rng(seed, STREAM_GENERATE + 1000 + k);
                        generator.generate(corpus, *i, &corpus.records()[*i].attributes, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                groups.push(extractor.raw_motion_features(&outs)?);
            }
        }
        let set = EvalSet {
            real_motion: &real,
            generated_motion: &generated,
            text: &text,
            multimodal_groups: &groups,
            diversity_pairs: cfg.diversity_pairs,
        };
        let mut rng = stream_rng(seed, STREAM_METRICS);
        for (k, (_, metric)) in chosen.iter().enumerate() {
            values[k].push(metric.compute(&set, &mut rng)?);
        }
    }
    let metrics = chosen
        .iter()
        .zip(values)
        .map(|((name, _), v)| MetricSummary::from_values(name, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        config_hash: config_hash.to_string(),
        seeds,
        metrics,
    })
}

/// One exported feature row.
pub struct FeatureRow {
    pub id: String,
    pub features: Vec<f64>,
    pub attributes: AttributeLabel,
    pub text: String,
    pub action_class: Option<usize>,
}

/// Write feature rows as single-frame records of a corpus container.
pub fn export_features(rows: &[FeatureRow], schema: &AttributeSchema, path: impl AsRef<Path>) -> Result<Corpus> {
    let width = rows.first().map(|r| r.features.len()).ok_or_else(|| Error::Corpus("nothing to export".into()))?;
    let mut out = Corpus::empty(schema.clone(), width, 1.0);
    for r in rows {
        let values: Vec<f32> = r.features.iter().map(|v| *v as f32).collect();
        out.push(NewRecord {
            id: r.id.clone(),
            motion: MotionSequence::new(1, values.len(), values, 1.0)?,
            attributes: r.attributes.clone(),
            text: r.text.clone(),
            action_class: r.action_class,
        })?;
    }
    out.write(path)?;
    Ok(out)
}

/// Motion features of every record in `split`, ready for export.
pub fn corpus_feature_rows(extractor: &FeatureExtractor, corpus: &Corpus, split: Split) -> Result<Vec<FeatureRow>> {
    let idx = corpus.split_indices(split);
    let (motion, _) = extractor.corpus_features(corpus, split)?;
    Ok(idx
        .iter()
        .zip(motion)
        .map(|(i, features)| {
            let r = &corpus.records()[*i];
            FeatureRow {
                id: r.id.clone(),
                features,
                attributes: r.attributes.clone(),
                text: r.text.clone(),
                action_class: r.action_class,
            }
        })
        .collect())
}
