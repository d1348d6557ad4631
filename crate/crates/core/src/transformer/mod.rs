//! Masked semantic-token transformer conditioned on a text vector placed at
//! sequence position 0, with iterative confidence-based parallel decoding.

pub mod decode;
pub mod text;

use std::collections::BTreeMap;

use candle_core::{Tensor, Var, D};
use candle_nn::ops::softmax;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classifier::cross_entropy;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::{device, scalar, Adam, LayerNorm, Linear, OptimizerConfig, ParamStore};
use crate::rng::{stream_rng, RngState};
use crate::vqvae::TrainedVqvae;
use text::{AttrInText, BagOfWords, TextEncoder, Vocabulary};

pub use decode::{generate_motion, generate_tokens, samplers, TokenSampler};

pub const CHECKPOINT_KIND: &str = "masked-transformer";
const STREAM_INIT: u64 = 11;
const STREAM_TEXT_INIT: u64 = 12;
const STREAM_BATCHES: u64 = 13;
const STREAM_MASKS: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskedTransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub text_width: usize,
    pub max_tokens: usize,
    pub decode_iterations: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub sampler: String,
    pub temperature: f64,
    pub attr_in_text: AttrInText,
    pub seed: u64,
}

impl Default for MaskedTransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            text_width: 64,
            max_tokens: 64,
            decode_iterations: 10,
            batch_size: 32,
            steps: 3000,
            optimizer: OptimizerConfig::default(),
            sampler: "argmax".into(),
            temperature: 1.0,
            attr_in_text: AttrInText::Off,
            seed: 0,
        }
    }
}

impl MaskedTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("transformer width must split evenly across heads".into()));
        }
        if self.decode_iterations == 0 {
            return Err(Error::Config("decode_iterations must be at least 1".into()));
        }
        if self.max_tokens == 0 || self.batch_size == 0 || self.text_width == 0 {
            return Err(Error::Config("max_tokens, batch_size and text_width must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !samplers().contains(&self.sampler) {
            return Err(Error::Config(format!(
                "unknown sampler '{}', available: {}",
                self.sampler,
                samplers().names().join(", ")
            )));
        }
        Ok(())
    }
}

/// Mask ratio schedule `cos(pi u / 2)`.
pub fn gamma(u: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * u).cos()
}

/// Number of masked positions for ratio `r` over `t` tokens; at least one when `r > 0`.
pub fn masked_count(r: f64, t: usize) -> usize {
    if r <= 0.0 || t == 0 {
        return 0;
    }
    ((r * t as f64).round() as usize).clamp(1, t)
}

fn normal_linear(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
    Ok(Linear {
        weight: ps.normal(&format!("{name}.weight"), &[output, input], 0.02, rng)?,
        bias: ps.constant(&format!("{name}.bias"), &[output], 0.0)?,
    })
}

#[derive(Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(ps: &mut ParamStore, name: &str, w: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), w)?,
            qkv: normal_linear(ps, &format!("{name}.qkv"), w, 3 * w, rng)?,
            proj: normal_linear(ps, &format!("{name}.proj"), w, w, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), w)?,
            fc1: normal_linear(ps, &format!("{name}.fc1"), w, 4 * w, rng)?,
            fc2: normal_linear(ps, &format!("{name}.fc2"), 4 * w, w, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (b, s, w) = x.dims3()?;
        let dh = w / heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * w, w)?
                .reshape((b, s, heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let att = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let att = softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, s, w))?;
        let x = (x + self.proj.forward(&y)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

pub struct MaskedTransformer {
    pub config: MaskedTransformerConfig,
    pub n_codes: usize,
    pub params: ParamStore,
    pub text: BagOfWords,
    token_embedding: Var,
    position_embedding: Var,
    text_proj: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl MaskedTransformer {
    pub fn new(cfg: &MaskedTransformerConfig, n_codes: usize, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let w = cfg.width;
        let token_embedding = ps.normal("tf.tok", &[n_codes + 1, w], 0.02, &mut rng)?;
        let position_embedding = ps.normal("tf.pos", &[cfg.max_tokens + 1, w], 0.02, &mut rng)?;
        let text_proj = normal_linear(&mut ps, "tf.text_proj", cfg.text_width, w, &mut rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(Block::new(&mut ps, &format!("tf.block{i}"), w, &mut rng)?);
        }
        let ln_f = LayerNorm::new(&mut ps, "tf.ln_f", w)?;
        let head = normal_linear(&mut ps, "tf.head", w, n_codes, &mut rng)?;
        let text = BagOfWords::new(&mut ps, "text", vocab, cfg.text_width, &mut stream_rng(cfg.seed, STREAM_TEXT_INIT))?;
        Ok(Self {
            config: cfg.clone(),
            n_codes,
            params: ps,
            text,
            token_embedding,
            position_embedding,
            text_proj,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn mask_id(&self) -> u32 {
        self.n_codes as u32
    }

    /// Logits `(B, T, n_codes)` for token inputs `(B, T)` (mask id allowed) and text vectors `(B, text_width)`.
    pub fn logits(&self, text: &Tensor, inputs: &[Vec<u32>]) -> Result<Tensor> {
        let b = inputs.len();
        let t = inputs.first().map_or(0, |r| r.len());
        if t > self.config.max_tokens {
            return Err(Error::Parameter(format!(
                "{t} tokens exceed the maximum of {}",
                self.config.max_tokens
            )));
        }
        if inputs.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("token rows in a batch must share one length".into()));
        }
        let flat: Vec<u32> = inputs.concat();
        if let Some(bad) = flat.iter().find(|k| **k > self.mask_id()) {
            return Err(Error::Corpus(format!("token {bad} outside vocabulary of {}", self.n_codes + 1)));
        }
        let w = self.config.width;
        let idx = Tensor::from_vec(flat, b * t, &device())?;
        let tok = self.token_embedding.as_tensor().index_select(&idx, 0)?.reshape((b, t, w))?;
        let cond = self.text_proj.forward(text)?.unsqueeze(1)?;
        let seq = Tensor::cat(&[&cond, &tok], 1)?;
        let pos = self.position_embedding.as_tensor().narrow(0, 0, t + 1)?;
        let mut h = seq.broadcast_add(&pos)?;
        for block in &self.blocks {
            h = block.forward(&h, self.config.heads)?;
        }
        let h = self.ln_f.forward(&h.narrow(1, 1, t)?)?;
        self.head.forward(&h)
    }

    pub fn encode_text(&self, prompts: &[&str]) -> Result<Tensor> {
        self.text.encode(prompts)
    }
}

/// One training example: target tokens and the prompt used for conditioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenExample {
    pub tokens: Vec<u32>,
    pub text: String,
}

/// Replace `masked_count(ratio, T)` uniformly chosen positions with the mask id.
/// Returns the corrupted row and the masked positions in ascending order.
pub fn mask_tokens(tokens: &[u32], ratio: f64, mask_id: u32, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<usize>) {
    let n = masked_count(ratio, tokens.len());
    let mut positions: Vec<usize> = (0..tokens.len()).collect();
    positions.shuffle(rng);
    let mut chosen = positions[..n].to_vec();
    chosen.sort_unstable();
    let mut out = tokens.to_vec();
    for p in &chosen {
        out[*p] = mask_id;
    }
    (out, chosen)
}

/// Mean cross-entropy over masked positions only; `None` when nothing is masked.
pub fn masked_loss(logits: &Tensor, targets: &[Vec<u32>], masked: &[Vec<usize>]) -> Result<Option<Tensor>> {
    let (_, t, v) = logits.dims3()?;
    let mut flat_pos = Vec::new();
    let mut labels = Vec::new();
    for (i, (row, m)) in targets.iter().zip(masked).enumerate() {
        for p in m {
            flat_pos.push((i * t + p) as u32);
            labels.push(row[*p] as usize);
        }
    }
    if flat_pos.is_empty() {
        return Ok(None);
    }
    let idx = Tensor::from_vec(flat_pos.clone(), flat_pos.len(), &device())?;
    let picked = logits.reshape(((), v))?.index_select(&idx, 0)?;
    Ok(Some(cross_entropy(&picked, &labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f32,
    pub masked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerMetadata {
    pub config: MaskedTransformerConfig,
    pub n_codes: usize,
    pub downsample_factor: usize,
    pub vocabulary: Vocabulary,
    pub vqvae_config_hash: String,
    pub schema_hash: String,
    pub batch_rng: RngState,
    pub mask_rng: RngState,
    pub history: Vec<StepRecord>,
}

pub struct TrainedTransformer {
    pub model: MaskedTransformer,
    pub meta: TransformerMetadata,
}

impl TrainedTransformer {
    pub fn to_checkpoint(&self, schema_hash: &str, config_hash: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CHECKPOINT_KIND,
            schema_hash.to_string(),
            config_hash.to_string(),
            serde_json::to_value(&self.meta).map_err(|e| Error::Config(e.to_string()))?,
        );
        ckpt.tensors = self.model.params.named_tensors()?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: TransformerMetadata = ckpt.metadata()?;
        let model = MaskedTransformer::new(&meta.config, meta.n_codes, meta.vocabulary.clone())?;
        model.params.load(&ckpt.tensors)?;
        Ok(Self { model, meta })
    }
}

/// The frozen tokenizer a token corpus came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSource {
    pub n_codes: usize,
    pub downsample_factor: usize,
    pub config_hash: String,
    pub schema_hash: String,
}

impl TokenSource {
    pub fn of(vqvae: &TrainedVqvae, config_hash: &str) -> Self {
        Self {
            n_codes: vqvae.model.config.n_codes,
            downsample_factor: vqvae.model.config.downsample_factor,
            config_hash: config_hash.to_string(),
            schema_hash: vqvae.model.schema.hash(),
        }
    }
}

/// Tokenize one corpus split with a frozen VQVAE, optionally appending attribute phrases.
pub fn build_token_corpus(vqvae: &TrainedVqvae, corpus: &Corpus, split: Split, attr_in_text: AttrInText) -> Result<Vec<TokenExample>> {
    let schema = corpus.schema();
    if schema.hash() != vqvae.model.schema.hash() {
        return Err(Error::Schema("corpus schema differs from the VQVAE schema".into()));
    }
    let c = corpus.manifest.channels;
    let mut out = Vec::new();
    for i in corpus.split_indices(split) {
        let m = corpus.motion(i);
        let x = Tensor::from_vec(m.values().to_vec(), (1, m.frames(), c), &device())?;
        let tokens = vqvae.model.tokenize(&x)?.remove(0).tokens;
        let rec = &corpus.records()[i];
        let text = if attr_in_text.at_train() {
            text::with_attribute_phrase(&rec.text, schema, &rec.attributes)?
        } else {
            rec.text.clone()
        };
        out.push(TokenExample { tokens, text });
    }
    Ok(out)
}

/// Length-bucketed batches so rows never need padding.
struct Buckets {
    by_len: BTreeMap<usize, (Vec<usize>, usize)>,
    all: Vec<usize>,
}

impl Buckets {
    fn new(data: &[TokenExample]) -> Self {
        let mut by_len: BTreeMap<usize, (Vec<usize>, usize)> = BTreeMap::new();
        for (i, e) in data.iter().enumerate() {
            by_len.entry(e.tokens.len()).or_default().0.push(i);
        }
        Self {
            by_len,
            all: (0..data.len()).collect(),
        }
    }

    fn next(&mut self, data: &[TokenExample], batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let anchor = self.all[rng.random_range(0..self.all.len())];
        let (pool, cursor) = self.by_len.get_mut(&data[anchor].tokens.len()).expect("bucket exists");
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(pool.len()) {
            if *cursor == 0 {
                pool.shuffle(rng);
            }
            out.push(pool[*cursor]);
            *cursor = (*cursor + 1) % pool.len();
        }
        out
    }
}

/// Train on precomputed tokens from a frozen VQVAE.
pub fn train_transformer(cfg: &MaskedTransformerConfig, source: &TokenSource, data: &[TokenExample]) -> Result<TrainedTransformer> {
    let n_codes = source.n_codes;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Corpus("no token sequences to train on".into()));
    }
    for e in data {
        if let Some(bad) = e.tokens.iter().find(|k| **k as usize >= n_codes) {
            return Err(Error::Corpus(format!("token {bad} outside codebook of {n_codes}")));
        }
        if e.tokens.is_empty() || e.tokens.len() > cfg.max_tokens {
            return Err(Error::Corpus(format!(
                "token sequence of length {} outside [1, {}]",
                e.tokens.len(),
                cfg.max_tokens
            )));
        }
    }
    let vocab = Vocabulary::build(data.iter().map(|e| e.text.as_str()));
    let model = MaskedTransformer::new(cfg, n_codes, vocab)?;
    let mut opt = Adam::new(model.params.vars_with_prefix(&["tf.", "text."]), &cfg.optimizer)?;
    let mut batch_rng = stream_rng(cfg.seed, STREAM_BATCHES);
    let mut mask_rng = stream_rng(cfg.seed, STREAM_MASKS);
    let mut buckets = Buckets::new(data);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = buckets.next(data, cfg.batch_size, &mut batch_rng);
        let targets: Vec<Vec<u32>> = idx.iter().map(|i| data[*i].tokens.clone()).collect();
        let mut inputs = Vec::with_capacity(idx.len());
        let mut masked = Vec::with_capacity(idx.len());
        for row in &targets {
            let r = gamma(mask_rng.random::<f64>());
            let (inp, m) = mask_tokens(row, r, model.mask_id(), &mut mask_rng);
            inputs.push(inp);
            masked.push(m);
        }
        let prompts: Vec<&str> = idx.iter().map(|i| data[*i].text.as_str()).collect();
        let text = model.encode_text(&prompts)?;
        let logits = model.logits(&text, &inputs)?;
        let n_masked = masked.iter().map(Vec::len).sum();
        let loss = match masked_loss(&logits, &targets, &masked)? {
            Some(l) => l,
            None => {
                history.push(StepRecord { step, loss: 0.0, masked: 0 });
                continue;
            }
        };
        let value = scalar(&loss)? as f32;
        if !value.is_finite() {
            return Err(Error::NonFinite { term: "masked cross-entropy", iteration: step });
        }
        opt.backward_step(&loss)?;
        if step % 200 == 0 {
            log::info!("transformer step {step}: masked CE {value:.4}");
        }
        history.push(StepRecord { step, loss: value, masked: n_masked });
    }
    Ok(TrainedTransformer {
        meta: TransformerMetadata {
            config: cfg.clone(),
            n_codes,
            downsample_factor: source.downsample_factor,
            vocabulary: model.text.vocab.clone(),
            vqvae_config_hash: source.config_hash.clone(),
            schema_hash: source.schema_hash.clone(),
            batch_rng: RngState::capture(&batch_rng),
            mask_rng: RngState::capture(&mask_rng),
            history,
        },
        model,
    })
}

/// Masked-token cross-entropy and top-1 accuracy on `data` with fresh masks from `rng`.
pub fn masked_eval(model: &MaskedTransformer, data: &[TokenExample], rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let mut ce_sum = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for e in data {
        let r = gamma(rng.random::<f64>());
        let (inp, m) = mask_tokens(&e.tokens, r, model.mask_id(), rng);
        if m.is_empty() {
            continue;
        }
        let text = model.encode_text(&[e.text.as_str()])?;
        let logits = model.logits(&text, &[inp])?;
        let loss = masked_loss(&logits, std::slice::from_ref(&e.tokens), std::slice::from_ref(&m))?.expect("nonempty mask");
        ce_sum += scalar(&loss)? * m.len() as f64;
        let rows: Vec<Vec<f32>> = logits.squeeze(0)?.to_vec2()?;
        for p in &m {
            if crate::classifier::argmax(&rows[*p]) as u32 == e.tokens[*p] {
                hits += 1;
            }
        }
        total += m.len();
    }
    if total == 0 {
        return Err(Error::Corpus("evaluation set produced no masked positions".into()));
    }
    Ok((ce_sum / total as f64, hits as f64 / total as f64))
}
