//! The decoupling VQVAE: encoder f, single-codebook quantizer, attribute
//! embedder, attribute-conditioned decoder g(S, A), and its training loop.

pub mod counterfactual;
pub mod losses;
pub mod train;

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ConvClassifier;
use crate::error::{Error, Result};
use crate::nn::{device, upsample_nearest, Conv1d, Mlp, OptimizerConfig, ParamStore, ResBlock};
use crate::rng::stream_rng;
use crate::schema::{AttributeLabel, AttributeSchema};

pub use counterfactual::{policies, CounterfactualPolicy};
pub use losses::{attribute_entropy_loss, bottleneck_loss, loss_vqvae};
pub use train::{train_decoup_vqvae, LossRecord, TrainedVqvae};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_CLASSIFIER_INIT: u64 = 2;
pub const STREAM_BATCHES: u64 = 3;
pub const STREAM_COUNTERFACTUAL: u64 = 4;
pub const STREAM_RESEED: u64 = 5;
pub const STREAM_CODE_INIT: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoupVqvaeConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub beta_commit: f64,
    pub n_codes: usize,
    pub code_dim: usize,
    pub width: usize,
    pub attr_dim: usize,
    pub downsample_factor: usize,
    /// Frames per training window; longer clips are randomly cropped.
    pub window: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub classifier_optimizer: OptimizerConfig,
    pub dead_code_patience: usize,
    pub counterfactual_policy: String,
    pub residual_levels: usize,
    /// When false the decoder never sees attributes (the attribute-ignoring baseline).
    pub attribute_conditioning: bool,
    pub bottleneck_rows: BottleneckRows,
    /// Iterations trained on the VQVAE terms alone before alpha and lambda engage.
    pub decoupling_warmup: usize,
    /// Iterations over which alpha and lambda then rise linearly to their full values.
    pub decoupling_ramp: usize,
    /// Iterations at which both learning rates are multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub seed: u64,
}

impl Default for DecoupVqvaeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            lambda: 0.5,
            beta_commit: 0.25,
            n_codes: 512,
            code_dim: 128,
            width: 64,
            attr_dim: 32,
            downsample_factor: 4,
            window: 64,
            batch_size: 64,
            iterations: 2000,
            optimizer: OptimizerConfig::default(),
            classifier_optimizer: OptimizerConfig::default(),
            dead_code_patience: 256,
            counterfactual_policy: "exclude-original".into(),
            residual_levels: 1,
            attribute_conditioning: true,
            bottleneck_rows: BottleneckRows::Samples,
            decoupling_warmup: 0,
            decoupling_ramp: 0,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            seed: 0,
        }
    }
}

impl DecoupVqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.lambda >= 0.0 && self.beta_commit >= 0.0) {
            return Err(Error::Config("alpha, lambda and beta_commit must be non-negative".into()));
        }
        if self.n_codes == 0 {
            return Err(Error::Config("codebook must hold at least one code".into()));
        }
        if self.code_dim == 0 || self.width == 0 || self.attr_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample_factor {} is not a power of two",
                self.downsample_factor
            )));
        }
        if self.window == 0 || self.window % self.downsample_factor != 0 {
            return Err(Error::Config("window must be a positive multiple of downsample_factor".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::Config("lr_gamma must be positive".into()));
        }
        if self.residual_levels != 1 {
            return Err(Error::Config(format!(
                "residual_levels = {} requested; only single-level quantization is supported",
                self.residual_levels
            )));
        }
        if !policies().contains(&self.counterfactual_policy) {
            return Err(Error::Config(format!(
                "unknown counterfactual policy '{}', available: {}",
                self.counterfactual_policy,
                policies().names().join(", ")
            )));
        }
        Ok(())
    }

    /// Scale applied to alpha and lambda at `iteration`.
    /// Learning-rate multiplier in effect at `iteration`.
    pub fn lr_factor(&self, iteration: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|m| **m <= iteration).count();
        self.lr_gamma.powi(passed as i32)
    }

    pub fn decoupling_scale(&self, iteration: usize) -> f64 {
        if iteration < self.decoupling_warmup {
            return 0.0;
        }
        let into = iteration - self.decoupling_warmup;
        if self.decoupling_ramp == 0 || into >= self.decoupling_ramp {
            1.0
        } else {
            (into + 1) as f64 / self.decoupling_ramp as f64
        }
    }

    pub fn n_down(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

/// How `(B, T, D_c)` embeddings become the row-by-column matrix of the bottleneck loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottleneckRows {
    /// One row per sample: the time-averaged embedding, `B x D_c`.
    Samples,
    /// One row per sample and time step, `B*T x D_c`.
    TimeSteps,
}

impl BottleneckRows {
    pub fn arrange(self, s: &Tensor) -> Result<Tensor> {
        let (b, t, d) = s.dims3()?;
        Ok(match self {
            Self::Samples => s.mean(1)?,
            Self::TimeSteps => s.reshape((b * t, d))?,
        })
    }
}

/// Token indices for one clip plus the temporal factor they were produced at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTokenSequence {
    pub tokens: Vec<u32>,
    pub downsample_factor: usize,
}

#[derive(Clone)]
pub struct Encoder {
    conv_in: Conv1d,
    stages: Vec<(Conv1d, ResBlock)>,
    pub conv_out: Conv1d,
    factor: usize,
    channels: usize,
}

impl Encoder {
    fn new(ps: &mut ParamStore, cfg: &DecoupVqvaeConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = cfg.width;
        let mut stages = Vec::new();
        for i in 0..cfg.n_down().max(1) {
            let (k, s, p) = if i < cfg.n_down() { (4, 2, 1) } else { (3, 1, 1) };
            stages.push((
                Conv1d::new(ps, &format!("enc.down{i}"), w, w, k, s, p, rng)?,
                ResBlock::new(ps, &format!("enc.res{i}"), w, rng)?,
            ));
        }
        Ok(Self {
            conv_in: Conv1d::new(ps, "enc.conv_in", channels, w, 3, 1, 1, rng)?,
            stages,
            conv_out: Conv1d::new(ps, "enc.conv_out", w, cfg.code_dim, 3, 1, 1, rng)?,
            factor: cfg.downsample_factor,
            channels,
        })
    }

    /// `(B, L, C) -> (B, ceil(L / d), D_c)`; the tail is padded by repeating the last frame.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, l, c) = x.dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!("encoder expects {} channels, got {c}", self.channels)));
        }
        let t = l.div_ceil(self.factor);
        let x = if t * self.factor > l {
            x.pad_with_same(1, 0, t * self.factor - l)?
        } else {
            x.clone()
        };
        let mut h = self.conv_in.forward(&x.transpose(1, 2)?.contiguous()?)?.relu()?;
        for (down, res) in &self.stages {
            h = res.forward(&down.forward(&h)?.relu()?)?;
        }
        Ok(self.conv_out.forward(&h.relu()?)?.transpose(1, 2)?.contiguous()?)
    }
}

#[derive(Clone)]
pub struct Decoder {
    conv_in: Conv1d,
    stages: Vec<(ResBlock, Conv1d)>,
    conv_out: Conv1d,
    n_up: usize,
    input_width: usize,
}

impl Decoder {
    fn new(ps: &mut ParamStore, cfg: &DecoupVqvaeConfig, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = cfg.width;
        let input_width = cfg.code_dim + if cfg.attribute_conditioning { cfg.attr_dim } else { 0 };
        let mut stages = Vec::new();
        for i in 0..cfg.n_down().max(1) {
            stages.push((
                ResBlock::new(ps, &format!("dec.res{i}"), w, rng)?,
                Conv1d::new(ps, &format!("dec.up{i}"), w, w, 3, 1, 1, rng)?,
            ));
        }
        Ok(Self {
            conv_in: Conv1d::new(ps, "dec.conv_in", input_width, w, 3, 1, 1, rng)?,
            stages,
            conv_out: Conv1d::new(ps, "dec.conv_out", w, channels, 3, 1, 1, rng)?,
            n_up: cfg.n_down(),
            input_width,
        })
    }

    /// `(B, T, D_c)` plus optional `(B, D_a)` attribute embedding -> `(B, T * d, C)`.
    pub fn forward(&self, s: &Tensor, attr: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, _) = s.dims3()?;
        let z = match attr {
            Some(a) => {
                let da = a.dim(1)?;
                let a = a.unsqueeze(1)?.broadcast_as((b, t, da))?;
                Tensor::cat(&[s, &a], 2)?
            }
            None => s.clone(),
        };
        if z.dim(2)? != self.input_width {
            return Err(Error::Shape(format!(
                "decoder expects {} input features, got {}",
                self.input_width,
                z.dim(2)?
            )));
        }
        let mut h = self.conv_in.forward(&z.transpose(1, 2)?.contiguous()?)?.relu()?;
        for (i, (res, conv)) in self.stages.iter().enumerate() {
            h = res.forward(&h)?;
            if i < self.n_up {
                h = upsample_nearest(&h, 2)?;
            }
            h = conv.forward(&h)?.relu()?;
        }
        Ok(self.conv_out.forward(&h)?.transpose(1, 2)?.contiguous()?)
    }
}

/// Nearest code per row under L2, ties to the lowest index.
pub fn nearest_codes(codebook: &Tensor, rows: &Tensor) -> Result<Vec<u32>> {
    let (n, d) = codebook.dims2()?;
    if n == 0 {
        return Err(Error::Config("empty codebook".into()));
    }
    let (_, rd) = rows.dims2()?;
    if rd != d {
        return Err(Error::Shape(format!("rows have {rd} features, codes have {d}")));
    }
    let rows = rows.detach();
    let cb = codebook.detach();
    // ||e||^2 - 2 r.e; the ||r||^2 term is constant per row.
    let dist = cb
        .sqr()?
        .sum(1)?
        .unsqueeze(0)?
        .broadcast_sub(&(rows.matmul(&cb.t()?)? * 2.0)?)?;
    let dist: Vec<Vec<f32>> = dist.to_dtype(DType::F32)?.to_vec2()?;
    let exact: Vec<Vec<f32>> = rows.to_dtype(DType::F32)?.to_vec2()?;
    let codes: Vec<Vec<f32>> = cb.to_dtype(DType::F32)?.to_vec2()?;
    Ok(dist
        .iter()
        .zip(&exact)
        .map(|(row, r)| {
            let mut best = 0usize;
            for k in 1..n {
                if row[k] < row[best] {
                    best = k;
                }
            }
            // The expansion can misorder near-ties; settle candidates within rounding exactly.
            let tol = 1e-4 * (1.0 + row[best].abs());
            let mut best_exact = f64::INFINITY;
            let mut chosen = best;
            for k in 0..n {
                if row[k] <= row[best] + tol {
                    let dk: f64 = r.iter().zip(&codes[k]).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
                    if dk < best_exact {
                        best_exact = dk;
                        chosen = k;
                    }
                }
            }
            chosen as u32
        })
        .collect())
}

/// Quantize `rows` `(N, D_c)` against `codebook`; returns tokens and the selected codes.
pub fn quantize_rows(codebook: &Tensor, rows: &Tensor) -> Result<(Vec<u32>, Tensor)> {
    let tokens = nearest_codes(codebook, rows)?;
    let idx = Tensor::from_vec(tokens.clone(), tokens.len(), rows.device())?;
    Ok((tokens, codebook.index_select(&idx, 0)?))
}

pub struct Quantized {
    /// `(B, T)` token indices.
    pub tokens: Vec<Vec<u32>>,
    /// `(B, T, D_c)` selected codes, differentiable with respect to the codebook.
    pub codes: Tensor,
}

impl Quantized {
    /// Straight-through value: forward equals the codes, backward is identity into `s`.
    pub fn straight_through(&self, s: &Tensor) -> Result<Tensor> {
        Ok((s + (&self.codes - s)?.detach())?)
    }
}

pub struct DecoupVqvae {
    pub config: DecoupVqvaeConfig,
    pub schema: AttributeSchema,
    pub channels: usize,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub attr_embedder: Option<Mlp>,
    pub codebook: Var,
    /// Proxy attribute classifier h(A|S).
    pub classifier: ConvClassifier,
}

impl DecoupVqvae {
    pub fn new(cfg: &DecoupVqvaeConfig, schema: &AttributeSchema, channels: usize) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let encoder = Encoder::new(&mut ps, cfg, channels, &mut rng)?;
        let decoder = Decoder::new(&mut ps, cfg, channels, &mut rng)?;
        let attr_embedder = if cfg.attribute_conditioning {
            Some(Mlp::new(&mut ps, "attr.mlp", schema.one_hot_width(), cfg.attr_dim, cfg.attr_dim, &mut rng)?)
        } else {
            None
        };
        let bound = 1.0 / cfg.n_codes as f64;
        let codebook = ps.uniform("codebook", &[cfg.n_codes, cfg.code_dim], bound, &mut rng)?;
        let mut crng = stream_rng(cfg.seed, STREAM_CLASSIFIER_INIT);
        let classifier = ConvClassifier::new(&mut ps, "h", cfg.code_dim, cfg.width, 0, schema.joint_size(), &mut crng)?;
        Ok(Self {
            config: cfg.clone(),
            schema: schema.clone(),
            channels,
            params: ps,
            encoder,
            decoder,
            attr_embedder,
            codebook,
            classifier,
        })
    }

    /// Parameter name prefixes updated by the main objective.
    pub const MAIN_PREFIXES: [&'static str; 4] = ["enc.", "dec.", "attr.", "codebook"];
    pub const CLASSIFIER_PREFIXES: [&'static str; 1] = ["h."];

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn quantize(&self, s: &Tensor) -> Result<Quantized> {
        let (b, t, d) = s.dims3()?;
        let (flat, codes) = quantize_rows(self.codebook.as_tensor(), &s.reshape((b * t, d))?)?;
        Ok(Quantized {
            tokens: flat.chunks(t).map(|c| c.to_vec()).collect(),
            codes: codes.reshape((b, t, d))?,
        })
    }

    /// Codebook rows for token sequences of equal length, `(B, T, D_c)`.
    pub fn lookup(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        let t = tokens.first().map_or(0, |r| r.len());
        if tokens.iter().any(|r| r.len() != t) {
            return Err(Error::Shape("token sequences in a batch must share one length".into()));
        }
        let flat: Vec<u32> = tokens.concat();
        if let Some(bad) = flat.iter().find(|k| **k as usize >= self.config.n_codes) {
            return Err(Error::Corpus(format!("token {bad} outside codebook of {}", self.config.n_codes)));
        }
        let idx = Tensor::from_vec(flat, tokens.len() * t, &device())?;
        Ok(self
            .codebook
            .as_tensor()
            .index_select(&idx, 0)?
            .reshape((tokens.len(), t, self.config.code_dim))?)
    }

    /// `(B, D_a)` attribute embeddings, or `None` for an attribute-ignoring decoder.
    pub fn attribute_embedding(&self, labels: &[AttributeLabel]) -> Result<Option<Tensor>> {
        let Some(mlp) = &self.attr_embedder else {
            for l in labels {
                self.schema.check(l)?;
            }
            return Ok(None);
        };
        let width = self.schema.one_hot_width();
        let mut data = Vec::with_capacity(labels.len() * width);
        for l in labels {
            data.extend(self.schema.one_hot(l)?);
        }
        let one_hot = Tensor::from_vec(data, (labels.len(), width), &device())?;
        Ok(Some(mlp.forward(&one_hot)?))
    }

    pub fn decode(&self, s: &Tensor, labels: &[AttributeLabel]) -> Result<Tensor> {
        let b = s.dim(0)?;
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
        }
        let attr = self.attribute_embedding(labels)?;
        self.decoder.forward(s, attr.as_ref())
    }

    /// Exactly `decode(s, a_minus)`.
    pub fn counterfactual_motion(&self, s: &Tensor, a_minus: &[AttributeLabel]) -> Result<Tensor> {
        self.decode(s, a_minus)
    }

    /// Encode, quantize and decode with the given attributes; output cropped to the input length.
    pub fn reconstruct(&self, x: &Tensor, labels: &[AttributeLabel]) -> Result<Tensor> {
        let l = x.dim(1)?;
        let q = self.quantize(&self.encode(x)?)?;
        Ok(self.decode(&q.codes, labels)?.narrow(1, 0, l)?)
    }

    pub fn tokenize(&self, x: &Tensor) -> Result<Vec<SemanticTokenSequence>> {
        let q = self.quantize(&self.encode(x)?)?;
        Ok(q.tokens
            .into_iter()
            .map(|tokens| SemanticTokenSequence {
                tokens,
                downsample_factor: self.config.downsample_factor,
            })
            .collect())
    }

    /// Proxy classifier probabilities for semantic embeddings `(B, T, D_c)`.
    pub fn classify(&self, s: &Tensor) -> Result<Tensor> {
        self.classifier.classify(s)
    }
}
