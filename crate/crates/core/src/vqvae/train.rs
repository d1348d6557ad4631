//! Alternating optimization: f, g, codebook and attribute embedder on the
//! overall objective, then the proxy classifier h on cross-entropy.

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{attribute_entropy_from_logits, bottleneck_loss, loss_vqvae, overall_loss};
use super::{policies, DecoupVqvae, DecoupVqvaeConfig};
use super::{STREAM_BATCHES, STREAM_CODE_INIT, STREAM_COUNTERFACTUAL, STREAM_RESEED};
use crate::checkpoint::Checkpoint;
use crate::classifier::update_classifier;
use crate::corpus::{ChannelStats, Corpus, Split};
use crate::error::{Error, Result};
use crate::nn::{device, Adam};
use crate::rng::{stream_rng, RngState};
use crate::schema::{AttributeLabel, AttributeSchema};

pub const CHECKPOINT_KIND: &str = "decoup-vqvae";

/// Loss values of one iteration, exactly as produced by the training graph (f32).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// Effective weights used at this iteration.
    pub alpha: f64,
    pub lambda: f64,
    pub rec: f32,
    pub embed: f32,
    pub commit: f32,
    pub vqvae: f32,
    pub entropy: f32,
    pub bottleneck: f32,
    pub total: f32,
    pub classifier_ce: f32,
    pub reseeded_codes: usize,
    /// Distinct codes selected in this batch.
    pub codes_in_use: usize,
}

impl LossRecord {
    /// Recompute the combined loss from the logged terms in graph order.
    pub fn recombine(&self) -> (f32, f32) {
        let vq = self.rec + self.embed + self.commit;
        let mut total = vq;
        if self.alpha != 0.0 {
            total += self.entropy * self.alpha as f32;
        }
        if self.lambda != 0.0 {
            total += self.bottleneck * self.lambda as f32;
        }
        (vq, total)
    }
}

/// Epoch-shuffled batches of fixed-length windows from the training split.
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    window: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(corpus: &Corpus, window: usize, rng: ChaCha8Rng) -> Result<Self> {
        let pool: Vec<usize> = corpus
            .split_indices(Split::Train)
            .into_iter()
            .filter(|i| corpus.records()[*i].length >= window)
            .collect();
        if pool.is_empty() {
            return Err(Error::Corpus(format!("no training record has at least {window} frames")));
        }
        Ok(Self {
            pool,
            order: Vec::new(),
            cursor: 0,
            window,
            rng,
        })
    }

    /// Next batch as `(B, window, C)` plus labels.
    pub fn next(&mut self, corpus: &Corpus, batch: usize) -> Result<(Tensor, Vec<AttributeLabel>)> {
        let (x, idx) = self.next_indexed(corpus, batch)?;
        Ok((x, idx.iter().map(|i| corpus.records()[*i].attributes.clone()).collect()))
    }

    /// Like `next`, returning the record indices instead of labels.
    pub fn next_indexed(&mut self, corpus: &Corpus, batch: usize) -> Result<(Tensor, Vec<usize>)> {
        let c = corpus.manifest.channels;
        let mut data = Vec::with_capacity(batch * self.window * c);
        let mut picked = Vec::with_capacity(batch);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            let m = corpus.motion(i);
            let start = if m.frames() > self.window {
                self.rng.random_range(0..=m.frames() - self.window)
            } else {
                0
            };
            data.extend_from_slice(&m.values()[start * c..(start + self.window) * c]);
            picked.push(i);
        }
        Ok((Tensor::from_vec(data, (batch, self.window, c), &device())?, picked))
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqvaeMetadata {
    pub config: DecoupVqvaeConfig,
    pub schema: AttributeSchema,
    pub channels: usize,
    pub channel_stats: Option<ChannelStats>,
    pub frame_rate_hz: f32,
    pub iterations_done: usize,
    pub batch_rng: RngState,
    pub counterfactual_rng: RngState,
    pub reseed_rng: RngState,
    pub code_last_used: Vec<usize>,
    pub history: Vec<LossRecord>,
}

pub struct TrainedVqvae {
    pub model: DecoupVqvae,
    pub meta: VqvaeMetadata,
}

impl TrainedVqvae {
    pub fn history(&self) -> &[LossRecord] {
        &self.meta.history
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CHECKPOINT_KIND,
            self.model.schema.hash(),
            config_hash.to_string(),
            serde_json::to_value(&self.meta).map_err(|e| Error::Config(e.to_string()))?,
        );
        ckpt.tensors = self.model.params.named_tensors()?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let meta: VqvaeMetadata = ckpt.metadata()?;
        if meta.schema.hash() != ckpt.meta.schema_hash {
            return Err(Error::Schema("checkpoint schema hash does not match its schema".into()));
        }
        let model = DecoupVqvae::new(&meta.config, &meta.schema, meta.channels)?;
        model.params.load(&ckpt.tensors)?;
        Ok(Self { model, meta })
    }
}

fn finite(t: &Tensor, term: &'static str, iteration: usize) -> Result<f32> {
    let v = t.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite { term, iteration });
    }
    Ok(v)
}

/// Train with the alternating schedule; `iterations == 0` returns the initialization.
pub fn train_decoup_vqvae(cfg: &DecoupVqvaeConfig, corpus: &Corpus) -> Result<TrainedVqvae> {
    cfg.validate()?;
    corpus.validate()?;
    let schema = corpus.schema().clone();
    let model = DecoupVqvae::new(cfg, &schema, corpus.manifest.channels)?;
    let policy = policies().build(&cfg.counterfactual_policy, &())?;
    let mut sampler = BatchSampler::new(corpus, cfg.window, stream_rng(cfg.seed, STREAM_BATCHES))?;
    let mut cf_rng = stream_rng(cfg.seed, STREAM_COUNTERFACTUAL);
    let mut reseed_rng = stream_rng(cfg.seed, STREAM_RESEED);
    let mut opt = Adam::new(model.params.vars_with_prefix(&DecoupVqvae::MAIN_PREFIXES), &cfg.optimizer)?;
    let mut opt_h = Adam::new(
        model.params.vars_with_prefix(&DecoupVqvae::CLASSIFIER_PREFIXES),
        &cfg.classifier_optimizer,
    )?;
    if cfg.iterations > 0 {
        seed_codebook(&model, corpus, cfg)?;
    }
    let mut last_used = vec![0usize; cfg.n_codes];
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        if cfg.lr_milestones.contains(&it) {
            opt.set_learning_rate(cfg.optimizer.learning_rate * cfg.lr_factor(it));
            opt_h.set_learning_rate(cfg.classifier_optimizer.learning_rate * cfg.lr_factor(it));
        }
        let (x, labels) = sampler.next(corpus, cfg.batch_size)?;
        let s = model.encode(&x)?;
        let q = model.quantize(&s)?;
        let s_st = q.straight_through(&s)?;
        let x_hat = model.decode(&s_st, &labels)?;
        let vq = loss_vqvae(&x, &x_hat, &s, &q.codes, cfg.beta_commit)?;
        let scale = cfg.decoupling_scale(it);
        let (alpha, lambda) = (cfg.alpha * scale, cfg.lambda * scale);

        let entropy = if alpha != 0.0 {
            Some(attribute_entropy_from_logits(&model.classifier.logits(&s)?)?)
        } else {
            None
        };
        let bottleneck = if lambda != 0.0 {
            let mut a_minus = Vec::with_capacity(labels.len());
            for l in &labels {
                a_minus.push(policy.sample(&schema, l, &mut cf_rng)?);
            }
            let x_minus = model.counterfactual_motion(&s_st, &a_minus)?;
            let s_minus = model.encode(&x_minus)?;
            let rows = cfg.bottleneck_rows;
            Some(bottleneck_loss(&rows.arrange(&s)?, &rows.arrange(&s_minus)?)?)
        } else {
            None
        };
        let total = overall_loss(&vq.total, entropy.as_ref(), alpha, bottleneck.as_ref(), lambda)?;

        let mut rec = LossRecord {
            iteration: it,
            alpha,
            lambda,
            rec: finite(&vq.rec, "reconstruction", it)?,
            embed: finite(&vq.embed, "embed", it)?,
            commit: finite(&vq.commit, "commit", it)?,
            vqvae: finite(&vq.total, "vqvae", it)?,
            entropy: match &entropy {
                Some(e) => finite(e, "entropy", it)?,
                None => 0.0,
            },
            bottleneck: match &bottleneck {
                Some(b) => finite(b, "bottleneck", it)?,
                None => 0.0,
            },
            total: finite(&total, "overall", it)?,
            classifier_ce: 0.0,
            reseeded_codes: 0,
            codes_in_use: {
                let mut seen: Vec<u32> = q.tokens.concat();
                seen.sort_unstable();
                seen.dedup();
                seen.len()
            },
        };
        opt.backward_step(&total)?;

        if cfg.alpha != 0.0 {
            let joint: Vec<usize> = labels.iter().map(|l| schema.joint_index(l)).collect::<Result<_>>()?;
            let ce = update_classifier(&model.classifier, &mut opt_h, &s, &joint)
                .map_err(|_| Error::NonFinite { term: "classifier cross-entropy", iteration: it })?;
            rec.classifier_ce = ce as f32;
        }

        for row in &q.tokens {
            for k in row {
                last_used[*k as usize] = it + 1;
            }
        }
        rec.reseeded_codes = reseed_dead_codes(&model, &s, &mut last_used, it + 1, cfg.dead_code_patience, &mut reseed_rng)?;

        if it % 100 == 0 || it + 1 == cfg.iterations {
            log::info!(
                "vqvae iter {it}: rec {:.4} embed {:.4} commit {:.4} ent {:.4} bn {:.4} total {:.4}",
                rec.rec, rec.embed, rec.commit, rec.entropy, rec.bottleneck, rec.total
            );
        }
        history.push(rec);
    }

    let meta = VqvaeMetadata {
        config: cfg.clone(),
        schema,
        channels: corpus.manifest.channels,
        channel_stats: corpus.manifest.channel_stats.clone(),
        frame_rate_hz: corpus.manifest.frame_rate_hz,
        iterations_done: cfg.iterations,
        batch_rng: RngState::capture(sampler.rng()),
        counterfactual_rng: RngState::capture(&cf_rng),
        reseed_rng: RngState::capture(&reseed_rng),
        code_last_used: last_used,
        history,
    };
    Ok(TrainedVqvae { model, meta })
}

/// Set the codebook to distinct encoder outputs of randomly drawn training windows.
pub fn seed_codebook(model: &DecoupVqvae, corpus: &Corpus, cfg: &DecoupVqvaeConfig) -> Result<()> {
    let mut sampler = BatchSampler::new(corpus, cfg.window, stream_rng(cfg.seed, STREAM_CODE_INIT))?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    while rows.len() < cfg.n_codes {
        let (x, _) = sampler.next(corpus, cfg.batch_size)?;
        let s = model.encode(&x)?;
        let (b, t, d) = s.dims3()?;
        let batch: Vec<Vec<f32>> = s.reshape((b * t, d))?.to_vec2()?;
        rows.extend(batch);
    }
    let mut rng = stream_rng(cfg.seed, STREAM_CODE_INIT + 100);
    rows.shuffle(&mut rng);
    rows.truncate(cfg.n_codes);
    let flat: Vec<f32> = rows.concat();
    model
        .codebook
        .set(&Tensor::from_vec(flat, (cfg.n_codes, cfg.code_dim), &device())?)?;
    Ok(())
}

/// Replace codes unused for `patience` iterations with distinct encoder outputs from this batch.
fn reseed_dead_codes(
    model: &DecoupVqvae,
    s: &Tensor,
    last_used: &mut [usize],
    now: usize,
    patience: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if patience == 0 {
        return Ok(0);
    }
    let dead: Vec<usize> = (0..last_used.len()).filter(|k| now - last_used[*k] >= patience).collect();
    if dead.is_empty() {
        return Ok(0);
    }
    let (b, t, d) = s.dims3()?;
    let rows: Vec<Vec<f32>> = s.detach().reshape((b * t, d))?.to_vec2()?;
    let mut picks: Vec<usize> = (0..rows.len()).collect();
    picks.shuffle(rng);
    let mut cb: Vec<Vec<f32>> = model.codebook.as_tensor().to_vec2()?;
    for (k, r) in dead.iter().zip(picks.iter().cycle()) {
        cb[*k] = rows[*r].clone();
        last_used[*k] = now;
    }
    let flat: Vec<f32> = cb.concat();
    model
        .codebook
        .set(&Tensor::from_vec(flat, (last_used.len(), d), &device())?)?;
    Ok(dead.len())
}
