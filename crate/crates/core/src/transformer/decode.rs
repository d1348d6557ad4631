//! Iterative parallel decoding and the text-to-motion pipeline.

use candle_core::{DType, Tensor, D};
use candle_nn::ops::softmax;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::text::with_attribute_phrase;
use super::{gamma, TrainedTransformer};
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::registry::Registry;
use crate::schema::AttributeLabel;
use crate::vqvae::{SemanticTokenSequence, TrainedVqvae};

/// Picks one token from a probability row; returns the token and its confidence.
pub trait TokenSampler: Send + Sync {
    fn pick(&self, probs: &[f32], rng: &mut ChaCha8Rng) -> (u32, f32);
}

pub struct Argmax;

impl TokenSampler for Argmax {
    fn pick(&self, probs: &[f32], _rng: &mut ChaCha8Rng) -> (u32, f32) {
        let k = crate::classifier::argmax(probs);
        (k as u32, probs[k])
    }
}

/// Categorical draw by inverse CDF.
pub struct Categorical;

impl TokenSampler for Categorical {
    fn pick(&self, probs: &[f32], rng: &mut ChaCha8Rng) -> (u32, f32) {
        let total: f64 = probs.iter().map(|p| f64::from(*p)).sum();
        let mut u = rng.random::<f64>() * total;
        for (k, p) in probs.iter().enumerate() {
            u -= f64::from(*p);
            if u < 0.0 {
                return (k as u32, *p);
            }
        }
        let k = probs.len() - 1;
        (k as u32, probs[k])
    }
}

type Boxed = Box<dyn TokenSampler>;

pub fn samplers() -> Registry<dyn TokenSampler> {
    Registry::new("token sampler")
        .register("argmax", "most probable token", |_| -> Result<Boxed> { Ok(Box::new(Argmax)) })
        .register("sample", "categorical draw at the configured temperature", |_| -> Result<Boxed> {
            Ok(Box::new(Categorical))
        })
}

/// Number of committed positions after decode iteration `t` of `t_dec`.
pub fn committed_after(t: usize, t_dec: usize, len: usize) -> usize {
    if t >= t_dec {
        return len;
    }
    let keep = ((1.0 - gamma(t as f64 / t_dec as f64)) * len as f64).round() as usize;
    keep.min(len)
}

/// Start fully masked; each iteration predicts every open position, commits the
/// most confident ones up to the schedule, and leaves the rest masked.
pub fn generate_tokens(
    tf: &TrainedTransformer,
    text: &Tensor,
    length: usize,
    t_dec: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SemanticTokenSequence> {
    if t_dec == 0 {
        return Err(Error::Config("decode iterations must be at least 1".into()));
    }
    if length == 0 || length > tf.model.config.max_tokens {
        return Err(Error::Parameter(format!(
            "token length {length} outside [1, {}]",
            tf.model.config.max_tokens
        )));
    }
    let cfg = &tf.model.config;
    let sampler = samplers().build(&cfg.sampler, &())?;
    let mask = tf.model.mask_id();
    let mut tokens = vec![mask; length];
    let mut committed = vec![false; length];
    let mut n_committed = 0;
    for t in 1..=t_dec {
        let logits = tf.model.logits(text, &[tokens.clone()])?.squeeze(0)?;
        let probs = softmax(&(logits / cfg.temperature)?, D::Minus1)?;
        let rows: Vec<Vec<f32>> = probs.to_dtype(DType::F32)?.to_vec2()?;
        let mut candidates: Vec<(usize, u32, f32)> = Vec::new();
        for (p, row) in rows.iter().enumerate() {
            if !committed[p] {
                let (k, conf) = sampler.pick(row, rng);
                candidates.push((p, k, conf));
            }
        }
        // Highest confidence first; earlier position wins ties.
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let target = committed_after(t, t_dec, length).max(n_committed);
        for (p, k, _) in candidates.into_iter().take(target - n_committed) {
            tokens[p] = k;
            committed[p] = true;
        }
        n_committed = target;
    }
    Ok(SemanticTokenSequence {
        tokens,
        downsample_factor: tf.meta.downsample_factor,
    })
}

/// Text + attributes to a denormalized motion of `length_tokens * d` frames.
pub fn generate_motion(
    text: &str,
    attributes: &AttributeLabel,
    vqvae: &TrainedVqvae,
    tf: &TrainedTransformer,
    length_tokens: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MotionSequence> {
    let schema = &vqvae.model.schema;
    if tf.meta.schema_hash != schema.hash() {
        return Err(Error::Schema("transformer and VQVAE checkpoints were built under different schemas".into()));
    }
    if tf.meta.n_codes != vqvae.model.config.n_codes {
        return Err(Error::Schema("transformer vocabulary does not match the VQVAE codebook".into()));
    }
    schema.check(attributes)?;
    let prompt = if tf.model.config.attr_in_text.at_test() {
        with_attribute_phrase(text, schema, attributes)?
    } else {
        text.to_string()
    };
    let tv = tf.model.encode_text(&[prompt.as_str()])?;
    let seq = generate_tokens(tf, &tv, length_tokens, tf.model.config.decode_iterations, rng)?;
    decode_tokens(vqvae, &seq.tokens, attributes)
}

/// Codebook lookup, decode with `attributes`, denormalize with the stored corpus statistics.
pub fn decode_tokens(vqvae: &TrainedVqvae, tokens: &[u32], attributes: &AttributeLabel) -> Result<MotionSequence> {
    let s = vqvae.model.lookup(&[tokens.to_vec()])?;
    let x = vqvae.model.decode(&s, std::slice::from_ref(attributes))?.squeeze(0)?;
    let (frames, channels) = x.dims2()?;
    let m = MotionSequence::new(frames, channels, x.flatten_all()?.to_vec1()?, vqvae.meta.frame_rate_hz)?;
    match &vqvae.meta.channel_stats {
        Some(stats) => stats.denormalize(&m),
        None => Ok(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_cumulative_and_complete() {
        for t_dec in 1..=12 {
            for len in [1, 5, 16, 49] {
                let mut prev = 0;
                for t in 1..=t_dec {
                    let c = committed_after(t, t_dec, len);
                    assert!(c >= prev);
                    prev = c;
                }
                assert_eq!(prev, len);
            }
        }
        assert_eq!(committed_after(1, 1, 16), 16);
    }

    #[test]
    fn samplers_pick_valid_tokens() {
        let mut rng = crate::rng::stream_rng(0, 0);
        let p = [0.1f32, 0.7, 0.2];
        assert_eq!(Argmax.pick(&p, &mut rng), (1, 0.7));
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[Categorical.pick(&p, &mut rng).0 as usize] += 1;
        }
        for (c, q) in counts.iter().zip(p) {
            let sigma = (10_000.0 * f64::from(q) * (1.0 - f64::from(q))).sqrt();
            assert!((*c as f64 - 10_000.0 * f64::from(q)).abs() < 4.0 * sigma);
        }
    }
}
