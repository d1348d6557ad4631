//! Small layer library over candle tensors with explicit, seeded
//! initialization and a named parameter store.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters, ordered by name.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name, v.clone());
        Ok(v)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) as f32 * bound as f32)
            .collect();
        self.insert(name.to_string(), Tensor::from_vec(data, shape, &device())?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                // Box-Muller keeps the draw count fixed at two uniforms per value.
                let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.random();
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
            })
            .collect();
        self.insert(name.to_string(), Tensor::from_vec(data, shape, &device())?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert(name.to_string(), Tensor::from_vec(vec![value; n], shape, &device())?)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn named_tensors(&self) -> Result<BTreeMap<String, NamedTensor>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            let t = v.as_tensor();
            out.insert(
                name.clone(),
                NamedTensor {
                    shape: t.dims().to_vec(),
                    data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
                },
            );
        }
        Ok(out)
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, NamedTensor>) -> Result<()> {
        for (name, v) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape != v.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape,
                    v.dims()
                )));
            }
            v.set(&Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &device())?)?;
        }
        Ok(())
    }

    /// SHA-256 over names and raw values of the parameters matching `prefixes`
    /// (all parameters when empty).
    pub fn checksum(&self, prefixes: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[output, input], bound, rng)?,
            bias: ps.uniform(&format!("{name}.bias"), &[output], bound, rng)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor();
        let y = match x.rank() {
            2 => x.matmul(&w.t()?)?,
            _ => x.broadcast_matmul(&w.t()?)?,
        };
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

/// 1-D convolution over `(batch, channels, time)`.
#[derive(Clone)]
pub struct Conv1d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[output, input, kernel], bound, rng)?,
            bias: ps.uniform(&format!("{name}.bias"), &[output], bound, rng)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv1d_unfold(x, self.weight.as_tensor(), self.padding, self.stride)?;
        let out = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, out, 1))?)?)
    }

    pub fn zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }
}

/// Cross-correlation of `(B, C, L)` with `(O, C, K)` by gathering the K taps
/// into `(B, C*K, L_out)` and multiplying. The built-in batched convolution
/// returns wrong weight gradients for batches larger than one, so training
/// goes through this form.
pub fn conv1d_unfold(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    let (o, wc, k) = w.dims3()?;
    if wc != c {
        return Err(Error::Shape(format!("convolution expects {wc} input channels, got {c}")));
    }
    let padded = l + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!("sequence of {l} frames is shorter than kernel {k}")));
    }
    let l_out = (padded - k) / stride + 1;
    let xp = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?
    } else {
        x.clone()
    };
    let mut taps = Vec::with_capacity(k);
    for j in 0..k {
        let tap = if stride == 1 {
            xp.narrow(2, j, l_out)?
        } else {
            let idx: Vec<u32> = (0..l_out).map(|t| (j + stride * t) as u32).collect();
            xp.index_select(&Tensor::from_vec(idx, l_out, x.device())?, 2)?
        };
        taps.push(tap);
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, c * k, l_out))?;
    Ok(w.reshape((o, c * k))?.broadcast_matmul(&cols)?)
}

/// `x + conv1x1(relu(conv3(relu(x))))`.
#[derive(Clone)]
pub struct ResBlock {
    conv3: Conv1d,
    conv1: Conv1d,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv3: Conv1d::new(ps, &format!("{name}.conv3"), width, width, 3, 1, 1, rng)?,
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), width, width, 1, 1, 0, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv3.forward(&x.relu()?)?.relu()?;
        Ok((x + self.conv1.forward(&h)?)?)
    }
}

/// Nearest-neighbour upsampling along time, `(B, C, T) -> (B, C, factor * T)`.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    Ok(x.unsqueeze(3)?
        .broadcast_as((b, c, t, factor))?
        .reshape((b, c, t * factor))?)
}

/// Layer normalization over the last dimension built from differentiable primitives.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.gamma"), &[width], 1.0)?,
            beta: ps.constant(&format!("{name}.beta"), &[width], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            first: Linear::new(ps, &format!("{name}.0"), input, hidden, rng)?,
            second: Linear::new(ps, &format!("{name}.1"), hidden, output, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?.relu()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer over a fixed parameter subset.
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: &OptimizerConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    /// Backpropagate `loss` and update only this optimizer's parameters.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `(B, L, C)` batch tensor from equally shaped row-major clips.
pub fn stack_frames(clips: &[&[f32]], frames: usize, channels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(clips.len() * frames * channels);
    for c in clips {
        if c.len() != frames * channels {
            return Err(Error::Shape(format!(
                "clip holds {} values, expected {frames}x{channels}",
                c.len()
            )));
        }
        data.extend_from_slice(c);
    }
    Ok(Tensor::from_vec(data, (clips.len(), frames, channels), &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn wave(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * f).sin()).collect()
    }

    #[test]
    fn unfolded_conv_matches_builtin_forward() {
        for (k, pad, stride) in [(3, 1, 1), (4, 1, 2), (1, 0, 1), (3, 0, 2)] {
            let x = Tensor::from_vec(wave(3 * 5 * 11, 0.37), (3, 5, 11), &device()).unwrap();
            let w = Tensor::from_vec(wave(4 * 5 * k, 0.71), (4, 5, k), &device()).unwrap();
            let ours: Vec<f64> = conv1d_unfold(&x, &w, pad, stride).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let reference: Vec<f64> = x.conv1d(&w, pad, stride, 1, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(ours.len(), reference.len());
            for (a, b) in ours.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unfolded_conv_weight_gradient_matches_finite_differences() {
        for (k, pad, stride) in [(3, 1, 1), (4, 1, 2)] {
            let x = Tensor::from_vec(wave(3 * 4 * 10, 0.37), (3, 4, 10), &device()).unwrap();
            let ws = wave(2 * 4 * k, 0.53);
            let f = |w: &Tensor| conv1d_unfold(&x, w, pad, stride).unwrap().sqr().unwrap().sum_all().unwrap();
            let w = Var::from_tensor(&Tensor::from_vec(ws.clone(), (2, 4, k), &device()).unwrap()).unwrap();
            let g: Vec<f64> = f(w.as_tensor()).backward().unwrap().get(w.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for i in 0..ws.len() {
                let h = 1e-6;
                let at = |d: f64| {
                    let mut p = ws.clone();
                    p[i] += d;
                    f(&Tensor::from_vec(p, (2, 4, k), &device()).unwrap()).to_scalar::<f64>().unwrap()
                };
                let num = (at(h) - at(-h)) / (2.0 * h);
                assert!((num - g[i]).abs() <= 1e-6 * (1.0 + num.abs()), "k{k} w[{i}]: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Linear::new(&mut a, "l", 4, 3, &mut stream_rng(5, 0)).unwrap();
        Linear::new(&mut b, "l", 4, 3, &mut stream_rng(5, 0)).unwrap();
        assert_eq!(a.checksum(&[]).unwrap(), b.checksum(&[]).unwrap());
        let mut c = ParamStore::new();
        Linear::new(&mut c, "l", 4, 3, &mut stream_rng(6, 0)).unwrap();
        assert_ne!(a.checksum(&[]).unwrap(), c.checksum(&[]).unwrap());
    }

    #[test]
    fn load_restores_values_and_checks_shapes() {
        let mut a = ParamStore::new();
        Linear::new(&mut a, "l", 4, 3, &mut stream_rng(1, 0)).unwrap();
        let mut b = ParamStore::new();
        Linear::new(&mut b, "l", 4, 3, &mut stream_rng(2, 0)).unwrap();
        b.load(&a.named_tensors().unwrap()).unwrap();
        assert_eq!(a.checksum(&[]).unwrap(), b.checksum(&[]).unwrap());
        let mut c = ParamStore::new();
        Linear::new(&mut c, "l", 5, 3, &mut stream_rng(2, 0)).unwrap();
        assert!(c.load(&a.named_tensors().unwrap()).is_err());
    }

    #[test]
    fn upsample_repeats_each_step() {
        let x = Tensor::new(&[[[1f32, 2.0]]], &device()).unwrap();
        let y = upsample_nearest(&x, 3).unwrap();
        assert_eq!(y.to_vec3::<f32>().unwrap(), vec![vec![vec![1., 1., 1., 2., 2., 2.]]]);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1f32, 2.0, 3.0, 6.0]], &device()).unwrap();
        let y: Vec<f32> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f32 = y.iter().sum::<f32>() / 4.0;
        let var: f32 = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn conv_output_length() {
        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "c", 3, 5, 4, 2, 1, &mut stream_rng(0, 0)).unwrap();
        let x = Tensor::zeros((2, 3, 64), DType::F32, &device()).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 5, 32]);
    }
}
