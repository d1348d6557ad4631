//! Motion clips and the per-clip preprocessing utilities: mirroring,
//! temporal Gaussian smoothing and jitter/outlier screening.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One motion clip: `frames` rows of `channels` features, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    frames: usize,
    channels: usize,
    values: Vec<f32>,
    frame_rate_hz: f32,
}

impl MotionSequence {
    pub fn new(frames: usize, channels: usize, values: Vec<f32>, frame_rate_hz: f32) -> Result<Self> {
        if frames == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "motion must have at least one frame and one channel, got {frames}x{channels}"
            )));
        }
        if values.len() != frames * channels {
            return Err(Error::Shape(format!(
                "motion declared {frames}x{channels} but holds {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at frame {} channel {}",
                i / channels,
                i % channels
            )));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::Parameter(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        Ok(Self {
            frames,
            channels,
            values,
            frame_rate_hz,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>], frame_rate_hz: f32) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), channels, rows.concat(), frame_rate_hz)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.frame_rate_hz
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, frame: usize, channel: usize) -> f32 {
        self.values[frame * self.channels + channel]
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.channels..(frame + 1) * self.channels]
    }

    pub fn channel(&self, channel: usize) -> Vec<f32> {
        (0..self.frames).map(|t| self.get(t, channel)).collect()
    }

    fn with_values(&self, values: Vec<f32>) -> Self {
        Self {
            frames: self.frames,
            channels: self.channels,
            values,
            frame_rate_hz: self.frame_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_class: Option<usize>,
}

impl TextPrompt {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::Parameter("text prompt must be nonempty".into()));
        }
        Ok(Self {
            text,
            action_class: None,
        })
    }
}

/// Left/right mirroring as a channel permutation with per-channel sign flips:
/// `out[:, i] = sign[i] * in[:, permutation[i]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorMap {
    pub permutation: Vec<usize>,
    pub sign: Vec<i8>,
}

impl MirrorMap {
    pub fn new(permutation: Vec<usize>, sign: Vec<i8>) -> Result<Self> {
        let map = Self { permutation, sign };
        map.validate()?;
        Ok(map)
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            permutation: (0..channels).collect(),
            sign: vec![1; channels],
        }
    }

    pub fn arity(&self) -> usize {
        self.permutation.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.permutation.len();
        if self.sign.len() != n {
            return Err(Error::Shape(format!(
                "mirror map has {n} permutation entries but {} signs",
                self.sign.len()
            )));
        }
        let mut seen = vec![false; n];
        for &p in &self.permutation {
            if p >= n || seen[p] {
                return Err(Error::Shape(format!(
                    "mirror permutation is not a permutation of 0..{n}"
                )));
            }
            seen[p] = true;
        }
        if self.sign.iter().any(|s| *s != 1 && *s != -1) {
            return Err(Error::Shape("mirror signs must be +1 or -1".into()));
        }
        Ok(())
    }

    /// True when applying the map twice is the identity.
    pub fn is_involution(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| {
            self.permutation[p] == i && self.sign[i] * self.sign[p] == 1
        })
    }
}

pub fn mirror_motion(m: &MotionSequence, map: &MirrorMap) -> Result<MotionSequence> {
    map.validate()?;
    if map.arity() != m.channels() {
        return Err(Error::Shape(format!(
            "mirror map covers {} channels, motion has {}",
            map.arity(),
            m.channels()
        )));
    }
    let c = m.channels();
    let mut out = Vec::with_capacity(m.values.len());
    for t in 0..m.frames() {
        let row = m.row(t);
        for i in 0..c {
            out.push(f32::from(map.sign[i]) * row[map.permutation[i]]);
        }
    }
    Ok(m.with_values(out))
}

/// Normalized discrete Gaussian kernel with radius `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Reflect an out-of-range index back into `0..len` without repeating the edge sample.
fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let r = i.rem_euclid(period);
    (if r < len as i64 { r } else { period - r }) as usize
}

/// Smooth every channel along time with a truncated Gaussian, reflect-padded.
pub fn gaussian_denoise(m: &MotionSequence, sigma: f64) -> Result<MotionSequence> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (frames, channels) = (m.frames(), m.channels());
    let mut out = vec![0f32; frames * channels];
    for c in 0..channels {
        for t in 0..frames {
            let mut acc = 0f64;
            for (k, w) in kernel.iter().enumerate() {
                let src = reflect_index(t as i64 + k as i64 - radius, frames);
                acc += w * f64::from(m.get(src, c));
            }
            out[t * channels + c] = acc as f32;
        }
    }
    Ok(m.with_values(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterDecision {
    Keep,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterReport {
    pub decision: JitterDecision,
    /// Largest |x[t] - x[t-1]|, located at (frame t, channel).
    pub max_step: f32,
    pub max_step_at: Option<(usize, usize)>,
    pub max_abs: f32,
    pub max_abs_at: (usize, usize),
    pub velocity_exceeded: bool,
    pub outlier_exceeded: bool,
}

pub fn jitter_filter(m: &MotionSequence, vel_threshold: f32, outlier_threshold: f32) -> Result<JitterReport> {
    if !(vel_threshold > 0.0) || !(outlier_threshold > 0.0) {
        return Err(Error::Parameter(
            "jitter thresholds must be positive".into(),
        ));
    }
    let c = m.channels();
    let mut max_step = 0f32;
    let mut max_step_at = None;
    let mut max_abs = 0f32;
    let mut max_abs_at = (0, 0);
    for t in 0..m.frames() {
        for ch in 0..c {
            let v = m.get(t, ch);
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_abs_at = (t, ch);
            }
            if t > 0 {
                let step = (v - m.get(t - 1, ch)).abs();
                if step > max_step {
                    max_step = step;
                    max_step_at = Some((t, ch));
                }
            }
        }
    }
    let velocity_exceeded = max_step > vel_threshold;
    let outlier_exceeded = max_abs > outlier_threshold;
    Ok(JitterReport {
        decision: if velocity_exceeded || outlier_exceeded {
            JitterDecision::Discard
        } else {
            JitterDecision::Keep
        },
        max_step,
        max_step_at,
        max_abs,
        max_abs_at,
        velocity_exceeded,
        outlier_exceeded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn motion(rows: &[Vec<f32>]) -> MotionSequence {
        MotionSequence::from_rows(rows, 20.0).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_shapes_and_values() {
        assert!(MotionSequence::new(2, 2, vec![0.0; 3], 20.0).is_err());
        assert!(MotionSequence::new(0, 2, vec![], 20.0).is_err());
        assert!(MotionSequence::new(1, 1, vec![f32::NAN], 20.0).is_err());
        assert!(MotionSequence::new(1, 1, vec![0.0], 0.0).is_err());
    }

    #[test]
    fn mirror_swap_and_negate() {
        let m = motion(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let map = MirrorMap::new(vec![1, 0], vec![-1, 1]).unwrap();
        let out = mirror_motion(&m, &map).unwrap();
        assert_eq!(out.values(), &[-2.0, 1.0, -4.0, 3.0]);
        assert!(!map.is_involution());
    }

    #[test]
    fn mirror_identity_and_arity() {
        let m = motion(&[vec![1.0, 2.0, 3.0]]);
        assert_eq!(mirror_motion(&m, &MirrorMap::identity(3)).unwrap(), m);
        assert!(matches!(
            mirror_motion(&m, &MirrorMap::identity(2)),
            Err(Error::Shape(_))
        ));
        assert!(MirrorMap::new(vec![0, 0], vec![1, 1]).is_err());
    }

    fn involution_strategy() -> impl Strategy<Value = (MirrorMap, Vec<f32>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                Just(n),
                any::<u64>(),
                proptest::collection::vec(-100f32..100.0, n * 5),
            )
                .prop_map(|(n, seed, values)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut sign = vec![1i8; n];
                    let mut free: Vec<usize> = (0..n).collect();
                    while free.len() >= 2 && rng.random_bool(0.7) {
                        let a = free.swap_remove(rng.random_range(0..free.len()));
                        let b = free.swap_remove(rng.random_range(0..free.len()));
                        perm.swap(a, b);
                        let s = if rng.random_bool(0.5) { 1 } else { -1 };
                        sign[a] = s;
                        sign[b] = s;
                    }
                    for i in free {
                        sign[i] = if rng.random_bool(0.5) { 1 } else { -1 };
                    }
                    (MirrorMap::new(perm, sign).unwrap(), values)
                })
        })
    }

    proptest! {
        #[test]
        fn mirror_is_involution((map, values) in involution_strategy()) {
            prop_assert!(map.is_involution());
            let n = map.arity();
            let m = MotionSequence::new(5, n, values, 20.0).unwrap();
            let twice = mirror_motion(&mirror_motion(&m, &map).unwrap(), &map).unwrap();
            prop_assert_eq!(twice, m);
        }

        #[test]
        fn denoise_is_linear(
            x in proptest::collection::vec(-5f32..5.0, 40),
            y in proptest::collection::vec(-5f32..5.0, 40),
            a in -3f32..3.0,
            b in -3f32..3.0,
            sigma in 0.3f64..4.0,
        ) {
            let mx = MotionSequence::new(20, 2, x.clone(), 20.0).unwrap();
            let my = MotionSequence::new(20, 2, y.clone(), 20.0).unwrap();
            let combo: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let mc = MotionSequence::new(20, 2, combo, 20.0).unwrap();
            let dx = gaussian_denoise(&mx, sigma).unwrap();
            let dy = gaussian_denoise(&my, sigma).unwrap();
            let dc = gaussian_denoise(&mc, sigma).unwrap();
            for i in 0..40 {
                let expect = a * dx.values()[i] + b * dy.values()[i];
                prop_assert!((dc.values()[i] - expect).abs() < 1e-4 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(12, 5), 4);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn denoise_constant_is_unchanged() {
        let m = MotionSequence::new(30, 3, vec![2.5; 90], 20.0).unwrap();
        let out = gaussian_denoise(&m, 3.0).unwrap();
        for v in out.values() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn denoise_impulse_reproduces_kernel() {
        let sigma = 1.5;
        let len = 101;
        let mut values = vec![0f32; len];
        values[50] = 1.0;
        let m = MotionSequence::new(len, 1, values, 20.0).unwrap();
        let out = gaussian_denoise(&m, sigma).unwrap();
        let kernel = gaussian_kernel(sigma).unwrap();
        let r = kernel.len() / 2;
        for (k, w) in kernel.iter().enumerate() {
            assert!((f64::from(out.values()[50 - r + k]) - w).abs() < 1e-7);
        }
        assert_eq!(out.values()[50 - r - 1], 0.0);
    }

    #[test]
    fn denoise_reduces_white_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = MotionSequence::new(256, 1, values.clone(), 20.0).unwrap();
        let out = gaussian_denoise(&m, 2.0).unwrap();
        let var = |v: &[f32]| {
            let mean = v.iter().map(|x| f64::from(*x)).sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (f64::from(*x) - mean).powi(2)).sum::<f64>() / v.len() as f64
        };
        assert!(var(out.values()) < var(&values));
    }

    #[test]
    fn denoise_rejects_nonpositive_sigma() {
        let m = MotionSequence::new(3, 1, vec![0.0; 3], 20.0).unwrap();
        assert!(matches!(gaussian_denoise(&m, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_denoise(&m, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn jitter_constant_is_kept() {
        let m = MotionSequence::new(10, 2, vec![0.3; 20], 20.0).unwrap();
        let r = jitter_filter(&m, 0.01, 1.0).unwrap();
        assert_eq!(r.decision, JitterDecision::Keep);
        assert_eq!(r.max_step, 0.0);
    }

    #[test]
    fn jitter_spike_is_discarded_and_located() {
        let mut values = vec![0.1f32; 30];
        values[7 * 3 + 2] = 10.0 * 2.0;
        let m = MotionSequence::new(10, 3, values, 20.0).unwrap();
        let r = jitter_filter(&m, 100.0, 2.0).unwrap();
        assert_eq!(r.decision, JitterDecision::Discard);
        assert!(r.outlier_exceeded && !r.velocity_exceeded);
        assert_eq!(r.max_abs_at, (7, 2));
    }

    #[test]
    fn jitter_sinusoid_step_against_exact_value() {
        // 64 frames per cycle, amplitude 1: steps are 2 sin(pi/64) cos(2 pi (t + 1/2) / 64),
        // largest when the step midpoint sits half a frame from a zero crossing: sin(pi/32).
        let frames = 128;
        let values: Vec<f32> = (0..frames)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 64.0).sin() as f32)
            .collect();
        let exact_max_step = (std::f64::consts::PI / 32.0).sin();
        let m = MotionSequence::new(frames, 1, values, 20.0).unwrap();
        let r = jitter_filter(&m, 0.05, 10.0).unwrap();
        assert!((f64::from(r.max_step) - exact_max_step).abs() < 1e-5);
        let expected = if exact_max_step > 0.05 {
            JitterDecision::Discard
        } else {
            JitterDecision::Keep
        };
        assert_eq!(r.decision, expected);
        assert_eq!(r.decision, JitterDecision::Discard);
        let relaxed = jitter_filter(&m, 0.1, 10.0).unwrap();
        assert_eq!(relaxed.decision, JitterDecision::Keep);
    }

    #[test]
    fn jitter_rejects_nonpositive_thresholds() {
        let m = MotionSequence::new(2, 1, vec![0.0; 2], 20.0).unwrap();
        assert!(jitter_filter(&m, 0.0, 1.0).is_err());
        assert!(jitter_filter(&m, 1.0, -1.0).is_err());
    }
}
