//! Synthetic attribute-conditioned motion corpus with a closed-form
//! generator and an analytic attribute oracle.
//!
//! Channel layout: all channels except the designated offset channels are
//! grouped into consecutive quadrature pairs `(2p, 2p + 1)` carrying
//! `amp[age] * (sin θ, cos θ)` with
//! `θ(t) = 2π · cycles[class] · speed[age] · t / frames + φ[class][p] + 2π · phase / n_phases`.
//! Offset channels carry `offset · (-1)^gender`. Every value gets i.i.d.
//! Gaussian noise. Because each pair has squared norm `amp²` at every frame,
//! the pooled RMS of the pattern channels is independent of the time warp.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NewRecord};
use crate::error::{Error, Result};
use crate::motion::{MirrorMap, MotionSequence};
use crate::schema::{AttributeLabel, AttributeSchema};

const PHASE_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_channels: usize,
    pub frames: usize,
    pub age_amplitude: Vec<f64>,
    pub age_speed: Vec<f64>,
    pub gender_offset: f64,
    pub offset_channels: Vec<usize>,
    pub noise_std: f64,
    pub n_phases: usize,
    /// Cycles per clip at speed 1, one entry per class.
    pub class_cycles: Vec<f64>,
    pub frame_rate_hz: f32,
    pub seed: u64,
    pub templates: Vec<Vec<String>>,
}

const DEFAULT_TEMPLATES: [[&str; 3]; 8] = [
    ["a person walks forward", "someone is walking ahead slowly", "the person takes steps forward"],
    ["a person runs quickly", "someone is running in place", "the person jogs ahead"],
    ["a person jumps up", "someone jumps on the spot", "the person hops upward"],
    ["a person waves a hand", "someone is waving hello", "the person waves with one arm"],
    ["a person kicks forward", "someone kicks with a leg", "the person performs a kick"],
    ["a person squats down", "someone does a squat", "the person bends the knees low"],
    ["a person turns around", "someone spins in a circle", "the person rotates in place"],
    ["a person claps hands", "someone is clapping", "the person claps twice"],
];

pub fn default_templates(n_classes: usize) -> Vec<Vec<String>> {
    (0..n_classes)
        .map(|k| match DEFAULT_TEMPLATES.get(k) {
            Some(t) => t.iter().map(|s| s.to_string()).collect(),
            None => vec![
                format!("a person performs action{k}"),
                format!("someone does action{k}"),
                format!("the person repeats action{k}"),
            ],
        })
        .collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let n_classes = 8;
        Self {
            n_classes,
            n_channels: 16,
            frames: 64,
            age_amplitude: vec![1.0, 0.9, 0.75, 0.55],
            age_speed: vec![1.1, 1.0, 0.9, 0.7],
            gender_offset: 0.3,
            offset_channels: vec![14, 15],
            noise_std: 0.05,
            n_phases: 4,
            class_cycles: (0..n_classes).map(|k| 1.0 + 0.25 * k as f64).collect(),
            frame_rate_hz: 20.0,
            seed: 0,
            templates: default_templates(n_classes),
        }
    }
}

impl SynthSpec {
    pub fn schema(&self) -> AttributeSchema {
        let mut schema = AttributeSchema::default();
        schema.heads[0].cardinality = self.age_amplitude.len();
        if self.age_amplitude.len() != 4 {
            schema.heads[0].value_names.clear();
            schema.id = format!("age{}-gender2", self.age_amplitude.len());
        }
        schema
    }

    /// Quadrature pairs that carry the class pattern.
    pub fn pattern_pairs(&self) -> Vec<(usize, usize)> {
        let free: Vec<usize> = (0..self.n_channels)
            .filter(|c| !self.offset_channels.contains(c))
            .collect();
        free.chunks_exact(2).map(|p| (p[0], p[1])).collect()
    }

    /// Per-class, per-pair phases, fixed by the spec seed.
    pub fn class_phases(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(PHASE_STREAM);
        let pairs = self.pattern_pairs().len();
        (0..self.n_classes)
            .map(|_| (0..pairs).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_classes == 0 || self.frames == 0 || self.n_phases == 0 {
            return fail("n_classes, frames and n_phases must be positive".into());
        }
        if self.age_amplitude.len() < 2 || self.age_amplitude.len() != self.age_speed.len() {
            return fail("age_amplitude and age_speed need the same length >= 2".into());
        }
        if self.age_amplitude.iter().any(|a| !(*a > 0.0))
            || self.age_amplitude.windows(2).any(|w| !(w[0] > w[1]))
        {
            return fail("age_amplitude must be positive and strictly decreasing".into());
        }
        if self.age_speed.iter().any(|s| !(*s > 0.0)) {
            return fail("age_speed must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !self.gender_offset.is_finite() {
            return fail("noise_std must be >= 0 and gender_offset finite".into());
        }
        if self.offset_channels.iter().any(|c| *c >= self.n_channels) {
            return fail("offset channel outside the channel range".into());
        }
        let free = self.n_channels - self.offset_channels.len();
        if free < 2 || free % 2 != 0 {
            return fail(format!(
                "{} non-offset channels cannot be split into quadrature pairs",
                free
            ));
        }
        if self.class_cycles.len() != self.n_classes || self.class_cycles.iter().any(|c| !(*c > 0.0)) {
            return fail("class_cycles needs one positive entry per class".into());
        }
        if self.templates.len() != self.n_classes || self.templates.iter().any(|t| t.is_empty() || t.iter().any(String::is_empty)) {
            return fail("templates need a nonempty list of nonempty strings per class".into());
        }
        let min_dist = self.min_prototype_distance();
        let needed = 10.0 * self.noise_std * ((self.frames * self.n_channels) as f64).sqrt();
        if !(min_dist > needed) {
            return fail(format!(
                "class prototypes too close: min distance {min_dist:.4} <= {needed:.4}"
            ));
        }
        Ok(())
    }

    /// Minimum pairwise L2 distance between noise-free class prototypes at
    /// a fixed attribute assignment and phase.
    pub fn min_prototype_distance(&self) -> f64 {
        let label = AttributeLabel::age_gender(1.min(self.age_amplitude.len() - 1), 0);
        let phases = self.class_phases();
        let protos: Vec<Vec<f32>> = (0..self.n_classes)
            .map(|k| self.prototype_with(&phases, k, &label, 0))
            .collect();
        let mut best = f64::INFINITY;
        for i in 0..protos.len() {
            for j in i + 1..protos.len() {
                best = best.min(l2(&protos[i], &protos[j]));
            }
        }
        best
    }

    /// Noise-free motion values for `(class, attributes, phase)`.
    pub fn prototype(&self, class: usize, label: &AttributeLabel, phase: usize) -> Vec<f32> {
        self.prototype_with(&self.class_phases(), class, label, phase)
    }

    fn prototype_with(&self, phases: &[Vec<f64>], class: usize, label: &AttributeLabel, phase: usize) -> Vec<f32> {
        let (age, gender) = (label.value(0), label.value(1));
        let amp = self.age_amplitude[age];
        let rate = 2.0 * PI * self.class_cycles[class] * self.age_speed[age] / self.frames as f64;
        let shift = 2.0 * PI * (phase % self.n_phases) as f64 / self.n_phases as f64;
        let offset = if gender == 0 { self.gender_offset } else { -self.gender_offset };
        let c = self.n_channels;
        let mut out = vec![0f32; self.frames * c];
        for (p, &(a, b)) in self.pattern_pairs().iter().enumerate() {
            for t in 0..self.frames {
                let theta = rate * t as f64 + phases[class][p] + shift;
                out[t * c + a] = (amp * theta.sin()) as f32;
                out[t * c + b] = (amp * theta.cos()) as f32;
            }
        }
        for &ch in &self.offset_channels {
            for t in 0..self.frames {
                out[t * c + ch] = offset as f32;
            }
        }
        out
    }

    /// Noise-free prototype motion.
    pub fn prototype_motion(&self, class: usize, label: &AttributeLabel, phase: usize) -> Result<MotionSequence> {
        MotionSequence::new(
            self.frames,
            self.n_channels,
            self.prototype(class, label, phase),
            self.frame_rate_hz,
        )
    }

    /// Mirror map swapping pattern pairs end-to-end; an involution.
    pub fn mirror_map(&self) -> MirrorMap {
        let mut perm: Vec<usize> = (0..self.n_channels).collect();
        let pairs = self.pattern_pairs();
        let n = pairs.len();
        for (i, &(a, b)) in pairs.iter().enumerate() {
            let (ma, mb) = pairs[n - 1 - i];
            perm[a] = ma;
            perm[b] = mb;
        }
        MirrorMap {
            permutation: perm,
            sign: vec![1; self.n_channels],
        }
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Emit `n_per_cell` motions for every (class, age group, gender) cell.
///
/// Records are ordered class-major, then age, gender and repetition. The
/// repetition index selects the phase (`r mod n_phases`) and the template
/// (`r mod templates`). Noise for record `i` comes from its own rng stream,
/// so the output is reproducible independently of generation order.
pub fn generate_corpus(spec: &SynthSpec, n_per_cell: usize) -> Result<Corpus> {
    spec.validate()?;
    if n_per_cell == 0 {
        return Err(Error::Config("n_per_cell must be >= 1".into()));
    }
    let schema = spec.schema();
    let mut corpus = Corpus::empty(schema, spec.n_channels, spec.frame_rate_hz);
    corpus.manifest.mirror_map = spec.mirror_map();
    let phases = spec.class_phases();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut index = 0u64;
    for class in 0..spec.n_classes {
        for age in 0..spec.age_amplitude.len() {
            for gender in 0..2 {
                let label = AttributeLabel::age_gender(age, gender);
                for r in 0..n_per_cell {
                    let mut values = spec.prototype_with(&phases, class, &label, r % spec.n_phases);
                    if spec.noise_std > 0.0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                        rng.set_stream(index);
                        for v in &mut values {
                            *v += noise.sample(&mut rng) as f32;
                        }
                    }
                    let templates = &spec.templates[class];
                    corpus.push(NewRecord {
                        id: format!("c{class}-a{age}-g{gender}-{r}"),
                        motion: MotionSequence::new(spec.frames, spec.n_channels, values, spec.frame_rate_hz)?,
                        attributes: label.clone(),
                        text: templates[r % templates.len()].clone(),
                        action_class: Some(class),
                    })?;
                    index += 1;
                }
            }
        }
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub label: AttributeLabel,
    /// Margin between the second-best and best age distance.
    pub confidence: f64,
    pub amplitude: f64,
    /// Dominant frequency in cycles per clip.
    pub cycles: f64,
    pub offset_mean: f64,
}

/// Recover (age group, gender) from a raw motion generated under `spec`.
///
/// Amplitude comes from the pooled mean square of the pattern pairs (noise
/// power subtracted), frequency from the peak of the pairs' complex
/// spectrum on a fine grid, gender from the sign of the offset-channel mean
/// (non-negative means group 0). Ages are scored by squared normalized
/// distance in (amplitude, frequency); frequency is matched against the
/// nearest class under each candidate speed. Ties go to the older group,
/// so an all-zero motion maps to the last age group.
pub fn oracle_attributes(m: &MotionSequence, spec: &SynthSpec) -> OracleEstimate {
    let pairs = spec.pattern_pairs();
    let c = m.channels();
    let frames = m.frames();
    let mut ms = 0f64;
    for t in 0..frames {
        for &(a, b) in &pairs {
            ms += f64::from(m.get(t, a)).powi(2) + f64::from(m.get(t, b)).powi(2);
        }
    }
    ms /= (frames * pairs.len() * 2) as f64;
    let amplitude = (2.0 * (ms - spec.noise_std * spec.noise_std)).max(0.0).sqrt();

    let max_speed = spec.age_speed.iter().cloned().fold(0.0, f64::max);
    let max_cycles = spec.class_cycles.iter().cloned().fold(0.0, f64::max);
    let grid_top = 1.5 * max_cycles * max_speed + 1.0;
    let step = 0.01;
    let mut cycles = 0.0;
    let mut best_power = -1.0;
    let mut power_total = 0.0;
    let mut f = 0.0;
    while f <= grid_top {
        let mut power = 0.0;
        for &(a, b) in &pairs {
            let (mut re, mut im) = (0.0, 0.0);
            for t in 0..frames {
                // z = cos + i sin, the pair's analytic signal.
                let zr = f64::from(m.get(t, b));
                let zi = f64::from(m.get(t, a));
                let w = -2.0 * PI * f * t as f64 / spec.frames as f64;
                let (s, co) = w.sin_cos();
                re += zr * co - zi * s;
                im += zr * s + zi * co;
            }
            power += re * re + im * im;
        }
        power_total += power;
        if power > best_power {
            best_power = power;
            cycles = f;
        }
        f += step;
    }
    let tonal = power_total > 1e-12;

    let amp_scale = spec
        .age_amplitude
        .windows(2)
        .map(|w| (w[0] - w[1]).abs())
        .fold(f64::INFINITY, f64::min)
        / 2.0;
    let cyc_scale = spec
        .class_cycles
        .iter()
        .zip(spec.class_cycles.iter().skip(1))
        .map(|(a, b)| (a - b).abs())
        .fold(f64::INFINITY, f64::min)
        .min(1.0);
    let distances: Vec<f64> = spec
        .age_amplitude
        .iter()
        .zip(&spec.age_speed)
        .map(|(amp, speed)| {
            let da = (amplitude - amp) / amp_scale;
            let df = if tonal {
                spec.class_cycles
                    .iter()
                    .map(|k| (cycles - k * speed).abs())
                    .fold(f64::INFINITY, f64::min)
                    / cyc_scale
            } else {
                0.0
            };
            da * da + df * df
        })
        .collect();
    let mut order: Vec<usize> = (0..distances.len()).collect();
    // Stable sort on reversed index so ties resolve to the older group.
    order.reverse();
    order.sort_by(|a, b| distances[*a].total_cmp(&distances[*b]));
    let age = order[0];
    let confidence = distances[order[1]] - distances[order[0]];

    let offset_mean = if spec.offset_channels.is_empty() {
        0.0
    } else {
        let mut s = 0.0;
        for t in 0..frames {
            for &ch in &spec.offset_channels {
                s += f64::from(m.values()[t * c + ch]);
            }
        }
        s / (frames * spec.offset_channels.len()) as f64
    };
    let gender = if offset_mean >= 0.0 { 0 } else { 1 };
    OracleEstimate {
        label: AttributeLabel::age_gender(age, gender),
        confidence,
        amplitude,
        cycles,
        offset_mean,
    }
}

/// Classify the action of a raw motion by nearest noise-free prototype at
/// the given attributes, searching over classes and phase indices.
pub fn nearest_prototype_class(m: &MotionSequence, spec: &SynthSpec, label: &AttributeLabel) -> Result<usize> {
    if m.frames() != spec.frames || m.channels() != spec.n_channels {
        return Err(Error::Shape(format!(
            "motion {}x{} does not match synthetic layout {}x{}",
            m.frames(),
            m.channels(),
            spec.frames,
            spec.n_channels
        )));
    }
    let phases = spec.class_phases();
    let mut best = (f64::INFINITY, 0);
    for k in 0..spec.n_classes {
        for p in 0..spec.n_phases {
            let d = l2(m.values(), &spec.prototype_with(&phases, k, label, p));
            if d < best.0 {
                best = (d, k);
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_rms(values: &[f32], spec: &SynthSpec) -> f64 {
        // Independent of the implementation: direct sum over pattern pairs.
        let c = spec.n_channels;
        let mut s = 0.0;
        let mut n = 0;
        for t in 0..spec.frames {
            for ch in 0..c {
                if !spec.offset_channels.contains(&ch) {
                    s += f64::from(values[t * c + ch]).powi(2);
                    n += 1;
                }
            }
        }
        (s / n as f64).sqrt()
    }

    #[test]
    fn default_spec_is_valid_and_separated() {
        let spec = SynthSpec::default();
        spec.validate().unwrap();
        assert!(spec.min_prototype_distance() > 10.0 * 0.05 * (64.0f64 * 16.0).sqrt());
        assert_eq!(spec.pattern_pairs().len(), 7);
        assert!(spec.mirror_map().is_involution());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec::default();
        s.age_amplitude = vec![1.0, 1.0, 0.75, 0.55];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = SynthSpec::default();
        s.age_speed[2] = 0.0;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.noise_std = 5.0;
        assert!(s.validate().is_err());
        assert!(generate_corpus(&SynthSpec::default(), 0).is_err());
    }

    #[test]
    fn record_count_per_cell() {
        let c = generate_corpus(&SynthSpec::default(), 2).unwrap();
        assert_eq!(c.len(), 128);
    }

    #[test]
    fn noise_free_duplicates_are_identical() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        // n_phases = 4, so repetitions 0 and 4 share the phase index.
        let c = generate_corpus(&spec, 5).unwrap();
        assert_eq!(c.motion(0), c.motion(4));
        assert_ne!(c.motion(0), c.motion(1));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = SynthSpec::default();
        assert_eq!(generate_corpus(&spec, 2).unwrap(), generate_corpus(&spec, 2).unwrap());
        let other = SynthSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate_corpus(&spec, 1).unwrap(), generate_corpus(&other, 1).unwrap());
    }

    #[test]
    fn amplitude_ratio_between_extreme_ages() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        for class in 0..spec.n_classes {
            let young = spec.prototype(class, &AttributeLabel::age_gender(0, 1), 2);
            let old = spec.prototype(class, &AttributeLabel::age_gender(3, 1), 2);
            let ratio = pooled_rms(&young, &spec) / pooled_rms(&old, &spec);
            assert!((ratio - 1.0 / 0.55).abs() < 1e-6, "class {class}: {ratio}");
        }
    }

    #[test]
    fn oracle_inverts_noise_free_cells() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        for class in 0..spec.n_classes {
            for age in 0..4 {
                for gender in 0..2 {
                    let label = AttributeLabel::age_gender(age, gender);
                    for phase in 0..spec.n_phases {
                        let m = spec.prototype_motion(class, &label, phase).unwrap();
                        let est = oracle_attributes(&m, &spec);
                        assert_eq!(est.label, label, "class {class} phase {phase}");
                        assert!(est.confidence > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn oracle_zero_motion_tie_break() {
        let spec = SynthSpec::default();
        let m = MotionSequence::new(64, 16, vec![0.0; 64 * 16], 20.0).unwrap();
        let est = oracle_attributes(&m, &spec);
        assert_eq!(est.label, AttributeLabel::age_gender(3, 0));
    }

    #[test]
    fn oracle_accuracy_under_default_noise() {
        let spec = SynthSpec::default();
        let corpus = generate_corpus(&spec, 16).unwrap();
        let mut hits = [0usize; 2];
        for (r, m) in corpus.records().iter().zip(corpus.motions()) {
            let est = oracle_attributes(m, &spec);
            hits[0] += usize::from(est.label.value(0) == r.attributes.value(0));
            hits[1] += usize::from(est.label.value(1) == r.attributes.value(1));
        }
        let n = corpus.len() as f64;
        assert!(corpus.len() >= 1000);
        assert!(hits[0] as f64 / n >= 0.99, "age accuracy {}", hits[0] as f64 / n);
        assert!(hits[1] as f64 / n >= 0.99, "gender accuracy {}", hits[1] as f64 / n);
    }

    #[test]
    fn nearest_prototype_recovers_class_of_real_data() {
        let spec = SynthSpec::default();
        let corpus = generate_corpus(&spec, 2).unwrap();
        for (r, m) in corpus.records().iter().zip(corpus.motions()) {
            let k = nearest_prototype_class(m, &spec, &r.attributes).unwrap();
            assert_eq!(Some(k), r.action_class);
        }
    }
}
