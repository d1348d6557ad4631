//! Counterfactual attribute policies: how A- is drawn from A.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::schema::{AttributeLabel, AttributeSchema};

pub trait CounterfactualPolicy: Send + Sync {
    fn sample(&self, schema: &AttributeSchema, label: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<AttributeLabel>;
}

/// Uniform over every joint class except the original one.
pub struct ExcludeOriginal;

impl CounterfactualPolicy for ExcludeOriginal {
    fn sample(&self, schema: &AttributeSchema, label: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<AttributeLabel> {
        let n = schema.joint_size();
        if n < 2 {
            return Err(Error::Policy("attribute space has a single class; no counterfactual exists".into()));
        }
        let original = schema.joint_index(label)?;
        let mut k = rng.random_range(0..n - 1);
        if k >= original {
            k += 1;
        }
        schema.from_joint(k)
    }
}

/// Uniform over every joint class, the original included.
pub struct UniformJoint;

impl CounterfactualPolicy for UniformJoint {
    fn sample(&self, schema: &AttributeSchema, label: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<AttributeLabel> {
        schema.check(label)?;
        schema.from_joint(rng.random_range(0..schema.joint_size()))
    }
}

/// Change exactly one head, chosen uniformly among heads with more than one value.
pub struct ResampleOneHead;

impl CounterfactualPolicy for ResampleOneHead {
    fn sample(&self, schema: &AttributeSchema, label: &AttributeLabel, rng: &mut ChaCha8Rng) -> Result<AttributeLabel> {
        schema.check(label)?;
        let free: Vec<usize> = (0..schema.heads.len())
            .filter(|h| schema.heads[*h].cardinality > 1)
            .collect();
        if free.is_empty() {
            return Err(Error::Policy("no attribute head has more than one value".into()));
        }
        let h = free[rng.random_range(0..free.len())];
        let mut v = rng.random_range(0..schema.heads[h].cardinality - 1);
        if v >= label.values[h] {
            v += 1;
        }
        let mut out = label.clone();
        out.values[h] = v;
        Ok(out)
    }
}

type Boxed = Box<dyn CounterfactualPolicy>;

pub fn policies() -> Registry<dyn CounterfactualPolicy> {
    Registry::new("counterfactual policy")
        .register(
            "exclude-original",
            "uniform over joint classes other than the original",
            |_| -> Result<Boxed> { Ok(Box::new(ExcludeOriginal)) },
        )
        .register("uniform", "uniform over all joint classes", |_| -> Result<Boxed> {
            Ok(Box::new(UniformJoint))
        })
        .register(
            "resample-one-head",
            "resample a single attribute head to a different value",
            |_| -> Result<Boxed> { Ok(Box::new(ResampleOneHead)) },
        )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::schema::AttributeHead;

    #[test]
    fn exclude_original_is_uniform_over_the_rest() {
        let schema = AttributeSchema::default();
        let original = schema.from_joint(3).unwrap();
        let mut rng = stream_rng(0, 7);
        let mut counts = [0usize; 8];
        for _ in 0..7000 {
            let a = ExcludeOriginal.sample(&schema, &original, &mut rng).unwrap();
            counts[schema.joint_index(&a).unwrap()] += 1;
        }
        assert_eq!(counts[3], 0);
        let sigma = (7000.0 * (1.0 / 7.0) * (6.0 / 7.0f64)).sqrt();
        for (k, c) in counts.iter().enumerate().filter(|(k, _)| *k != 3) {
            assert!((*c as f64 - 1000.0).abs() <= 3.0 * sigma, "class {k}: {c}");
        }
    }

    #[test]
    fn forced_and_degenerate_spaces() {
        let binary = AttributeSchema {
            id: "bin".into(),
            heads: vec![AttributeHead {
                name: "gender".into(),
                cardinality: 2,
                value_names: vec![],
            }],
        };
        let mut rng = stream_rng(1, 0);
        let zero = AttributeLabel { values: vec![0] };
        for _ in 0..20 {
            assert_eq!(ExcludeOriginal.sample(&binary, &zero, &mut rng).unwrap().values, vec![1]);
        }
        let single = AttributeSchema {
            id: "one".into(),
            heads: vec![AttributeHead {
                name: "g".into(),
                cardinality: 1,
                value_names: vec![],
            }],
        };
        assert!(matches!(ExcludeOriginal.sample(&single, &zero, &mut rng), Err(Error::Policy(_))));
        assert!(matches!(ResampleOneHead.sample(&single, &zero, &mut rng), Err(Error::Policy(_))));
    }

    #[test]
    fn deterministic_given_rng_state() {
        let schema = AttributeSchema::default();
        let label = AttributeLabel::age_gender(2, 1);
        for name in policies().names() {
            let p = policies().build(name, &()).unwrap();
            let a: Vec<_> = {
                let mut r = stream_rng(5, 5);
                (0..10).map(|_| p.sample(&schema, &label, &mut r).unwrap()).collect()
            };
            let b: Vec<_> = {
                let mut r = stream_rng(5, 5);
                (0..10).map(|_| p.sample(&schema, &label, &mut r).unwrap()).collect()
            };
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn one_head_changes_exactly_one_value() {
        let schema = AttributeSchema::default();
        let label = AttributeLabel::age_gender(1, 0);
        let mut rng = stream_rng(2, 2);
        for _ in 0..200 {
            let a = ResampleOneHead.sample(&schema, &label, &mut rng).unwrap();
            let changed = a.values.iter().zip(&label.values).filter(|(x, y)| x != y).count();
            assert_eq!(changed, 1);
        }
    }
}
