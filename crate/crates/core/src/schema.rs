//! Discrete attribute schemas and labels.
//!
//! A schema is an ordered list of categorical heads. Labels are flattened to
//! a single joint class with mixed-radix indexing, first head most
//! significant, so the default age(4) x gender(2) schema gives
//! `joint = age_group * 2 + gender`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeHead {
    pub name: String,
    pub cardinality: usize,
    /// Human-readable value names, used when attributes are spelled out in prompts.
    #[serde(default)]
    pub value_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub id: String,
    pub heads: Vec<AttributeHead>,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self {
            id: "age4-gender2".to_string(),
            heads: vec![
                AttributeHead {
                    name: "age_group".to_string(),
                    cardinality: 4,
                    value_names: ["5-18", "19-35", "36-59", "60-88"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                },
                AttributeHead {
                    name: "gender".to_string(),
                    cardinality: 2,
                    value_names: vec!["male".to_string(), "female".to_string()],
                },
            ],
        }
    }
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Schema(format!("schema {} has no heads", self.id)));
        }
        for head in &self.heads {
            if head.cardinality == 0 {
                return Err(Error::Schema(format!(
                    "head {} of schema {} has zero cardinality",
                    head.name, self.id
                )));
            }
            if !head.value_names.is_empty() && head.value_names.len() != head.cardinality {
                return Err(Error::Schema(format!(
                    "head {} lists {} value names for cardinality {}",
                    head.name,
                    head.value_names.len(),
                    head.cardinality
                )));
            }
        }
        Ok(())
    }

    /// Size of the joint attribute space, |A|.
    pub fn joint_size(&self) -> usize {
        self.heads.iter().map(|h| h.cardinality).product()
    }

    /// Width of the concatenated one-hot encoding.
    pub fn one_hot_width(&self) -> usize {
        self.heads.iter().map(|h| h.cardinality).sum()
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn label(&self, values: &[usize]) -> Result<AttributeLabel> {
        let label = AttributeLabel {
            values: values.to_vec(),
        };
        self.check(&label)?;
        Ok(label)
    }

    pub fn check(&self, label: &AttributeLabel) -> Result<()> {
        if label.values.len() != self.heads.len() {
            return Err(Error::Schema(format!(
                "label has {} values, schema {} has {} heads",
                label.values.len(),
                self.id,
                self.heads.len()
            )));
        }
        for (v, head) in label.values.iter().zip(&self.heads) {
            if *v >= head.cardinality {
                return Err(Error::Schema(format!(
                    "{} = {} outside [0, {})",
                    head.name, v, head.cardinality
                )));
            }
        }
        Ok(())
    }

    pub fn joint_index(&self, label: &AttributeLabel) -> Result<usize> {
        self.check(label)?;
        Ok(label
            .values
            .iter()
            .zip(&self.heads)
            .fold(0, |acc, (v, h)| acc * h.cardinality + v))
    }

    pub fn from_joint(&self, mut joint: usize) -> Result<AttributeLabel> {
        if joint >= self.joint_size() {
            return Err(Error::Schema(format!(
                "joint class {joint} outside [0, {})",
                self.joint_size()
            )));
        }
        let mut values = vec![0; self.heads.len()];
        for (slot, head) in values.iter_mut().zip(&self.heads).rev() {
            *slot = joint % head.cardinality;
            joint /= head.cardinality;
        }
        Ok(AttributeLabel { values })
    }

    /// Concatenated one-hot encoding of a label.
    pub fn one_hot(&self, label: &AttributeLabel) -> Result<Vec<f32>> {
        self.check(label)?;
        let mut out = vec![0f32; self.one_hot_width()];
        let mut base = 0;
        for (v, head) in label.values.iter().zip(&self.heads) {
            out[base + v] = 1.0;
            base += head.cardinality;
        }
        Ok(out)
    }

    /// Canonical phrase spelling out a label, e.g. "a 19-35-year-old female".
    pub fn phrase(&self, label: &AttributeLabel) -> Result<String> {
        self.check(label)?;
        let mut parts = Vec::with_capacity(self.heads.len());
        for (v, head) in label.values.iter().zip(&self.heads) {
            let name = head
                .value_names
                .get(*v)
                .cloned()
                .unwrap_or_else(|| format!("{}-{}", head.name, v));
            if head.name == "age_group" {
                parts.push(format!("{name}-year-old"));
            } else {
                parts.push(name);
            }
        }
        Ok(format!("a {}", parts.join(" ")))
    }

    /// Content hash used to refuse mixing artifacts built under different schemas.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One assignment of every head in a schema.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeLabel {
    pub values: Vec<usize>,
}

impl AttributeLabel {
    /// Convenience constructor for the default age/gender schema.
    pub fn age_gender(age_group: usize, gender: usize) -> Self {
        Self {
            values: vec![age_group, gender],
        }
    }

    pub fn value(&self, head: usize) -> usize {
        self.values[head]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_joint_index_is_age_times_two_plus_gender() {
        let schema = AttributeSchema::default();
        assert_eq!(schema.joint_size(), 8);
        for age in 0..4 {
            for gender in 0..2 {
                let label = AttributeLabel::age_gender(age, gender);
                let joint = schema.joint_index(&label).unwrap();
                assert_eq!(joint, age * 2 + gender);
                assert_eq!(schema.from_joint(joint).unwrap(), label);
            }
        }
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let schema = AttributeSchema::default();
        assert!(schema.label(&[4, 0]).is_err());
        assert!(schema.label(&[0, 2]).is_err());
        assert!(schema.label(&[0]).is_err());
        assert!(schema.from_joint(8).is_err());
    }

    #[test]
    fn one_hot_and_phrase() {
        let schema = AttributeSchema::default();
        let label = AttributeLabel::age_gender(2, 1);
        assert_eq!(
            schema.one_hot(&label).unwrap(),
            vec![0., 0., 1., 0., 0., 1.]
        );
        assert_eq!(schema.phrase(&label).unwrap(), "a 36-59-year-old female");
    }

    #[test]
    fn hash_changes_with_schema() {
        let a = AttributeSchema::default();
        let mut b = a.clone();
        b.heads[0].cardinality = 5;
        b.heads[0].value_names.clear();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), AttributeSchema::default().hash());
    }
}
