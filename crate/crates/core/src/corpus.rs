//! The on-disk corpus container and corpus-level preprocessing.
//!
//! A corpus directory holds `manifest.json` and `data.bin`. The data file is
//! the concatenation of every record's values as little-endian `f32`,
//! row-major (frame-major, channel-minor); each manifest record points at its
//! slice with a byte `offset`.
//!
//! Manifest fields:
//!
//! | field            | meaning                                                      |
//! |------------------|--------------------------------------------------------------|
//! | `format_version` | container version, currently 1                               |
//! | `schema`         | attribute schema (`id`, `heads[{name, cardinality, ...}]`)   |
//! | `channels`       | feature width shared by every record                         |
//! | `frame_rate_hz`  | metadata only                                                |
//! | `split_ratio`    | train/val/test fractions used by `assign_splits`             |
//! | `split_seed`     | seed of the split shuffle                                    |
//! | `channel_stats`  | `{mean, std}` mapping raw values to the stored values, if normalized |
//! | `mirror_map`     | `{permutation, sign}` left/right channel map                 |
//! | `records[]`      | `{id, length, channels, attributes, text, action_class?, split, offset}` |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MirrorMap, MotionSequence};
use crate::schema::{AttributeLabel, AttributeSchema};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

/// Standard deviations below this are treated as constant channels.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub length: usize,
    pub channels: usize,
    pub attributes: AttributeLabel,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_class: Option<usize>,
    pub split: Split,
    /// Byte offset of the record inside `data.bin`.
    pub offset: u64,
}

impl Record {
    pub fn byte_len(&self) -> u64 {
        (self.length * self.channels * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn normalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        self.apply(m, |v, mean, std| (v - mean) / std)
    }

    pub fn denormalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        self.apply(m, |v, mean, std| v * std + mean)
    }

    fn apply(&self, m: &MotionSequence, f: impl Fn(f64, f64, f64) -> f64) -> Result<MotionSequence> {
        let c = m.channels();
        if self.mean.len() != c || self.std.len() != c {
            return Err(Error::Shape(format!(
                "channel stats cover {} channels, motion has {c}",
                self.mean.len()
            )));
        }
        let values = m
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| f(f64::from(*v), self.mean[i % c], self.std[i % c]) as f32)
            .collect();
        MotionSequence::new(m.frames(), c, values, m.frame_rate_hz())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub schema: AttributeSchema,
    pub channels: usize,
    pub frame_rate_hz: f32,
    pub split_ratio: [f64; 3],
    pub split_seed: u64,
    #[serde(default)]
    pub channel_stats: Option<ChannelStats>,
    pub mirror_map: MirrorMap,
    pub records: Vec<Record>,
}

/// A manifest together with the motion values of every record.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    motions: Vec<MotionSequence>,
}

/// Fields a caller supplies for one record; offsets and splits are filled in.
#[derive(Debug, Clone)]
pub struct NewRecord {
    pub id: String,
    pub motion: MotionSequence,
    pub attributes: AttributeLabel,
    pub text: String,
    pub action_class: Option<usize>,
}

impl Corpus {
    pub fn empty(schema: AttributeSchema, channels: usize, frame_rate_hz: f32) -> Self {
        Self {
            manifest: CorpusManifest {
                format_version: CORPUS_FORMAT_VERSION,
                schema,
                channels,
                frame_rate_hz,
                split_ratio: [0.8, 0.05, 0.15],
                split_seed: 0,
                channel_stats: None,
                mirror_map: MirrorMap::identity(channels),
                records: Vec::new(),
            },
            motions: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: NewRecord) -> Result<()> {
        if rec.motion.channels() != self.manifest.channels {
            return Err(Error::Shape(format!(
                "record {} has {} channels, corpus has {}",
                rec.id,
                rec.motion.channels(),
                self.manifest.channels
            )));
        }
        self.manifest.schema.check(&rec.attributes)?;
        if rec.text.is_empty() {
            return Err(Error::Corpus(format!("record {} has empty text", rec.id)));
        }
        let offset = self
            .manifest
            .records
            .last()
            .map_or(0, |r| r.offset + r.byte_len());
        self.manifest.records.push(Record {
            id: rec.id,
            length: rec.motion.frames(),
            channels: rec.motion.channels(),
            attributes: rec.attributes,
            text: rec.text,
            action_class: rec.action_class,
            split: Split::Train,
            offset,
        });
        self.motions.push(rec.motion);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.manifest.records
    }

    pub fn motion(&self, i: usize) -> &MotionSequence {
        &self.motions[i]
    }

    pub fn motions(&self) -> &[MotionSequence] {
        &self.motions
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.manifest.schema
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replace every motion through `f`, keeping shapes.
    pub fn map_motions(&mut self, mut f: impl FnMut(&MotionSequence) -> Result<MotionSequence>) -> Result<()> {
        let mut next = Vec::with_capacity(self.motions.len());
        for (m, r) in self.motions.iter().zip(&self.manifest.records) {
            let out = f(m)?;
            if out.frames() != r.length || out.channels() != r.channels {
                return Err(Error::Shape(format!("record {} changed shape", r.id)));
            }
            next.push(out);
        }
        self.motions = next;
        Ok(())
    }

    /// Keep only the records for which `keep` returns true; offsets are repacked.
    pub fn retain(&mut self, mut keep: impl FnMut(&Record, &MotionSequence) -> bool) {
        let records = std::mem::take(&mut self.manifest.records);
        let motions = std::mem::take(&mut self.motions);
        let mut offset = 0;
        for (mut r, m) in records.into_iter().zip(motions) {
            if keep(&r, &m) {
                r.offset = offset;
                offset += r.byte_len();
                self.manifest.records.push(r);
                self.motions.push(m);
            }
        }
    }

    /// Shuffle records with `seed` and cut train/val/test by `ratio`.
    pub fn assign_splits(&mut self, ratio: [f64; 3], seed: u64) -> Result<()> {
        if ratio.iter().any(|r| !(*r >= 0.0)) || (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratio {ratio:?} must be non-negative and sum to 1"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (ratio[0] * n as f64).round() as usize;
        let n_val = ((ratio[1] * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in order.iter().enumerate() {
            self.manifest.records[i].split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        self.manifest.split_ratio = ratio;
        self.manifest.split_seed = seed;
        Ok(())
    }

    /// Standardize every split with per-channel statistics of the training split.
    ///
    /// Stored `channel_stats` always map raw values to the stored values, so
    /// normalizing twice composes the two transforms.
    pub fn normalize(&mut self) -> Result<ChannelStats> {
        let c = self.manifest.channels;
        let train = self.split_indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("cannot normalize: training split is empty".into()));
        }
        let mut sum = vec![0f64; c];
        let mut count = 0usize;
        for &i in &train {
            for row in self.motions[i].values().chunks(c) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += f64::from(*v);
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0f64; c];
        for &i in &train {
            for row in self.motions[i].values().chunks(c) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (f64::from(*v) - m).powi(2);
                }
            }
        }
        let std: Vec<f64> = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let step = ChannelStats { mean, std };
        self.map_motions(|m| step.normalize(m))?;
        let composed = match &self.manifest.channel_stats {
            None => step.clone(),
            Some(prev) => ChannelStats {
                mean: prev
                    .mean
                    .iter()
                    .zip(&prev.std)
                    .zip(&step.mean)
                    .map(|((m0, s0), m1)| m0 + s0 * m1)
                    .collect(),
                std: prev.std.iter().zip(&step.std).map(|(s0, s1)| s0 * s1).collect(),
            },
        };
        self.manifest.channel_stats = Some(composed.clone());
        Ok(composed)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.schema.validate()?;
        m.mirror_map.validate()?;
        if m.mirror_map.arity() != m.channels {
            return Err(Error::Corpus(format!(
                "mirror map covers {} channels, corpus has {}",
                m.mirror_map.arity(),
                m.channels
            )));
        }
        if !m.mirror_map.is_involution() {
            return Err(Error::Corpus("mirror map is not an involution".into()));
        }
        if let Some(stats) = &m.channel_stats {
            if stats.mean.len() != m.channels || stats.std.len() != m.channels {
                return Err(Error::Corpus("channel stats width mismatch".into()));
            }
        }
        for r in &m.records {
            if r.channels != m.channels || r.length == 0 {
                return Err(Error::Corpus(format!("record {} has invalid shape", r.id)));
            }
            m.schema.check(&r.attributes)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut data = Vec::with_capacity(self.motions.iter().map(|m| m.values().len() * 4).sum());
        for (m, r) in self.motions.iter().zip(&self.manifest.records) {
            debug_assert_eq!(r.offset, data.len() as u64);
            for v in m.values() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_file(&dir.join(DATA_FILE), &data)?;
        let manifest = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let header: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let found = header
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed {
                path: manifest_path.clone(),
                reason: "missing format_version".into(),
            })? as u32;
        if found != CORPUS_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: manifest_path,
                found,
                expected: CORPUS_FORMAT_VERSION,
            });
        }
        let manifest: CorpusManifest = serde_json::from_value(header).map_err(|e| Error::Malformed {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        let data_path = dir.join(DATA_FILE);
        let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let len = data.len() as u64;
        let mut motions = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let size = r.byte_len();
            if r.offset % 4 != 0 || (size > 0 && r.offset >= len) {
                return Err(Error::OffsetOutOfRange {
                    path: data_path,
                    record: r.id.clone(),
                    offset: r.offset,
                    len,
                });
            }
            if r.offset + size > len {
                return Err(Error::Truncated {
                    path: data_path,
                    record: r.id.clone(),
                    needed: r.offset + size,
                    len,
                });
            }
            let slice = &data[r.offset as usize..(r.offset + size) as usize];
            let values = slice
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            motions.push(MotionSequence::new(r.length, r.channels, values, manifest.frame_rate_hz)?);
        }
        let corpus = Self { manifest, motions };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub(crate) fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
