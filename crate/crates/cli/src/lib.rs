//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every command writes its artifacts into `--out` (default
//! `$ATTRMOGEN_OUT/<command>`, or `runs/<command>`), together with the
//! resolved `config.toml` and its `config.sha256`.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use attrmogen_core::bounds::{entropy_bound_suite, kl_bound_suite};
use attrmogen_core::checkpoint::Checkpoint;
use attrmogen_core::corpus::{Corpus, NewRecord, Split};
use attrmogen_core::eval::protocol::{corpus_feature_rows, GeneratorContext, JudgeContext};
use attrmogen_core::eval::{
    attribute_control_protocol, evaluate, export_features, generators, judges, train_attribute_classifier,
    train_feature_extractor, AttributeClassifier, ControlMode, FeatureExtractor,
};
use attrmogen_core::motion::{gaussian_denoise, jitter_filter, mirror_motion, JitterDecision};
use attrmogen_core::rng::stream_rng;
use attrmogen_core::synth::{generate_corpus, SynthSpec};
use attrmogen_core::transformer::text::AttrInText;
use attrmogen_core::transformer::{build_token_corpus, generate_motion, train_transformer, TokenSource, TrainedTransformer};
use attrmogen_core::vqvae::{train_decoup_vqvae, TrainedVqvae};
use attrmogen_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig, CONFIG_FILE, HASH_FILE};

pub const SYNTH_SPEC_FILE: &str = "synth_spec.json";
pub const OUT_ENV: &str = "ATTRMOGEN_OUT";
const GENERATE_STREAM: u64 = 61;

#[derive(Debug, Parser)]
#[command(name = "attrmogen", version, about = "Attribute-controlled text-to-motion generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Versioned TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Training iterations for whichever model the command trains.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Entropy loss weight.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Bottleneck loss weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Append attribute phrases to prompts: off, train, test or both.
    #[arg(long, global = true)]
    pub attr_in_text: Option<AttrInText>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic attribute-conditioned corpus.
    SynthData,
    /// Filter, denoise, split, augment and normalize a corpus.
    Preprocess {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the decoupling VQVAE.
    TrainVqvae {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the masked token transformer on a frozen VQVAE's tokens.
    TrainTransformer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
    },
    /// Train the contrastive evaluation feature extractor.
    TrainEvalEncoder {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the raw-motion attribute classifier.
    TrainAttrClassifier {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Metric suite with confidence intervals.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        transformer: Option<PathBuf>,
        /// Generator name; overrides the config.
        #[arg(long)]
        generator: Option<String>,
    },
    /// Attribute-control protocol in true or shuffled mode.
    AttrProtocol {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        transformer: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        generator: Option<String>,
        /// Comma-separated judge names.
        #[arg(long, value_delimiter = ',')]
        judge: Option<Vec<String>>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Generate one motion from text and attributes, written as a corpus container and CSV.
    Generate {
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        transformer: PathBuf,
        #[arg(long)]
        text: String,
        /// Attribute values in schema order, comma separated.
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<usize>,
        /// Output length in frames; rounded up to whole tokens.
        #[arg(long, default_value_t = 64)]
        frames: usize,
    },
    /// Export frozen extractor features of one split in the corpus container format.
    ExportFeatures {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check the entropy and KL bounds by exact enumeration.
    VerifyBounds {
        /// Trials per suite.
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Preprocess { .. } => "preprocess",
            Command::TrainVqvae { .. } => "train-vqvae",
            Command::TrainTransformer { .. } => "train-transformer",
            Command::TrainEvalEncoder { .. } => "train-eval-encoder",
            Command::TrainAttrClassifier { .. } => "train-attr-classifier",
            Command::Evaluate { .. } => "evaluate",
            Command::AttrProtocol { .. } => "attr-protocol",
            Command::Generate { .. } => "generate",
            Command::ExportFeatures { .. } => "export-features",
            Command::VerifyBounds { .. } => "verify-bounds",
        }
    }
}

/// What a successful command leaves behind.
#[derive(Debug)]
pub struct Outcome {
    pub out: PathBuf,
    /// Human-readable summary printed to stdout.
    pub summary: String,
    /// False when a verification command found violations.
    pub passed: bool,
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
    }
}

fn output_dir(common: &Common, command: &str) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_vqvae(dir: &Path) -> Result<TrainedVqvae> {
    TrainedVqvae::from_checkpoint(&Checkpoint::read(dir)?)
}

fn load_transformer(dir: &Path) -> Result<TrainedTransformer> {
    TrainedTransformer::from_checkpoint(&Checkpoint::read(dir)?)
}

fn check_schema(what: &str, found: &str, corpus: &Corpus) -> Result<()> {
    if found != corpus.schema().hash() {
        return Err(Error::Schema(format!("{what} was built for a different attribute schema than the corpus")));
    }
    Ok(())
}

fn synth_spec_of(corpus_dir: &Path) -> Result<Option<SynthSpec>> {
    let path = corpus_dir.join(SYNTH_SPEC_FILE);
    if path.exists() {
        Ok(Some(read_json(&path)?))
    } else {
        Ok(None)
    }
}

fn generator_context(vqvae: &Option<PathBuf>, transformer: &Option<PathBuf>, corpus: &Corpus) -> Result<GeneratorContext> {
    let vqvae = match vqvae {
        Some(p) => {
            let v = load_vqvae(p)?;
            check_schema("VQVAE checkpoint", &v.model.schema.hash(), corpus)?;
            Some(Arc::new(v))
        }
        None => None,
    };
    let transformer = match transformer {
        Some(p) => {
            let t = load_transformer(p)?;
            check_schema("transformer checkpoint", &t.meta.schema_hash, corpus)?;
            Some(Arc::new(t))
        }
        None => None,
    };
    Ok(GeneratorContext { vqvae, transformer })
}

/// Parse, resolve the configuration and run one command.
pub fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let trials = match &cli.command {
        Command::VerifyBounds { trials } => *trials,
        _ => None,
    };
    cfg.apply(&Overrides {
        seed: cli.common.seed,
        iterations: cli.common.iterations,
        alpha: cli.common.alpha,
        lambda: cli.common.lambda,
        attr_in_text: cli.common.attr_in_text,
        trials,
    });
    let out = output_dir(&cli.common, cli.command.name());
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let hash = cfg.hash();
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    write_text(&out.join(HASH_FILE), &format!("{hash}\n"))?;
    let (summary, passed) = dispatch(&cli.command, &cfg, &hash, &out)?;
    Ok(Outcome { out, summary, passed })
}

fn dispatch(command: &Command, cfg: &RunConfig, hash: &str, out: &Path) -> Result<(String, bool)> {
    match command {
        Command::SynthData => {
            let spec = &cfg.synth.spec;
            let corpus = generate_corpus(spec, cfg.synth.n_per_cell)?;
            corpus.write(out)?;
            write_json(&out.join(SYNTH_SPEC_FILE), spec)?;
            Ok((format!("wrote {} synthetic records", corpus.len()), true))
        }
        Command::Preprocess { corpus } => preprocess(cfg, corpus, out),
        Command::TrainVqvae { corpus } => {
            let data = Corpus::read(corpus)?;
            let trained = train_decoup_vqvae(&cfg.vqvae, &data)?;
            trained.to_checkpoint(hash)?.write(out)?;
            let last = trained.history().last();
            Ok((
                match last {
                    Some(r) => format!("trained {} iterations; final reconstruction loss {:.5}", r.iteration + 1, r.rec),
                    None => "wrote the initialization (0 iterations)".to_string(),
                },
                true,
            ))
        }
        Command::TrainTransformer { corpus, vqvae } => {
            let data = Corpus::read(corpus)?;
            let v = load_vqvae(vqvae)?;
            check_schema("VQVAE checkpoint", &v.model.schema.hash(), &data)?;
            let tcfg = &cfg.transformer;
            let tokens = build_token_corpus(&v, &data, Split::Train, tcfg.attr_in_text)?;
            let vq_hash = Checkpoint::read(vqvae)?.meta.config_hash;
            let trained = train_transformer(tcfg, &TokenSource::of(&v, &vq_hash), &tokens)?;
            trained.to_checkpoint(&data.schema().hash(), hash)?.write(out)?;
            Ok((format!("trained on {} token sequences", tokens.len()), true))
        }
        Command::TrainEvalEncoder { corpus } => {
            let data = Corpus::read(corpus)?;
            let fe = train_feature_extractor(&cfg.extractor, &data)?;
            fe.to_checkpoint(&data.schema().hash(), hash)?.write(out)?;
            Ok((format!("feature extractor of width {}", fe.feature_width()), true))
        }
        Command::TrainAttrClassifier { corpus } => {
            let data = Corpus::read(corpus)?;
            let clf = train_attribute_classifier(&cfg.classifier, &data)?;
            clf.to_checkpoint(hash)?.write(out)?;
            Ok((format!("attribute classifier over {} heads", data.schema().heads.len()), true))
        }
        Command::Evaluate {
            corpus,
            extractor,
            vqvae,
            transformer,
            generator,
        } => {
            let data = Corpus::read(corpus)?;
            let ckpt = Checkpoint::read(extractor)?;
            check_schema("feature extractor", &ckpt.meta.schema_hash, &data)?;
            let fe = FeatureExtractor::from_checkpoint(&ckpt)?;
            let ctx = generator_context(vqvae, transformer, &data)?;
            let name = generator.clone().unwrap_or_else(|| cfg.eval.generator.clone());
            let generator = generators().build(&name, &ctx)?;
            let report = evaluate(&fe, generator.as_ref(), &data, parse_split(&cfg.eval.split)?, &cfg.eval.metrics, hash)?;
            write_json(&out.join("metrics.json"), &report)?;
            let text = report.to_text();
            write_text(&out.join("metrics.txt"), &text)?;
            Ok((text, true))
        }
        Command::AttrProtocol {
            corpus,
            vqvae,
            transformer,
            classifier,
            generator,
            judge,
            mode,
        } => {
            let data = Corpus::read(corpus)?;
            let ctx = generator_context(vqvae, transformer, &data)?;
            let name = generator.clone().unwrap_or_else(|| cfg.protocol.generator.clone());
            let generator = generators().build(&name, &ctx)?;
            let classifier = match classifier {
                Some(p) => {
                    let c = AttributeClassifier::from_checkpoint(&Checkpoint::read(p)?)?;
                    check_schema("attribute classifier", &c.meta.schema.hash(), &data)?;
                    Some(Arc::new(c))
                }
                None => None,
            };
            let jctx = JudgeContext {
                synth: synth_spec_of(corpus)?,
                classifier,
            };
            let mode: ControlMode = mode.clone().unwrap_or_else(|| cfg.protocol.mode.clone()).parse()?;
            let split = parse_split(&cfg.protocol.split)?;
            let names = judge.clone().unwrap_or_else(|| cfg.protocol.judges.clone());
            let mut reports = serde_json::Map::new();
            let mut text = String::new();
            for j in &names {
                let judge = judges().build(j, &jctx)?;
                let report = attribute_control_protocol(generator.as_ref(), &data, split, judge.as_ref(), mode, cfg.protocol.seed)?;
                for h in &report.heads {
                    text.push_str(&format!("{j:<11} {:<10} accuracy {:.4}  group mean {:.4}\n", h.head, h.accuracy, h.group_mean));
                }
                reports.insert(j.clone(), serde_json::to_value(&report).map_err(|e| Error::Config(e.to_string()))?);
            }
            let doc = serde_json::json!({ "config_hash": hash, "generator": name, "reports": reports });
            write_json(&out.join("protocol.json"), &doc)?;
            Ok((text, true))
        }
        Command::Generate {
            vqvae,
            transformer,
            text,
            attributes,
            frames,
        } => {
            let v = load_vqvae(vqvae)?;
            let t = load_transformer(transformer)?;
            let label = v.model.schema.label(attributes)?;
            let d = v.model.config.downsample_factor;
            let mut rng = stream_rng(cfg.transformer.seed, GENERATE_STREAM);
            let motion = generate_motion(text, &label, &v, &t, frames.div_ceil(d), &mut rng)?;
            let path = out.join("motion.csv");
            let csv_err = |e: csv::Error| Error::Io {
                path: path.clone(),
                source: e.into(),
            };
            let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
            let header: Vec<String> = (0..motion.channels()).map(|c| format!("ch{c}")).collect();
            w.write_record(&header).map_err(csv_err)?;
            for f in 0..motion.frames() {
                w.write_record(motion.row(f).iter().map(|v| format!("{v:e}")))
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            let mut container = Corpus::empty(v.model.schema.clone(), motion.channels(), motion.frame_rate_hz());
            container.push(NewRecord {
                id: "generated-0".into(),
                motion: motion.clone(),
                attributes: label,
                text: text.clone(),
                action_class: None,
            })?;
            container.write(out)?;
            Ok((format!("wrote {} frames of {} channels", motion.frames(), motion.channels()), true))
        }
        Command::ExportFeatures { corpus, extractor, split } => {
            let data = Corpus::read(corpus)?;
            let ckpt = Checkpoint::read(extractor)?;
            check_schema("feature extractor", &ckpt.meta.schema_hash, &data)?;
            let fe = FeatureExtractor::from_checkpoint(&ckpt)?;
            let rows = corpus_feature_rows(&fe, &data, parse_split(split)?)?;
            export_features(&rows, data.schema(), out)?;
            Ok((format!("exported {} feature rows", rows.len()), true))
        }
        Command::VerifyBounds { .. } => {
            let b = &cfg.bounds;
            let e = entropy_bound_suite(b.entropy_trials, &mut stream_rng(b.seed, 0))?;
            let k = kl_bound_suite(b.kl_trials, &mut stream_rng(b.seed, 1))?;
            let mut text = format!("{:<14} {:>7} {:>10} {:>9} {:>14}  result\n", "suite", "trials", "violations", "infinite", "worst slack");
            for s in [&e, &k] {
                text.push_str(&format!(
                    "{:<14} {:>7} {:>10} {:>9} {:>14.3e}  {}\n",
                    s.name,
                    s.trials,
                    s.violations,
                    s.infinite,
                    s.worst_slack,
                    if s.passed() { "pass" } else { "FAIL" }
                ));
            }
            write_json(&out.join("bounds.json"), &serde_json::json!({ "config_hash": hash, "suites": [e, k] }))?;
            Ok((text, e.passed() && k.passed()))
        }
    }
}

fn preprocess(cfg: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<(String, bool)> {
    let p = &cfg.preprocess;
    let mut corpus = Corpus::read(corpus_dir)?;
    let before = corpus.len();
    if let Some(j) = &p.jitter {
        let mut keep = Vec::with_capacity(corpus.len());
        for m in corpus.motions() {
            keep.push(jitter_filter(m, j.vel_threshold, j.outlier_threshold)?.decision == JitterDecision::Keep);
        }
        let mut k = keep.into_iter();
        corpus.retain(|_, _| k.next().unwrap_or(false));
    }
    let dropped = before - corpus.len();
    if let Some(sigma) = p.denoise_sigma {
        corpus.map_motions(|m| gaussian_denoise(m, sigma))?;
    }
    corpus.assign_splits(p.split_ratio, p.split_seed)?;
    if p.mirror_augment {
        let map = corpus.manifest.mirror_map.clone();
        let mirrored: Vec<NewRecord> = corpus
            .split_indices(Split::Train)
            .into_iter()
            .map(|i| {
                let r = &corpus.records()[i];
                Ok(NewRecord {
                    id: format!("{}-mirror", r.id),
                    motion: mirror_motion(corpus.motion(i), &map)?,
                    attributes: r.attributes.clone(),
                    text: r.text.clone(),
                    action_class: r.action_class,
                })
            })
            .collect::<Result<_>>()?;
        for rec in mirrored {
            corpus.push(rec)?;
        }
    }
    if p.normalize {
        corpus.normalize()?;
    }
    corpus.write(out)?;
    if let Some(spec) = synth_spec_of(corpus_dir)? {
        write_json(&out.join(SYNTH_SPEC_FILE), &spec)?;
    }
    Ok((format!("{} records kept, {dropped} dropped by the jitter filter", corpus.len()), true))
}
