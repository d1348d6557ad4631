use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attrmogen_cli::config::RunConfig;
use attrmogen_core::checkpoint::Checkpoint;
use attrmogen_core::corpus::Corpus;
use attrmogen_core::vqvae::{train_decoup_vqvae, DecoupVqvae};

const SMALL_CONFIG: &str = r#"
version = 1

[preprocess]
denoise_sigma = 1.0
mirror_augment = true

[preprocess.jitter]
vel_threshold = 10.0
outlier_threshold = 100.0

[eval.metrics]
repetitions = 2
diversity_pairs = 20
multimodality_prompts = 4
multimodality_reps = 2

[protocol]
judges = ["oracle", "classifier"]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attrmogen"));
    c.env_remove("ATTRMOGEN_OUT");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Run every subcommand once under `root` with tiny budgets.
fn full_run(root: &Path) {
    fs::write(root.join("small.toml"), SMALL_CONFIG).unwrap();
    let c = ["--config", "small.toml", "--seed", "3"];
    let step = |extra: &[&str]| {
        let args: Vec<&str> = extra.iter().chain(c.iter()).copied().collect();
        ok(root, &args);
    };
    step(&["synth-data", "--out", "syn"]);
    step(&["preprocess", "--corpus", "syn", "--out", "pre"]);
    step(&["train-vqvae", "--corpus", "pre", "--iterations", "3", "--out", "vq"]);
    step(&["train-transformer", "--corpus", "pre", "--vqvae", "vq", "--iterations", "3", "--out", "tf"]);
    step(&["train-eval-encoder", "--corpus", "pre", "--iterations", "3", "--out", "fe"]);
    step(&["train-attr-classifier", "--corpus", "pre", "--iterations", "3", "--out", "ac"]);
    step(&["evaluate", "--corpus", "pre", "--extractor", "fe", "--vqvae", "vq", "--transformer", "tf", "--out", "ev"]);
    step(&[
        "attr-protocol",
        "--corpus",
        "pre",
        "--vqvae",
        "vq",
        "--transformer",
        "tf",
        "--classifier",
        "ac",
        "--out",
        "ap",
    ]);
    step(&[
        "generate",
        "--vqvae",
        "vq",
        "--transformer",
        "tf",
        "--text",
        "a person walks forward",
        "--attributes",
        "2,1",
        "--frames",
        "30",
        "--out",
        "gen",
    ]);
    step(&["export-features", "--corpus", "pre", "--extractor", "fe", "--out", "ef"]);
    step(&["verify-bounds", "--trials", "50", "--out", "vb"]);
}

#[test]
fn every_subcommand_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    let sa = snapshot(a.path());
    let sb = snapshot(b.path());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for dir in ["syn", "pre", "vq", "tf", "fe", "ac", "ev", "ap", "gen", "ef", "vb"] {
        assert!(sa.contains_key(&Path::new(dir).join("config.toml")), "{dir} lacks its config");
        assert!(sa.contains_key(&Path::new(dir).join("config.sha256")), "{dir} lacks its config hash");
    }
    for f in ["ev/metrics.json", "ev/metrics.txt", "ap/protocol.json", "gen/motion.csv", "gen/manifest.json", "vb/bounds.json"] {
        assert!(sa.contains_key(Path::new(f)), "missing {f}");
    }

    let root = a.path();
    let hash = fs::read_to_string(root.join("vq/config.sha256")).unwrap();
    assert_eq!(Checkpoint::read(root.join("vq")).unwrap().meta.config_hash, hash.trim());
    let metrics: serde_json::Value = serde_json::from_slice(&sa[Path::new("ev/metrics.json")]).unwrap();
    let ev_hash = fs::read_to_string(root.join("ev/config.sha256")).unwrap();
    assert_eq!(metrics["config_hash"], ev_hash.trim());

    let gen = Corpus::read(root.join("gen")).unwrap();
    assert_eq!(gen.len(), 1);
    assert_eq!(gen.motion(0).frames(), 32);
    assert_eq!(gen.records()[0].attributes.value(0), 2);
    let csv = String::from_utf8(sa[Path::new("gen/motion.csv")].clone()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 32);

    let pre = Corpus::read(root.join("pre")).unwrap();
    let syn = Corpus::read(root.join("syn")).unwrap();
    assert!(pre.len() > syn.len(), "mirror augmentation adds training records");
    let ef = Corpus::read(root.join("ef")).unwrap();
    assert_eq!(ef.motion(0).frames(), 1);
}

#[test]
fn zero_iteration_training_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(root, &["synth-data", "--out", "syn"]);
    ok(root, &["preprocess", "--corpus", "syn", "--out", "pre"]);
    ok(root, &["train-vqvae", "--corpus", "pre", "--iterations", "0", "--out", "vq"]);

    let cfg = RunConfig::from_toml(&fs::read_to_string(root.join("vq/config.toml")).unwrap()).unwrap();
    assert_eq!(cfg.vqvae.iterations, 0);
    let corpus = Corpus::read(root.join("pre")).unwrap();
    let written = Checkpoint::read(root.join("vq")).unwrap();
    let direct = train_decoup_vqvae(&cfg.vqvae, &corpus).unwrap().to_checkpoint(&cfg.hash()).unwrap();
    assert_eq!(written.tensors, direct.tensors);
    assert_eq!(written.meta, direct.meta);

    // Everything but the data-seeded codebook matches a bare construction.
    let fresh = DecoupVqvae::new(&cfg.vqvae, corpus.schema(), corpus.manifest.channels).unwrap();
    let fresh = fresh.params.named_tensors().unwrap();
    for (name, t) in &fresh {
        if !name.contains("codebook") {
            assert_eq!(&written.tensors[name], t, "{name} moved without training");
        }
    }
}

#[test]
fn verify_bounds_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["verify-bounds", "--trials", "1000", "--seed", "0", "--out", "vb"]);
    let text = stdout(&out);
    assert!(text.contains("entropy-bound"), "{text}");
    assert!(text.contains("kl-bound"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("vb/bounds.json")).unwrap()).unwrap();
    for s in report["suites"].as_array().unwrap() {
        assert_eq!(s["trials"], 1000);
        assert_eq!(s["violations"], 0);
    }
}

#[test]
fn unknown_subcommand_fails_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

fn error_class(o: &Output) -> String {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 1, "one error line expected, got {err:?}");
    let line = lines[0];
    assert!(line.starts_with("error["), "{line}");
    line["error[".len()..line.find(']').unwrap()].to_string()
}

#[test]
fn failures_print_one_classified_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(error_class(&run_in(root, &["--config", "absent.toml", "synth-data"])), "config");

    fs::write(root.join("bad.toml"), "version = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(error_class(&run_in(root, &["--config", "bad.toml", "synth-data"])), "config");

    fs::write(root.join("old.toml"), "version = 99\n").unwrap();
    assert_eq!(error_class(&run_in(root, &["--config", "old.toml", "synth-data"])), "config");

    ok(root, &["synth-data", "--out", "syn"]);
    ok(root, &["train-eval-encoder", "--corpus", "syn", "--iterations", "0", "--out", "fe"]);

    // Same data under a different schema id.
    fs::create_dir(root.join("other")).unwrap();
    fs::copy(root.join("syn/data.bin"), root.join("other/data.bin")).unwrap();
    let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(root.join("syn/manifest.json")).unwrap()).unwrap();
    manifest["schema"]["id"] = "renamed".into();
    fs::write(root.join("other/manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
    let args = ["evaluate", "--corpus", "other", "--extractor", "fe", "--generator", "identity", "--out", "ev"];
    assert_eq!(error_class(&run_in(root, &args)), "schema");

    let args = ["export-features", "--corpus", "other", "--extractor", "fe", "--out", "ef"];
    assert_eq!(error_class(&run_in(root, &args)), "schema");

    // Truncated container.
    fs::create_dir(root.join("cut")).unwrap();
    fs::copy(root.join("syn/manifest.json"), root.join("cut/manifest.json")).unwrap();
    let data = fs::read(root.join("syn/data.bin")).unwrap();
    fs::write(root.join("cut/data.bin"), &data[..data.len() - 4]).unwrap();
    assert_eq!(error_class(&run_in(root, &["preprocess", "--corpus", "cut", "--out", "p"])), "truncated");
    fs::write(root.join("cut/data.bin"), &data[..data.len() / 2]).unwrap();
    assert_eq!(error_class(&run_in(root, &["preprocess", "--corpus", "cut", "--out", "p"])), "offset");

    // Corrupted checkpoint metadata.
    fs::create_dir(root.join("broken")).unwrap();
    fs::copy(root.join("fe/tensors.bin"), root.join("broken/tensors.bin")).unwrap();
    fs::write(root.join("broken/checkpoint.json"), b"{ not json").unwrap();
    let args = ["export-features", "--corpus", "syn", "--extractor", "broken", "--out", "ef"];
    assert_eq!(error_class(&run_in(root, &args)), "malformed");

    let args = ["evaluate", "--corpus", "syn", "--extractor", "fe", "--out", "ev"];
    assert_eq!(error_class(&run_in(root, &args)), "config", "pipeline generator without checkpoints");
}

#[test]
fn flags_override_the_file_and_the_environment_sets_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("c.toml"), "version = 1\n[bounds]\nentropy_trials = 7\nkl_trials = 5\nseed = 11\n").unwrap();
    let out = bin()
        .current_dir(root)
        .env("ATTRMOGEN_OUT", root.join("runs"))
        .args(["--config", "c.toml", "verify-bounds"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let cfg = RunConfig::from_toml(&fs::read_to_string(root.join("runs/verify-bounds/config.toml")).unwrap()).unwrap();
    assert_eq!((cfg.bounds.entropy_trials, cfg.bounds.kl_trials, cfg.bounds.seed), (7, 5, 11));

    ok(root, &["--config", "c.toml", "verify-bounds", "--trials", "9", "--seed", "2", "--out", "o"]);
    let cfg = RunConfig::from_toml(&fs::read_to_string(root.join("o/config.toml")).unwrap()).unwrap();
    assert_eq!((cfg.bounds.entropy_trials, cfg.bounds.kl_trials, cfg.bounds.seed), (9, 9, 2));
    assert_eq!(cfg.seed, Some(2));

    ok(root, &["synth-data", "--alpha", "0.02", "--lambda", "0.25", "--attr-in-text", "both", "--out", "s"]);
    let cfg = RunConfig::from_toml(&fs::read_to_string(root.join("s/config.toml")).unwrap()).unwrap();
    assert_eq!((cfg.vqvae.alpha, cfg.vqvae.lambda), (0.02, 0.25));
    assert_eq!(format!("{:?}", cfg.transformer.attr_in_text), "Both");

    let bad = run_in(root, &["synth-data", "--attr-in-text", "sometimes"]);
    assert!(!bad.status.success());
}
