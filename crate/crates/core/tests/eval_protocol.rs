use std::sync::Arc;

use attrmogen_core::corpus::{Corpus, Split};
use attrmogen_core::eval::protocol::*;
use attrmogen_core::eval::*;
use attrmogen_core::schema::AttributeSchema;
use attrmogen_core::synth::{generate_corpus, oracle_attributes, SynthSpec};

fn corpus(n_per_cell: usize) -> Corpus {
    let mut c = generate_corpus(&SynthSpec::default(), n_per_cell).unwrap();
    c.assign_splits([0.8, 0.05, 0.15], 0).unwrap();
    c.normalize().unwrap();
    c
}

fn oracle_judge() -> Box<dyn AttributeJudge> {
    judges()
        .build("oracle", &JudgeContext { synth: Some(SynthSpec::default()), classifier: None })
        .unwrap()
}

#[test]
fn identity_true_mode_reduces_to_judge_accuracy() {
    let c = corpus(4);
    let report = attribute_control_protocol(&Identity, &c, Split::Test, oracle_judge().as_ref(), ControlMode::True, 0).unwrap();
    let stats = c.manifest.channel_stats.clone().unwrap();
    let idx = c.split_indices(Split::Test);
    for (k, head) in c.schema().heads.iter().enumerate() {
        let direct = idx
            .iter()
            .filter(|i| {
                let raw = stats.denormalize(c.motion(**i)).unwrap();
                oracle_attributes(&raw, &SynthSpec::default()).label.value(k) == c.records()[**i].attributes.value(k)
            })
            .count() as f64
            / idx.len() as f64;
        assert_eq!(report.accuracy_of(&head.name).unwrap(), direct);
    }
    assert_eq!(report.records, idx.len());
}

#[test]
fn attribute_blind_generator_scores_chance_when_shuffled() {
    let c = corpus(8);
    let report =
        attribute_control_protocol(&Identity, &c, Split::Test, oracle_judge().as_ref(), ControlMode::Shuffled, 3).unwrap();
    let n = report.records as f64;
    for head in &c.schema().heads {
        let p = 1.0 / head.cardinality as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let acc = report.accuracy_of(&head.name).unwrap();
        assert!((acc - p).abs() < 3.0 * sigma, "{}: {acc} vs {p}", head.name);
    }
    let again =
        attribute_control_protocol(&Identity, &c, Split::Test, oracle_judge().as_ref(), ControlMode::Shuffled, 3).unwrap();
    assert_eq!(report, again);
}

#[test]
fn per_group_table_is_consistent() {
    let c = corpus(4);
    let r = attribute_control_protocol(&Identity, &c, Split::Test, oracle_judge().as_ref(), ControlMode::Shuffled, 1).unwrap();
    for h in &r.heads {
        assert_eq!(h.groups.iter().map(|g| g.count).sum::<usize>(), r.records);
        let weighted: f64 = h.groups.iter().map(|g| g.accuracy * g.count as f64).sum::<f64>() / r.records as f64;
        assert!((weighted - h.accuracy).abs() < 1e-12);
    }
}

#[test]
fn judge_schema_mismatch_is_rejected() {
    let c = corpus(2);
    let mut spec = SynthSpec::default();
    spec.age_amplitude = vec![1.0, 0.5];
    spec.age_speed = vec![1.0, 1.3];
    let judge = OracleJudge::new(spec);
    assert_ne!(judge.schema().hash(), AttributeSchema::default().hash());
    let err = attribute_control_protocol(&Identity, &c, Split::Test, &judge, ControlMode::True, 0).unwrap_err();
    assert_eq!(err.class(), "schema");
}

#[test]
fn registries_resolve_names_and_report_missing_inputs() {
    assert!(generators().build("identity", &GeneratorContext::default()).is_ok());
    assert!(generators().build("pipeline", &GeneratorContext::default()).is_err());
    assert!(judges().build("classifier", &JudgeContext::default()).is_err());
    assert!(judges().build("nope", &JudgeContext::default()).is_err());
    assert_eq!("shuffled".parse::<ControlMode>().unwrap(), ControlMode::Shuffled);
    assert!("random".parse::<ControlMode>().is_err());
}

#[test]
fn untrained_extractor_is_its_initialization() {
    let c = corpus(2);
    let cfg = FeatureExtractorConfig { steps: 0, feature_width: 24, ..Default::default() };
    let a = train_feature_extractor(&cfg, &c).unwrap();
    let b = train_feature_extractor(&cfg, &c).unwrap();
    let (ma, ta) = a.corpus_features(&c, Split::Test).unwrap();
    let (mb, tb) = b.corpus_features(&c, Split::Test).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ta, tb);
    assert!(ma.iter().all(|r| r.len() == 24));

    let dir = tempfile::tempdir().unwrap();
    a.to_checkpoint("s", "c").unwrap().write(dir.path()).unwrap();
    let back = FeatureExtractor::from_checkpoint(&attrmogen_core::checkpoint::Checkpoint::read(dir.path()).unwrap()).unwrap();
    assert_eq!(back.corpus_features(&c, Split::Test).unwrap().0, ma);
}

#[test]
fn trained_extractor_separates_matched_pairs() {
    let c = corpus(4);
    let cfg = FeatureExtractorConfig { steps: 150, ..Default::default() };
    let fe = train_feature_extractor(&cfg, &c).unwrap();
    let (m, t) = fe.corpus_features(&c, Split::Test).unwrap();
    let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = m.len();
    let matched = (0..n).map(|i| d(&m[i], &t[i])).sum::<f64>() / n as f64;
    let texts: Vec<&str> = c.split_indices(Split::Test).iter().map(|i| c.records()[*i].text.as_str()).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| texts[*i] != texts[*j]).collect();
    let mismatched = pairs.iter().map(|(i, j)| d(&m[*i], &t[*j])).sum::<f64>() / pairs.len() as f64;
    assert!(matched < mismatched, "{matched} vs {mismatched}");
    assert!(train_feature_extractor(&cfg, &Corpus::empty(AttributeSchema::default(), 16, 20.0)).is_err());
}

#[test]
fn exported_features_round_trip_bit_exactly() {
    let c = corpus(2);
    let fe = train_feature_extractor(&FeatureExtractorConfig { steps: 0, ..Default::default() }, &c).unwrap();
    let rows = corpus_feature_rows(&fe, &c, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = export_features(&rows, c.schema(), dir.path().join("a")).unwrap();
    export_features(&rows, c.schema(), dir.path().join("b")).unwrap();
    let back = Corpus::read(dir.path().join("a")).unwrap();
    assert_eq!(back, written);
    assert_eq!(back.len(), c.split_indices(Split::Train).len());
    for (k, r) in rows.iter().enumerate() {
        let want: Vec<u32> = r.features.iter().map(|v| (*v as f32).to_bits()).collect();
        let got: Vec<u32> = back.motion(k).values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(want, got);
    }
    for f in ["manifest.json", "data.bin"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn attribute_classifier_learns_and_round_trips() {
    let c = corpus(4);
    let cfg = AttributeClassifierConfig { steps: 150, ..Default::default() };
    let clf = Arc::new(train_attribute_classifier(&cfg, &c).unwrap());
    let judge = judges().build("classifier", &JudgeContext { synth: None, classifier: Some(clf.clone()) }).unwrap();
    let r = attribute_control_protocol(&Identity, &c, Split::Test, judge.as_ref(), ControlMode::True, 0).unwrap();
    assert!(r.accuracy_of("gender").unwrap() > 0.9, "{r:?}");
    let dir = tempfile::tempdir().unwrap();
    clf.to_checkpoint("c").unwrap().write(dir.path()).unwrap();
    let back = AttributeClassifier::from_checkpoint(&attrmogen_core::checkpoint::Checkpoint::read(dir.path()).unwrap()).unwrap();
    let motions: Vec<_> = c.split_indices(Split::Test).iter().map(|i| c.manifest.channel_stats.as_ref().unwrap().denormalize(c.motion(*i)).unwrap()).collect();
    assert_eq!(back.predict(&motions).unwrap(), clf.predict(&motions).unwrap());
}
