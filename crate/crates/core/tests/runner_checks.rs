//! End-to-end runs of the runner commands and the command-line front end on
//! tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};

use sevtrain::corruption::{CorruptionKind, ParameterTable};
use sevtrain::data::Dataset;
use sevtrain::model::Checkpoint;
use sevtrain::runner::{
    cli, cmd_eval_adv, cmd_eval_corrupt, cmd_gen_data, cmd_make_targets, cmd_report, cmd_train, ModelRef, RunConfig,
    CHECKSUM_FILE, FINAL_CHECKPOINT,
};
use sevtrain::taxonomy::{ClassTaxonomy, SemanticTargetSet};
use sevtrain::Error;

/// Four classes, 8×8 images, a few samples per class.
fn tiny_config(extra: serde_json::Value) -> RunConfig {
    let mut base = serde_json::json!({
        "taxonomy": {"source": "balanced", "num_classes": 4},
        "dataset": {"source": "synthetic", "train_per_class": 4, "test_per_class": 3, "image_size": 8, "seed": 3},
        "recipe": {
            "name": "tiny",
            "stages": [{"objective": {"kind": "standard"}, "epochs": 2}],
            "hyperparameters": {"batch_size": 4, "lr": 0.01}
        },
        "target_k": 2
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    RunConfig::from_json(&base.to_string(), None).unwrap()
}

fn train_once(cfg: &RunConfig, dir: &Path) -> PathBuf {
    let summaries = cmd_train(cfg, dir, None).unwrap();
    summaries[0].final_checkpoint.clone()
}

fn svg_lines(path: &Path) -> usize {
    let text = fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    doc.descendants().filter(|n| n.has_tag_name("polyline")).count()
}

#[test]
fn st_desk_preset_checkpoints_at_both_stage_ends() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(serde_json::json!({"recipe": {"preset": "ST", "hyperparameters": {"batch_size": 4, "lr": 0.01}}}));
    let summaries = cmd_train(&cfg, dir.path(), None).unwrap();
    let s = &summaries[0];
    assert_eq!(s.log.len(), 15);
    let epochs: Vec<usize> =
        s.checkpoints.iter().map(|p| Checkpoint::read(p).unwrap().manifest.epoch).collect();
    assert_eq!(epochs, vec![10, 15]);
    let last = Checkpoint::read(&s.final_checkpoint).unwrap();
    assert_eq!(last.manifest.epoch, 15);
    assert_eq!(last.manifest.param_checksum, s.final_checksum);
    let log = fs::read_to_string(dir.path().join("seed-0").join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 16);
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = tiny_config(serde_json::json!({"attack": {"epsilons": [0.0, 0.5, 1.0]}}));
    let mut digests = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let ck = train_once(&cfg, &dir.path().join("train"));
        cmd_eval_adv(&cfg, &ModelRef::parse(&format!("m={}", ck.display())), &dir.path().join("adv")).unwrap();
        let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
        digests.push((
            read("train/seed-0/training_log.csv"),
            read("train/seed-0/final.f32"),
            read("adv/adv_reports.csv"),
            read("adv/adv_attacks.csv"),
            read("adv/records/eps_0.5.csv"),
        ));
    }
    assert!(digests[0] == digests[1]);
}

#[test]
fn missing_taxonomy_is_a_configuration_error() {
    let mut cfg = tiny_config(serde_json::json!({}));
    cfg.taxonomy = None;
    let dir = tempfile::tempdir().unwrap();
    match cmd_train(&cfg, dir.path(), None) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "taxonomy"),
        other => panic!("expected a configuration error, got {other:?}"),
    }

    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, r#"{"dataset": {"source": "synthetic"}}"#).unwrap();
    let code = cli::run(["sevtrain", "train", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1);
    let err = Error::Config {
        field: "taxonomy".into(),
        message: "no taxonomy configured".into(),
    };
    assert!(cli::error_line(&err).starts_with("error kind=config field=taxonomy message="));
}

#[test]
fn adversarial_grid_sizes_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(serde_json::json!({}));
    let ck = train_once(&base, &dir.path().join("train"));
    let model = ModelRef::parse(ck.to_str().unwrap());

    let zero = tiny_config(serde_json::json!({"attack": {"epsilons": [0.0]}}));
    let reports = cmd_eval_adv(&zero, &model, &dir.path().join("zero")).unwrap();
    assert_eq!(reports.len(), 1);

    let reports = cmd_eval_adv(&base, &model, &dir.path().join("full")).unwrap();
    assert_eq!(reports.len(), 8);
    assert!(svg_lines(&dir.path().join("full").join("adv_sweep.svg")) >= 1);
    let sums: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("full").join(CHECKSUM_FILE)).unwrap()).unwrap();
    assert!(sums.get("adv_reports.csv").is_some());
}

#[test]
fn corruption_grid_mixes_native_and_precomputed_sets() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(serde_json::json!({"corruptions": [{"source": "native"}]}));
    let ck = train_once(&base, &dir.path().join("train"));
    let a = ModelRef::parse(&format!("a={}", ck.display()));

    let files = cmd_eval_corrupt(&base, std::slice::from_ref(&a), &dir.path().join("native")).unwrap();
    assert_eq!(files[0].reports.len(), 35);
    assert_eq!(files[0].aggregates.len(), 5);

    // A precomputed block for a kind the kernels do not cover.
    let gen = dir.path().join("data");
    let (_, test) = cmd_gen_data(&base, &gen).unwrap();
    let n = test.len();
    let mut bytes = Vec::new();
    for s in &test.samples {
        bytes.extend(s.image.pixels.iter().map(|v| (v * 255.0).round() as u8));
    }
    fs::write(gen.join("fog.bin"), &bytes).unwrap();
    fs::write(gen.join("fog_labels.bin"), test.samples.iter().map(|s| s.fine_label as u8).collect::<Vec<_>>()).unwrap();
    fs::write(
        gen.join("fog.json"),
        serde_json::json!({
            "kind": "fog", "severity": 2, "count": n, "dtype": "u8",
            "label_file": "fog_labels.bin", "image_size": 8
        })
        .to_string(),
    )
    .unwrap();
    let mixed = tiny_config(serde_json::json!({"corruptions": [
        {"source": "native", "kinds": ["brightness", "pixelate"], "severities": [1, 2]},
        {"source": "precomputed", "manifest": gen.join("fog.json")}
    ]}));
    let b = ModelRef::parse(&format!("b={}", ck.display()));
    let files = cmd_eval_corrupt(&mixed, &[a, b], &dir.path().join("mixed")).unwrap();
    assert_eq!(files.len(), 2);
    assert_eq!(files[0].reports.len(), 5);
    assert!(files[0].reports.iter().any(|r| r.condition.to_string().contains("fog")));
    assert_eq!(svg_lines(&dir.path().join("mixed").join("corruption_severity.svg")) % 2, 0);
    let svg = fs::read_to_string(dir.path().join("mixed").join("corruption_severity.svg")).unwrap();
    assert!(svg.contains(">a<") && svg.contains(">b<"));

    // The same kind and severity from two sources is ambiguous.
    let dup = tiny_config(serde_json::json!({"corruptions": [
        {"source": "native", "kinds": ["brightness"], "severities": [1]},
        {"source": "native", "kinds": ["brightness"], "severities": [1]}
    ]}));
    assert!(matches!(
        cmd_eval_corrupt(&dup, &[ModelRef::parse(ck.to_str().unwrap())], &dir.path().join("dup")),
        Err(Error::Config { .. })
    ));
}

#[test]
fn report_compares_directories_and_rejects_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(serde_json::json!({"attack": {"epsilons": [0.0, 1.0]}}));
    let ck1 = train_once(&base, &dir.path().join("t1"));
    let other = tiny_config(serde_json::json!({"seeds": [1], "attack": {"epsilons": [0.0, 1.0]}}));
    let ck2 = train_once(&other, &dir.path().join("t2"));
    cmd_eval_adv(&base, &ModelRef::parse(&format!("one={}", ck1.display())), &dir.path().join("e1")).unwrap();
    cmd_eval_adv(&base, &ModelRef::parse(&format!("two={}", ck2.display())), &dir.path().join("e2")).unwrap();
    let summary = cmd_report(&[dir.path().join("e1"), dir.path().join("e2")], &dir.path().join("cmp")).unwrap();
    let adv = summary.adversarial.unwrap();
    assert!(summary.corruption.is_none());
    assert!(adv.win_counts.iter().all(|w| w.model == "one" || w.model == "two"));
    let reports = fs::read_to_string(dir.path().join("cmp").join("adversarial_reports.csv")).unwrap();
    assert!(reports.starts_with("model,"));
    assert_eq!(reports.lines().count(), 5);
    assert_eq!(svg_lines(&dir.path().join("cmp").join("adversarial_sweep.svg")) % 2, 0);

    let narrow = tiny_config(serde_json::json!({"attack": {"epsilons": [0.0]}}));
    cmd_eval_adv(&narrow, &ModelRef::parse(&format!("three={}", ck2.display())), &dir.path().join("e3")).unwrap();
    assert!(matches!(
        cmd_report(&[dir.path().join("e1"), dir.path().join("e3")], &dir.path().join("bad")),
        Err(Error::GridMismatch { .. })
    ));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli::run(["sevtrain", "--help"]), 0);
    assert_eq!(cli::run(["sevtrain", "train", "--no-such-flag"]), 1);
    assert_eq!(cli::run(["sevtrain", "train", "--scale", "huge", "--out", dir.path().to_str().unwrap()]), 1);

    let cfg_path = dir.path().join("run.json");
    fs::write(&cfg_path, tiny_config(serde_json::json!({})).to_json()).unwrap();
    let missing = dir.path().join("nowhere.json");
    let code = cli::run([
        "sevtrain",
        "eval-adv",
        "--config",
        cfg_path.to_str().unwrap(),
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("adv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);

    let out = dir.path().join("train");
    let code = cli::run(["sevtrain", "train", "--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.join("seed-0").join(FINAL_CHECKPOINT).exists());
}

#[test]
fn make_targets_and_gen_data_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(serde_json::json!({}));
    let targets = cmd_make_targets(&cfg, &dir.path().join("targets")).unwrap();
    let read: SemanticTargetSet =
        serde_json::from_str(&fs::read_to_string(dir.path().join("targets").join("targets.json")).unwrap()).unwrap();
    assert_eq!(read, targets);
    assert_eq!(read.k, 2);
    let tax = ClassTaxonomy::load(dir.path().join("targets").join("taxonomy.json")).unwrap();
    assert_eq!(tax.num_fine(), 4);
    let sim = fs::read_to_string(dir.path().join("targets").join("similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 5);

    let (train, test) = cmd_gen_data(&cfg, &dir.path().join("data")).unwrap();
    assert_eq!(Dataset::load(dir.path().join("data").join("train.json")).unwrap(), train);
    let saved = tiny_config(serde_json::json!({
        "dataset": {"source": "saved", "train": dir.path().join("data/train.json"), "test": dir.path().join("data/test.json")}
    }));
    let (train2, test2) = cmd_gen_data(&saved, &dir.path().join("data2")).unwrap();
    assert_eq!(train2.samples, train.samples);
    assert_eq!(test2.samples, test.samples);
}

#[test]
fn bundled_parameter_table_covers_every_kind() {
    let table = ParameterTable::default();
    for kind in CorruptionKind::ALL {
        assert!(table.get(kind, 5).unwrap() != table.get(kind, 1).unwrap());
    }
}
