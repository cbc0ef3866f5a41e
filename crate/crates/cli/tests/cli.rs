use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use citeintent::backend::{BagOfContextMlm, Checkpoint, MockMlm};
use citeintent::experiment::EvalReport;
use citeintent::prompt::MaskedLanguageModel;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn citeintent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_citeintent")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a config pointing at the shared fixtures and returns its path.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let cfg = format!(
        r#"
mlm = "{mlm}"
output_dir = "out"

[data]
train = "{train}"
test = "{test}"

[corpus]
input = "{papers}"
quota = 10

[verbalizer]
embeddings = "{vectors}"
k = 3

[refinement]
support_size = 20

[train]
seeds = [13, 21]
{extra}
"#,
        mlm = s(&fixture("mock_mlm.json")),
        train = s(&fixture("scicite_train.jsonl")),
        test = s(&fixture("scicite_test.jsonl")),
        papers = s(&fixture("papers.jsonl")),
        vectors = s(&fixture("vectors.txt")),
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn toy_verbalizer(dir: &Path) -> PathBuf {
    let v = citeintent::verbalizer::Verbalizer::from_words(
        &citeintent::dataset::LabelSchema::scicite(),
        &[
            ("background", &["background", "prior", "context"]),
            ("method", &["method", "technique", "procedure"]),
            ("result", &["result", "finding", "outcome"]),
        ],
    )
    .unwrap();
    let path = dir.join("toy_verbalizer.json");
    citeintent::verbalizer::save_verbalizer(&v, &path).unwrap();
    path
}

fn bag_checkpoint(dir: &Path) -> PathBuf {
    let raw = std::fs::read_to_string(fixture("mock_mlm.json")).unwrap();
    let Checkpoint::Mock(c) = serde_json::from_str::<Checkpoint>(&raw).unwrap() else {
        panic!("fixture is not a mock checkpoint")
    };
    let bag = BagOfContextMlm::from_mock(&MockMlm::new(c).unwrap(), "toy-bag", 2.0);
    let path = dir.join("bag.json");
    bag.save(&path).unwrap();
    path
}

#[test]
fn quota_zero_is_a_usage_error_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = citeintent(&["--config", s(&cfg), "--json-errors", "ingest-corpus", "--quota", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
    assert_eq!(err["error"]["exit_code"], 2);
}

#[test]
fn ingest_writes_manifest_with_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let stdout = ok(&citeintent(&["--config", s(&cfg), "ingest-corpus"]));
    assert!(stdout.contains("papers consumed: 3, skipped records: 1"), "{stdout}");
    let manifest = json(&dir.path().join("out/corpus/manifest.json"));
    assert_eq!(manifest["papers_consumed"], 3);
    assert_eq!(manifest["skipped_records"], 1);
    assert_eq!(manifest["sections"]["introduction"], 9);
    assert_eq!(manifest["sections"]["methodology"], 10);
    assert_eq!(manifest["config"]["corpus"]["quota"], 10);
}

#[test]
fn full_pipeline_from_papers_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "regime = \"zero-shot\"");
    let c = s(&cfg);
    ok(&citeintent(&["--config", c, "ingest-corpus"]));
    ok(&citeintent(&["--config", c, "build-verbalizer"]));
    let built = json(&dir.path().join("out/verbalizer.json"));
    assert_eq!(built["manifest"]["k"], 3);
    assert!(built["manifest"]["config"].is_object());

    let built_path = dir.path().join("out/verbalizer.json");
    ok(&citeintent(&["--config", c, "refine-verbalizer", "--verbalizer", s(&built_path)]));
    let refined_path = dir.path().join("out/verbalizer.refined.json");
    let refined = json(&refined_path);
    assert!(!refined["manifest"]["refinements"].as_array().unwrap().is_empty());

    let stdout = ok(&citeintent(&["--config", c, "evaluate", "--verbalizer", s(&refined_path)]));
    assert!(stdout.contains("report written to"));
    let report_path = dir.path().join("out/eval/report.json");
    let report = EvalReport::load(&report_path).unwrap();
    assert_eq!(report.per_seed.len(), 2);
    assert_eq!(report.tool_version, citeintent::TOOL_VERSION);
    assert!(report.config.is_object());
    assert!(dir.path().join("out/eval/confusion.csv").exists());
    assert!(dir.path().join("out/eval/report.txt").exists());

    let rendered = ok(&citeintent(&["--config", c, "report"]));
    assert_eq!(rendered, report.to_text());
    let copy = dir.path().join("copy");
    ok(&citeintent(&["report", "--input", s(&report_path), "--out", s(&copy)]));
    assert_eq!(
        std::fs::read(copy.join("report.json")).unwrap(),
        std::fs::read(&report_path).unwrap()
    );
}

#[test]
fn zero_shot_evaluate_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let verb = toy_verbalizer(dir.path());
    let cfg = write_config(dir.path(), "regime = \"zero-shot\"");
    ok(&citeintent(&["--config", s(&cfg), "--seed", "5", "evaluate", "--verbalizer", s(&verb)]));
    let report = EvalReport::load(dir.path().join("out/eval/report.json")).unwrap();
    assert_eq!(report.per_seed.len(), 1);
    assert_eq!(report.per_seed[0].seed, 5);
    assert!((report.mean_accuracy - 0.9).abs() < 1e-12);
}

#[test]
fn predict_reads_files_and_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let verb = toy_verbalizer(dir.path());
    let cfg = write_config(dir.path(), "");
    let input = dir.path().join("sentences.txt");
    std::fs::write(&input, "We use the method of Smith.\n\nPrevious work studied this.\n").unwrap();
    let stdout = ok(&citeintent(&["--config", s(&cfg), "predict", "--verbalizer", s(&verb), "--input", s(&input)]));
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["label"], "method");
    assert_eq!(lines[0]["scores"].as_object().unwrap().len(), 3);

    let mut child = Command::new(env!("CARGO_BIN_EXE_citeintent"))
        .args(["--config", s(&cfg), "predict", "--verbalizer", s(&verb)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"We use the method of Smith.\n").unwrap();
    let piped = ok(&child.wait_with_output().unwrap());
    assert_eq!(piped.lines().next(), stdout.lines().next());
}

#[test]
fn zero_epoch_training_warns_and_keeps_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let verb = toy_verbalizer(dir.path());
    let cfg = write_config(dir.path(), "");
    let bag = bag_checkpoint(dir.path());
    let out = citeintent(&["--config", s(&cfg), "--mlm", s(&bag), "train", "--verbalizer", s(&verb), "--epochs", "0"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unchanged"));
    let summary = json(&dir.path().join("out/model/train.json"));
    let original = citeintent::backend::load_mlm(s(&bag)).unwrap();
    assert_eq!(summary["model_fingerprint"], original.parameter_fingerprint());
}

#[test]
fn trained_model_carries_provenance_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let verb = toy_verbalizer(dir.path());
    let cfg = write_config(dir.path(), "batch_size = 4\nlearning_rate = 0.05");
    let bag = bag_checkpoint(dir.path());
    let c = s(&cfg);
    let stdout = ok(&citeintent(&[
        "--config", c, "--mlm", s(&bag), "train", "--verbalizer", s(&verb), "--regime", "2-shot", "--epochs", "2",
    ]));
    assert!(stdout.contains("epoch 2: loss"));
    let model_path = dir.path().join("out/model/model.json");
    let model = json(&model_path);
    assert_eq!(model["provenance"]["tool_version"], citeintent::TOOL_VERSION);
    assert_eq!(model["provenance"]["config"]["train"]["regime"], "2-shot");
    let trained = citeintent::backend::load_mlm(s(&model_path)).unwrap();
    let summary = json(&dir.path().join("out/model/train.json"));
    assert_eq!(summary["model_fingerprint"], trained.parameter_fingerprint());
    assert_eq!(summary["train_size"], 6);

    let trained_verb = dir.path().join("out/model/verbalizer.json");
    ok(&citeintent(&[
        "--config", c, "--mlm", s(&model_path), "evaluate", "--verbalizer", s(&trained_verb), "--regime", "zero-shot",
    ]));
    let report = EvalReport::load(dir.path().join("out/eval/report.json")).unwrap();
    assert_eq!(report.model, "toy-bag");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let verb = toy_verbalizer(dir.path());
    let cfg = write_config(dir.path(), "regime = \"zero-shot\"");
    let c = s(&cfg);
    let v = s(&verb);
    let missing = dir.path().join("nope.json");

    let out = citeintent(&["--config", c, "--mlm", s(&missing), "evaluate", "--verbalizer", v]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    let out = citeintent(&["--config", c, "evaluate", "--verbalizer", v, "--test", s(&missing)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = citeintent(&["--config", c, "--schema", "nonsense", "evaluate", "--verbalizer", v]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = citeintent(&["--config", c, "train", "--verbalizer", v]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = citeintent(&["--config", c, "train", "--verbalizer", v, "--regime", "supervised", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(4), "mock backend is not trainable");

    let out = citeintent(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let mut raw = std::fs::read_to_string(&cfg).unwrap();
    raw.push_str("\n[bogus]\nx = 1\n");
    std::fs::write(&cfg, raw).unwrap();
    let out = citeintent(&["--config", s(&cfg), "--json-errors", "report"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_paths_resolve_against_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::copy(fixture("papers.jsonl"), data.join("papers.jsonl")).unwrap();
    let cfg = dir.path().join("rel.toml");
    std::fs::write(&cfg, "output_dir = \"artifacts\"\n[corpus]\ninput = \"data/papers.jsonl\"\nquota = 5\n").unwrap();
    let other = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_citeintent"))
        .current_dir(other.path())
        .args(["--config", s(&cfg), "ingest-corpus"])
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("artifacts/corpus/manifest.json").exists());
}
