use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hiergen(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiergen"))
        .current_dir(dir)
        .env("HIERGEN_DETERMINISTIC", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\n{stdout}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    stdout
}

const CONFIG: &str = r#"
[data]
interactions = "data/interactions.tsv"
schema = "data/schema.toml"
features = "data/features.tsv"

[tokenizer]
kind = "sid-train"
levels = 2
codebook_size = 32
seed = 1

[augmentation]
x = 1
seed = 2

[model]
dim = 16
inner_dim = 16
heads = 2
head_dim = 8
layers = 1
max_tokens = 60

[train]
batch_size = 16
epochs = 1
base_lr = 0.003
seed = 4
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&hiergen(dir.path(), &["synth", "--out", "data", "--users", "80", "--seed", "3"]));
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn statuses(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("out/run_log.jsonl"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["status"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn pipeline_runs_then_reuses_its_cache() {
    let ws = workspace();
    let dir = ws.path();
    let stdout = ok(&hiergen(dir, &["evaluate", "--config", "exp.toml"]));
    assert!(stdout.contains("recent-items"));
    assert!(statuses(dir).iter().all(|s| s == "ran"));
    for f in ["report.tsv", "report.md", "metrics.jsonl", "users.jsonl", "summary.json", "config.resolved.toml"] {
        assert!(dir.join("out").join(f).exists(), "missing {f}");
    }
    let first = fs::read_to_string(dir.join("out/report.tsv")).unwrap();

    ok(&hiergen(dir, &["evaluate", "--config", "exp.toml"]));
    assert!(statuses(dir).iter().all(|s| s == "cached"));
    assert_eq!(fs::read_to_string(dir.join("out/report.tsv")).unwrap(), first);

    // Perturbation settings only reach the evaluate stage.
    ok(&hiergen(dir, &["evaluate", "--config", "exp.toml", "--perturb-r", "0.5", "--perturb-seed", "9"]));
    let s = statuses(dir);
    assert_eq!(&s[..5], ["cached"; 5]);
    assert_eq!(s[5], "ran");

    let md = ok(&hiergen(dir, &["report", "--metrics", "out/metrics.jsonl", "--format", "markdown"]));
    assert!(md.starts_with("| recommender | task | behavior | users | HR@5 |"));
    assert!(md.lines().any(|l| l.starts_with("| model | target | conversion |")));
}

#[test]
fn identical_configs_give_identical_reports() {
    let a = workspace();
    let b = workspace();
    ok(&hiergen(a.path(), &["evaluate", "--config", "exp.toml"]));
    ok(&hiergen(b.path(), &["evaluate", "--config", "exp.toml"]));
    let ra = fs::read_to_string(a.path().join("out/report.tsv")).unwrap();
    let rb = fs::read_to_string(b.path().join("out/report.tsv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn sessionize_and_augment_outputs() {
    let ws = workspace();
    let dir = ws.path();
    let stdout = ok(&hiergen(dir, &["sessionize", "--config", "exp.toml"]));
    assert!(stdout.contains("sessions"));
    ok(&hiergen(dir, &["augment", "--config", "exp.toml", "--x", "2", "--seed", "5"]));
    let tsv = fs::read_to_string(dir.join("out/trainset.tsv")).unwrap();
    assert!(tsv.starts_with("user\titem\tbehavior\ttimestamp\tfold"));
    let folds: std::collections::BTreeSet<&str> = tsv.lines().skip(1).map(|l| l.rsplit('\t').next().unwrap()).collect();
    assert_eq!(folds.into_iter().collect::<Vec<_>>(), ["0", "1", "2"]);
}

#[test]
fn exit_codes_follow_error_class() {
    let ws = workspace();
    let dir = ws.path();
    let code = |args: &[&str]| hiergen(dir, args).status.code();

    assert_eq!(code(&["train", "--config", "absent.toml"]), Some(2));
    assert_eq!(code(&["no-such-command"]), Some(2));

    fs::write(dir.join("noseed.toml"), CONFIG.replace("seed = 4\n", "")).unwrap();
    assert_eq!(code(&["train", "--config", "noseed.toml"]), Some(2));

    let mut bad = fs::read_to_string(dir.join("data/interactions.tsv")).unwrap();
    bad.push_str("u1\ti1\tnot-a-behavior\t5\n");
    fs::write(dir.join("data/bad.tsv"), bad).unwrap();
    let strict = CONFIG.replace("data/interactions.tsv\"", "data/bad.tsv\"\nstrict = true");
    fs::write(dir.join("strict.toml"), strict).unwrap();
    let out = hiergen(dir, &["ingest", "--config", "strict.toml"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bad.tsv:"), "{stderr}");

    // Lenient ingestion reports the rejected row and carries on.
    let lenient = CONFIG.replace("data/interactions.tsv", "data/bad.tsv");
    fs::write(dir.join("lenient.toml"), lenient).unwrap();
    ok(&hiergen(dir, &["ingest", "--config", "lenient.toml"]));
}
