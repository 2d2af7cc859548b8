//! End-to-end runs of the `questioner` binary on a small configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 7
out_dir = "run"

[corpus]
train_scenes = 150
heldout_scenes = 80

[oracle]
dep_budget = 10000
ind_budget = 4000

[train]
max_horizon = 7
wirings = ["trueA", "indA"]

[train.il]
iterations = 2
episodes = 20

[train.rl]
iterations = 3
batch = 8

[eval]
n_games = 100
horizons = [1, 5, 7]
questioners = ["IGE", "ours"]
wirings = ["trueA", "indA"]
transcripts = 2
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("small.toml");
        Command::new(env!("CARGO_BIN_EXE_questioner"))
            .arg("--config")
            .arg(&config)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn usage_errors_exit_with_two() {
    let sb = Sandbox::new();
    let missing = Command::new(env!("CARGO_BIN_EXE_questioner"))
        .args(["--config", "/nonexistent/run.toml", "build"])
        .output()
        .unwrap();
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("cannot read config"));

    fs::write(sb.path("bad.toml"), "seed = \"seven\"\n").unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_questioner"))
        .arg("--config")
        .arg(sb.path("bad.toml"))
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);

    assert_eq!(code(&sb.run(&["train", "--stages", "rl3"])), 2);
    assert_eq!(code(&sb.run(&["frobnicate"])), 2);
    assert_eq!(code(&sb.run(&["--seed", "x", "build"])), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let sb = Sandbox::new();
    // nothing built yet
    assert_eq!(code(&sb.run(&["eval"])), 1);
    sb.ok(&["build"]);
    let out = sb.run(&["train", "--stages", "rl6"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sequencing"));
}

#[test]
fn show_config_round_trips() {
    let sb = Sandbox::new();
    let text = sb.ok(&["--seed", "11", "show-config"]);
    let cfg: questioner_cli::config::RunConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.train.max_horizon, 7);
    assert_eq!(cfg.format_version, 1);
}

#[test]
fn build_is_idempotent_and_refuses_partial_output() {
    let sb = Sandbox::new();
    sb.ok(&["build"]);
    let manifest = sb.path("run/build/manifest.json");
    let first = read(&manifest);
    let out = sb.ok(&["build"]);
    assert!(out.contains("up to date"));
    assert_eq!(read(&manifest), first);
    sb.ok(&["build", "--force"]);
    assert_eq!(read(&manifest), first);

    // a clean build in another directory gives byte-identical artifacts
    sb.ok(&["--out", sb.path("again").to_str().unwrap(), "build"]);
    assert_eq!(read(&sb.path("again/build/manifest.json")), first);

    fs::remove_file(&manifest).unwrap();
    let refused = sb.run(&["build"]);
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--force"));
    sb.ok(&["build", "--force"]);
    assert_eq!(read(&manifest), first);

    // a different seed is a different build
    assert_eq!(code(&sb.run(&["--seed", "8", "build"])), 1);

    let audit = sb.ok(&["audit-bank"]);
    assert!(audit.contains("audit passed"));
}

fn collect(dir: &Path, out: &mut Vec<(PathBuf, String)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out);
        } else {
            out.push((p.clone(), read(&p)));
        }
    }
}

fn train_tree(root: &Path) -> Vec<(PathBuf, String)> {
    let mut files = Vec::new();
    collect(&root.join("train"), &mut files);
    files
        .into_iter()
        .map(|(p, s)| (p.strip_prefix(root).unwrap().to_path_buf(), s))
        .collect()
}

#[test]
fn training_stages_skip_and_resume_deterministically() {
    let sb = Sandbox::new();
    sb.ok(&["build"]);

    sb.ok(&["train", "--stages", "il"]);
    assert!(sb.path("run/train/il.json").exists());
    assert!(!sb.path("run/train/trueA").exists());
    let il_metrics = read(&sb.path("run/train/metrics/il.jsonl"));
    assert_eq!(il_metrics.lines().count(), 2);

    // interrupted after T=6, then resumed
    sb.ok(&["train", "--stages", "rl5-6"]);
    assert!(sb.path("run/train/indA/T6.json").exists());
    assert!(!sb.path("run/train/indA/T7.json").exists());
    let il_before = read(&sb.path("run/train/il.json"));
    sb.ok(&["train"]);
    assert_eq!(read(&sb.path("run/train/il.json")), il_before);
    for w in ["trueA", "indA"] {
        for h in 5..=7 {
            let m = read(&sb.path(&format!("run/train/metrics/rl_{w}_T{h}.jsonl")));
            assert_eq!(m.lines().count(), 3, "one record per RL update");
        }
    }

    // uninterrupted run elsewhere
    let other = sb.path("other");
    let other_s = other.to_str().unwrap();
    sb.ok(&["--out", other_s, "build"]);
    sb.ok(&["--out", other_s, "train"]);
    let a = train_tree(&sb.path("run"));
    let b = train_tree(&other);
    assert_eq!(a.len(), b.len());
    for ((pa, sa), (pb, sb_)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(sa == sb_, "{} differs between runs", pa.display());
    }

    // --force retrains a single stage and reproduces it exactly
    let t7 = read(&sb.path("run/train/trueA/T7.json"));
    sb.ok(&["train", "--stages", "rl7", "--force"]);
    assert_eq!(read(&sb.path("run/train/trueA/T7.json")), t7);
}

#[test]
fn expert_eval_needs_no_checkpoints_and_grid_has_full_shape() {
    let sb = Sandbox::new();
    sb.ok(&["build"]);
    let cfg = read(&sb.path("small.toml")).replace(
        "questioners = [\"IGE\", \"ours\"]",
        "questioners = [\"IGE\", \"TPE\", \"random\"]",
    );
    fs::write(sb.path("small.toml"), cfg).unwrap();
    let table = sb.ok(&["eval"]);
    assert!(table.contains("IGE/trueA") && table.contains("random/indA"));

    let grid = read(&sb.path("run/eval/grid.jsonl"));
    let records: Vec<serde_json::Value> =
        grid.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3 * 3 * 2);
    for r in &records {
        assert_eq!(r["format_version"], 1);
        let acc = r["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(r["ci95"].as_f64().unwrap() >= 0.0);
    }
    let text = read(&sb.path("run/eval/table.txt"));
    assert_eq!(text.lines().count(), 1 + 3);

    let transcripts = sb.path("run/eval/transcripts.jsonl");
    assert_eq!(read(&transcripts).lines().count(), 3 * 2 * 2);
    let checked = sb.ok(&["eval", "--check-transcripts", transcripts.to_str().unwrap()]);
    assert!(checked.contains("12 transcript(s) verified"));
}

#[test]
fn eval_with_trained_policy() {
    let sb = Sandbox::new();
    sb.ok(&["build"]);
    assert_eq!(code(&sb.run(&["eval"])), 1, "policy eval needs checkpoints");
    sb.ok(&["train"]);
    sb.ok(&["eval"]);
    let first = read(&sb.path("run/eval/grid.jsonl"));
    assert_eq!(first.lines().count(), 3 * 2 * 2);
    sb.ok(&["eval"]);
    assert_eq!(read(&sb.path("run/eval/grid.jsonl")), first);
}

#[test]
fn play_from_answers_file() {
    let sb = Sandbox::new();
    sb.ok(&["build"]);
    // an invalid line is re-prompted; na is accepted
    fs::write(sb.path("answers.txt"), "y\nperhaps\nna\nn\ny\nn\n2\n").unwrap();
    let out = sb.ok(&["play", "--answers-file", sb.path("answers.txt").to_str().unwrap()]);
    assert!(out.contains("category"));
    assert!(out.contains("please answer y, n or na"));
    assert!(out.contains("My guess"));
    let session = sb.path("run/play/session.json");
    let t: questioner::engine::Transcript = serde_json::from_str(&read(&session)).unwrap();
    assert_eq!(t.turns.len(), 5);
    assert_eq!(t.turns[1].answer, questioner::Answer::Na);
    assert_eq!(t.target, 2);
    let checked = sb.ok(&["eval", "--check-transcripts", session.to_str().unwrap()]);
    assert!(checked.contains("1 transcript(s) verified"));

    // a tampered guess is caught
    let mut bad = t.clone();
    bad.guess = (t.guess + 1) % bad.scene.objects.len();
    bad.success = bad.guess == bad.target;
    fs::write(sb.path("bad.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    assert_eq!(code(&sb.run(&["eval", "--check-transcripts", sb.path("bad.json").to_str().unwrap()])), 1);

    // running out of input aborts cleanly without a transcript
    fs::remove_file(&session).unwrap();
    fs::write(sb.path("short.txt"), "y\n").unwrap();
    let out = sb.run(&["play", "--answers-file", sb.path("short.txt").to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("aborted"));
    assert!(!session.exists());
}
