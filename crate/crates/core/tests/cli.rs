mod common;

use std::path::Path;
use std::process::{Command, Output};

use dash::harness::{load_checkpoint, RunConfig};
use dash::model::{HybridArch, OperatorKind};

fn dash(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dash"))
        .args(args)
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dash(dir, args);
    assert!(
        out.status.success(),
        "dash {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(cfg: &RunConfig) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), cfg.to_toml()).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let cfg = common::tiny_config();
    let dir = setup(&cfg);
    let d = dir.path();
    for cmd in [
        "gen-corpus",
        "train-teacher",
        "align",
        "search",
        "sweep",
        "distill",
        "eval",
        "report",
    ] {
        ok(d, &[cmd]);
    }
    for f in [
        "corpus.bin",
        "teacher.ckpt.json",
        "teacher_loss.csv",
        "candidates.ckpt.json",
        "search.ckpt.json",
        "search_log.csv",
        "sweep.csv",
        "student.ckpt.json",
        "eval.csv",
        "report.csv",
        "allocation.svg",
        "budget_kl.svg",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }

    let arch_txt = std::fs::read_to_string(d.join("arch.txt")).unwrap();
    let arch: HybridArch = arch_txt.trim().parse().unwrap();
    assert_eq!(arch.len(), cfg.model.layers);
    assert!(arch_txt.split_whitespace().all(|m| ["F", "W", "L"].contains(&m)));

    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(
        lines.next().unwrap(),
        "lambda,seed,budget,avg_entropy,avg_top1,avg_margin,ambiguous,heldout_kl"
    );
    assert_eq!(lines.count(), 4);

    let student = load_checkpoint(&d.join("student.ckpt.json")).unwrap();
    assert_eq!(student.arch, Some(arch));
    assert!(load_checkpoint(&d.join("search.ckpt.json")).unwrap().alpha.is_some());
    assert_eq!(std::fs::read_to_string(d.join("eval.csv")).unwrap().lines().count(), 2);
}

#[test]
fn binary_space_flag_excludes_window() {
    let cfg = common::tiny_config();
    let dir = setup(&cfg);
    let d = dir.path();
    for cmd in ["gen-corpus", "train-teacher", "align"] {
        ok(d, &[cmd]);
    }
    ok(
        d,
        &["search", "--budget-space", "binary", "--lambda", "0", "--seed", "4"],
    );
    let arch: HybridArch = std::fs::read_to_string(d.join("arch.txt"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert_eq!(arch.count(OperatorKind::Window), 0);
    let ck = load_checkpoint(&d.join("search.ckpt.json")).unwrap();
    assert_eq!(ck.alpha.unwrap().alpha.cols(), 2);
    assert_eq!(ck.metadata.seed, 4);
}

#[test]
fn config_subcommand_round_trips() {
    let cfg = common::tiny_config();
    let dir = setup(&cfg);
    let printed = ok(dir.path(), &["config", "--seed", "9"]);
    assert_eq!(RunConfig::from_toml(&printed).unwrap(), cfg.with_seed(9));
}

#[test]
fn failures_exit_nonzero() {
    let cfg = common::tiny_config();
    let dir = setup(&cfg);
    let d = dir.path();

    // No corpus or checkpoints yet.
    for cmd in ["train-teacher", "align", "search", "distill", "eval", "report"] {
        let out = dash(d, &[cmd]);
        assert!(!out.status.success(), "{cmd} succeeded without inputs");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }

    assert!(!dash(d, &["search", "--lambda", "-1"]).status.success());
    assert!(!dash(d, &["search", "--budget-space", "quad"]).status.success());

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("run.toml"), format!("{}\nunexpected_key = 1\n", cfg.to_toml())).unwrap();
    assert!(!dash(&bad, &["gen-corpus"]).status.success());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    assert_eq!(
        RunConfig::load(&dir.join("default.toml")).unwrap(),
        RunConfig::default()
    );
    let desk = RunConfig::load(&dir.join("desk.toml")).unwrap();
    assert_eq!(desk.model.window * 8, desk.model.max_seq_len);
}
