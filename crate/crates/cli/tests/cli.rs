use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[datagen.sizes]
labeled = 10
dev = 8
test = 8
lm_text = 100

[encoder]
num_blocks = 1
d_model = 16
num_heads = 2
d_ff = 32
norm_kind = { kind = "group", num_groups = 4 }

[train]
epochs = 3
ipl_iters = 1
ipl_epochs_per_iter = 1
mpl_epochs = 1
checkpoint_avg_n = 2

[beam]
beam_size = 4
"#;

fn mplab(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_mplab"))
        .arg("--config")
        .arg(&config)
        .arg("--workdir")
        .arg(dir.join("work"))
        .args(args)
        .env("MPLAB_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn last_path(out: &Output) -> PathBuf {
    PathBuf::from(ok(out).lines().last().unwrap())
}

#[test]
fn stepwise_pipeline_ends_in_a_wrr_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mplab(d, &["gen-data", "--setting", "in_domain_small"]));
    ok(&mplab(d, &["lm-train"]));
    let seed = last_path(&mplab(d, &["train-seed"]));
    let top = last_path(&mplab(d, &["topline"]));
    let ipl = last_path(&mplab(d, &["ipl", "--init", seed.to_str().unwrap()]));
    let mpl = ok(&mplab(d, &["mpl", "--init", ipl.to_str().unwrap()]));
    assert_eq!(mpl.lines().count(), 3);
    let mpl = mpl.lines().next().unwrap().to_string();

    let reference = d.join("work/data/test.txt");
    let mut wers = Vec::new();
    for ckpt in [&seed, &top] {
        let hyp = last_path(&mplab(d, &["decode", "--checkpoint", ckpt.to_str().unwrap()]));
        let out = ok(&mplab(d, &["eval", "--hyp", hyp.to_str().unwrap(), "--ref", reference.to_str().unwrap()]));
        let wer: f64 = out.lines().last().unwrap().split("wer ").nth(1).unwrap().trim().parse().unwrap();
        wers.push(wer);
    }
    let hyp = last_path(&mplab(d, &["decode", "--checkpoint", &mpl, "--mode", "beam", "--lm"]));
    assert!(hyp.file_name().unwrap().to_str().unwrap().ends_with(".test.beam_lm.txt"));
    let out = ok(&mplab(
        d,
        &[
            "eval",
            "--hyp",
            hyp.to_str().unwrap(),
            "--ref",
            reference.to_str().unwrap(),
            "--seed-wer",
            &wers[0].to_string(),
            "--topline-wer",
            &wers[1].to_string(),
        ],
    ));
    assert!(out.contains(" wrr "), "{out}");
}

#[test]
fn run_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&mplab(dir.path(), &["--set", "pipeline.mpl_init=seed", "run"]));
    for method in ["seed", "topline", "ipl", "mpl"] {
        assert!(out.lines().any(|l| l.starts_with(method)), "{out}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("work/report.txt")).unwrap(), out);
}

#[test]
fn eval_of_reference_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("ref.txt");
    fs::write(&r, "ba de ki\nlo mu\n").unwrap();
    let out = ok(&mplab(dir.path(), &["eval", "--hyp", r.to_str().unwrap(), "--ref", r.to_str().unwrap()]));
    assert!(out.contains("wer 0.0000"), "{out}");
}

#[test]
fn train_seed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&mplab(d, &["gen-data"]));
    let first = fs::read(last_path(&mplab(d, &["train-seed"]))).unwrap();
    let second = fs::read(last_path(&mplab(d, &["train-seed"]))).unwrap();
    assert_eq!(first, second);
}

#[test]
fn missing_input_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = mplab(dir.path(), &["train-seed"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing input"), "{err}");
    assert!(err.contains(&dir.path().join("work/data/manifest.toml").display().to_string()), "{err}");
}

#[test]
fn config_errors_and_locks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = mplab(d, &["--set", "train.w=1.5", "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error [config]"));

    fs::create_dir_all(d.join("work")).unwrap();
    fs::write(d.join("work/.lock"), "").unwrap();
    assert_eq!(mplab(d, &["gen-data"]).status.code(), Some(4));
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text = ok(&mplab(d, &["--seed", "7", "--set", "encoder.norm_kind={kind=\"batch\"}", "show-config"]));
    fs::write(d.join("effective.toml"), &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_mplab"))
        .args(["--config", d.join("effective.toml").to_str().unwrap(), "show-config"])
        .output()
        .unwrap();
    assert_eq!(ok(&again), text);
    assert!(text.contains("base_seed = 7"));
    assert!(text.contains("kind = \"batch\""));
}
