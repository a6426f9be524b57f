use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perceiver-vl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[corpus]
train = 16
val = 4
test = 4

[model.encoder]
d = 16
heads = 2
n_latents = 4

[pretrain]
steps = 3
batch = 2

[finetune]
steps = 2
batch = 2
"#;

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(dir.path(), &[])), 1);
    assert_eq!(code(&cli(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&cli(dir.path(), &["flops", "--stream", "dual"])), 1);
    assert_eq!(code(&cli(dir.path(), &["flops", "--seed", "x"])), 1);
    assert_eq!(code(&cli(dir.path(), &["--help"])), 0);
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cli(dir.path(), &["flops", "--layerdrop-infer", "4"])), 2);
    std::fs::write(dir.path().join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&cli(dir.path(), &["flops", "--config", "bad.toml"])), 2);
    assert_eq!(code(&cli(dir.path(), &["flops", "--config", "missing.toml"])), 2);
    // No corpus yet.
    assert_eq!(code(&cli(dir.path(), &["train"])), 2);
}

#[test]
fn flops_reports_both_encoders() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["flops", "--aggregation", "separate", "--latent-pos", "fourier", "--out", "r.json"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("latent encoder") && text.contains("baseline"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["aggregation"], "separate");
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "[sweep]\nvariable = \"n\"\ngrid = [8, 16]\n").unwrap();
    let o = cli(dir.path(), &["sweep", "--config", "s.toml", "--out", "n.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("n.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variable,analytic_mac,measured_mac,wall_ns,mode,config_hash");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("n=8,"));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", "tiny.toml"]);
        let o = cli(d, &all);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["gen-data"]);
    assert!(d.join("data/index.json").exists() && d.join("data/pixels.bin").exists());
    run(&["train"]);
    assert!(d.join("model.ckpt").exists());
    let log = std::fs::read_to_string(d.join("model.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = run(&["eval-retrieval", "--stream", "multi", "--layerdrop-infer", "1", "--out", "ret.json"]);
    assert!(out.contains("R@1") && out.contains("saves"), "{out}");
    run(&["eval-qa"]);
    run(&["finetune", "--stream", "mixed", "--out", "mixed.ckpt"]);
    assert!(d.join("mixed.ckpt").exists());

    // Architecture flags must match the checkpoint.
    let o = cli(d, &["eval-qa", "--config", "tiny.toml", "--aggregation", "separate"]);
    assert_eq!(code(&o), 2);

    // A corrupted checkpoint is a validation failure.
    let mut bytes = std::fs::read(d.join("model.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(d.join("model.ckpt"), bytes).unwrap();
    let o = cli(d, &["eval-qa", "--config", "tiny.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!("{TINY}\n[pretrain.adam]\nlr = 1e30\n").replace("steps = 3", "steps = 50");
    std::fs::write(d.join("hot.toml"), cfg).unwrap();
    assert_eq!(code(&cli(d, &["gen-data", "--config", "hot.toml"])), 0);
    let o = cli(d, &["train", "--config", "hot.toml"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn selftest_and_grad_check_pass() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = cli(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = cli(dir.path(), &["grad-check", "--config", "tiny.toml"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn bench_orders_streams() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.toml"), "[bench]\ncorpus_size = 8\nruns = 1\n").unwrap();
    let o = cli(dir.path(), &["bench", "--config", "b.toml", "--out", "b.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let macs: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(macs.len(), 3);
    assert!(macs[0] > macs[1] && macs[1] > macs[2], "{csv}");
}
