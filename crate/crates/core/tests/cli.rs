use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tactile-pose"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn catalog_lists_builtin_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["catalog"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert!(names.contains(&"circle") && names.contains(&"box"), "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["synth", "--object", "box", "--n", "0", "--out", "d.jsonl"][..],
        &["synth", "--object", "box"],
        &["frobnicate"],
        &["sample", "--checkpoint", "m", "--obs", "z", "--s", "0"],
    ] {
        let o = cli(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &["synth", "--object", "torus", "--n", "5", "--out", "d.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown object"), "{}", stderr(&o));
    let o = cli(dir.path(), &["train", "--dataset", "missing.jsonl", "--out", "m.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn print_config_does_not_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        dir.path(),
        &["--print-config", "synth", "--object", "box", "--n", "7", "--seed", "3", "--out", "d.jsonl"],
    );
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["synthesis"]["n_samples"], 7);
    assert_eq!(v["synthesis"]["seed"], 3);
    assert_eq!(v["sensor"]["n_taxels"], 32);
    assert!(!dir.path().join("d.jsonl").exists());
}

#[test]
fn pipeline_and_checkpoint_compatibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = cli(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    run(&["synth", "--object", "box", "--n", "300", "--taxels", "8", "--seed", "1", "--out", "d.jsonl"]);
    run(&["train", "--dataset", "d.jsonl", "--out", "m.ckpt", "--epochs", "2", "--hidden", "16", "--batch-size", "50"]);

    std::fs::write(d.join("z.txt"), "0.1, 0.0 0.3\n# comment\n0 0 0\n0.2,0.0\n").unwrap();
    let o = run(&["sample", "--checkpoint", "m.ckpt", "--obs", "z.txt", "--s", "5", "--seed", "9"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let poses: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(' ').map(|t| t.parse().unwrap()).collect())
        .collect();
    assert_eq!(poses.len(), 5);
    for p in &poses {
        assert_eq!(p.len(), 4);
        assert!((p[2].hypot(p[3]) - 1.0).abs() < 1e-9);
    }

    std::fs::write(d.join("short.txt"), "0.1 0.2").unwrap();
    let o = cli(d, &["sample", "--checkpoint", "m.ckpt", "--obs", "short.txt"]);
    assert_eq!(o.status.code(), Some(1));

    run(&["filter", "--checkpoint", "m.ckpt", "--object", "box", "--contacts", "3", "--out", "log.jsonl"]);
    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["contact_index"], i);
        for key in ["map_add", "wmean_add", "effective_sample_size", "injected_count"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    assert_eq!(rows[1]["injected_count"], 50);

    for args in [
        &["filter", "--checkpoint", "m.ckpt", "--object", "circle", "--out", "x.jsonl"][..],
        &["filter", "--checkpoint", "m.ckpt", "--object", "box", "--rho", "0.004", "--out", "x.jsonl"],
    ] {
        let o = cli(d, args);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("incompatible checkpoint"), "{}", stderr(&o));
    }

    let mut bytes = std::fs::read(d.join("m.ckpt")).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(d.join("cut.ckpt"), bytes).unwrap();
    let o = cli(d, &["sample", "--checkpoint", "cut.ckpt", "--obs", "z.txt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_requires_checkpoints_unless_training() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"
name = "tiny"
checkpoint_dir = "ckpt"
output_dir = "out"

[dataset]
n_samples = 200
seed = 1

[training]
epochs = 2
batch_size = 50
hidden_width = 16

[compare]
objects = ["circle"]
taxel_resolutions = [8]
seeds = [0]
n_configurations = 4
n_hypotheses = 3
"#;
    std::fs::write(dir.path().join("tiny.toml"), spec).unwrap();
    let o = cli(dir.path(), &["eval", "--spec", "tiny.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));

    let o = cli(dir.path(), &["eval", "--spec", "tiny.toml", "--train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("ckpt/circle_8.ckpt").exists());
    let table = std::fs::read_to_string(dir.path().join("out/tiny_compare.csv")).unwrap();
    assert!(table.starts_with("# experiment: tiny\n"));
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("circle,8,ddpm,0,4,3,"));
    assert!(rows[2].starts_with("circle,8,sdf_projection,0,4,3,"));
}
