use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn triamese(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triamese"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = triamese(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

const SMALL: &str = "preset = \"desk\"\n[synth]\nn = 8\n[train]\nepochs = 2\n";

#[test]
fn default_desk_synth_writes_32_volumes_with_70_15_15_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["synth"]);
    assert!(out.contains("wrote 32 volumes"), "{out}");
    let manifest = fs::read_to_string(dir.path().join("data/manifest.csv")).unwrap();
    let count = |s: &str| manifest.lines().filter(|l| l.ends_with(s)).count();
    assert_eq!((count(",train"), count(",val"), count(",test")), (22, 5, 5));
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let a = workspace(SMALL);
    let b = workspace(SMALL);
    ok(a.path(), &["synth", "--config", "run.toml", "--seed", "5"]);
    ok(b.path(), &["synth", "--config", "run.toml", "--seed", "5"]);
    for name in ["manifest.csv", "sub_0003.raw"] {
        let read = |d: &Path| fs::read(d.join("data").join(name)).unwrap();
        assert_eq!(read(a.path()), read(b.path()), "{name}");
    }
}

#[test]
fn config_errors_exit_with_2_and_name_the_key() {
    let dir = workspace("[train]\nlearnin_rate = 0.1\n");
    let out = triamese(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnin_rate"));

    let dir = workspace("preset = \"desk\"\n[synth]\nn = 0\n");
    assert_eq!(triamese(dir.path(), &["synth", "--config", "run.toml"]).status.code(), Some(2));

    let dir = workspace(SMALL);
    assert_eq!(triamese(dir.path(), &["eval", "--config", "run.toml", "--split", "dev"]).status.code(), Some(2));
    assert_eq!(triamese(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = workspace(SMALL);
    // no dataset yet
    let out = triamese(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.csv"));
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = workspace(SMALL);
    let d = dir.path();
    ok(d, &["synth", "--config", "run.toml"]);
    ok(d, &["train", "--config", "run.toml", "--serial"]);
    for f in ["last.ckpt", "best.ckpt", "train_log.csv", "config.toml"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_mse,val_mae,val_r,val_rp,lr\n"));
    assert_eq!(log.lines().count(), 3);

    // the test split has a single volume
    let json = ok(d, &["eval", "--config", "run.toml"]);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(report["n"], 1);
    assert!(report["mae"].is_number());
    assert!(report["r"].is_null() && report["rp"].is_null());
    assert!(report["r_reason"].is_string());
    assert_eq!(json, ok(d, &["eval", "--config", "run.toml"]));

    let out = ok(d, &["explain", "--config", "run.toml"]);
    assert!(out.contains("argmax voxel ("), "{out}");
    for f in ["attention_raw.json", "attention_minmax.json", "attention_slices/attention_000.pgm"] {
        assert!(d.join("run/explain").join(f).exists(), "{f}");
    }

    let out = ok(d, &["occlude", "--config", "run.toml", "--split", "val"]);
    assert!(out.contains("top cube at voxel ("), "{out}");
    let line = out.lines().find(|l| l.starts_with("compare_maps")).unwrap();
    if let Some(value) = line.split("= ").nth(1) {
        assert_eq!(value.split('.').nth(1).map(str::len), Some(2), "{line}");
    }
    for f in ["occlusion_raw.json", "occlusion_minmax.json", "occlusion_slices/occlusion_000.pgm"] {
        assert!(d.join("run/occlusion").join(f).exists(), "{f}");
    }
}

#[test]
fn resume_continues_bit_exactly() {
    let straight = workspace("preset = \"desk\"\n[synth]\nn = 12\n[train]\nepochs = 3\n");
    let staged = workspace("preset = \"desk\"\n[synth]\nn = 12\n[train]\nepochs = 1\n");
    for d in [straight.path(), staged.path()] {
        ok(d, &["synth", "--config", "run.toml"]);
        ok(d, &["train", "--config", "run.toml"]);
    }
    fs::write(
        staged.path().join("run.toml"),
        "preset = \"desk\"\n[synth]\nn = 12\n[train]\nepochs = 3\n",
    )
    .unwrap();
    ok(staged.path(), &["train", "--config", "run.toml", "--resume"]);
    for f in ["last.ckpt", "best.ckpt", "train_log.csv"] {
        let read = |d: &Path| fs::read(d.join("run").join(f)).unwrap();
        assert!(read(straight.path()) == read(staged.path()), "{f} differs");
    }
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let config = "preset = \"desk\"\n[synth]\nn = 12\n[train]\nepochs = 1\n[ablate]\nmlp_widths = [[3, 3]]\n";
    let a = workspace(config);
    ok(a.path(), &["synth", "--config", "run.toml"]);
    let table = ok(a.path(), &["ablate", "--config", "run.toml"]);
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "variant,mae,r,rp");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["triamese_mlp", "triamese_mean", "vit_x", "vit_y", "vit_z", "triamese_best", "triamese_map", "mlp_3-3"]
    );
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 4));
    assert_eq!(table, fs::read_to_string(a.path().join("run/ablation.csv")).unwrap());
    assert_eq!(table, ok(a.path(), &["ablate", "--config", "run.toml"]));
}
