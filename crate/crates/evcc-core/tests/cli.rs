//! End-to-end checks of the `evcc` binary: subcommands, flags, output
//! formats, and documented exit codes.

use std::path::PathBuf;
use std::process::Command;

fn evcc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evcc"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "evcc-cli-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &str = "\
model.image_size=16
model.patch_size=4
model.vit_blocks=1
model.vit_heads=2
model.conv_stage_depths=1,1
model.conv_stage_dims=8,16
model.hybrid_stem_dims=16
model.d_v=16
model.shared_dim=16
prune.n_min=4
prune.score_hidden=8
fusion.depth=1
fusion.heads=2
train.steps=4
train.batch_size=4
train.eval_every=0
data.samples_per_class=8
data.test_per_class=4
";

#[test]
fn flops_prints_report_and_kv_records() {
    let out = evcc().args(["flops", "--kv"]).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("cross-attention product reduction"));
    assert!(stdout.contains("component.fusion.attention_product.macs="));
    assert!(stdout.contains("total.macs="));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tmpdir("train");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let out_dir = dir.join("run");

    let out = evcc()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("split=train"));
    assert!(stdout.contains("split=test"));

    // the resolved config is echoed into the run directory
    let echoed = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echoed.contains("model.image_size=16"));
    assert!(echoed.contains("prune.r=2"));

    let eval = evcc()
        .args([
            "eval",
            "--config",
            cfg_path.to_str().unwrap(),
            "--checkpoint",
            out_dir.join("model.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let eval_line = String::from_utf8(eval.stdout).unwrap();
    // eval on the train split reproduces the final training record
    let train_line = stdout.lines().next().unwrap();
    assert_eq!(eval_line.trim(), train_line.trim());
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn seed_override_changes_outcome() {
    let dir = tmpdir("seed");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let run = |seed: &str, name: &str| {
        let out = evcc()
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--seed",
                seed,
                "--out",
                dir.join(name).to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read(dir.join(name).join("model.ckpt")).unwrap()
    };
    let a = run("7", "a");
    let b = run("7", "b");
    let c = run("8", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn config_error_exits_with_code_2() {
    let dir = tmpdir("badcfg");
    let cfg_path = dir.join("bad.cfg");
    std::fs::write(&cfg_path, "bogus.key=1\n").unwrap();
    let out = evcc()
        .args(["flops", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus.key"));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn data_error_exits_with_code_3() {
    let dir = tmpdir("badckpt");
    let bad = dir.join("not_a_checkpoint.bin");
    std::fs::write(&bad, b"junk").unwrap();
    let out = evcc()
        .args(["eval", "--checkpoint", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn gradcheck_passes_and_reports_groups() {
    let dir = tmpdir("gc");
    let cfg_path = dir.join("gc.cfg");
    std::fs::write(
        &cfg_path,
        "model.image_size=8\nmodel.patch_size=4\nmodel.vit_blocks=1\nmodel.vit_heads=2\n\
         model.conv_stage_depths=1,1\nmodel.conv_stage_dims=4,8\nmodel.hybrid_stem_dims=8\n\
         model.d_v=8\nmodel.shared_dim=8\nprune.n_min=1\nprune.score_hidden=4\n\
         fusion.depth=1\nfusion.heads=2\ndata.n_classes=2\n",
    )
    .unwrap();
    let out = evcc()
        .args(["gradcheck", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gradcheck: PASS"));
    assert!(stdout.contains("router.w1.w"));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn sweep_emits_table_and_records() {
    let dir = tmpdir("sweep");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY.replace("train.steps=4", "train.steps=1")).unwrap();
    let out_dir = dir.join("cells");
    let out = evcc()
        .args([
            "sweep",
            "--config",
            cfg_path.to_str().unwrap(),
            "--knob",
            "fusion.depth",
            "--values",
            "0,1",
            "--seeds",
            "0",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("fusion.depth"));
    assert!(stdout.contains("train_acc"));
    let records = std::fs::read_to_string(out_dir.join("sweep.log")).unwrap();
    assert_eq!(records.lines().count(), 2);
    assert!(records.contains("knob=fusion.depth value=0 seed=0"));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn eval_warns_on_config_digest_mismatch() {
    let dir = tmpdir("digest");
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();
    let out_dir = dir.join("run");
    let out = evcc()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());

    // evaluate under a config that differs only in a training knob
    let other_cfg = dir.join("other.cfg");
    std::fs::write(&other_cfg, format!("{TINY}train.lr=0.01\n")).unwrap();
    let eval = evcc()
        .args([
            "eval",
            "--config",
            other_cfg.to_str().unwrap(),
            "--checkpoint",
            out_dir.join("model.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stderr = String::from_utf8_lossy(&eval.stderr);
    assert!(stderr.contains("warning"), "no digest warning: {stderr}");
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn unknown_sweep_knob_is_config_error() {
    let out = evcc()
        .args(["sweep", "--knob", "model.patch_size", "--values", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
