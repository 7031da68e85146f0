use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use musfill_core::codec::encode_song;
use musfill_core::midi::write_midi;
use musfill_core::synth::reference_song;
use serde_json::Value;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn musfill(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_musfill"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok_json(args: &[&str], cwd: &Path) -> Value {
    let mut all = args.to_vec();
    all.push("--json");
    let out = musfill(&all, cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY_CONFIG: &str = r#"
data_dir = "sessions"
[model]
num_layers = 1
num_heads = 2
model_dim = 16
feedforward_dim = 32
max_encoder_len = 1024
max_decoder_len = 1024
dropout_rate = 0.1
vocab_size = 360
[train]
batch_size = 4
max_steps = 4
learning_rate = 0.001
seed = 11
[paths]
dataset = "ds"
"#;

#[test]
fn bundled_fixture_is_the_reference_song() {
    let bytes = fs::read(repo().join("data/two_bar_example.mid")).unwrap();
    assert_eq!(bytes, write_midi(&reference_song()).unwrap());
}

#[test]
fn tokenize_prints_the_token_lists() {
    let root = repo();
    let plain = stdout(&musfill(&["tokenize", "data/two_bar_example.mid"], &root));
    assert!(plain.starts_with("4/4, t_3, i_0, i_32, i_48, bar, track_0, e_0, p_79, n_4"));
    let song = reference_song();
    let expected = encode_song(&song, Some(&musfill_core::compute_control_set(&song).unwrap())).unwrap();
    let with = stdout(&musfill(&["tokenize", "data/two_bar_example.mid", "--controls"], &root));
    let listed: Vec<String> = expected.tokens.iter().map(|t| t.to_string()).collect();
    assert_eq!(with.trim_end(), listed.join(", "));
    assert!(with.starts_with("4/4, t_3, k_0, d_0, d_0, d_0, o_8, o_9, o_9, y_0, y_0, y_9, i_0, i_32, i_48, bar"));

    let json = ok_json(&["tokenize", "data/two_bar_example.mid", "--controls"], &root);
    assert_eq!(json["ids"].as_array().unwrap().len(), expected.len());
    assert_eq!(json["bars"], 2);
}

#[test]
fn usage_errors_exit_two_and_failures_print_one_line() {
    let root = repo();
    let out = musfill(&["tokenize", "data/two_bar_example.mid", "--no-such-flag"], &root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = musfill(&["controls", "missing.mid"], &root);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let out = musfill(&["infill", "data/two_bar_example.mid", "--bar", "0", "--track", "0", "--set", "loudness=3", "--checkpoint", "x"], &root);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn controls_and_tension_report_bins() {
    let root = repo();
    let c = ok_json(&["controls", "data/two_bar_example.mid"], &root);
    assert_eq!(c["key"], "C major");
    assert_eq!(c["controls"]["tracks"][1]["occupation"], 9);
    let t = ok_json(&["tension", "data/two_bar_example.mid"], &root);
    let bars = t["bars"].as_array().unwrap();
    assert_eq!(bars.len(), 2);
    assert!(bars.iter().all(|b| b["cloud_diameter"].as_f64().unwrap() > 0.0));
}

#[test]
fn dataset_build_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let testset = repo().join("data/testset");
    let t = testset.to_str().unwrap();
    let a = ok_json(&["dataset", "build", t, "--out", "a", "--seed", "5"], dir.path());
    let b = ok_json(&["dataset", "build", t, "--out", "b", "--seed", "5"], dir.path());
    assert_eq!(a["manifest_sha256"], b["manifest_sha256"]);
    assert_eq!(a["seed"], 5);
    let c = ok_json(&["dataset", "build", t, "--out", "c", "--seed", "6"], dir.path());
    assert_eq!(c["counts"]["files"], a["counts"]["files"]);
    let human = stdout(&musfill(&["dataset", "build", t, "--out", "d", "--seed", "5"], dir.path()));
    assert!(human.contains(a["manifest_sha256"].as_str().unwrap()));
    assert!(human.starts_with("seed 5"));
}

#[test]
fn train_eval_and_infill_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("musfill.toml"), TINY_CONFIG).unwrap();
    let testset = repo().join("data/testset");
    let t = testset.to_str().unwrap();
    ok_json(&["dataset", "build", t, "--out", "ds", "--seed", "1"], p);

    let first = ok_json(&["train", "--stage", "pretrain", "--config", "musfill.toml"], p);
    assert_eq!((first["seed"].as_u64(), first["steps"].as_u64()), (Some(11), Some(4)));
    let ckpt = fs::read(p.join("checkpoints/pretrain.ckpt")).unwrap();
    ok_json(&["train", "--stage", "pretrain", "--config", "musfill.toml"], p);
    assert_eq!(fs::read(p.join("checkpoints/pretrain.ckpt")).unwrap(), ckpt);
    ok_json(&["train", "--stage", "finetune", "--config", "musfill.toml"], p);
    let log = fs::read_to_string(p.join("checkpoints/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["loss"].is_f64()));

    let ft = p.join("checkpoints/finetune.ckpt");
    let ft = ft.to_str().unwrap();
    let stub = ok_json(&["eval", "--testset", t, "--generator", "original", "--n", "1000", "--seed", "2"], p);
    assert_eq!(stub["all_zero"], true);
    assert_eq!(stub["seed"], 2);
    let e1 = ok_json(&["eval", "--testset", t, "--checkpoint", ft, "--n", "3", "--seed", "2"], p);
    let e2 = ok_json(&["eval", "--testset", t, "--checkpoint", ft, "--n", "3", "--seed", "2"], p);
    assert_eq!(e1, e2);
    assert_eq!(e1["songs"], 3);

    let fixture = repo().join("data/two_bar_example.mid");
    let args = [
        "infill",
        fixture.to_str().unwrap(),
        "--bar",
        "1",
        "--track",
        "2",
        "--set",
        "density=4",
        "--set",
        "diameter=3",
        "--checkpoint",
        ft,
        "--seed",
        "9",
        "--out",
        "out.mid",
    ];
    let i1 = ok_json(&args, p);
    let i2 = ok_json(&args, p);
    assert_eq!(i1, i2);
    assert_eq!(i1["seed"], 9);
    assert_eq!(i1["requested_controls"]["tracks"][2]["density"], 4);
    let matched = i1["matched"].as_object().unwrap();
    assert_eq!(matched.keys().collect::<Vec<_>>(), ["bars.1.diameter", "tracks.2.density"]);
    assert!(musfill_core::midi::read_song(&fs::read(p.join("out.mid")).unwrap()).is_ok());

    let out = musfill(&["eval", "--testset", t], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}
