use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[codebook]
n1 = 8
n2 = 2
o1 = 4
o2 = 4

[link]
snr_db = 110.0
blockage_attenuation_db = 20.0
rsu_position = [-250.0, 0.0, 0.0]

[scene]
image_size = 32
world_extent = 100.0
user_marker_radius = 1.5
distractor_count = 2
blockage_probability = 0.2
seed = 1

[generate]
n_samples = 80
trajectories = 4
train_fraction = 0.7
split_seed = 1

[model]
kind = "tiny_transformer"
patch_size = 16
embed_dim = 16
depth = 2
heads = 2
image_size = 32
beam_classes = 1024

[plan]
kind = "default3"
epochs = [1, 2, 1]
learning_rates = [1e-3, 3e-4, 3e-4]
full_epochs = 3
full_learning_rate = 1e-3

[train]
batch_size = 16
seed = 0
w_beam = 1.0
w_pos = 0.1
w_blk = 0.1

[pretrain]
epochs = 1
learning_rate = 1e-3
seed = 0
checkpoint = "pretrained.ckpt"

[paths]
data_dir = "data"
run_dir = "runs"
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamvision"))
        .args(args)
        .output()
        .expect("spawn beamvision")
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?}: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = bin(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "one-line error expected: {err}");
    assert!(err.starts_with("error["), "{err}");
    err
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn fixture(edit: impl FnOnce(String) -> String) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("exp.toml");
    fs::write(&config, edit(TINY.to_string())).unwrap();
    Fixture {
        _dir: dir,
        config: config.to_string_lossy().into_owned(),
        root,
    }
}

fn log_lines(run: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_prints_split_counts_and_is_reproducible() {
    let f = fixture(|t| t.replace("n_samples = 80", "n_samples = 1000"));
    let out = ok(&["generate", "--config", &f.config]);
    assert_eq!(out, "records 1000\ntrain 700\nval 300\n");
    let manifest = f.root.join("data/manifest.jsonl");
    let first = fs::read(&manifest).unwrap();
    let img = fs::read(f.root.join("data/images/000999.png")).unwrap();
    ok(&["generate", "--config", &f.config]);
    assert_eq!(fs::read(&manifest).unwrap(), first);
    assert_eq!(fs::read(f.root.join("data/images/000999.png")).unwrap(), img);
}

#[test]
fn generate_large_split_uses_floor() {
    let f = fixture(|t| t.replace("n_samples = 80", "n_samples = 6735"));
    let out = ok(&["generate", "--config", &f.config]);
    assert_eq!(out, "records 6735\ntrain 4714\nval 2021\n");
}

#[test]
fn invalid_config_fails_before_work() {
    let f = fixture(|t| t.replace("beam_classes = 1024", "beam_classes = 512"));
    let err = fail(&["generate", "--config", &f.config]);
    assert!(err.starts_with("error[invalid-argument]"), "{err}");
    assert!(err.contains("beam_classes"), "{err}");
    assert!(!f.root.join("data").exists());

    let f = fixture(|t| t.replace("[train]", "[train]\nlearning_rate = 1.0"));
    let err = fail(&["train", "--config", &f.config]);
    assert!(err.starts_with("error[parse]"), "{err}");

    let err = fail(&["generate", "--config", "/nonexistent/exp.toml"]);
    assert!(err.starts_with("error[io]"), "{err}");
}

#[test]
fn train_evaluate_report() {
    let f = fixture(|t| t);
    ok(&["generate", "--config", &f.config]);

    // the pretrained backbone is required unless training from scratch
    let err = fail(&["train", "--config", &f.config, "--plan", "default3"]);
    assert!(err.starts_with("error[missing-pretrained]"), "{err}");
    ok(&["pretrain", "--config", &f.config]);
    assert!(f.root.join("pretrained.ckpt").is_file());

    ok(&[
        "train",
        "--config",
        &f.config,
        "--mode",
        "multi_task",
        "--plan",
        "default3",
    ]);
    let multi = f.root.join("runs/multi_task_default3_seed0");
    for file in [
        "config.toml",
        "run.json",
        "metrics.jsonl",
        "checkpoints/stage1_heads.ckpt",
        "checkpoints/stage3_last_two_blocks.ckpt",
    ] {
        assert!(multi.join(file).is_file(), "{file}");
    }
    let log = log_lines(&multi);
    assert_eq!(log.len(), 4);
    let boundaries = log
        .windows(2)
        .filter(|w| w[0]["stage_index"] != w[1]["stage_index"])
        .count();
    assert_eq!(boundaries + 1, 3);
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(multi.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["mode"], "multi_task");
    assert_eq!(info["seed"], 0);
    assert!(info["pretrained"].as_str().unwrap().ends_with("pretrained.ckpt"));

    // runs are append-only
    let err = fail(&["train", "--config", &f.config, "--plan", "default3"]);
    assert!(err.starts_with("error[run-exists]"), "{err}");

    ok(&[
        "train",
        "--config",
        &f.config,
        "--mode",
        "single_task",
        "--plan",
        "default3",
    ]);
    let single = f.root.join("runs/single_task_default3_seed0");
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(single.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["weights"]["w_pos"], 0.0);
    assert_eq!(info["weights"]["w_blk"], 0.0);
    assert!(info["stages"]
        .as_array()
        .unwrap()
        .iter()
        .all(|s| s["weights"]["w_pos"] == 0.0));

    ok(&["train", "--config", &f.config, "--plan", "from_scratch", "--seed", "3"]);
    let scratch = f.root.join("runs/multi_task_from_scratch_seed3");
    let log = log_lines(&scratch);
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|m| m["stage"] == "full"));
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(scratch.join("run.json")).unwrap()).unwrap();
    assert!(info["pretrained"].is_null());

    // the snapshot alone re-executes the run
    let again = f.root.join("again");
    ok(&[
        "train",
        "--config",
        multi.join("config.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(again.join("metrics.jsonl")).unwrap(),
        fs::read(multi.join("metrics.jsonl")).unwrap()
    );

    // evaluate reproduces the logged metrics of the best stage end
    let eval: serde_json::Value = serde_json::from_str(&ok(&["evaluate", multi.to_str().unwrap()])).unwrap();
    let log = log_lines(&multi);
    let logged = log
        .iter()
        .find(|m| {
            m["stage"] == eval["stage"] && {
                let si = m["stage_index"].as_u64().unwrap();
                log.iter()
                    .filter(|n| n["stage_index"].as_u64() == Some(si))
                    .last()
                    .unwrap()
                    == *m
            }
        })
        .unwrap();
    for (a, b) in [
        ("top1", "top1"),
        ("top5", "top5"),
        ("rate_ratio", "rate_ratio"),
        ("mean_pos_err", "pos_err_m"),
    ] {
        let x = eval["report"][a].as_f64().unwrap();
        let y = logged[b].as_f64().unwrap();
        assert!((x - y).abs() <= 1e-9, "{a}: {x} vs {y}");
    }
    assert!(multi.join("eval.json").is_file());

    let oracle: serde_json::Value =
        serde_json::from_str(&ok(&["evaluate", multi.to_str().unwrap(), "--oracle"])).unwrap();
    assert_eq!(oracle["report"]["top1"], 1.0);
    assert_eq!(oracle["report"]["rate_ratio"], 1.0);
    assert!(oracle["report"]["mean_pos_err"].as_f64().unwrap() < 1e-9);

    let manifest = f.root.join("data/manifest.jsonl");
    ok(&[
        "evaluate",
        single.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);

    // one run: one curve and one row
    let one = f.root.join("report1");
    ok(&["report", multi.to_str().unwrap(), "--out", one.to_str().unwrap()]);
    let curves = fs::read_dir(&one)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("curve_"))
        .count();
    assert_eq!(curves, 1);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(one.join("summary.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0]["rate_drop_pct"].is_null());

    // three runs: the multi-task run is paired with its single-task twin
    let three = f.root.join("report3");
    ok(&[
        "report",
        single.to_str().unwrap(),
        multi.to_str().unwrap(),
        scratch.to_str().unwrap(),
        "--out",
        three.to_str().unwrap(),
    ]);
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(three.join("summary.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for f in ["bars.svg", "summary.csv"] {
        assert!(three.join(f).is_file());
    }
    assert_eq!(
        fs::read_to_string(three.join("summary.csv")).unwrap().lines().count(),
        4
    );
    let drop = rows[1]["rate_drop_pct"].as_f64().unwrap();
    assert!(drop.is_finite());
    assert_eq!(rows[1]["paired_with"], "single_task_default3_seed0");
    assert!(rows[2]["rate_drop_pct"].is_null());

    // recompute the drop from the raw logs
    let best_rate = |run: &Path| {
        let log = log_lines(run);
        let ends: Vec<&serde_json::Value> = (0..log.len())
            .filter(|&i| i + 1 == log.len() || log[i + 1]["stage_index"] != log[i]["stage_index"])
            .map(|i| &log[i])
            .collect();
        let mut best = ends[0];
        for e in &ends[1..] {
            if e["top1"].as_f64() >= best["top1"].as_f64() {
                best = e;
            }
        }
        best["rate_ratio"].as_f64().unwrap()
    };
    let (s, m) = (best_rate(&single), best_rate(&multi));
    assert!((drop - 100.0 * (s - m) / s).abs() < 1e-12);
}

#[test]
fn corrupted_checkpoint_names_the_file() {
    let f = fixture(|t| t);
    ok(&["generate", "--config", &f.config]);
    ok(&["train", "--config", &f.config, "--plan", "from_scratch"]);
    let run = f.root.join("runs/multi_task_from_scratch_seed0");
    let ckpt = run.join("checkpoints/stage1_full.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x11;
    fs::write(&ckpt, bytes).unwrap();
    let err = fail(&["evaluate", run.to_str().unwrap()]);
    assert!(err.starts_with("error[load]"), "{err}");
    assert!(err.contains("stage1_full.ckpt"), "{err}");

    let err = fail(&["evaluate", f.root.to_str().unwrap()]);
    assert!(err.starts_with("error[not-a-run]"), "{err}");
}
