use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
[dataset]
seed = 3
count = 40
image_size = 32
classes = 4
val_count = 8

[codec]
latent_channels = 8
base_filters = 6
downsample_factor = 8
residual_blocks_per_stage = 1
hyper_channels = 4
hyper_filters = 8

[schedule]
p1 = 1
p2 = 2
p3 = 3
p4 = 4
time_scale = 5.0

[training]
epochs = 2
batch_size = 8
learning_rate = 0.002
task_channels = [4, 8, 8, 8]
task_epochs = 2

[training.optimizer]
kind = "adam"

[finetune]
iterations = 3
"#;

fn icm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icm")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "failed: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

struct Fixture {
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    task: PathBuf,
    run_a: PathBuf,
    run_b: PathBuf,
}

/// Dataset, task network and two identical deterministic training runs.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_fixture");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        let task = root.join("task.ckpt");
        let c = s(&config);
        ok(&icm(&["--config", c, "gen-dataset", "--out", s(&data)]));
        ok(&icm(&["--config", c, "--deterministic", "train-task", "--dataset", s(&data), "--out", s(&task)]));
        let run = |name: &str| {
            let dir = root.join(name);
            let out = icm(&["--config", c, "--deterministic", "--seed", "4", "train", "--dataset", s(&data), "--task", s(&task), "--out", s(&dir)]);
            ok(&out);
            let log = String::from_utf8_lossy(&out.stderr).to_string();
            assert!(log.contains("phase 2 begins at epoch 1"), "{log}");
            dir
        };
        let run_a = run("run_a");
        let run_b = run("run_b");
        Fixture { root, config, data, task, run_a, run_b }
    })
}

fn sample(f: &Fixture) -> PathBuf {
    f.data.join("sample_00035.png")
}

#[test]
fn gen_dataset_writes_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&icm(&["gen-dataset", "--seed", "7", "--count", "400", "--out", s(&out)]));
    let pngs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 400);
    let manifest = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 401);
    assert!(out.join("config.toml").is_file());
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(icm(&["gen-dataset"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[training]\nepochz = 3\n").unwrap();
    let out = icm(&["--config", s(&bad), "gen-dataset", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let missing = dir.path().join("nope");
    let out = icm(&["train", "--dataset", s(&missing), "--task", s(&missing), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn deterministic_runs_are_identical() {
    let f = fixture();
    let read = |d: &Path, n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(read(&f.run_a, "snapshots.csv"), read(&f.run_b, "snapshots.csv"));
    assert_eq!(read(&f.run_a, "epoch_0001.ckpt"), read(&f.run_b, "epoch_0001.ckpt"));
    assert_eq!(read(&f.run_a, "rd.csv"), read(&f.run_b, "rd.csv"));
    let echoed = std::fs::read_to_string(f.run_a.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 4"));
}

#[test]
fn resume_continues_numbering() {
    let f = fixture();
    let dir = f.root.join("resumed");
    let _ = std::fs::remove_dir_all(&dir);
    let c = s(&f.config);
    let start = f.run_a.join("epoch_0000.ckpt");
    ok(&icm(&["--config", c, "--deterministic", "--seed", "4", "train", "--dataset", s(&f.data), "--task", s(&f.task), "--out", s(&dir), "--resume", s(&start)]));
    assert!(!dir.join("epoch_0000.ckpt").exists());
    assert_eq!(std::fs::read(dir.join("epoch_0001.ckpt")).unwrap(), std::fs::read(f.run_a.join("epoch_0001.ckpt")).unwrap());
}

#[test]
fn encode_decode_round_trip() {
    let f = fixture();
    let ck = f.run_a.join("epoch_0001.ckpt");
    let bin = f.root.join("img.icm");
    let out = ok(&icm(&["encode", "--checkpoint", s(&ck), "--input", s(&sample(f)), "--output", s(&bin)]));
    let bpp: f64 = out.trim().strip_prefix("bpp=").unwrap().parse().unwrap();
    let bytes = std::fs::metadata(&bin).unwrap().len() as f64;
    assert_eq!(bpp, bytes * 8.0 / (32.0 * 32.0));
    let png = f.root.join("img.png");
    let out = ok(&icm(&["decode", "--checkpoint", s(&ck), "--input", s(&bin), "--output", s(&png), "--verify"]));
    assert!(out.contains("reencode=identical"));
    assert_eq!(image::open(&png).unwrap().width(), 32);

    let wrong = f.run_a.join("epoch_0000.ckpt");
    let out = icm(&["decode", "--checkpoint", s(&wrong), "--input", s(&bin), "--output", s(&png)]);
    assert_eq!(out.status.code(), Some(4));

    let full = std::fs::read(&bin).unwrap();
    let cut = f.root.join("cut.icm");
    std::fs::write(&cut, &full[..full.len() - 2]).unwrap();
    let out = icm(&["decode", "--checkpoint", s(&ck), "--input", s(&cut), "--output", s(&png)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn indivisible_image_is_rejected_with_advice() {
    let f = fixture();
    let img = f.root.join("odd.ppm");
    image::RgbImage::new(40, 32).save(&img).unwrap();
    let out = icm(&["encode", "--checkpoint", s(&f.run_a.join("epoch_0001.ckpt")), "--input", s(&img), "--output", s(&f.root.join("odd.icm"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pad"));
}

#[test]
fn finetune_zero_iterations_reports_no_change() {
    let f = fixture();
    let report = f.root.join("ft.csv");
    let out = ok(&icm(&[
        "--config", s(&f.config), "finetune", "--checkpoint", s(&f.run_a.join("epoch_0001.ckpt")), "--task", s(&f.task),
        "--dataset", s(&f.data), "--out", s(&report), "--iterations", "0", "--count", "4",
    ]));
    assert!(out.contains("Base model"));
    let rows = icm_core::finetune::parse_report(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].n_images, 4);
    assert_eq!(rows[0].bpp_delta(), 0.0);
    assert_eq!(rows[0].metric_delta(), 0.0);
}

#[test]
fn eval_with_and_without_anchors() {
    let f = fixture();
    let out_dir = f.root.join("eval_plain");
    let out = icm(&["--config", s(&f.config), "eval", "--run", s(&f.run_a), "--out", s(&out_dir), "--task", s(&f.task), "--dataset", s(&f.data)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("BD-rate skipped"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("upper_anchor_accuracy="));
    assert!(out_dir.join("rd.csv").is_file());

    let anchors = f.root.join("anchors.csv");
    let mut text = String::from("qp,resolution,bpp,score\n");
    for (i, qp) in [22, 27, 32, 37, 42, 47, 52].iter().enumerate() {
        for res in [100, 75, 50, 25] {
            let bpp = 2.0 / (i + 1) as f64 * f64::from(res) / 100.0;
            text.push_str(&format!("{qp},{res},{bpp},{}\n", 0.9 - 0.1 * i as f64));
        }
    }
    std::fs::write(&anchors, text).unwrap();
    let out_dir = f.root.join("eval_anchors");
    let out = ok(&icm(&["--config", s(&f.config), "eval", "--run", s(&f.run_a), "--anchors", s(&anchors), "--out", s(&out_dir)]));
    let header = out.lines().next().unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(cols, ["100%", "75%", "50%", "25%", "Pareto"]);
    assert!(out.lines().nth(1).unwrap().starts_with("ours"));
    let rd = std::fs::read_to_string(out_dir.join("rd.csv")).unwrap();
    assert!(rd.contains("anchor_25%"));
}
