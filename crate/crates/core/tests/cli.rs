use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use tokentrack::codec::{VocabManifest, Vocabulary};
use tokentrack::commands::read_token_rows;
use tokentrack::merge_eval::{
    ground_truth_from_annotations, write_detections_jsonl, Detection, Granularity,
};
use tokentrack::pipeline::load_dataset;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokentrack"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("TOKENTRACK_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SIMPLE_SCENE: &str = "
[scene]
frames = 5
min_objects = 1
max_objects = 1
p_enter = 0.0
p_exit = 0.0
p_occlude = 0.0
";

const SMALL_RUN: &str = "
[scene]
frames = 4

[model]
d_model = 16
d_backbone = 16
batch_size = 2

[train]
steps = 6
log_every = 1
";

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for clip in fs::read_dir(dir).unwrap() {
        let clip = clip.unwrap().path();
        for f in fs::read_dir(&clip).unwrap() {
            let f = f.unwrap().path();
            let name = f.strip_prefix(dir).unwrap().display().to_string();
            files.push((name, fs::read(&f).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let (a, b, c) = (
        tmp.path().join("a"),
        tmp.path().join("b"),
        tmp.path().join("c"),
    );
    ok(&[
        "synth",
        "--out",
        p(&a),
        "--clips",
        "2",
        "--frames",
        "3",
        "--seed",
        "5",
    ]);
    ok(&[
        "synth",
        "--out",
        p(&b),
        "--clips",
        "2",
        "--frames",
        "3",
        "--seed",
        "5",
    ]);
    ok(&[
        "synth",
        "--out",
        p(&c),
        "--clips",
        "2",
        "--frames",
        "3",
        "--seed",
        "6",
    ]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    assert!(a.join("clip_0001").is_dir());

    let empty = tmp.path().join("empty");
    ok(&["synth", "--out", p(&empty), "--clips", "0"]);
    assert_eq!(fs::read_dir(&empty).unwrap().count(), 0);
}

#[test]
fn tokenize_row_lengths() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SIMPLE_SCENE);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", p(&data), "--clips", "2"]);

    let rows_path = tmp.path().join("rows.jsonl");
    ok(&[
        "tokenize",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--out",
        p(&rows_path),
        "-n",
        "2",
    ]);
    let rows = read_token_rows(&rows_path).unwrap();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows.iter().all(|r| r.tokens.len() == 4 * 2 + 1 + 1));
    assert!(tmp.path().join("vocab.json").exists());

    // gap 6 with N=3 spans 13 frames; a full-span target has 13 slots
    let long = write_config(
        tmp.path(),
        &SIMPLE_SCENE.replace("frames = 5", "frames = 14"),
    );
    let long_data = tmp.path().join("long");
    ok(&[
        "synth",
        "--config",
        &long,
        "--out",
        p(&long_data),
        "--clips",
        "1",
    ]);
    ok(&[
        "tokenize",
        "--config",
        &long,
        "--data",
        p(&long_data),
        "--out",
        p(&rows_path),
        "-n",
        "3",
        "--gap",
        "6",
        "--full-span",
    ]);
    let rows = read_token_rows(&rows_path).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.tokens.len() == 4 * 13 + 1 + 1));
}

#[test]
fn static_rows_of_empty_frames_are_eos() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[scene]\nframes = 3\nmin_objects = 0\nmax_objects = 0\n",
    );
    let data = tmp.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", p(&data), "--clips", "1"]);
    let rows_path = tmp.path().join("rows.jsonl");
    ok(&[
        "tokenize",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--out",
        p(&rows_path),
        "--mode",
        "static",
    ]);
    let rows = read_token_rows(&rows_path).unwrap();
    assert_eq!(rows.len(), 3);
    let manifest: VocabManifest =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("vocab.json")).unwrap()).unwrap();
    let eos = Vocabulary::from_manifest(&manifest).unwrap().eos();
    assert!(rows.iter().all(|r| r.tokens == vec![eos]));
}

fn loss_column(log: &Path) -> Vec<(String, String)> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect()
}

#[test]
fn interrupted_training_resumes_exactly() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_RUN);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", p(&data), "--clips", "2"]);

    let (full_ck, full_log) = (tmp.path().join("full.ckpt"), tmp.path().join("full.csv"));
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--checkpoint",
        p(&full_ck),
        "--log",
        p(&full_log),
    ]);

    let (part_ck, part_log) = (tmp.path().join("part.ckpt"), tmp.path().join("part.csv"));
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--checkpoint",
        p(&part_ck),
        "--log",
        p(&part_log),
        "--until",
        "3",
    ]);
    assert_eq!(loss_column(&part_log).len(), 3);
    ok(&[
        "train",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--checkpoint",
        p(&part_ck),
        "--log",
        p(&part_log),
        "--resume",
        p(&part_ck),
    ]);
    assert_eq!(loss_column(&full_log), loss_column(&part_log));
    assert_eq!(loss_column(&full_log).len(), 6);
    assert_eq!(fs::read(&full_ck).unwrap(), fs::read(&part_ck).unwrap());

    // inference, raw dump and window-length mismatch
    let dets = tmp.path().join("dets.jsonl");
    let raw = tmp.path().join("raw.jsonl");
    ok(&[
        "infer",
        "--config",
        &cfg,
        "--data",
        p(&data),
        "--checkpoint",
        p(&full_ck),
        "--out",
        p(&dets),
        "--dump-raw",
        p(&raw),
    ]);
    assert!(dets.exists() && raw.exists());
    let out = run(&[
        "infer",
        "--data",
        p(&data),
        "--checkpoint",
        p(&full_ck),
        "--out",
        p(&dets),
        "--window-len",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    ok(&["eval", "--detections", p(&dets), "--data", p(&data)]);
}

fn eval_report(dets: &[Detection], data: &Path, dir: &Path) -> serde_json::Value {
    let path = dir.join("dets.jsonl");
    let mut buf = Vec::new();
    write_detections_jsonl(dets, &mut buf).unwrap();
    fs::write(&path, buf).unwrap();
    let out = ok(&["eval", "--detections", p(&path), "--data", p(data)]);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn eval_scores_ground_truth_and_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SIMPLE_SCENE);
    let data = tmp.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", p(&data), "--clips", "2"]);
    let echo: Vec<Detection> = load_dataset(&data)
        .unwrap()
        .iter()
        .flat_map(|c| ground_truth_from_annotations(&c.id, &c.annotations, Granularity::PerFrame))
        .map(|g| Detection {
            video_id: g.video_id,
            frames: g.frames,
            boxes: g.boxes,
            class_index: g.class_index,
            score: 0.9,
            source_window: 0,
        })
        .collect();
    assert!(!echo.is_empty());
    let perfect = eval_report(&echo, &data, tmp.path());
    assert_eq!(perfect["rp_auc"], 1.0);
    assert_eq!(perfect["crp_auc"], 1.0);
    let none = eval_report(&[], &data, tmp.path());
    assert_eq!(none["rp_auc"], 0.0);

    let stranger = vec![Detection {
        video_id: "nowhere".into(),
        ..echo[0].clone()
    }];
    let path = tmp.path().join("stranger.jsonl");
    let mut buf = Vec::new();
    write_detections_jsonl(&stranger, &mut buf).unwrap();
    fs::write(&path, buf).unwrap();
    assert_eq!(
        run(&["eval", "--detections", p(&path), "--data", p(&data)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(run(&["synth", "--bogus"]).status.code(), Some(1));
    let bad = write_config(tmp.path(), "[scene]\nframes = 1\n");
    assert_eq!(
        run(&["synth", "--config", &bad, "--out", p(tmp.path())])
            .status
            .code(),
        Some(1)
    );
    let missing = tmp.path().join("missing");
    assert_eq!(
        run(&["eval", "--detections", p(&missing), "--data", p(tmp.path())])
            .status
            .code(),
        Some(2)
    );
    assert!(run(&["--help"]).status.success());
}
