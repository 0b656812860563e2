use std::path::{Path, PathBuf};

use flowgan_cli::commands::{read_flow_csv, zone_grid, MapMeta, BUILTIN_MAPS};
use flowgan_cli::exit;
use flowgan_core::dynmap::{demo_map_specs, parse_map_spec, DEMO_EXTENT};
use flowgan_core::mobility;
use serde_json::Value;

fn je_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/maps/JE.toml")
}

/// Writes a one-map config into `dir` and returns its path.
fn config(dir: &Path, users: usize, days: usize, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 5\nrun_id = \"t\"\nout = \"{}\"\nmaps = [\"{}\"]\n\n[synth]\nusers = {users}\ndays = {days}\n\n[train]\nepochs = 2\n\n{extra}",
        dir.join("runs").display(),
        je_spec().display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn flowgan(cfg: &Path, args: &[&str]) -> i32 {
    let mut full = vec!["flowgan", "--config", cfg.to_str().unwrap()];
    full.extend_from_slice(args);
    flowgan_cli::run(full)
}

fn manifest(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn bundled_maps_match_the_demo_specs() {
    let parsed: Vec<_> = BUILTIN_MAPS.iter().map(|(_, t)| parse_map_spec(t).unwrap()).collect();
    assert_eq!(parsed, demo_map_specs());
    for ((name, _), spec) in BUILTIN_MAPS.iter().zip(&parsed) {
        assert_eq!(*name, spec.name);
    }
}

#[test]
fn synth_is_reproducible_and_counts_trips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (config(a.path(), 50, 2, ""), config(b.path(), 50, 2, ""));
    assert_eq!(flowgan(&ca, &["synth"]), exit::OK);
    assert_eq!(flowgan(&cb, &["synth"]), exit::OK);
    let rel = "runs/t/dataset/trajectories.csv";
    let csv = std::fs::read(a.path().join(rel)).unwrap();
    assert_eq!(csv, std::fs::read(b.path().join(rel)).unwrap());

    let (records, malformed) = mobility::read_records(csv.as_slice()).unwrap();
    assert_eq!(malformed, 0);
    let zones = zone_grid(DEMO_EXTENT, 6_000).unwrap();
    let trips = mobility::extract_trips(records, &zones).trips.len() as u64;
    let m = manifest(a.path().join("runs/t/dataset/manifest-synth.json"));
    assert_eq!(m["summary"]["trips"].as_u64(), Some(trips));
    assert!(trips > 0);
    let da = &m["digest"];
    let db = &manifest(b.path().join("runs/t/dataset/manifest-synth.json"))["digest"];
    // The configs differ only in their output directory.
    assert_ne!(da, db);
    assert_eq!(flowgan(&ca, &["synth"]), exit::OK);
    assert_eq!(da, &manifest(a.path().join("runs/t/dataset/manifest-synth.json"))["digest"]);
}

#[test]
fn zero_users_give_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0, 3, "");
    assert_eq!(flowgan(&cfg, &["synth"]), exit::OK);
    let csv = std::fs::read_to_string(dir.path().join("runs/t/dataset/trajectories.csv")).unwrap();
    assert_eq!(csv, "user_id,timestamp,x,y\n");
    // Nothing to aggregate: build fails without writing anything.
    assert_eq!(flowgan(&cfg, &["build"]), exit::DATA);
    assert!(!dir.path().join("runs/t/dataset/index.json").exists());
}

#[test]
fn full_pipeline_on_one_day() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        300,
        1,
        "[generate]\ncount = 1\n\n[evaluate]\nsources = [\"conditional\", \"gravity\"]\n",
    );
    let run = dir.path().join("runs/t");
    for cmd in ["synth", "build"] {
        assert_eq!(flowgan(&cfg, &[cmd]), exit::OK, "{cmd}");
    }

    // One day on one map: six entries.
    let build = manifest(run.join("dataset/manifest-build.json"));
    assert_eq!(build["summary"]["entries"], 6);
    let meta: MapMeta = serde_json::from_slice(&std::fs::read(run.join("dataset/JE.meta.json")).unwrap()).unwrap();
    assert_eq!(meta.train.len() + meta.holdout.len(), 6);
    assert_eq!((meta.train.len(), meta.holdout.len()), (5, 1));

    // Training: loss rows match epochs, re-runs give the same checkpoint.
    assert_eq!(flowgan(&cfg, &["train"]), exit::OK);
    let loss = std::fs::read_to_string(run.join("checkpoints/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(loss.starts_with("epoch,d_loss,g_loss\n"));
    let ckpt = std::fs::read(run.join("checkpoints/model.ckpt")).unwrap();
    let first = manifest(run.join("checkpoints/manifest-train.json"));
    assert_eq!(flowgan(&cfg, &["train"]), exit::OK);
    assert_eq!(ckpt, std::fs::read(run.join("checkpoints/model.ckpt")).unwrap());
    assert_eq!(first["digest"], manifest(run.join("checkpoints/manifest-train.json"))["digest"]);

    // Generation: count 0 writes nothing, seeded runs repeat, outputs are valid.
    assert_eq!(flowgan(&cfg, &["generate", "--count", "0"]), exit::OK);
    assert!(!run.join("generated").exists());
    assert_eq!(flowgan(&cfg, &["generate", "--count", "3"]), exit::OK);
    let sample = run.join("generated/conditional/JE/sample_0002.csv");
    let bytes = std::fs::read(&sample).unwrap();
    let flow = read_flow_csv(&bytes, meta.cells).unwrap();
    assert!((0..flow.n()).all(|i| flow.get(i, i) == 0));
    let pgm = std::fs::read(run.join("generated/conditional/JE/sample_0002.pgm")).unwrap();
    assert_eq!(pgm.len(), 13 + 64 * 64);
    assert_eq!(flowgan(&cfg, &["generate", "--count", "1"]), exit::OK);
    assert!(!sample.exists(), "stale samples are removed");
    assert_eq!(flowgan(&cfg, &["generate", "--count", "3"]), exit::OK);
    assert_eq!(bytes, std::fs::read(&sample).unwrap());
    assert_eq!(flowgan(&cfg, &["generate", "--condition", "ZZ"]), exit::UNKNOWN_CONDITION);
    assert_eq!(flowgan(&cfg, &["generate", "--unconditional"]), exit::DATA);

    // Gravity, evaluation and the report.
    assert_eq!(flowgan(&cfg, &["gravity"]), exit::OK);
    let params = std::fs::read_to_string(run.join("reports/gravity/JE.params.csv")).unwrap();
    assert!(params.lines().nth(1).unwrap().starts_with("JE/train,"));
    assert_eq!(flowgan(&cfg, &["evaluate"]), exit::OK);
    let summary = std::fs::read_to_string(run.join("reports/evaluate/conditional/summary.csv")).unwrap();
    let rows: Vec<_> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(rows, ["JE", "Average"]);
    let checks = std::fs::read_to_string(run.join("reports/evaluate/checksum.csv")).unwrap();
    let sources: Vec<_> = checks.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(sources, ["source", "ground", "conditional", "gravity"]);
    assert_eq!(flowgan(&cfg, &["report"]), exit::OK);
    let report = std::fs::read_to_string(run.join("reports/report.md")).unwrap();
    assert!(report.contains("| JE |") && report.contains("| Average |"));

    // Ground truth scored against itself.
    let ds = run.join("dataset");
    let od = std::fs::read(ds.join("JE.od.csv")).unwrap();
    let map = parse_map_spec(&std::fs::read_to_string(ds.join("JE.map.toml")).unwrap())
        .unwrap()
        .build()
        .unwrap();
    let all: Vec<_> = meta.train.iter().chain(&meta.holdout).copied().collect();
    let data = mobility::ODDataset::read_csv(od.as_slice(), &map, &all).unwrap();
    let (day, group) = meta.holdout[0];
    let truth = data.get(day, group).unwrap();
    let gen = run.join("generated/conditional/JE");
    std::fs::remove_dir_all(&gen).unwrap();
    std::fs::create_dir_all(&gen).unwrap();
    std::fs::write(gen.join("sample_0000.csv"), flowgan_cli::commands::flow_csv(truth)).unwrap();
    assert_eq!(flowgan(&cfg, &["evaluate"]), exit::OK);
    let samples = std::fs::read_to_string(run.join("reports/evaluate/conditional/samples.csv")).unwrap();
    let cpcs: Vec<f64> = samples.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(cpcs, [1.0]);

    // Missing inputs fail before anything is written.
    std::fs::remove_dir_all(run.join("reports")).unwrap();
    std::fs::remove_dir_all(&gen).unwrap();
    assert_eq!(flowgan(&cfg, &["evaluate"]), exit::DATA);
    assert!(!run.join("reports").exists());

    // A damaged checkpoint is reported as such.
    std::fs::write(run.join("checkpoints/model.ckpt"), &ckpt[..ckpt.len() / 2]).unwrap();
    assert_eq!(flowgan(&cfg, &["generate"]), exit::CHECKPOINT);
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(flowgan_cli::run(["flowgan", "build"]), exit::CONFIG);
    assert_eq!(flowgan_cli::run(["flowgan", "frobnicate"]), exit::CONFIG);
    let cfg = config(dir.path(), 10, 1, "[build]\ntrain_fraction = 1.5\n");
    assert_eq!(flowgan(&cfg, &["build"]), exit::CONFIG);
    let cfg = config(dir.path(), 10, 1, "");
    assert_eq!(flowgan(&cfg, &["build", "--map", "XX"]), exit::CONFIG);
    assert_eq!(flowgan(&cfg, &["train"]), exit::DATA);
}
