//! End-to-end tests of the command-line surface, driving the real
//! binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_motkit"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

const SCENARIO: &str = "seed=5\nidentities=6\nframes=40\nembedding_dim=16\n";

#[test]
fn synth_track_eval_round_trip_is_perfect() {
    let dir = tmp("roundtrip");
    let cfg = dir.join("scenario.cfg");
    write(&cfg, SCENARIO);

    let out = run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(dir.join("gt.txt").exists());
    assert!(dir.join("det.txt").exists());

    let result = dir.join("result.txt");
    let out = run(&[
        "track",
        "--in",
        cfg.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    let out = run(&[
        "eval",
        "--gt",
        dir.join("gt.txt").to_str().unwrap(),
        "--pred",
        result.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("MOTA"), "{text}");
    assert!(text.contains("1.000"), "{text}");
    // machine-readable block
    assert!(text.contains("mota,motp,idf1"), "{text}");
    assert!(text.contains("1.000000,1.000000,1.000000"), "{text}");
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tmp("eval_identity");
    let cfg = dir.join("scenario.cfg");
    write(&cfg, SCENARIO);
    run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let gt = dir.join("gt.txt");
    let out = run(&[
        "eval",
        "--gt",
        gt.to_str().unwrap(),
        "--pred",
        gt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("MOTA") && text.contains("IDF1"));
    assert!(text.contains("1.000000,1.000000,1.000000"), "{text}");
}

#[test]
fn tracking_a_detection_file_uses_overlap_only() {
    let dir = tmp("det_only");
    let cfg = dir.join("scenario.cfg");
    write(&cfg, SCENARIO);
    run(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let result = dir.join("from_det.txt");
    let out = run(&[
        "track",
        "--in",
        dir.join("det.txt").to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let eval = run(&[
        "eval",
        "--gt",
        dir.join("gt.txt").to_str().unwrap(),
        "--pred",
        result.to_str().unwrap(),
    ]);
    assert!(eval.status.success());
}

#[test]
fn neural_path_runs_untrained() {
    let dir = tmp("neural");
    let cfg = dir.join("scenario.cfg");
    write(
        &cfg,
        "seed=5\nidentities=3\nframes=3\nimage_h=32\nimage_w=32\nchannels=8\nbottleneck=2\nheads=2\nkey_samples=4\nembedding_dim=8\npath=neural\n",
    );
    let result = dir.join("result.txt");
    let heat = dir.join("heat.txt");
    let out = run(&[
        "track",
        "--in",
        cfg.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
        "--dump-heatmap",
        heat.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(result.exists());
    assert!(heat.exists());
}

#[test]
fn gradcheck_passes_on_fresh_weights() {
    let out = run(&["gradcheck", "--seeds", "2"]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("deformable_attention"), "{text}");
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bench_prints_timings_and_ratios() {
    let out = run(&["bench", "--sizes", "8,11,16"]);
    assert!(out.status.success(), "{out:?}");
    let text = stdout(&out);
    assert!(text.contains("deformable"), "{text}");
    assert!(text.contains("dense"), "{text}");
    assert!(text.contains("->"), "{text}");
}

#[test]
fn viz_renders_the_brightest_cell() {
    let dir = tmp("viz");
    let dump = dir.join("map.txt");
    // 3x4 map with its peak at row 1, col 2
    write(&dump, "3 4\n0 0 0 0\n0 0 9 0\n0 0 0 0\n");
    let ppm = dir.join("map.ppm");
    let out = run(&[
        "viz",
        "--tensor",
        dump.to_str().unwrap(),
        "--out",
        ppm.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let bytes = std::fs::read(&ppm).unwrap();
    let header = b"P6\n4 3\n255\n";
    assert!(bytes.starts_with(header));
    let body = &bytes[header.len()..];
    let brightest = body
        .chunks(3)
        .enumerate()
        .max_by_key(|(_, px)| px[0])
        .unwrap()
        .0;
    assert_eq!((brightest / 4, brightest % 4), (1, 2));
}

#[test]
fn heatmap_dump_renders_brightest_at_center() {
    // a single-box scenario: the dumped heatmap peaks at the box center
    let dir = tmp("heatdump");
    let cfg = dir.join("scenario.cfg");
    write(&cfg, "seed=9\nidentities=1\nframes=2\nembedding_dim=4\n");
    let result = dir.join("result.txt");
    let heat = dir.join("heat.txt");
    let out = run(&[
        "track",
        "--in",
        cfg.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
        "--dump-heatmap",
        heat.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = std::fs::read_to_string(&heat).unwrap();
    let mut values: Vec<(usize, f64)> = text
        .lines()
        .skip(1)
        .flat_map(|l| l.split_whitespace())
        .enumerate()
        .map(|(i, v)| (i, v.parse::<f64>().unwrap()))
        .collect();
    values.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    assert_eq!(values[0].1, 1.0, "center cell must be exactly 1");
}

#[test]
fn config_echo_is_stable() {
    let dir = tmp("config_echo");
    let first = stdout(&run(&["config"]));
    assert!(first.contains("seed=1\n"));
    let cfg = dir.join("echo.cfg");
    write(&cfg, &first);
    let second = stdout(&run(&["config", "--config", cfg.to_str().unwrap()]));
    assert_eq!(first, second, "echo must reproduce itself byte for byte");
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["definitely-not-a-subcommand"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["track", "--in", "/nonexistent/file", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = run(&["viz", "--tensor", "/nonexistent/map", "--out", "/tmp/x.ppm"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tmp("bad_config");
    let cfg = dir.join("bad.cfg");
    write(&cfg, "unknown_key=1\n");
    let out = run(&["config", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
}

#[test]
fn malformed_mot_input_names_the_line() {
    let dir = tmp("malformed");
    let det = dir.join("det.txt");
    write(&det, "1,-1,10,20,30,40,1,-1,-1,-1\n1,2,3\n");
    let out = run(&[
        "track",
        "--in",
        det.to_str().unwrap(),
        "--out",
        dir.join("out.txt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
}
