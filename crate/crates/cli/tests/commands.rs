use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dewarp_core::image::{load_image, save_image};
use dewarp_core::metrics::EvalReport;
use dewarp_core::synthetic::text_page;
use dewarp_core::tps::{frame_grid, validate_mesh};
use dewarp_core::MeshGrid;
use serde_json::Value;

fn dewarp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dewarp"))
        .args(args)
        .env("DEWARP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn page(dir: &Path, name: &str, size: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    save_image(&text_page(size, size, seed), &path).unwrap();
    path
}

#[test]
fn restore_writes_output_and_rejects_bad_beta() {
    let dir = tempfile::tempdir().unwrap();
    let input = page(dir.path(), "flat.png", 96, 1);
    let out = dir.path().join("restored.png");
    let run = dewarp(&["restore", s(&input), s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(load_image(&out).unwrap().width(), 96);

    let run = dewarp(&["restore", s(&input), s(&out), "--beta", "0.7"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("[0, 0.5]"));
}

#[test]
fn restore_at_zero_beta_only_replaces_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let input = page(dir.path(), "flat.png", 64, 2);
    let out = dir.path().join("r.png");
    let run = dewarp(&["restore", s(&input), s(&out), "--beta", "0", "--blank", "0.5"]);
    assert!(run.status.success());
    let a = load_image(&input).unwrap();
    let b = load_image(&out).unwrap();
    let shift = 0.5 - a.mean();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x + shift).clamp(0.0, 1.0) - y)
        .fold(0.0f64, |m, d| m.max(d.abs()));
    // One quantization step of slack.
    assert!(worst <= 1.0 / 255.0 + 1e-9, "{worst}");
}

#[test]
fn missing_input_and_unknown_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let run = dewarp(&["restore", s(&dir.path().join("nope.png")), s(&dir.path().join("o.png"))]);
    assert_eq!(run.status.code(), Some(1));
    let run = dewarp(&["restore", "--frobnicate"]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn synth_is_reproducible_and_identity_at_zero_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 96, 3);
    let (a, b, z) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("z"));
    for d in [&a, &b] {
        assert!(dewarp(&["synth", s(&flat), "--out-dir", s(d), "--seed", "5"]).status.success());
    }
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("warped.png")), read(b.join("warped.png")));
    assert_eq!(read(a.join("mesh.json")), read(b.join("mesh.json")));
    let mesh = MeshGrid::from_json(&std::fs::read_to_string(a.join("mesh.json")).unwrap()).unwrap();
    assert!(validate_mesh(&mesh));

    assert!(dewarp(&["synth", s(&flat), "--out-dir", s(&z), "--sigma", "0"]).status.success());
    let warped = load_image(z.join("warped.png")).unwrap();
    let orig = load_image(&flat).unwrap();
    let worst = warped.data().iter().zip(orig.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst <= 1.0 / 255.0 + 1e-9);
}

#[test]
fn fit_on_a_flat_pair_writes_near_identity_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 128, 4);
    let out = dir.path().join("fit");
    let run = dewarp(&[
        "fit", s(&flat), "--target", s(&flat), "--out-dir", s(&out),
        "--iters-coarse", "20", "--iters-refine", "10",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["dewarped.png", "restored.png", "mesh_coarse.json", "mesh_refined.json", "loss.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let regular = frame_grid(9, 9, 128, 128).unwrap();
    for f in ["mesh_coarse.json", "mesh_refined.json"] {
        let m = MeshGrid::from_json(&std::fs::read_to_string(out.join(f)).unwrap()).unwrap();
        assert!(m.rmse(&regular) < 1e-6, "{f}");
    }
    let csv = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss_rect,loss_mutual,loss_total"));
}

#[test]
fn fit_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 64, 4);
    let run = dewarp(&["fit", s(&flat), "--target", s(&flat), "--out-dir", s(dir.path()), "--grid", "9by9"]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn eval_records_missing_files_and_scores_identical_pairs() {
    let dir = tempfile::tempdir().unwrap();
    page(dir.path(), "a.png", 192, 5);
    let manifest = dir.path().join("manifest.json");
    std::fs::write(
        &manifest,
        r#"[{"name": "same", "dewarped": "a.png", "reference": "a.png"},
            {"name": "gone", "dewarped": "missing.png", "reference": "a.png"}]"#,
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let run = dewarp(&["eval", s(&manifest), "--report", s(&report)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let parsed = EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.images.len(), 2);
    assert!((parsed.images[0].ms_ssim.unwrap() - 1.0).abs() < 1e-9);
    assert!(parsed.images[1].error.is_some());
    assert!((parsed.aggregate.ms_ssim.unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn eval_fails_on_a_broken_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, "{not json").unwrap();
    let run = dewarp(&["eval", s(&manifest), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_row_per_beta() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 192, 6);
    let report = dir.path().join("sweep.json");
    let run = dewarp(&["sweep-beta", s(&flat), "--target", s(&flat), "--report", s(&report)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let betas: Vec<f64> = rows.iter().map(|r| r["beta"].as_f64().unwrap()).collect();
    assert_eq!(betas, vec![0.003, 0.005, 0.008, 0.01, 0.02]);
    for r in rows {
        assert!(Path::new(r["output"].as_str().unwrap()).is_file());
        assert!(r["cer"].is_null());
    }
}

#[test]
fn sweep_fills_cer_from_ocr_text() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 64, 7);
    let ocr = dir.path().join("ocr");
    std::fs::create_dir(&ocr).unwrap();
    std::fs::write(ocr.join("restored_0.01.txt"), "abcd").unwrap();
    let reference = dir.path().join("ref.txt");
    std::fs::write(&reference, "abce").unwrap();
    let report = dir.path().join("sweep.json");
    let run = dewarp(&[
        "sweep-beta", s(&flat), "--target", s(&flat), "--report", s(&report),
        "--betas", "0.01,0.02", "--ocr-dir", s(&ocr), "--reference-text", s(&reference),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rows"][0]["cer"].as_f64(), Some(0.25));
    assert!(v["rows"][1]["cer"].is_null());
}

#[test]
fn sweep_rejects_out_of_range_beta() {
    let dir = tempfile::tempdir().unwrap();
    let flat = page(dir.path(), "flat.png", 64, 8);
    let run = dewarp(&[
        "sweep-beta", s(&flat), "--target", s(&flat), "--report", s(&dir.path().join("r.json")),
        "--betas", "0.01,0.9",
    ]);
    assert_eq!(run.status.code(), Some(1));
}
