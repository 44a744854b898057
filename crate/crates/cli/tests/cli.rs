use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forma_core::data::{save_image, save_mask, save_prob_map, synth_tamper, write_manifest, ManifestEntry, TamperKind};
use forma_core::Tensor;

fn forma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forma"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn forma")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&forma(&["--help"])), 0);
    assert_eq!(code(&forma(&["complexity", "--variant", "bogus"])), 1);
    assert_eq!(code(&forma(&["frobnicate"])), 1);
    assert_eq!(code(&forma(&["complexity", "--tau", "1.5"])), 1);
    assert_eq!(code(&forma(&["eval"])), 1);
    assert_eq!(code(&forma(&["robustness", "--manifest", "m.jsonl", "--grid", "sharpen:1"])), 1);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = forma(&["infer", "--out", s(dir.path()), "/nonexistent/x.png"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/x.png"));
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"scale": "toy", "colour": 3}"#).unwrap();
    assert_eq!(code(&forma(&["complexity", "--config", s(&cfg)])), 1);
    std::fs::write(&cfg, r#"{"scale": "paper", "flops_per_mac": 2}"#).unwrap();
    let o = forma(&["complexity", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("37.54 M"), "{}", stdout(&o));
}

#[test]
fn complexity_writes_json_only_with_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = forma(&["complexity", "--scale", "paper", "--size", "512x512", "--size", "1024x1024", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("1024x1024 / 512x512"));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("complexity.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(code(&forma(&["complexity", "--size", "64by64"])), 1);
}

#[test]
fn infer_writes_native_size_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.png");
    save_image(&img, &Tensor::full(&[3, 40, 56], 0.5)).unwrap();
    for native in [false, true] {
        let mut runs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("o{native}{k}"));
            let mut args = vec!["infer", "--seed", "4", "--out", s(&out)];
            if native {
                args.push("--native");
            }
            args.push(s(&img));
            let o = forma(&args);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            let mask = forma_core::data::load_mask(&out.join("flat_mask.png")).unwrap();
            let prob = forma_core::data::load_prob_map(&out.join("flat_prob.pgm")).unwrap();
            assert_eq!(mask.shape(), &[40, 56]);
            assert_eq!(prob.shape(), &[40, 56]);
            runs.push((
                std::fs::read(out.join("flat_mask.png")).unwrap(),
                std::fs::read(out.join("flat_prob.pgm")).unwrap(),
            ));
        }
        assert_eq!(runs[0], runs[1]);
    }
}

/// Writes a gt mask and a precomputed probability map; returns the manifest entry.
fn scored(dir: &Path, name: &str, dataset: &str, gt: &Tensor, prob: &Tensor) -> ManifestEntry {
    let mask_path = dir.join(format!("{name}_gt.png"));
    let prob_path = dir.join(format!("{name}_prob.pgm"));
    save_mask(&mask_path, gt).unwrap();
    save_prob_map(&prob_path, prob).unwrap();
    ManifestEntry {
        image_path: dir.join(format!("{name}.png")),
        mask_path,
        dataset_name: dataset.into(),
        prob_path: Some(prob_path),
    }
}

fn manifest(dir: &Path, entries: &[ManifestEntry]) -> PathBuf {
    let p = dir.join("manifest.jsonl");
    write_manifest(&p, entries).unwrap();
    p
}

fn average_line(out: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(out.join("eval.txt")).unwrap();
    let line = text.lines().find(|l| l.starts_with("weighted average")).unwrap();
    line.split_whitespace().map(String::from).collect()
}

#[test]
fn eval_of_a_perfect_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let gt = Tensor::from_fn(&[8, 8], |i| f64::from(u8::from(i % 8 < 3)));
    let m = manifest(dir.path(), &[scored(dir.path(), "a", "set", &gt, &gt)]);
    let out = dir.path().join("out");
    let o = forma(&["eval", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(average_line(&out)[3..], ["1.0000", "1.0000"]);
    let jsonl = std::fs::read_to_string(out.join("eval.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(rec["f1"], 1.0);
    assert_eq!(rec["fn"], 0);
}

#[test]
fn eval_weights_datasets_by_image_count() {
    let dir = tempfile::tempdir().unwrap();
    let gt = Tensor::full(&[2, 2], 1.0);
    let left = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let empty = Tensor::zeros(&[2, 2]);
    // "big": three images at F1 2/3, one at 0 → mean 0.5; "small": one perfect image.
    // Image-weighted: (4·0.5 + 1·1) / 5 = 0.6; an unweighted mean would give 0.75.
    let mut entries = vec![scored(dir.path(), "s", "small", &gt, &gt)];
    for k in 0..3 {
        entries.push(scored(dir.path(), &format!("b{k}"), "big", &gt, &left));
    }
    entries.push(scored(dir.path(), "b3", "big", &gt, &empty));
    // a missing mask is skipped, not fatal
    entries.push(ManifestEntry {
        mask_path: dir.path().join("gone.png"),
        ..entries[0].clone()
    });
    let m = manifest(dir.path(), &entries);
    let out = dir.path().join("out");
    let o = forma(&["eval", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let avg = average_line(&out);
    assert_eq!(avg[2], "5");
    assert_eq!(avg[3], "0.6000");
    assert!(stdout(&o).contains("skipped entries: 1"));
}

#[test]
fn tau_moves_the_decision() {
    let dir = tempfile::tempdir().unwrap();
    let gt = Tensor::full(&[4, 4], 1.0);
    let prob = Tensor::full(&[4, 4], 0.6);
    let m = manifest(dir.path(), &[scored(dir.path(), "a", "set", &gt, &prob)]);
    let f1_at = |tau: &str| {
        let out = dir.path().join(format!("out{tau}"));
        let o = forma(&["eval", "--manifest", s(&m), "--out", s(&out), "--tau", tau]);
        assert_eq!(code(&o), 0);
        average_line(&out)[3].clone()
    };
    assert_eq!(f1_at("0.5"), "1.0000");
    assert_eq!(f1_at("0.7"), "0.0000");
}

fn image_manifest(dir: &Path, n: u64) -> PathBuf {
    let entries: Vec<ManifestEntry> = (0..n)
        .map(|i| {
            let smp = synth_tamper(100 + i, 64, 64, TamperKind::Splice).unwrap();
            let image_path = dir.join(format!("i{i}.png"));
            let mask_path = dir.join(format!("i{i}_gt.png"));
            save_image(&image_path, &smp.image).unwrap();
            save_mask(&mask_path, &smp.mask).unwrap();
            ManifestEntry {
                image_path,
                mask_path,
                dataset_name: "synthetic".into(),
                prob_path: None,
            }
        })
        .collect();
    manifest(dir, &entries)
}

#[test]
fn robustness_empty_grid_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let m = image_manifest(dir.path(), 1);
    let out = dir.path().join("r");
    let o = forma(&["robustness", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join("robustness.csv")).unwrap(), "kind,strength,f1,iou\n");
}

#[test]
fn robustness_identity_points_match_eval() {
    let dir = tempfile::tempdir().unwrap();
    let m = image_manifest(dir.path(), 3);
    let eval_out = dir.path().join("e");
    let o = forma(&["eval", "--manifest", s(&m), "--seed", "9", "--out", s(&eval_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs: Vec<serde_json::Value> = std::fs::read_to_string(eval_out.join("eval.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mean = |k: &str| recs.iter().map(|r| r[k].as_f64().unwrap()).sum::<f64>() / recs.len() as f64;

    let out = dir.path().join("r");
    let o = forma(&[
        "robustness", "--manifest", s(&m), "--seed", "9", "--out", s(&out),
        "--grid", "gaussian_blur:0", "--grid", "resize:1,0.5", "--grid", "gaussian_noise:0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("robustness.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r[1] != "0.5") {
        let (f1, iou): (f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!((f1 - mean("f1")).abs() < 1e-6, "{r:?}");
        assert!((iou - mean("iou")).abs() < 1e-6, "{r:?}");
    }
}

#[test]
fn train_writes_checkpoint_and_curve_then_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let base = ["train", "--samples", "2", "--batch-size", "2", "--no-augment", "--out", s(&out)];
    let o = forma(&[&base[..], &["--steps", "2"]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    let ckpt = out.join("checkpoint.ckpt");
    let copy = dir.path().join("resume.ckpt");
    std::fs::copy(&ckpt, &copy).unwrap();
    let o = forma(&[&base[..], &["--steps", "3", "--resume", s(&copy)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).unwrap();
    assert!(curve.lines().nth(1).unwrap().starts_with("3,"), "{curve}");

    // the trained weights drive inference
    let img = dir.path().join("x.png");
    save_image(&img, &Tensor::full(&[3, 64, 64], 0.3)).unwrap();
    let o = forma(&["infer", "--checkpoint", s(&ckpt), "--out", s(&out), s(&img)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn diverging_training_exits_three_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nan");
    let o = forma(&[
        "train", "--samples", "2", "--batch-size", "2", "--steps", "5", "--lr", "1e300",
        "--no-augment", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("nan_dump.json")).unwrap()).unwrap();
    assert!(dump["error"].as_str().unwrap().contains("batch seed"));
}
