//! End-to-end checks of the `crowdcount` binary: the documented command
//! examples, exit codes, and artifact layout.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crowdcount::density::{AnnotationSet, PointAnnotation};
use crowdcount::imgbuf::RgbImage;
use crowdcount::io::{
    load_density, load_png, load_sigmas, save_annotations, save_manifest, save_png, save_sigmas,
    DatasetManifest, ManifestEntry,
};
use crowdcount::network::{save_checkpoint, Network};
use crowdcount::scale::{SigmaAssignment, SigmaMethod};
use crowdcount::scene::pearson;
use crowdcount::NetworkConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crowdcount")
}

fn run_in(root: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(root)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = run_in(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth(root: &Path, dir: &str, count: usize, n_heads: usize, seed: u64, split: &str) {
    ok(
        root,
        &[
            "synth",
            "--count", &count.to_string(),
            "--n-heads", &n_heads.to_string(),
            "--image-size", "64x64",
            "--seed", &seed.to_string(),
            "--split", split,
            "--out-dir", dir,
        ],
    );
}

#[test]
fn constant_method_writes_uniform_sigmas() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 2, 5, 1, "train");
    let stdout = ok(
        root,
        &["estimate-scales", "--manifest", "data/manifest.json", "--method", "constant", "--sigma0", "4", "--out-dir", "est"],
    );
    assert!(stdout.contains("sigma min 4.0000 median 4.0000 max 4.0000"), "{stdout}");
    for i in 0..2 {
        let s = load_sigmas(&root.join(format!("data/ann/scene_000{i}.sigmas.json"))).unwrap();
        assert_eq!(s.method_tag, SigmaMethod::Constant);
        assert_eq!(s.sigmas, vec![4.0; 5]);
    }
    assert!(root.join("est/estimate_scales_config.json").is_file());
}

#[test]
fn knn_on_a_spacing_10_grid_gives_interior_sigma_3() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut points = Vec::new();
    for gy in 0..5 {
        for gx in 0..5 {
            points.push(PointAnnotation {
                x: (12 + 10 * gx) as f64,
                y: (12 + 10 * gy) as f64,
            });
        }
    }
    let ann = AnnotationSet::new(points, (64, 64));
    save_annotations(&root.join("grid.json"), &ann).unwrap();
    save_png(&root.join("grid.png"), &RgbImage::filled(64, 64, [0.5; 3])).unwrap();
    let manifest = DatasetManifest {
        split: "train".into(),
        entries: vec![ManifestEntry {
            image: "grid.png".into(),
            annotations: "grid.json".into(),
        }],
    };
    save_manifest(&root.join("manifest.json"), &manifest).unwrap();

    ok(
        root,
        &["estimate-scales", "--manifest", "manifest.json", "--method", "knn", "--k", "3", "--beta", "0.3"],
    );
    let s = load_sigmas(&root.join("grid.sigmas.json")).unwrap();
    // Center of the grid: the 3 nearest neighbors all sit 10 px away.
    let center = 2 * 5 + 2;
    assert!((s.sigmas[center] - 3.0).abs() < 1e-9, "sigma {}", s.sigmas[center]);
}

#[test]
fn mrf_sigmas_on_synthetic_scenes_track_true_radii() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(
        root,
        &[
            "synth",
            "--count", "5",
            "--n-heads", "16",
            "--image-size", "64x64",
            "--size-range", "2.5,3.5",
            "--perspective-gain", "0.5",
            "--clutter", "0.2",
            "--seed", "100",
            "--out-dir", "data",
        ],
    );
    ok(
        root,
        &["estimate-scales", "--manifest", "data/manifest.json", "--method", "mrf", "--slic-k", "341"],
    );
    let mut est = Vec::new();
    let mut truth = Vec::new();
    for i in 0..5 {
        let s = load_sigmas(&root.join(format!("data/ann/scene_000{i}.sigmas.json"))).unwrap();
        assert_eq!(s.method_tag, SigmaMethod::Mrf);
        let radii: Vec<f64> = serde_json::from_str(
            &fs::read_to_string(root.join(format!("data/ann/scene_000{i}.radii.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(s.sigmas.len(), radii.len());
        est.extend_from_slice(&s.sigmas);
        truth.extend_from_slice(&radii);
    }
    let corr = pearson(&est, &truth);
    assert!(corr >= 0.7, "pooled Pearson {corr:.4}");
}

#[test]
fn gen_gt_reports_tiny_residuals_and_band_sums_match_counts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 3, 6, 2, "train");
    ok(
        root,
        &["estimate-scales", "--manifest", "data/manifest.json", "--method", "knn"],
    );
    let stdout = ok(
        root,
        &["gen-gt", "--manifest", "data/manifest.json", "--stride", "4", "--bands", "--out-dir", "gt"],
    );
    let mut checked = 0;
    for line in stdout.lines() {
        if let Some(pos) = line.find("residual ") {
            let r: f64 = line[pos + 9..].trim().parse().unwrap();
            assert!(r < 1e-6, "{line}");
            checked += 1;
        }
    }
    assert_eq!(checked, 3);
    for i in 0..3 {
        let full = load_density(&root.join(format!("gt/scene_000{i}.density.bin"))).unwrap();
        assert_eq!(full.stride, 4);
        let full_sum: f64 = full.data.iter().sum();
        assert!((full_sum - 6.0).abs() < 1e-4, "full sum {full_sum}");
        let mut band_total = 0.0;
        for b in 1..=4 {
            let band = load_density(&root.join(format!("gt/scene_000{i}.band{b}.bin"))).unwrap();
            band_total += band.data.iter().sum::<f64>();
        }
        assert!((band_total - 6.0).abs() < 1e-4, "band total {band_total}");
    }
}

#[test]
fn gen_gt_on_empty_annotations_writes_a_zero_map() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    save_annotations(&root.join("empty.json"), &AnnotationSet::new(Vec::new(), (32, 32))).unwrap();
    save_png(&root.join("empty.png"), &RgbImage::filled(32, 32, [0.8; 3])).unwrap();
    save_sigmas(
        &root.join("empty.sigmas.json"),
        &SigmaAssignment {
            sigmas: Vec::new(),
            method_tag: SigmaMethod::Constant,
        },
    )
    .unwrap();
    let manifest = DatasetManifest {
        split: "test".into(),
        entries: vec![ManifestEntry {
            image: "empty.png".into(),
            annotations: "empty.json".into(),
        }],
    };
    save_manifest(&root.join("manifest.json"), &manifest).unwrap();

    let stdout = ok(root, &["gen-gt", "--manifest", "manifest.json", "--out-dir", "gt"]);
    assert!(stdout.contains("count 0"), "{stdout}");
    let map = load_density(&root.join("gt/empty.density.bin")).unwrap();
    assert!(map.data.iter().all(|&v| v == 0.0));
}

#[test]
fn ablate_with_none_topology_writes_a_single_row_csv() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 3, 5, 3, "train");
    synth(root, "val", 2, 5, 30, "val");
    let stdout = ok(
        root,
        &[
            "ablate",
            "--train-manifest", "data/manifest.json",
            "--test-manifest", "val/manifest.json",
            "--topologies", "NONE",
            "--seeds", "0",
            "--epochs", "1",
            "--lr", "0.001",
            "--out-dir", "abl",
        ],
    );
    assert!(stdout.contains("baseline"), "{stdout}");
    let csv = fs::read_to_string(root.join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert_eq!(lines[0], "config,seed,mae,mse");
    assert!(lines[1].starts_with("baseline,0,"), "{csv}");
    assert!(root.join("abl/ablate_config.json").is_file());
}

#[test]
fn render_with_a_zero_weight_checkpoint_gives_a_black_prediction_panel() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 1, 6, 4, "train");

    let mut net = Network::new(NetworkConfig::default()).unwrap();
    for name in net.param_names() {
        let len = net.param(&name).unwrap().data.len();
        net.set_param(&name, &vec![0.0; len]).unwrap();
    }
    save_checkpoint(&root.join("zero.ckpt"), &net).unwrap();

    let stdout = ok(
        root,
        &[
            "render",
            "--checkpoint", "zero.ckpt",
            "--image", "data/images/scene_0000.png",
            "--annotations", "data/ann/scene_0000.json",
            "--sigma-method", "constant",
            "--out-dir", "render",
        ],
    );
    let line = stdout.lines().find(|l| l.starts_with("wrote ")).unwrap();
    let path = root.join(line.trim_start_matches("wrote ").trim());
    assert!(
        path.file_name().unwrap().to_string_lossy().contains("pred_0.0"),
        "{line}"
    );
    let panel = load_png(&path).unwrap();
    let (h, w) = (64usize, 64usize);
    assert_eq!((panel.height, panel.width), (h, 3 * w + 4));
    // Right third: prediction of the all-zero network.
    for y in 0..h {
        for x in 0..w {
            assert_eq!(panel.get(y, 2 * (w + 2) + x), [0.0, 0.0, 0.0], "({y},{x})");
        }
    }
    // Middle third: ground truth has mass somewhere.
    let gt_mass: f64 = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| panel.get(y, w + 2 + x)[0])
        .sum();
    assert!(gt_mass > 0.0);
}

#[test]
fn overfit_ten_images_then_eval_on_them_gives_mae_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 10, 8, 6, "train");
    ok(
        root,
        &[
            "train",
            "--train-manifest", "data/manifest.json",
            "--val-manifest", "data/manifest.json",
            "--epochs", "60",
            "--lr", "0.001",
            "--out-dir", "run",
        ],
    );
    let stdout = ok(
        root,
        &["eval", "--checkpoint", "run/checkpoint.ckpt", "--manifest", "data/manifest.json", "--out-dir", "evalout"],
    );
    let mae: f64 = stdout
        .lines()
        .find(|l| l.starts_with("MAE "))
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(mae < 1.0, "overfit MAE {mae}");
    assert!(root.join("evalout/metrics.json").is_file());
    assert!(root.join("run/history.jsonl").is_file());
}

#[test]
fn exit_codes_follow_the_error_taxonomy() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let usage = run_in(root, &["--bogus-flag"]);
    assert_eq!(usage.status.code(), Some(1));

    let missing = run_in(root, &["eval", "--checkpoint", "nope.ckpt", "--manifest", "nope.json"]);
    assert_eq!(missing.status.code(), Some(2));

    fs::write(root.join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let bad_cfg = run_in(root, &["train", "--config", "bad.json"]);
    assert_eq!(bad_cfg.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_cfg.stderr).contains("no_such_key"));

    fs::write(root.join("garbage.ckpt"), b"not a checkpoint").unwrap();
    synth(root, "data", 1, 4, 7, "train");
    let bad_ckpt = run_in(
        root,
        &["eval", "--checkpoint", "garbage.ckpt", "--manifest", "data/manifest.json"],
    );
    assert_eq!(bad_ckpt.status.code(), Some(2));
}

#[test]
fn per_entry_failures_continue_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, "data", 2, 5, 8, "train");
    // Corrupt one image; the other entry must still get its sigma file.
    fs::write(root.join("data/images/scene_0000.png"), b"junk").unwrap();
    let out = run_in(
        root,
        &["estimate-scales", "--manifest", "data/manifest.json", "--method", "mrf", "--slic-k", "256"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scene_0000"));
    assert!(!root.join("data/ann/scene_0000.sigmas.json").exists());
    assert!(root.join("data/ann/scene_0001.sigmas.json").is_file());
}
