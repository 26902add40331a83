use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use frinet::evaluation::{decode_overlay, read_dump, EvalReport, VISUAL_FILES};

fn frinet(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_frinet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn frinet");
    assert!(
        out.status.success(),
        "frinet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Pooled IoU per class straight from the dumped masks, independent of the library accumulator.
fn recount(dir: &Path) -> BTreeMap<u8, f64> {
    let index = fs::read_to_string(dir.join("episodes.csv")).unwrap();
    let mut counts: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    for line in index.lines().skip(1) {
        let (ep, class) = line.split_once(',').unwrap();
        let ep: usize = ep.parse().unwrap();
        let class: u8 = class.parse().unwrap();
        let pred = read_dump(&dir.join(format!("ep{ep:05}_pred.frnt"))).unwrap();
        let gt = read_dump(&dir.join(format!("ep{ep:05}_gt.frnt"))).unwrap();
        let entry = counts.entry(class).or_default();
        for (&pv, &gv) in pred.iter().zip(gt.iter()) {
            if gv == 255.0 {
                continue;
            }
            let (a, b) = (pv == 1.0, gv == 1.0);
            entry.0 += (a && b) as u64;
            entry.1 += (a || b) as u64;
        }
    }
    counts
        .into_iter()
        .filter(|(_, (_, u))| *u > 0)
        .map(|(c, (i, u))| (c, i as f64 / u as f64))
        .collect()
}

#[test]
fn synth_pretrain_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let backbone = root.join("bb.safetensors");
    let run = root.join("run");
    let reports = root.join("reports");
    let masks = root.join("masks");
    let relations = root.join("relations");
    let branches = root.join("branches");
    let visuals = root.join("visuals");

    frinet(&["synth", "--out", p(&data), "--images", "48", "--size", "64"]);
    frinet(&[
        "pretrain",
        "--fold",
        "1",
        "--dataset",
        p(&data),
        "--out",
        p(&backbone),
        "--epochs",
        "1",
        "--input-size",
        "64",
    ]);
    let cfg = root.join("train.cfg");
    fs::write(
        &cfg,
        "# tiny run\nepochs = 1\nsteps_per_epoch = 3\nbatch_size = 2\ninput_size = 64\nhead_width = 8\nlearning_rate = 0.01\n",
    )
    .unwrap();
    frinet(&[
        "train",
        "--fold",
        "1",
        "--shots",
        "1",
        "--dataset",
        p(&data),
        "--backbone",
        p(&backbone),
        "--config",
        p(&cfg),
        "--out",
        p(&run),
    ]);
    for f in ["last.safetensors", "epoch_001.safetensors", "train.cfg"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let ckpt = run.join("last.safetensors");
    let report_a = reports.join("a.json");
    frinet(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--episodes",
        "6",
        "--seed",
        "4",
        "--report",
        p(&report_a),
        "--dump-masks",
        p(&masks),
        "--dump-relations",
        p(&relations),
        "--dump-branches",
        p(&branches),
        "--visuals",
        p(&visuals),
    ]);
    let report_b = reports.join("b.json");
    frinet(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--episodes",
        "6",
        "--seed",
        "4",
        "--report",
        p(&report_b),
    ]);
    let text = fs::read_to_string(&report_a).unwrap();
    assert_eq!(
        text,
        fs::read_to_string(&report_b).unwrap(),
        "same seed must give identical bytes"
    );

    let report = EvalReport::from_json(&text).unwrap();
    assert_eq!((report.fold, report.shots, report.num_episodes), (1, 1, 6));
    let recounted = recount(&masks);
    assert_eq!(
        recounted.keys().collect::<Vec<_>>(),
        report.per_class_iou.keys().collect::<Vec<_>>()
    );
    for (c, iou) in &recounted {
        assert!(
            (iou - report.per_class_iou[c]).abs() <= 5e-7,
            "class {c}: {iou} vs {}",
            report.per_class_iou[c]
        );
    }

    let rel = read_dump(&relations.join("ep00000_relations_r90.frnt")).unwrap();
    assert_eq!(rel.shape()[0], 4);
    let scores = read_dump(&relations.join("ep00000_scores_r90.frnt")).unwrap();
    assert_eq!(scores.shape(), rel.shape());
    assert!(scores.iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(relations.join("ep00000_relations_r0.png").exists());
    let fused = read_dump(&branches.join("ep00005_fused.frnt")).unwrap();
    assert_eq!(fused.shape(), &[2, 64, 64]);
    for f in VISUAL_FILES {
        assert!(visuals.join(f).exists(), "{f} missing");
    }
    let overlay = image::open(visuals.join("prediction_overlay.png")).unwrap().to_rgb8();
    let pred = read_dump(&masks.join("ep00000_pred.frnt")).unwrap();
    let decoded = decode_overlay(&overlay);
    assert!(decoded.iter().zip(pred.iter()).all(|(&d, &m)| f32::from(d) == m));

    let md = frinet(&["report", "--in", p(&reports), "--format", "md"]);
    assert!(md.contains("| a |") && md.contains("| b |"), "{md}");
    let csv_path = root.join("all.csv");
    frinet(&["report", "--in", p(&reports), "--format", "csv", "--out", p(&csv_path)]);
    assert_eq!(fs::read_to_string(csv_path).unwrap().lines().count(), 3);
}

#[test]
fn eval_with_zero_episodes_reports_status() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let backbone = root.join("bb.safetensors");
    frinet(&[
        "synth",
        "--out",
        p(&data),
        "--images",
        "30",
        "--size",
        "64",
        "--test-pool",
    ]);
    frinet(&[
        "pretrain",
        "--fold",
        "0",
        "--dataset",
        p(&data),
        "--out",
        p(&backbone),
        "--epochs",
        "1",
        "--input-size",
        "64",
    ]);
    let cfg = root.join("c.cfg");
    fs::write(
        &cfg,
        "epochs = 1\nsteps_per_epoch = 1\nbatch_size = 1\ninput_size = 64\nhead_width = 8\norientations = 0,180\n",
    )
    .unwrap();
    let run = root.join("run");
    frinet(&[
        "train",
        "--fold",
        "0",
        "--shots",
        "1",
        "--dataset",
        p(&data),
        "--backbone",
        p(&backbone),
        "--config",
        p(&cfg),
        "--out",
        p(&run),
    ]);
    let out = root.join("r.json");
    frinet(&[
        "eval",
        "--checkpoint",
        p(&run.join("last.safetensors")),
        "--episodes",
        "0",
        "--seed",
        "0",
        "--report",
        p(&out),
    ]);
    let report = EvalReport::from_json(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(report.status, "no episodes");
    assert_eq!(report.num_episodes, 0);
}
