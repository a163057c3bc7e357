//! End-to-end checks of the command-line binary: file formats crossing the
//! process boundary, exit-code contract (0 ok, 1 runtime, 2 usage), output
//! determinism, and the measured latency-scaling claim.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("no signal")
}

#[test]
fn count_prints_the_cost_table_and_scale_summary() {
    let out = run(&["count", "--size", "t"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("patch_embed"), "table lists layers:\n{text}");
    assert!(text.contains("total"), "table has a total row");
    assert!(text.contains("24.73M params"), "summary names the scale:\n{text}");
    assert!(text.contains("3.74G flops"), "summary names the compute:\n{text}");

    let win = run(&["count", "--size", "t", "--variant", "win"]);
    assert!(stdout(&win).contains("win variant"));
    // Dropping the spectral filters and gates must shrink the model.
    let grab = |s: &str| -> f64 {
        let i = s.find(" params,").unwrap();
        s[..i].rsplit(' ').next().unwrap().trim_end_matches('M').parse().unwrap()
    };
    assert!(grab(&stdout(&win)) < grab(&stdout(&out)));
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(code(&run(&["count", "--size", "xl"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["bench", "--methods", "gemm"])), 2);
    assert_eq!(code(&run(&["count", "--variant", "conv"])), 2);
}

#[test]
fn synthetic_datasets_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&[
            "synth-data",
            "--out",
            d.to_str().unwrap(),
            "--classes",
            "4",
            "--per-class",
            "2",
            "--size",
            "28",
            "--seed",
            "11",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let labels_a = std::fs::read(a.join("labels.csv")).unwrap();
    let labels_b = std::fs::read(b.join("labels.csv")).unwrap();
    assert_eq!(labels_a, labels_b);
    assert_eq!(
        String::from_utf8(labels_a).unwrap().lines().count(),
        8,
        "one row per image"
    );
    for name in ["img_00000.fwt", "img_00007.fwt"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} must match byte for byte"
        );
    }

    let c = dir.path().join("c");
    let out = run(&[
        "synth-data", "--out", c.to_str().unwrap(), "--classes", "4", "--per-class", "2",
        "--size", "28", "--seed", "12",
    ]);
    assert_eq!(code(&out), 0);
    assert_ne!(
        std::fs::read(a.join("img_00000.fwt")).unwrap(),
        std::fs::read(c.join("img_00000.fwt")).unwrap(),
        "a different seed changes the pixels"
    );
}

#[test]
fn bench_csv_contract_and_window_skips() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let out = run(&[
        "bench",
        "--methods",
        "wmsa,fe",
        "--resolutions",
        "56,60",
        "--channels",
        "8",
        "--window",
        "7",
        "--reps",
        "30",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(
        stderr(&out).contains("skipping wmsa at 60px"),
        "the untileable row is reported: {}",
        stderr(&out)
    );
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,resolution,channels,window,reps,mean_ms,std_ms,flops");
    assert_eq!(lines.len(), 4, "wmsa@56, fe@56, fe@60:\n{csv}");
    assert!(lines[1].starts_with("wmsa,56,8,7,30,"));
    assert!(lines[2].starts_with("fe,56,"));
    assert!(lines[3].starts_with("fe,60,"));
}

#[test]
fn filter_latency_grows_like_n_log_n_with_resolution() {
    let out = run(&[
        "bench", "--methods", "fe", "--resolutions", "112,224", "--channels", "96", "--reps", "30",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let mean_of = |res: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(&format!("fe,{res},")))
            .unwrap_or_else(|| panic!("no fe row for {res} in:\n{text}"))
            .split(',')
            .nth(5)
            .unwrap()
            .parse()
            .unwrap()
    };
    let ratio = mean_of("224") / mean_of("112");
    assert!(
        (3.0..=6.0).contains(&ratio),
        "4x the tokens should cost 3-6x the time (n log n plus constants), got {ratio:.2}x"
    );
}

fn assert_valid_pgm(path: &Path, side: usize) {
    let bytes = std::fs::read(path).unwrap();
    let header = format!("P5\n{side} {side}\n255\n");
    assert!(
        bytes.starts_with(header.as_bytes()),
        "{} must start with {header:?}",
        path.display()
    );
    assert_eq!(bytes.len(), header.len() + side * side, "one byte per pixel");
}

#[test]
fn train_infer_cam_pipeline_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth-data", "--out", data.to_str().unwrap(), "--classes", "4", "--per-class", "32",
        "--size", "56", "--seed", "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train-toy",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "12",
        "--lr",
        "2e-3",
        "--stop-acc",
        "0.999",
        "--seed",
        "0",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("saved checkpoint"));

    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc");
    assert!(lines.len() >= 2, "at least one epoch row:\n{metrics}");
    let final_acc: f64 = lines.last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!(final_acc >= 0.999, "the run stops only once the training set is fit");

    // Inference on a training image: correct label, identical bytes across
    // runs, and the logits line parses.
    let img = data.join("img_00000.fwt");
    let a = run(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--input", img.to_str().unwrap()]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = run(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--input", img.to_str().unwrap()]);
    assert_eq!(stdout(&a), stdout(&b), "inference is deterministic");
    let text = stdout(&a);
    assert!(
        text.lines().next().unwrap() == "class: 0",
        "image 0 belongs to class 0 and the model fits the training set:\n{text}"
    );
    let logits: Vec<f64> = text
        .lines()
        .nth(1)
        .unwrap()
        .strip_prefix("logits: ")
        .unwrap()
        .split(' ')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(logits.len(), 4, "one logit per class");

    // Attribution maps for both stages parse as PGM at image resolution.
    for (stage, block) in [("0", "0"), ("1", "1")] {
        let map = dir.path().join(format!("map_{stage}_{block}.pgm"));
        let out = run(&[
            "cam",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--input",
            img.to_str().unwrap(),
            "--stage",
            stage,
            "--block",
            block,
            "--out",
            map.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_valid_pgm(&map, 56);
    }

    // Out-of-range block address: runtime error, not a crash.
    let out = run(&[
        "cam", "--ckpt", ckpt.to_str().unwrap(), "--input", img.to_str().unwrap(),
        "--stage", "5", "--block", "0", "--out", dir.path().join("x.pgm").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("out of range"), "{}", stderr(&out));
}

#[test]
fn training_loss_decreases_across_early_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&[
        "synth-data", "--out", data.to_str().unwrap(), "--classes", "4", "--per-class", "16",
        "--size", "56", "--seed", "3",
    ]);
    let ckpt = dir.path().join("model.ckpt");
    let out = run(&[
        "train-toy", "--data", data.to_str().unwrap(), "--epochs", "3", "--seed", "0",
        "--out", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let losses: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 3);
    assert!(
        losses[0] > losses[1] && losses[1] > losses[2],
        "loss must fall each of the first three epochs: {losses:?}"
    );
}

#[test]
fn corrupted_and_missing_inputs_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();

    // A checkpoint with the wrong magic is rejected up front.
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE not a checkpoint").unwrap();
    let img = dir.path().join("img.fwt");
    std::fs::write(&img, b"junk").unwrap();
    let out = run(&["infer", "--ckpt", bad.to_str().unwrap(), "--input", img.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let out = run(&[
        "train-toy", "--data", dir.path().join("missing").to_str().unwrap(),
        "--out", dir.path().join("m.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "missing dataset directory is a runtime error");

    // Sweep values must sit on the anchored stage progression.
    let out = run(&["sweep", "--kind", "params", "--axis", "dimension", "--values", "100"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_exit_codes_report_the_verdict() {
    let out = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    for layer in ["filter_enhance", "wmsa", "eca", "ffn", "layer_norm", "patch_merge", "head"] {
        assert!(text.contains(layer), "report lists {layer}:\n{text}");
    }

    let out = run(&["gradcheck", "--inject-failure"]);
    assert_eq!(code(&out), 1, "a corrupted gradient must be caught");
    assert!(stdout(&out).contains("FAIL"), "{}", stdout(&out));
}

#[test]
fn sweep_emits_the_scaling_csv() {
    let out = run(&["sweep", "--kind", "flops", "--axis", "resolution", "--values", "56,112"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,axis_value,count");
    assert_eq!(lines.len(), 7, "three methods x two points:\n{text}");
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 3));
}
