use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deformdet::synth::{render_background, DefectClass, GenSpec};
use deformdet::train::{TrainConfig, Trainer};

fn deformdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deformdet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, spec: &GenSpec, count: usize) -> std::path::PathBuf {
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, spec.to_text()).unwrap();
    let data = dir.join("data");
    let o = deformdet(&["gen-data", "--spec", p(&spec_path), "--out", p(&data), "--count", &count.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

fn files_with_ext(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn gen_data_writes_count_pairs_and_summary() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(d.path(), &GenSpec::default(), 50);
    assert!(data.join("manifest.txt").is_file());
    assert_eq!(files_with_ext(&data.join("images"), "ppm"), 50);
    assert_eq!(files_with_ext(&data.join("labels"), "txt"), 50);
    let o = deformdet(&["gen-data", "--spec", p(&d.path().join("spec.txt")), "--out", p(&d.path().join("again")), "--count", "50"]);
    assert!(stdout(&o).starts_with("images 50"));
    assert!(stdout(&o).contains("Signature"));
    // same spec and seed, same bytes
    for f in ["manifest.txt", "images/000007.ppm", "labels/000049.txt"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(d.path().join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_error_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = deformdet(&["gen-data", "--out", p(d.path()), "--count", "3"]);
    assert_eq!(code(&o), 2);

    let bad = d.path().join("bad.txt");
    fs::write(&bad, "image_size = 50\n").unwrap();
    let o = deformdet(&["gen-data", "--spec", p(&bad), "--out", p(&d.path().join("x")), "--count", "3"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = deformdet(&["gen-data", "--spec", p(&d.path().join("missing.txt")), "--out", p(&d.path().join("x")), "--count", "3"]);
    assert_eq!(code(&o), 3);

    // output path blocked by a regular file
    let good = d.path().join("good.txt");
    fs::write(&good, GenSpec::default().to_text()).unwrap();
    let blocker = d.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = deformdet(&["gen-data", "--spec", p(&good), "--out", p(&blocker), "--count", "3"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_of_ground_truth_as_detections_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(d.path(), &GenSpec::default(), 12);
    let mut lines = String::new();
    for entry in fs::read_dir(data.join("labels")).unwrap() {
        let path = entry.unwrap().path();
        let id = path.file_stem().unwrap().to_str().unwrap().to_string();
        for l in fs::read_to_string(&path).unwrap().lines() {
            let f: Vec<&str> = l.split_whitespace().collect();
            lines += &format!("{id} {} 1.0 {} {} {} {}\n", f[0], f[1], f[2], f[3], f[4]);
        }
    }
    let dets = d.path().join("dets.txt");
    fs::write(&dets, lines).unwrap();
    let report = d.path().join("report");
    let o = deformdet(&["eval", "--detections", p(&dets), "--data", p(&data), "--split", "all", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    let mut scored = 0;
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f[1] == "-" {
            continue;
        }
        assert_eq!(f[1], "1.0000", "{line}");
        assert_eq!(f[2], "1.0000", "{line}");
        scored += 1;
    }
    assert!(scored >= 2);
    assert!(report.join("pr.csv").is_file());
    assert!(fs::read_to_string(report.join("pr.svg")).unwrap().contains("<polyline"));
}

#[test]
fn eval_rejects_bad_inputs() {
    let d = tempfile::tempdir().unwrap();
    let data = gen(d.path(), &GenSpec::default(), 4);
    let dets = d.path().join("dets.txt");
    fs::write(&dets, "000000 9 0.5 0.5 0.5 0.1 0.1\n").unwrap();
    let out = d.path().join("r");
    let o = deformdet(&["eval", "--detections", p(&dets), "--data", p(&data), "--split", "all", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = deformdet(&["eval", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = deformdet(&["eval", "--detections", p(&dets), "--data", p(&d.path().join("nope")), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn fresh_model_finds_nothing_on_a_blank_page() {
    let d = tempfile::tempdir().unwrap();
    let ckpt = d.path().join("ckpt");
    Trainer::new(&TrainConfig::default()).unwrap().save(&ckpt).unwrap();
    let img = d.path().join("blank.ppm");
    render_background(&GenSpec::default(), 0).write(&img).unwrap();
    let out = d.path().join("dets.txt");
    let o = deformdet(&["infer", "--checkpoint", p(&ckpt), "--image", p(&img), "--out", p(&out), "--score-thresh", "0.9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    let o = deformdet(&["infer", "--checkpoint", p(&d.path().join("none")), "--image", p(&img), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_passes_across_seeds() {
    for seed in 0..5 {
        let o = deformdet(&["gradcheck", "--seed", &seed.to_string()]);
        assert_eq!(code(&o), 0, "seed {seed}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("deform-conv.s1.offsets"));
    }
    assert_eq!(code(&deformdet(&["gradcheck"])), 0);
}

#[test]
fn gradcheck_names_the_broken_op() {
    let o = deformdet(&["gradcheck", "--inject-offset-grad-bug"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("deform-conv"), "{err}");
    assert!(!err.contains("dfpn"), "{err}");
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let cfg = dir.join("train.txt");
    fs::write(&cfg, format!("data = data\nout = run\n{extra}")).unwrap();
    cfg
}

#[test]
fn train_then_resume_then_diverge() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &GenSpec::default(), 6);
    let cfg = write_config(d.path(), "steps = 2\nbatch_size = 2\ntrain_split = all\n");
    let o = deformdet(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.path().join("run/checkpoint/manifest.txt").is_file());
    assert_eq!(fs::read_to_string(d.path().join("run/train.log")).unwrap().lines().count(), 2);

    let cfg = write_config(d.path(), "steps = 3\nbatch_size = 2\ntrain_split = all\n");
    let o = deformdet(&["train", "--config", p(&cfg), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.path().join("run/train.log")).unwrap().lines().count(), 3);

    let cfg = write_config(d.path(), "steps = 20\nbatch_size = 2\nlr = 1e8\nclip_grad_norm = none\ntrain_split = all\n");
    let o = deformdet(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let cfg = write_config(d.path(), "steps = 2\nwarmup = 3\n");
    assert_eq!(code(&deformdet(&["train", "--config", p(&cfg)])), 2);
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &GenSpec::default(), 6);
    let cfg = write_config(d.path(), "steps = 1\nbatch_size = 2\ntrain_split = all\nval_split = all\n");

    let one = d.path().join("one.txt");
    fs::write(&one, "baseline - pafpn\n").unwrap();
    let csv = d.path().join("out/one.csv");
    let o = deformdet(&["ablate", "--config", p(&cfg), "--variants", p(&one), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);

    let four = d.path().join("four.txt");
    fs::write(&four, "dc2345 2,3,4,5 dfpn\ndc345 3,4,5 dfpn\ndc45 4,5 dfpn\ndc5 5 dfpn\n").unwrap();
    let csv = d.path().join("four.csv");
    let o = deformdet(&["ablate", "--config", p(&cfg), "--variants", p(&four), "--out", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["dc2345", "dc345", "dc45", "dc5"]);

    let bad = d.path().join("bad.txt");
    fs::write(&bad, "broken 4,5\n").unwrap();
    let o = deformdet(&["ablate", "--config", p(&cfg), "--variants", p(&bad), "--out", p(&d.path().join("bad.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("bad.csv").exists());
}

/// Train on the 20-image one-class set through the CLI, then score the
/// checkpoint with `eval`: the number matches the trainer's final eval.
#[test]
fn train_then_eval_reproduces_the_overfit_result() {
    let d = tempfile::tempdir().unwrap();
    let spec = GenSpec {
        seed: 1,
        ..GenSpec::default()
    }
    .one_class(DefectClass::Signature);
    gen(d.path(), &spec, 20);
    let cfg = write_config(d.path(), "steps = 1000\nbatch_size = 4\ntrain_split = all\nval_split = all\n");
    let o = deformdet(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval_log = fs::read_to_string(d.path().join("run/eval.log")).unwrap();
    let last: Vec<f64> = eval_log
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(last[0], 1000.0);

    let report = d.path().join("report");
    let o = deformdet(&[
        "eval",
        "--checkpoint",
        p(&d.path().join("run/checkpoint")),
        "--data",
        p(&d.path().join("data")),
        "--split",
        "all",
        "--out",
        p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    let map_row: Vec<&str> = table.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(map_row[0], "mAP");
    let map50: f64 = map_row[1].parse().unwrap();
    assert!((map50 - last[1]).abs() < 1e-4, "{map50} vs {}", last[1]);
    assert!(map50 >= 0.9, "{table}");
}
