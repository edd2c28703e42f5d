use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uniblend::data::{read_pgm, read_ppm, write_ppm};
use uniblend::tensor::{Fill, Tensor};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniblend"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", "d", "--out", out, "--steps", "2", "--batch", "2", "--crop", "32", "--seed", "3",
        "--channels", "4", "--context-channels", "4",
    ];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(tmp.path(), &["gen-data", "--out", "d"])), 1);
    assert_eq!(code(&run(tmp.path(), &["grad-check", "--bogus"])), 1);
    assert_eq!(code(&run(tmp.path(), &["--help"])), 0);
}

#[test]
fn gen_data_writes_pairs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        let o = run(tmp.path(), &["gen-data", "--out", d, "--count", "2", "--size", "64", "--seed", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["0000_input.ppm", "0000_gt.ppm", "0000_mask.pgm", "0001_input.ppm", "0001_gt.ppm", "0001_mask.pgm", "meta.json"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        assert_eq!(a, fs::read(tmp.path().join("b").join(name)).unwrap(), "{name}");
    }
    let img: Tensor<f32> = read_ppm(&tmp.path().join("a/0001_input.ppm")).unwrap();
    assert_eq!(img.shape(), &[1, 3, 64, 64]);

    let o = run(tmp.path(), &["gen-data", "--out", "c", "--count", "1", "--size", "48", "--seed", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_infer_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&run(dir, &["gen-data", "--out", "d", "--count", "2", "--size", "64", "--seed", "4"])), 0);

    let o = train_tiny(dir, "m.ubnd", &["--log", "log.ndjson", "--weights", "0.2,0.1,0.01,0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = train_tiny(dir, "m2.ubnd", &["--weights", "0.2,0.1,0.01,0.5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(dir.join("m.ubnd")).unwrap(), fs::read(dir.join("m2.ubnd")).unwrap());

    let log = fs::read_to_string(dir.join("log.ndjson")).unwrap();
    let rows: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["step"], i);
        for k in ["lrec", "lssim", "lgrad", "lperc", "lmask", "total"] {
            assert!(r[k].as_f64().unwrap().is_finite(), "{k}");
        }
    }

    let o = run(
        dir,
        &["infer", "--model", "m.ubnd", "--input", "d/0000_input.ppm", "--output", "b.ppm", "--dump-mask", "m.pgm", "--dump-residual", "r.ppm"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out: Tensor<f32> = read_ppm(&dir.join("b.ppm")).unwrap();
    assert_eq!(out.shape(), &[1, 3, 64, 64]);
    let mask: Tensor<f32> = read_pgm(&dir.join("m.pgm")).unwrap();
    assert_eq!(mask.shape(), &[1, 1, 64, 64]);
    let raw = fs::read(dir.join("m.pgm")).unwrap();
    assert!(raw.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(read_ppm::<f32>(&dir.join("r.ppm")).unwrap().shape(), &[1, 3, 64, 64]);

    let o = run(dir, &["eval", "--model", "m.ubnd", "--data", "d", "--report", "rep.json"]);
    assert_eq!(code(&o), 0);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("rep.json")).unwrap()).unwrap();
    for k in ["mean_psnr", "mean_ssim", "baseline_psnr", "baseline_ssim", "per_image"] {
        assert!(rep.get(k).is_some(), "{k}");
    }
    assert_eq!(rep["per_image"].as_array().unwrap().len(), 2);
}

#[test]
fn ablation_flags_shape_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&run(dir, &["gen-data", "--out", "d", "--count", "1", "--size", "32", "--seed", "2"])), 0);
    assert_eq!(code(&train_tiny(dir, "full.ubnd", &[])), 0);
    assert_eq!(code(&train_tiny(dir, "base.ubnd", &["--no-mask", "--no-saam", "--no-context"])), 0);
    let full = fs::metadata(dir.join("full.ubnd")).unwrap().len();
    let base = fs::metadata(dir.join("base.ubnd")).unwrap().len();
    assert!(base < full);
    let (_, cfg) = uniblend::model::checkpoint::load_params(&dir.join("base.ubnd")).unwrap();
    assert!(!cfg.use_mask && !cfg.use_saam && !cfg.use_context);
}

#[test]
fn bad_inputs_exit_two_and_bad_flags_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(&run(dir, &["gen-data", "--out", "d", "--count", "1", "--size", "32", "--seed", "2"])), 0);
    assert_eq!(code(&train_tiny(dir, "m.ubnd", &[])), 0);

    assert_eq!(code(&run(dir, &["eval", "--model", "missing.ubnd", "--data", "d", "--report", "r.json"])), 2);
    fs::write(dir.join("junk.ubnd"), b"nope").unwrap();
    assert_eq!(code(&run(dir, &["infer", "--model", "junk.ubnd", "--input", "d/0000_input.ppm", "--output", "o.ppm"])), 2);

    let odd: Tensor<f32> = Tensor::create(&[1, 3, 40, 40], Fill::Uniform { lo: 0.0, hi: 1.0, seed: 1 }).unwrap();
    write_ppm(&odd, &dir.join("odd.ppm")).unwrap();
    assert_eq!(code(&run(dir, &["infer", "--model", "m.ubnd", "--input", "odd.ppm", "--output", "o.ppm"])), 2);

    assert_eq!(code(&train_tiny(dir, "x.ubnd", &["--weights", "1,2"])), 1);
    assert_eq!(code(&train_tiny(dir, "x.ubnd", &["--weights", "1,2,3,-1"])), 1);
    let crop = |c: &str| run(dir, &["train", "--data", "d", "--out", "x.ubnd", "--steps", "1", "--crop", c]);
    assert_eq!(code(&crop("48")), 1);
    assert_eq!(code(&crop("64")), 2);
    fs::create_dir(dir.join("empty")).unwrap();
    assert_eq!(code(&run(dir, &["train", "--data", "empty", "--out", "x.ubnd"])), 2);
}

#[test]
fn grad_check_reports_every_probe() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["grad-check", "--seed", "2", "--f64"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for op in ["conv", "dwt", "saam", "context", "model", "ssim_loss"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{op} "))), "{op}");
    }
    assert_eq!(code(&run(tmp.path(), &["grad-check", "--seed", "2"])), 0);
}
