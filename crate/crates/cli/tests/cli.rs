use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use symtrans::checkpoint;
use symtrans::commands::gen_data::{pair_dir, FIXED, FIXED_LABELS, MOVING, MOVING_LABELS, U_TRUE};
use symtrans::commands::train::{checkpoint_name, CSV_HEADER, LOSS_CSV};
use symtrans::manifest::FILE_NAME;
use symtrans::svol::{Kind, Svol};
use symtrans_core::deform::{jacobian_determinant, DisplacementField};
use symtrans_core::loss::{dice, warp_labels, RegistrationMode};
use symtrans_core::model::{ModelConfig, SymTrans};
use symtrans_core::synth::SyntheticSpec;
use symtrans_core::tensor::Tensor;
use symtrans_core::train::{register, TrainConfig};

fn symtrans(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symtrans"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("spawn symtrans")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec16() -> SyntheticSpec {
    SyntheticSpec {
        extents: [16, 16, 16],
        radius: [3.0, 5.0],
        amplitude: 2.0,
        smoothing: 3.0,
        ..SyntheticSpec::default()
    }
}

fn tiny(iterations: u64, checkpoint_every: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        model: ModelConfig {
            input_shape: [16, 16, 16],
            ..ModelConfig::desk()
        },
        data: spec16(),
        iterations,
        checkpoint_every,
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = 1e-3;
    cfg
}

fn write_json(dir: &Path, name: &str, v: &impl serde::Serialize) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn train(dir: &Path, cfg: &TrainConfig, out: &str) -> PathBuf {
    let c = write_json(dir, &format!("{}.json", out), cfg);
    let out = dir.join(out);
    let o = symtrans(&[&"train", &"--config", &c, &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn gen(dir: &Path, pairs: u64, seed: u64, out: &str) -> PathBuf {
    let spec = write_json(dir, "spec.json", &spec16());
    let out = dir.join(out);
    let o = symtrans(&[&"gen-data", &"--spec", &spec, &"--pairs", &pairs.to_string(), &"--out", &out, &"--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_zero_pairs_writes_only_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let out = gen(tmp.path(), 0, 0, "data");
    assert_eq!(files(&out), vec![out.join(FILE_NAME)]);
    let m: Value = serde_json::from_slice(&fs::read(out.join(FILE_NAME)).unwrap()).unwrap();
    assert_eq!(m["outputs"].as_array().unwrap().len(), 0);
    assert_eq!(m["command"], "gen-data");
}

#[test]
fn gen_data_is_deterministic_and_fold_free() {
    let tmp = TempDir::new().unwrap();
    let a = gen(tmp.path(), 2, 11, "a");
    let b = gen(tmp.path(), 2, 11, "b");
    let c = gen(tmp.path(), 2, 12, "c");
    for i in 0..2 {
        for name in [MOVING, FIXED, MOVING_LABELS, FIXED_LABELS, U_TRUE] {
            let rel = Path::new(&pair_dir(i)).join(name);
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{}", rel.display());
        }
        assert_ne!(
            fs::read(a.join(pair_dir(i)).join(MOVING)).unwrap(),
            fs::read(c.join(pair_dir(i)).join(MOVING)).unwrap()
        );
        let m = stdout_json(&symtrans(&[&"eval", &"--field", &a.join(pair_dir(i)).join(U_TRUE)]));
        assert_eq!(m["folding_count"], 0);
        assert!(m["det_min"].as_f64().unwrap() > 0.0);
    }
    let ma: Value = serde_json::from_slice(&fs::read(a.join(FILE_NAME)).unwrap()).unwrap();
    let mb: Value = serde_json::from_slice(&fs::read(b.join(FILE_NAME)).unwrap()).unwrap();
    assert_eq!(ma["outputs"], mb["outputs"]);
    assert_eq!(ma["outputs"].as_array().unwrap().len(), 10);
}

#[test]
fn zero_iterations_writes_initial_checkpoint_only() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny(0, 1);
    let out = train(tmp.path(), &cfg, "run");
    let names: Vec<String> = files(&out).iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec![checkpoint_name(0), LOSS_CSV.to_string(), FILE_NAME.to_string()]);
    assert_eq!(fs::read_to_string(out.join(LOSS_CSV)).unwrap(), format!("{}\n", CSV_HEADER));
    let ck = checkpoint::read(out.join(checkpoint_name(0))).unwrap();
    assert_eq!(ck.state.step(), 0);
    assert_eq!(ck.config, cfg);
    let init = symtrans_core::train::Trainer::<f32>::new(cfg).unwrap();
    assert_eq!(ck.state.params, init.state.params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let full = train(tmp.path(), &tiny(4, 2), "full");
    let part = train(tmp.path(), &tiny(2, 2), "part");
    let cfg = write_json(tmp.path(), "resume.json", &tiny(4, 2));
    let o = symtrans(&[&"train", &"--config", &cfg, &"--out", &part, &"--resume", &part.join(checkpoint_name(2))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(full.join(LOSS_CSV)).unwrap(), fs::read(part.join(LOSS_CSV)).unwrap());
    assert_eq!(
        fs::read(full.join(checkpoint_name(4))).unwrap(),
        fs::read(part.join(checkpoint_name(4))).unwrap()
    );
    assert_eq!(fs::read_to_string(full.join(LOSS_CSV)).unwrap().lines().count(), 5);
}

#[test]
fn resume_with_changed_config_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let part = train(tmp.path(), &tiny(1, 1), "part");
    let mut other = tiny(2, 1);
    other.optimizer.lr = 5e-4;
    let cfg = write_json(tmp.path(), "other.json", &other);
    let o = symtrans(&[&"train", &"--config", &cfg, &"--out", &part, &"--resume", &part.join(checkpoint_name(1))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn negative_lambda_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(1, 0);
    cfg.loss.lambda = -0.5;
    let c = write_json(tmp.path(), "bad.json", &cfg);
    let o = symtrans(&[&"train", &"--config", &c, &"--out", &tmp.path().join("run")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("loss.lambda"), "{}", stderr(&o));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn unknown_config_field_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let mut v = serde_json::to_value(tiny(1, 0)).unwrap();
    v["optimizer"]["learning_rate"] = 0.1.into();
    let c = write_json(tmp.path(), "typo.json", &v);
    let o = symtrans(&[&"train", &"--config", &c, &"--out", &tmp.path().join("run")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let o = symtrans(&[&"train", &"--config", &tmp.path().join("nope.json"), &"--out", &tmp.path().join("run")]);
    assert_eq!(code(&o), 3);
}

#[test]
fn register_and_eval_agree_with_the_library() {
    let tmp = TempDir::new().unwrap();
    let run = train(tmp.path(), &tiny(2, 0), "run");
    let data = gen(tmp.path(), 1, 5, "data");
    let pair = data.join(pair_dir(0));
    let ckpt = run.join(checkpoint_name(2));
    let ck = checkpoint::read(&ckpt).unwrap();
    let model = SymTrans::new(&ck.config.model).unwrap();
    let moving = Svol::read(pair.join(MOVING)).unwrap().tensor::<f32>();
    let fixed = Svol::read(pair.join(FIXED)).unwrap().tensor::<f32>();
    let lm = Svol::read(pair.join(MOVING_LABELS)).unwrap().to_labels().unwrap();
    let lf = Svol::read(pair.join(FIXED_LABELS)).unwrap().to_labels().unwrap();

    for (flag, mode) in [("disp", RegistrationMode::Displacement), ("diff", RegistrationMode::Diffeomorphic)] {
        let field = tmp.path().join(format!("u_{}.svol", flag));
        let warped = tmp.path().join(format!("w_{}.svol", flag));
        let o = symtrans(&[
            &"register",
            &"--moving",
            &pair.join(MOVING),
            &"--fixed",
            &pair.join(FIXED),
            &"--checkpoint",
            &ckpt,
            &"--mode",
            &flag,
            &"--out-field",
            &field,
            &"--out-warped",
            &warped,
            &"--moving-labels",
            &pair.join(MOVING_LABELS),
            &"--fixed-labels",
            &pair.join(FIXED_LABELS),
        ]);
        let cli = stdout_json(&o);
        let reg = register(&model, &ck.state.params, &moving, &fixed, mode, &ck.config.loss).unwrap();
        let jac = jacobian_determinant(&reg.displacement).unwrap().stats;
        let d = dice(&warp_labels(&lm, &reg.displacement).unwrap(), &lf, None).unwrap();
        assert_eq!(cli["loss"].as_f64().unwrap(), reg.loss);
        assert_eq!(cli["loss_sim"].as_f64().unwrap(), reg.loss_sim);
        assert_eq!(cli["loss_reg"].as_f64().unwrap(), reg.loss_reg);
        assert_eq!(cli["folding_count"].as_u64().unwrap() as usize, jac.count);
        assert_eq!(cli["det_min"].as_f64().unwrap(), jac.det_min);
        assert_eq!(cli["dsc_mean"].as_f64(), d.mean);

        let svol = Svol::read(&field).unwrap();
        assert_eq!(svol.kind, Kind::Displacement);
        assert_eq!(svol.to_displacement::<f32>().unwrap(), reg.displacement);
        assert_eq!(Svol::decode(&fs::read(&field).unwrap()).unwrap().encode(), fs::read(&field).unwrap());
        assert_eq!(Svol::read(&warped).unwrap().to_image::<f32>().unwrap(), reg.warped);
        assert!(field.with_extension("manifest.json").exists());

        let ev = stdout_json(&symtrans(&[
            &"eval",
            &"--field",
            &field,
            &"--moving-labels",
            &pair.join(MOVING_LABELS),
            &"--fixed-labels",
            &pair.join(FIXED_LABELS),
        ]));
        assert_eq!(ev["folding_count"], cli["folding_count"]);
        assert_eq!(ev["det_mean"], cli["det_mean"]);
        assert_eq!(ev["dsc_per_label"], cli["dsc_per_label"]);
        assert!(ev["loss"].is_null());
    }
}

#[test]
fn register_rejects_shape_mismatch() {
    let tmp = TempDir::new().unwrap();
    let run = train(tmp.path(), &tiny(0, 0), "run");
    let img = tmp.path().join("small.svol");
    Svol::from_tensor(Kind::Image, &Tensor::<f32>::zeros([1, 8, 8, 8])).write(&img).unwrap();
    let o = symtrans(&[
        &"register",
        &"--moving",
        &img,
        &"--fixed",
        &img,
        &"--checkpoint",
        &run.join(checkpoint_name(0)),
        &"--out-field",
        &tmp.path().join("u.svol"),
        &"--out-warped",
        &tmp.path().join("w.svol"),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!tmp.path().join("u.svol").exists());
}

#[test]
fn eval_identity_and_affine_fixtures() {
    let tmp = TempDir::new().unwrap();
    let data = gen(tmp.path(), 1, 2, "data");
    let labels = data.join(pair_dir(0)).join(MOVING_LABELS);
    let zero = tmp.path().join("zero.svol");
    Svol::displacement(&DisplacementField::<f32>::zeros([16, 16, 16])).write(&zero).unwrap();
    let m = stdout_json(&symtrans(&[&"eval", &"--field", &zero, &"--moving-labels", &labels, &"--fixed-labels", &labels]));
    assert_eq!(m["dsc_mean"].as_f64(), Some(1.0));
    assert_eq!(m["folding_count"], 0);

    let n = 8;
    let affine = Tensor::<f32>::from_fn([3, n, n, n], |i| {
        let (c, v) = (i / (n * n * n), i % (n * n * n));
        let p = [v / (n * n), (v / n) % n, v % n];
        0.5 * p[c] as f32
    });
    let path = tmp.path().join("affine.svol");
    Svol::displacement(&DisplacementField::new(affine).unwrap()).write(&path).unwrap();
    let m = stdout_json(&symtrans(&[&"eval", &"--field", &path]));
    assert!((m["det_min"].as_f64().unwrap() - 3.375).abs() < 1e-9, "{}", m);
    assert!((m["det_max"].as_f64().unwrap() - 3.375).abs() < 1e-9, "{}", m);
    assert_eq!(m["folding_count"], 0);

    let o = symtrans(&[&"eval", &"--field", &path, &"--moving-labels", &labels, &"--fixed-labels", &labels]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_svol_files_have_distinct_messages() {
    let tmp = TempDir::new().unwrap();
    let good = Svol::displacement(&DisplacementField::<f32>::zeros([4, 4, 4])).encode();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let truncated = good[..good.len() - 4].to_vec();
    let image = Svol::from_tensor(Kind::Image, &Tensor::<f32>::zeros([1, 4, 4, 4])).encode();
    let mut messages = Vec::new();
    for (name, bytes) in [("magic", bad_magic), ("version", bad_version), ("length", truncated), ("kind", image)] {
        let p = tmp.path().join(format!("{}.svol", name));
        fs::write(&p, bytes).unwrap();
        let o = symtrans(&[&"eval", &"--field", &p]);
        assert_eq!(code(&o), 2, "{}", name);
        let msg = stderr(&o).replace(&p.display().to_string(), "");
        assert!(!messages.contains(&msg), "{}", msg);
        messages.push(msg);
    }
    let o = symtrans(&[&"eval", &"--field", &tmp.path().join("missing.svol")]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&symtrans(&[&"eval"])), 2);
    assert_eq!(code(&symtrans(&[&"frobnicate"])), 2);
    assert_eq!(code(&symtrans(&[&"count", &"--preset", &"desk", &"--config", &"x.json"])), 2);
    assert_eq!(code(&symtrans(&[&"--help"])), 0);
}

#[test]
fn verify_reports_and_exits_zero_when_green() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = symtrans(&[&"verify", &"--suite", &"diffeo", &"--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS")));
    assert!(!text.lines().any(|l| l.starts_with("FAIL")));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(out.join(FILE_NAME).exists());
}

fn count(args: &[&str]) -> Value {
    let mut all: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"count", &"--json"];
    for a in args {
        all.push(a);
    }
    stdout_json(&symtrans(&all))
}

#[test]
fn count_totals_are_additive_and_placements_differ() {
    let sum = |v: &Value, k: &str| v["stages"].as_array().unwrap().iter().map(|s| s[k].as_u64().unwrap()).sum::<u64>();
    let mut totals = Vec::new();
    for placement in ["symmetric", "encoder-only", "decoder-only", "bottom-only"] {
        let v = count(&["--preset", "desk", "--placement", placement]);
        assert_eq!(sum(&v, "params"), v["total_params"].as_u64().unwrap());
        assert_eq!(sum(&v, "macs"), v["total_macs"].as_u64().unwrap());
        totals.push(v["total_params"].as_u64().unwrap());
    }
    assert_ne!(totals[0], totals[3]);
    let tmp = TempDir::new().unwrap();
    let c = write_json(tmp.path(), "model.json", &ModelConfig::desk());
    let from_file = stdout_json(&symtrans(&[&"count", &"--json", &"--config", &c]));
    assert_eq!(from_file["total_params"].as_u64(), Some(totals[0]));
}

#[test]
fn count_compare_msa_reports_grouped_reduction() {
    let v = count(&["--preset", "paper", "--compare-msa"]);
    let cmp = v["msa_comparison"].as_array().unwrap();
    assert_eq!(cmp.len(), 3);
    for (c, d) in cmp.iter().zip([48u64, 96, 192]) {
        assert_eq!(c["dim"].as_u64(), Some(d));
        assert_eq!(c["grouped_exact_inverse"], true);
        assert_eq!(c["grouped_weights"].as_u64().unwrap() * d, c["grouped_weights_dense"].as_u64().unwrap());
    }
}

#[test]
fn divergence_exits_4_and_keeps_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny(50, 0);
    cfg.optimizer.lr = 1e3;
    let c = write_json(tmp.path(), "wild.json", &cfg);
    let out = tmp.path().join("run");
    let o = symtrans(&[&"train", &"--config", &c, &"--out", &out]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    assert!(out.join(FILE_NAME).exists());
    assert!(out.join(LOSS_CSV).exists());
}
