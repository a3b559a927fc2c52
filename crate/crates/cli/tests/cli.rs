use std::path::{Path, PathBuf};
use std::process::Command;

use fibro_core::imgcore::{read_manifest_records, write_manifest, ManifestRecord};
use fibro_core::phantom::read_truth;
use fibro_core::{Modality, RigidTransform};

fn fibro(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_fibro"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run fibro");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = fibro(args);
    assert_eq!(code, 0, "fibro {args:?} failed:\n{stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two stage-1, one stage-2 and two stage-4 phantoms.
fn cohort(dir: &Path) -> PathBuf {
    let out = dir.join("cohort");
    ok(&[
        "phantom", "--out", s(&out), "--group", "0.05:1:2", "--group", "0.45:2:1", "--group", "0.85:4:2",
        "--dims", "48,48,32",
    ]);
    out.join("manifest.json")
}

#[test]
fn invalid_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"mode": "contrast", "surprise": true}"#).unwrap();
    let m = cohort(dir.path());
    let out = dir.path().join("o");
    assert_eq!(fibro(&["--config", s(&cfg), "pipeline", "--manifest", s(&m), "--out", s(&out)]).0, 2);
    assert_eq!(fibro(&["pipeline", "--manifest", "/no/such/manifest.json", "--out", s(&out)]).0, 2);
    assert_eq!(fibro(&["pipeline", "--out", s(&out)]).0, 2, "missing manifest");
    assert_eq!(fibro(&["pipeline", "--manifest", s(&m), "--out", s(&out), "--tau1", "1.5"]).0, 2);
    assert_eq!(fibro(&["--mode", "xray", "pipeline"]).0, 2);
    assert_eq!(fibro(&["frobnicate"]).0, 2);
    assert_eq!(fibro(&["--jobs", "0", "phantom", "--out", s(&out), "--group", "0.1:1:1"]).0, 2);
    assert_eq!(fibro(&["phantom", "--out", s(&out), "--group", "2:1:1"]).0, 2);
}

#[test]
fn register_missing_reference_is_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let mut records = read_manifest_records(&m).unwrap();
    records.truncate(2);
    // first subject keeps only GED4: a no-op; second loses GED4: an error
    records[0].modalities.retain(|k, _| k == "GED4");
    records[1].modalities.remove("GED4");
    let edited = dir.path().join("cohort").join("edited.json");
    write_manifest(&edited, &records).unwrap();
    let out = dir.path().join("reg");
    let (code, _, stderr) = fibro(&["register", "--manifest", s(&edited), "--out", s(&out)]);
    assert_eq!(code, 1);
    assert!(stderr.contains("GED4"), "{stderr}");
    let aligned = read_manifest_records(out.join("manifest.json")).unwrap();
    assert_eq!(aligned.len(), 1);
    assert_eq!(aligned[0].modalities.keys().collect::<Vec<_>>(), ["GED4"]);

    records.truncate(1);
    write_manifest(&edited, &records).unwrap();
    let out2 = dir.path().join("reg2");
    ok(&["register", "--manifest", s(&edited), "--out", s(&out2)]);
    assert!(!out2.join(&records[0].subject_id).join("T1.transform.json").exists());
}

#[test]
fn register_recovers_planted_transforms() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("c");
    ok(&[
        "--seed", "7", "phantom", "--out", s(&cohort), "--group", "0.3:2:1", "--dims", "40,40,32", "--spacing",
        "3,3,3", "--max-rotation", "5", "--max-translation", "4",
    ]);
    let out = dir.path().join("r");
    let stdout = ok(&["register", "--manifest", s(&cohort.join("manifest.json")), "--out", s(&out)]);
    assert!(stdout.contains("phantom_0007") && stdout.contains("GED3"));
    let truth = read_truth(cohort.join("phantom_0007").join("truth.json")).unwrap();
    for m in [Modality::T1, Modality::T2, Modality::GED2] {
        let planted = truth.transforms[&m];
        let got = RigidTransform::load(out.join("phantom_0007").join(format!("{m}.transform.json"))).unwrap();
        let rot = got.compose(&planted.inverse()).rotation_angle().to_degrees();
        let dt: f64 = (0..3).map(|a| (got.translation[a] - planted.translation[a]).powi(2)).sum::<f64>().sqrt();
        assert!(rot < 1.0 && dt < 3.0, "{m}: rotation error {rot} deg, translation error {dt} mm");
    }
    let csv = std::fs::read_to_string(out.join("registration.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let aligned = read_manifest_records(out.join("manifest.json")).unwrap();
    assert_eq!(aligned[0].modalities.len(), 7);
    assert_eq!(aligned[0].stage, Some(2));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--seed", "3", "pipeline", "--manifest", s(&m), "--out", s(&a)]);
    ok(&["--seed", "3", "--jobs", "3", "pipeline", "--manifest", s(&m), "--out", s(&b)]);
    for f in ["model.json", "predictions.csv", "report.csv", "eval.json", "thresholds.json"] {
        assert!(read(a.join(f)) == read(b.join(f)), "{f} differs");
    }
    let p = a.join("predictions.csv");
    let args = |o: &Path| {
        vec![
            "overlay".to_string(), "--manifest".into(), s(&m).into(), "--subject".into(), "phantom_0004".into(),
            "--predictions".into(), s(&p).into(), "--slice".into(), "16".into(), "--out".into(), s(o).into(),
        ]
    };
    let pa = dir.path().join("a.png");
    let pb = dir.path().join("b.png");
    ok(&args(&pa).iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&pb).iter().map(String::as_str).collect::<Vec<_>>());
    assert!(read(&pa) == read(&pb));
    let mut bad = args(&pa);
    bad[8] = "500".into();
    assert_eq!(fibro(&bad.iter().map(String::as_str).collect::<Vec<_>>()).0, 1);

    // the staged commands reproduce the pipeline's outputs
    let model = dir.path().join("m.json");
    let preds = dir.path().join("p.csv");
    let report = dir.path().join("r.csv");
    ok(&["--seed", "3", "train", "--manifest", s(&m), "--out", s(&model)]);
    assert!(read(&model) == read(a.join("model.json")));
    ok(&["predict", "--model", s(&model), "--manifest", s(&m), "--out", s(&preds)]);
    assert!(read(&preds) == read(&p));
    ok(&["stage", "--predictions", s(&preds), "--out", s(&report)]);
    assert!(read(&report) == read(a.join("report.csv")));
    let eval = dir.path().join("e.json");
    ok(&["eval-cls", "--report", s(&report), "--manifest", s(&m), "--out", s(&eval)]);
    assert!(read(&eval) == read(a.join("eval.json")));
}

#[test]
fn extract_then_train_matches_direct_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let patches = dir.path().join("train.fpt");
    ok(&["extract", "--manifest", s(&m), "--out", s(&patches), "--training"]);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["train", "--patches", s(&patches), "--out", s(&a)]);
    ok(&["train", "--manifest", s(&m), "--out", s(&b)]);
    assert!(read(&a) == read(&b));
    let all = dir.path().join("all.fpt");
    ok(&["extract", "--manifest", s(&m), "--out", s(&all)]);
    let p1 = dir.path().join("p1.csv");
    let p2 = dir.path().join("p2.csv");
    ok(&["predict", "--model", s(&a), "--patches", s(&all), "--out", s(&p1)]);
    ok(&["predict", "--model", s(&a), "--manifest", s(&m), "--out", s(&p2)]);
    assert!(read(&p1) == read(&p2));
    // a non-contrast model cannot score contrast-mode patches
    assert_eq!(fibro(&["--mode", "contrast", "predict", "--model", s(&a), "--manifest", s(&m), "--out", s(&p1)]).0, 2);
}

fn report_rows(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn threshold_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let preds = dir.path().join("p.csv");
    std::fs::write(&preds, "subject_id,z,y,x,prob\na,0,0,0,0.9\na,0,0,8,0.9\na,0,8,0,0.1\na,0,8,8,0.1\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"staging": {"tau1": 0.6, "tau2": 0.4}}"#).unwrap();
    let report = dir.path().join("r.csv");
    // s = 0.5: above tau2 = 0.4 and below tau1 = 0.6 from the config
    ok(&["--config", s(&cfg), "stage", "--predictions", s(&preds), "--out", s(&report)]);
    let r = &report_rows(&report)[0];
    assert_eq!((r[5].as_str(), r[6].as_str()), ("1", "0"));
    ok(&["--config", s(&cfg), "stage", "--predictions", s(&preds), "--tau1", "0.45", "--tau2", "0.55", "--out", s(&report)]);
    let r = &report_rows(&report)[0];
    assert_eq!((r[5].as_str(), r[6].as_str()), ("0", "1"));
    // defaults (0.37, 0.66) without config
    ok(&["stage", "--predictions", s(&preds), "--out", s(&report)]);
    let r = &report_rows(&report)[0];
    assert_eq!((r[5].as_str(), r[6].as_str()), ("0", "1"));
    // calibrated file sits between config and flags
    let t = dir.path().join("t.json");
    std::fs::write(&t, r#"{"tau1": 0.55, "tau2": 0.45, "mode": "noncontrast"}"#).unwrap();
    ok(&["--config", s(&cfg), "stage", "--predictions", s(&preds), "--thresholds", s(&t), "--out", s(&report)]);
    let r = &report_rows(&report)[0];
    assert_eq!((r[5].as_str(), r[6].as_str()), ("1", "0"));
    ok(&["stage", "--predictions", s(&preds), "--thresholds", s(&t), "--tau2", "0.6", "--out", s(&report)]);
    let r = &report_rows(&report)[0];
    assert_eq!((r[5].as_str(), r[6].as_str()), ("0", "0"));
    assert_eq!(fibro(&["--mode", "contrast", "stage", "--predictions", s(&preds), "--thresholds", s(&t), "--out", s(&report)]).0, 2);

    let out = dir.path().join("pipe");
    ok(&["--config", s(&cfg), "pipeline", "--manifest", s(&m), "--out", s(&out), "--tau1", "0.2"]);
    let t: serde_json::Value = serde_json::from_slice(&read(out.join("thresholds.json"))).unwrap();
    assert_eq!(t["tau1"], 0.2);
    assert_eq!(t["tau2"], 0.4);
}

#[test]
fn external_zero_predictions_give_zero_scores() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let records: Vec<ManifestRecord> = read_manifest_records(&m).unwrap();
    let mut csv = String::from("subject_id,z,y,x,prob\n");
    for r in &records {
        for z in 0..4 {
            csv += &format!("{},{z},8,8,0\n", r.subject_id);
        }
    }
    let preds = dir.path().join("zero.csv");
    std::fs::write(&preds, csv).unwrap();
    let out = dir.path().join("o");
    ok(&["pipeline", "--manifest", s(&m), "--out", s(&out), "--predictions", s(&preds)]);
    let rows = report_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), records.len());
    for r in rows {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!((r[5].as_str(), r[6].as_str()), ("0", "0"));
    }
    assert!(out.join("eval.json").exists());
    assert!(!out.join("model.json").exists());

    std::fs::write(&preds, "subject_id,z,y,x,prob\na,0,0,0,1.5\n").unwrap();
    assert_eq!(fibro(&["pipeline", "--manifest", s(&m), "--out", s(&out), "--predictions", s(&preds)]).0, 1);
}

#[test]
fn pipeline_skips_subjects_without_mask() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let mut records = read_manifest_records(&m).unwrap();
    records[2].mask = None;
    let edited = dir.path().join("cohort").join("nomask.json");
    write_manifest(&edited, &records).unwrap();
    let out = dir.path().join("o");
    let (code, stdout, stderr) = fibro(&["pipeline", "--manifest", s(&edited), "--out", s(&out)]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains(&records[2].subject_id));
    assert!(!stdout.contains(&records[2].subject_id));
    assert_eq!(report_rows(&out.join("report.csv")).len(), records.len() - 1);
}

#[test]
fn eval_seg_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let m = cohort(dir.path());
    let seg = dir.path().join("seg.json");
    let stdout = ok(&["eval-seg", "--pred", s(&m), "--truth", s(&m), "--out", s(&seg)]);
    assert!(stdout.contains("mean Dice 1.0000"));
    let v: serde_json::Value = serde_json::from_slice(&read(&seg)).unwrap();
    assert_eq!(v["mean_hd"], 0.0);
    assert_eq!(v["per_subject"].as_array().unwrap().len(), 5);

    let out = dir.path().join("o");
    ok(&["pipeline", "--manifest", s(&m), "--out", s(&out)]);
    let t = dir.path().join("t.json");
    ok(&["calibrate", "--predictions", s(&out.join("predictions.csv")), "--manifest", s(&m), "--out", s(&t)]);
    let v: serde_json::Value = serde_json::from_slice(&read(&t)).unwrap();
    let (t1, t2) = (v["tau1"].as_f64().unwrap(), v["tau2"].as_f64().unwrap());
    assert!(0.0 < t1 && t1 < 1.0 && 0.0 < t2 && t2 < 1.0);
}
