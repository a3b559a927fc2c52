//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fibro_core::clf::{load_external_predictions, PatchPrediction};
use fibro_core::imgcore::load_volume;
use fibro_core::metrics::{self, oracle};
use fibro_core::mi::{local_mi, mi_loss, PatchMi};
use fibro_core::patches::{extract_patches, PatchExtractionConfig};
use fibro_core::phantom::{generate, random_rigid, synthetic_scores, PhantomSpec};
use fibro_core::reg::{register_rigid, SimilarityKind};
use fibro_core::staging::{calibrate, map_y1, map_y4, read_report};
use fibro_core::{
    BinningMode, ContrastMode, Geometry, HistogramConfig, JointHistogram, Mask, Modality, PatchGrid,
    RegistrationConfig, Study, Volume,
};

const EPS: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Direct evaluation of the patch MI sum over a row-major joint.
fn mi_direct(b: usize, p: &[f64]) -> f64 {
    let px: Vec<f64> = (0..b).map(|i| (0..b).map(|j| p[i * b + j]).sum()).collect();
    let py: Vec<f64> = (0..b).map(|j| (0..b).map(|i| p[i * b + j]).sum()).collect();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let pij = p[i * b + j];
            total += pij * ((pij + EPS) / (px[i] * py[j] + EPS)).ln();
        }
    }
    total
}

fn c1_mi_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let mut p: Vec<f64> = (0..4).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        if case == 0 || p.iter().all(|&v| v == 0.0) {
            p = vec![1.0, 0.0, 0.0, 0.0];
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let ours = local_mi(&JointHistogram::from_joint(2, p.clone()), EPS);
        let direct = mi_direct(2, &p);
        let rel = if direct == 0.0 { ours.abs() } else { ((ours - direct) / direct).abs() };
        worst = worst.max(rel);
    }
    let diag = local_mi(&JointHistogram::from_joint(2, vec![0.5, 0.0, 0.0, 0.5]), EPS);
    let diag_err = (diag - std::f64::consts::LN_2).abs();
    outcome(
        worst <= 1e-12 && diag_err <= 1e-5,
        format!("max rel err {worst:.2e} (tol 1e-12), diagonal |MI - ln 2| = {diag_err:.2e} (tol 1e-5)"),
    )
}

fn small_phantom(seed: u64, dims: [usize; 3], spacing: f64, m: Modality) -> (Volume, Volume) {
    let mut spec = PhantomSpec { seed, modalities: vec![m], lesion_fraction: 0.3, ..PhantomSpec::new(dims, [spacing; 3]) };
    let g = spec.geometry().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
    spec.planted_transform.insert(m, random_rigid(&mut rng, 10.0, 8.0, g.center()));
    let p = generate(&spec).unwrap();
    (p.study.reference().clone(), p.study.modalities[&m].clone())
}

fn c2_loss_identity_and_symmetry() -> Outcome {
    let g = Geometry::unit([24, 24, 24]).unwrap();
    let c = Volume::new(g, vec![300.0; g.len()]).unwrap();
    let cfg = HistogramConfig { range_x: (0.0, 1000.0), range_y: (0.0, 1000.0), ..Default::default() };
    let grid = PatchGrid::default();
    let constant = mi_loss(&c, &c, &grid, None, &cfg, BinningMode::Hard).unwrap();

    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let m = Modality::ALL[seed as usize % 6];
        let (x, y) = small_phantom(seed, [24, 24, 24], 5.0, m);
        let cfg = HistogramConfig::default().with_ranges_from(&x, &y, None);
        let xy = mi_loss(&x, &y, &grid, None, &cfg, BinningMode::Soft).unwrap();
        let yx = mi_loss(&y, &x, &grid, None, &cfg.swapped(), BinningMode::Soft).unwrap();
        worst = worst.max((xy - yx).abs());
    }
    outcome(
        constant == 1.0 && worst <= 1e-12,
        format!("constant-pair loss = {constant:?} (want exactly 1.0), max |L(X,Y) - L(Y,X)| = {worst:.2e} on 50 phantoms (tol 1e-12)"),
    )
}

fn c3_gradient() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..2u64 {
        let mut spec = PhantomSpec { seed, modalities: vec![Modality::T2], ..PhantomSpec::new([64; 3], [2.0; 3]) };
        let g = spec.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        spec.planted_transform.insert(Modality::T2, random_rigid(&mut rng, 10.0, 8.0, g.center()));
        let p = generate(&spec).unwrap();
        let (fixed, moving) = (p.study.reference(), &p.study.modalities[&Modality::T2]);
        let cfg = HistogramConfig::default().with_ranges_from(fixed, moving, None);
        let mi = PatchMi::new(&fixed.to_f64(), fixed.dims(), &PatchGrid::default(), None, &cfg, BinningMode::Soft).unwrap();
        let base = moving.to_f64();
        let (_, grad) = mi.gradient(&base).unwrap();
        let body: Vec<usize> = (0..base.len()).filter(|&i| p.body_mask.contains_index(i)).collect();
        let h = 1e-2;
        for _ in 0..12 {
            let k = body[rng.random_range(0..body.len())];
            let mut v = base.clone();
            v[k] = base[k] + h;
            let up = mi.mean_mi(&v).unwrap();
            v[k] = base[k] - h;
            let down = mi.mean_mi(&v).unwrap();
            let fd = -(up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs());
            if scale > 0.0 {
                worst = worst.max((fd - grad[k]).abs() / scale);
            }
            checked += 1;
        }
    }
    outcome(worst < 1e-4 && checked >= 20, format!("{checked} voxels on two 64^3 phantoms, max rel err {worst:.2e} (tol 1e-4)"))
}

fn c4_registration() -> Outcome {
    let channels = [Modality::T1, Modality::T2, Modality::DWI, Modality::GED1, Modality::GED2, Modality::GED3];
    let mut ok = [0usize; 2];
    let mut worst = [(0.0f64, 0.0f64); 2];
    for seed in 0..20u64 {
        let m = channels[seed as usize % 6];
        let mut spec = PhantomSpec { seed, lesion_fraction: 0.3, modalities: vec![m], ..PhantomSpec::new([64; 3], [2.0; 3]) };
        let g = spec.geometry().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let planted = random_rigid(&mut rng, 10.0, 8.0, g.center());
        spec.planted_transform.insert(m, planted);
        let p = generate(&spec).unwrap();
        for (k, metric) in [SimilarityKind::Mi, SimilarityKind::Ncc].into_iter().enumerate() {
            let cfg = RegistrationConfig { metric, ..Default::default() };
            let r = register_rigid(p.study.reference(), &p.study.modalities[&m], &cfg, Some(&p.body_mask)).unwrap();
            let rot = r.transform.compose(&planted.inverse()).rotation_angle().to_degrees();
            let dt = (0..3).map(|a| (r.transform.translation[a] - planted.translation[a]).powi(2)).sum::<f64>().sqrt();
            if rot <= 1.0 && dt <= 2.0 {
                ok[k] += 1;
            }
            worst[k] = (worst[k].0.max(rot), worst[k].1.max(dt));
        }
    }
    let ncc_fail = 20 - ok[1];
    outcome(
        ok[0] >= 18 && ncc_fail >= 10,
        format!(
            "MI recovered {}/20 (need >= 18; worst {:.3} deg, {:.3} mm), NCC failed {ncc_fail}/20 (need >= 10; worst {:.1} deg, {:.1} mm)",
            ok[0], worst[0].0, worst[0].1, worst[1].0, worst[1].1
        ),
    )
}

fn c5_patches() -> Outcome {
    let g = Geometry::new([64, 64, 3], [1.0; 3], [0.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mods = BTreeMap::new();
    for m in [Modality::T1, Modality::GED4] {
        mods.insert(m, Volume::new(g, (0..g.len()).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap());
    }
    let study = Study::new("flat", mods, Some(Mask::from_fn(g, |_, _, _| true)), None).unwrap();
    let patches = extract_patches(&study, ContrastMode::NonContrast, &PatchExtractionConfig::default()).unwrap();
    let mut per_slice = [0usize; 3];
    patches.iter().for_each(|p| per_slice[p.slice_index] += 1);

    let cfg = PatchExtractionConfig::default();
    let mut violations = 0;
    let mut absent_checked = 0;
    for seed in 0..10u64 {
        let mut present: Vec<Modality> = Modality::ALL[..6].to_vec();
        present.shuffle(&mut rng);
        present.truncate(rng.random_range(0..6));
        let spec = PhantomSpec { seed, modalities: present.clone(), lesion_fraction: 0.3, ..PhantomSpec::new([48, 48, 32], [2.0; 3]) };
        let p = generate(&spec).unwrap();
        let patches = extract_patches(&p.study, ContrastMode::Contrast, &cfg).unwrap();
        let s = cfg.patch_size;
        for (k, m) in ContrastMode::Contrast.channels().iter().enumerate() {
            let absent = !p.study.modalities.contains_key(m);
            let all_zero = patches.iter().all(|pt| pt.channel(k, s).iter().all(|&v| v == 0.0));
            if absent {
                absent_checked += 1;
            }
            if absent != all_zero {
                violations += 1;
            }
        }
    }
    outcome(
        per_slice == [49; 3] && violations == 0 && absent_checked > 0,
        format!("patches per fully masked 64x64 slice {per_slice:?} (want 49 each); {absent_checked} absent channels over 10 subjects, {violations} zero-fill violations"),
    )
}

fn c6_mapping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bad = 0;
    for _ in 0..10_000 {
        let tau = rng.random_range(0.01..0.99);
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let y1 = |s| map_y1(s, tau).unwrap();
        let y4 = |s| map_y4(s, tau).unwrap();
        let endpoints = y1(0.0) == 1.0 && y1(1.0) == 0.0 && y4(0.0) == 0.0 && y4(1.0) == 1.0;
        // both branch formulas evaluated at s = tau
        let at = tau;
        let y1_left = 1.0 - 0.5 / tau * at;
        let y1_right = 0.5 - 0.5 * (at - tau) / (1.0 - tau);
        let y4_left = 0.5 * at / tau;
        let y4_right = 0.5 + 0.5 * (at - tau) / (1.0 - tau);
        let continuous = (y1_left - y1_right).abs() <= 1e-12
            && (y4_left - y4_right).abs() <= 1e-12
            && (y1(tau) - 0.5).abs() <= 1e-12
            && (y4(tau) - 0.5).abs() <= 1e-12;
        let monotone = y1(lo) >= y1(hi) && y4(lo) <= y4(hi);
        if !(endpoints && continuous && monotone) {
            bad += 1;
        }
    }
    let w1 = map_y1(0.5, 0.37).unwrap();
    let w4 = map_y4(0.5, 0.66).unwrap();
    let worked = (w1 - 0.39683).abs() <= 1e-5 && (w4 - 0.37879).abs() <= 1e-5;
    outcome(
        bad == 0 && worked,
        format!("{bad} of 10000 (s, tau) pairs violate endpoint/continuity/monotonicity; worked point y1 = {w1:.5}, y4 = {w4:.5}"),
    )
}

fn c7_calibration() -> Outcome {
    let mut good = 0;
    for seed in 0..100 {
        let val = synthetic_scores([20; 4], [0.1, 0.4, 0.6, 0.9], 0.05, seed).unwrap();
        let t = calibrate(&val, 4, 0.01, ContrastMode::NonContrast).unwrap().thresholds;
        if t.tau1 > 0.15 && t.tau1 < 0.40 && t.tau2 > 0.62 && t.tau2 < 0.88 {
            good += 1;
        }
    }
    outcome(good >= 95, format!("{good}/100 seeds with tau1 in (0.15, 0.40) and tau2 in (0.62, 0.88) (need >= 95)"))
}

fn random_mask(rng: &mut impl Rng, g: Geometry) -> Mask {
    let density = rng.random_range(0.05..0.6);
    let m = Mask::from_fn(g, |_, _, _| rng.random_bool(density));
    if m.is_empty_mask() {
        let mut d = vec![0u8; g.len()];
        d[0] = 1;
        Mask::new(g, d).unwrap()
    } else {
        m
    }
}

fn c8_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spacings = [0.25, 0.5, 1.0, 1.5, 2.0];
    let (mut dice_bad, mut hd_bad) = (0, 0);
    for _ in 0..200 {
        let dims = [rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=12)];
        let spacing = [0, 1, 2].map(|_| spacings[rng.random_range(0..spacings.len())]);
        let g = Geometry::new(dims, spacing, [0.0; 3]).unwrap();
        let (a, b) = (random_mask(&mut rng, g), random_mask(&mut rng, g));
        if metrics::dice(&a, &b).unwrap() != oracle::dice(&a, &b) {
            dice_bad += 1;
        }
        if metrics::hausdorff(&a, &b).unwrap() != oracle::hausdorff(&a, &b) {
            hd_bad += 1;
        }
    }
    let mut auc_worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let mut scores: Vec<(f64, bool)> = (0..n).map(|_| ((rng.random_range(0..10) as f64) / 10.0, rng.random_bool(0.5))).collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let (pos, neg): (Vec<_>, Vec<_>) = scores.iter().partition(|(_, l)| *l);
        let mut wins = 0.0;
        for (p, _) in &pos {
            for (q, _) in &neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        let counted = wins / (pos.len() * neg.len()) as f64;
        auc_worst = auc_worst.max((metrics::auc(&scores).unwrap() - counted).abs());
    }
    outcome(
        dice_bad == 0 && hd_bad == 0 && auc_worst <= 1e-12,
        format!("200 mask pairs: {dice_bad} Dice and {hd_bad} Hausdorff mismatches (exact); 200 score sets: max AUC err {auc_worst:.1e} (tol 1e-12)"),
    )
}

fn fibro(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fibro"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("fibro {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn decode_png(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Rgb);
    buf.truncate(info.buffer_size());
    (info.width as usize, info.height as usize, buf)
}

/// Every covered pixel leans red where positive patches outnumber negative
/// ones and blue where negatives do; uncovered pixels stay grey.
fn overlay_follows_convention(png: &[u8], preds: &[&PatchPrediction], s: usize) -> Result<(usize, usize), String> {
    let (w, h, rgb) = decode_png(png);
    let mut pos = vec![0i32; w * h];
    let mut neg = vec![0i32; w * h];
    for p in preds {
        for y in p.y..(p.y + s).min(h) {
            for x in p.x..(p.x + s).min(w) {
                if p.positive { pos[y * w + x] += 1 } else { neg[y * w + x] += 1 }
            }
        }
    }
    let (mut red, mut blue) = (0, 0);
    for i in 0..w * h {
        let (r, g, b) = (rgb[3 * i] as i32, rgb[3 * i + 1] as i32, rgb[3 * i + 2] as i32);
        let want = (pos[i] - neg[i]).signum();
        let got = (r - b).signum();
        if pos[i] + neg[i] == 0 && !(r == g && g == b) {
            return Err(format!("uncovered pixel {i} is coloured"));
        }
        if got != want {
            return Err(format!("pixel {i}: rgb ({r}, {g}, {b}) with {} positive and {} negative patches", pos[i], neg[i]));
        }
        red += (got > 0) as usize;
        blue += (got < 0) as usize;
    }
    Ok((red, blue))
}

fn c9_end_to_end(dir: &Path) -> Outcome {
    let cohort = dir.join("cohort");
    let out = dir.join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let steps = fibro(&["phantom", "--out", &s(&cohort), "--group", "0.05:1:10", "--group", "0.45:2:10", "--group", "0.85:4:10"])
        .and_then(|_| fibro(&["pipeline", "--manifest", &s(&cohort.join("manifest.json")), "--out", &s(&out)]));
    if let Err(e) = steps {
        return outcome(false, e);
    }
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("eval.json")).unwrap()).unwrap();
    let auc1 = eval["auc_task1"].as_f64().unwrap_or(f64::NAN);
    let report = read_report(out.join("report.csv")).unwrap();
    let mut group_s = [0.0f64; 3];
    for r in &report {
        let idx: usize = r.subject_id.trim_start_matches("phantom_").parse().unwrap();
        group_s[idx / 10] += r.s / 10.0;
    }
    let monotone = group_s[0] < group_s[1] && group_s[1] < group_s[2];

    let preds = load_external_predictions(out.join("predictions.csv")).unwrap();
    let mut overlays = Vec::new();
    let mut overlay_ok = report.len() == 30;
    for id in ["phantom_0000", "phantom_0010", "phantom_0020"] {
        let mine: Vec<&PatchPrediction> = preds.iter().filter(|p| p.subject_id == id).collect();
        let mut per_slice: HashMap<usize, usize> = HashMap::new();
        mine.iter().for_each(|p| *per_slice.entry(p.z).or_default() += 1);
        let z = per_slice.iter().max_by_key(|(z, n)| (**n, std::cmp::Reverse(**z))).map(|(z, _)| *z).unwrap_or(0);
        let png = out.join(format!("{id}_z{z}.png"));
        let res = fibro(&[
            "overlay", "--manifest", &s(&cohort.join("manifest.json")), "--subject", id, "--predictions",
            &s(&out.join("predictions.csv")), "--slice", &z.to_string(), "--out", &s(&png),
        ])
        .and_then(|_| {
            let on_slice: Vec<&PatchPrediction> = mine.iter().copied().filter(|p| p.z == z).collect();
            overlay_follows_convention(&std::fs::read(&png).unwrap(), &on_slice, 16)
        });
        match res {
            Ok((r, b)) => overlays.push(format!("{id} z={z}: {r} red / {b} blue px")),
            Err(e) => {
                overlay_ok = false;
                overlays.push(format!("{id}: {e}"));
            }
        }
    }
    // sanity: the reference channel the overlays use is readable
    overlay_ok &= load_volume(cohort.join("phantom_0000").join("GED4.nii")).is_ok();
    outcome(
        auc1 >= 0.95 && monotone && overlay_ok,
        format!(
            "task-1 AUC {auc1:.4} (need >= 0.95); mean s by group {:.3} < {:.3} < {:.3}: {monotone}; overlays [{}]",
            group_s[0],
            group_s[1],
            group_s[2],
            overlays.join("; ")
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let dir_path = dir.path().to_path_buf();
    type Check = Box<dyn Fn() -> Outcome>;
    let criteria: Vec<(&str, Duration, Check)> = vec![
        ("1 local MI oracle", Duration::from_secs(1), Box::new(c1_mi_oracle)),
        ("2 loss identity and symmetry", Duration::from_secs(10), Box::new(c2_loss_identity_and_symmetry)),
        ("3 analytic gradient", Duration::from_secs(60), Box::new(c3_gradient)),
        ("4 registration recovery", Duration::from_secs(600), Box::new(c4_registration)),
        ("5 patch lattice and zero fill", Duration::from_secs(60), Box::new(c5_patches)),
        ("6 piecewise mapping", Duration::from_secs(10), Box::new(c6_mapping)),
        ("7 threshold calibration", Duration::from_secs(60), Box::new(c7_calibration)),
        ("8 metric oracles", Duration::from_secs(60), Box::new(c8_metrics)),
        ("9 end to end", Duration::from_secs(300), Box::new(move || c9_end_to_end(&dir_path))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        let elapsed = t0.elapsed();
        let pass = o.pass && elapsed <= budget;
        failed += !pass as usize;
        println!(
            "{} criterion {name}: {} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    drop(dir);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
