use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;

use fibro_core::clf::{
    self, load_external_predictions, predict_all, train_patches, write_predictions, LogRegModel,
    PatchPrediction,
};
use fibro_core::imgcore::{
    read_manifest_records, save_mask, save_volume, write_manifest, ManifestRecord,
};
use fibro_core::metrics::{classification_report, segmentation_report};
use fibro_core::patches::{build_training_set, extract_patches, read_patch_set, write_patch_set, PatchSet};
use fibro_core::phantom::{generate, write_cohort, PhantomSpec};
use fibro_core::reg::{register_rigid, resample_linear, RegistrationResult};
use fibro_core::staging::{calibrate_or_default, read_report, stage_all, subject_score, write_report};
use fibro_core::{Modality, Stage, StageResult, Study, Thresholds, Volume};

use crate::config::RunConfig;
use crate::{overlay, CliError, Command, PhantomGroup, ThresholdArgs};

pub fn dispatch(mut cfg: RunConfig, cmd: Command) -> Result<(), CliError> {
    // Command-level paths override the config before validation.
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if let Some(v) = v {
            *slot = Some(v.clone());
        }
    };
    match &cmd {
        Command::Register { manifest, out } | Command::Pipeline { manifest, out, .. } => {
            set(&mut cfg.manifest, manifest);
            set(&mut cfg.output_dir, out);
        }
        Command::Extract { manifest, .. }
        | Command::Train { manifest, .. }
        | Command::Predict { manifest, .. }
        | Command::Calibrate { manifest, .. }
        | Command::EvalCls { manifest, .. }
        | Command::Overlay { manifest, .. } => set(&mut cfg.manifest, manifest),
        Command::Phantom { out, .. } => set(&mut cfg.output_dir, out),
        Command::Stage { .. } | Command::EvalSeg { .. } => {}
    }
    cfg.validate()?;
    match cmd {
        Command::Register { .. } => {
            let out = cfg.output_dir()?.to_path_buf();
            register(&cfg, cfg.manifest()?, &out).map(|_| ())
        }
        Command::Extract { out, training, .. } => extract(&cfg, &out, training),
        Command::Train { patches, out, .. } => train(&cfg, patches.as_deref(), &out),
        Command::Predict { model, patches, out, .. } => predict(&cfg, &model, patches.as_deref(), &out),
        Command::Calibrate { predictions, out, .. } => calibrate(&cfg, &predictions, &out),
        Command::Stage { predictions, thresholds, out } => stage(&cfg, &predictions, &thresholds, &out),
        Command::Pipeline { register: reg, model, predictions, thresholds, .. } => {
            pipeline(&cfg, reg, model.as_deref(), predictions.as_deref(), &thresholds)
        }
        Command::EvalSeg { pred, truth, out } => eval_seg(&pred, &truth, &out),
        Command::EvalCls { report, out, .. } => eval_cls(&cfg, &report, &out),
        Command::Overlay { subject, predictions, slice, scale, out, .. } => {
            overlay_cmd(&cfg, &subject, &predictions, slice, scale, &out)
        }
        Command::Phantom { groups, dims, spacing, max_rotation, max_translation, .. } => {
            phantom(&cfg, &groups, dims, spacing, max_rotation, max_translation)
        }
    }
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
        }
        _ => Ok(()),
    }
}

fn partial(failed: usize, total: usize) -> Result<(), CliError> {
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Partial { failed, total })
    }
}

fn manifest_records(path: &Path) -> Result<Vec<ManifestRecord>, CliError> {
    read_manifest_records(path).map_err(|e| CliError::Config(e.to_string()))
}

/// Loaded studies in manifest order plus the number that failed to load.
struct Loaded {
    records: Vec<ManifestRecord>,
    studies: Vec<Study>,
    failed: usize,
}

fn load_studies(manifest: &Path) -> Result<Loaded, CliError> {
    let records = manifest_records(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let results: Vec<_> = records
        .par_iter()
        .map(|r| r.check().and_then(|_| r.load(&base)))
        .collect();
    let mut studies = Vec::with_capacity(results.len());
    let mut failed = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(s) => studies.push(s),
            Err(e) => {
                log::error!("[{}] {e}", r.subject_id);
                failed += 1;
            }
        }
    }
    Ok(Loaded { records, studies, failed })
}

/// Studies that have an organ mask; the rest are logged and counted.
fn with_masks(studies: Vec<Study>) -> (Vec<Study>, usize) {
    let (keep, skip): (Vec<Study>, Vec<Study>) = studies.into_iter().partition(|s| s.mask.is_some());
    for s in &skip {
        log::error!("[{}] no organ mask; skipped", s.subject_id);
    }
    (keep, skip.len())
}

struct Registered {
    subject_id: String,
    aligned: Vec<(Modality, RegistrationResult, Volume)>,
}

fn register_study(study: &Study, cfg: &RunConfig) -> anyhow::Result<Registered> {
    let fixed = study.reference();
    let mask = if cfg.register_with_mask { study.mask.as_ref() } else { None };
    let mut aligned = Vec::new();
    for (&m, moving) in &study.modalities {
        if m == Modality::REFERENCE {
            continue;
        }
        log::info!("[{}] registering {m}", study.subject_id);
        let res = register_rigid(fixed, moving, &cfg.registration, mask)
            .with_context(|| format!("{m} to GED4"))?;
        for w in &res.warnings {
            log::warn!("[{}] {m}: {w}", study.subject_id);
        }
        let vol = resample_linear(moving, &res.transform, fixed.geometry());
        aligned.push((m, res, vol));
    }
    Ok(Registered { subject_id: study.subject_id.clone(), aligned })
}

#[derive(Serialize)]
struct RegRow<'a> {
    subject_id: &'a str,
    modality: &'a str,
    loss: f64,
    identity_loss: f64,
    iterations: usize,
    rotation_deg: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

/// Register every study and write `<out>/<subject>/` volumes and
/// transforms, `<out>/manifest.json` and `<out>/registration.csv`. Returns
/// the aligned manifest path.
fn register(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<PathBuf, CliError> {
    let loaded = load_studies(manifest)?;
    let total = loaded.records.len();
    let results: Vec<anyhow::Result<Registered>> =
        loaded.studies.par_iter().map(|s| register_study(s, cfg)).collect();

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut failed = loaded.failed;
    let mut records = Vec::new();
    let csv_path = out.join("registration.csv");
    let mut csv = csv::Writer::from_path(&csv_path)?;
    println!("{:<20} {:<6} {:>10} {:>10} {:>6}", "subject", "mod", "loss", "identity", "iters");
    for (study, res) in loaded.studies.iter().zip(results) {
        let reg = match res {
            Ok(r) => r,
            Err(e) => {
                log::error!("[{}] {e:#}", study.subject_id);
                failed += 1;
                continue;
            }
        };
        let dir = out.join(&reg.subject_id);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut mods = BTreeMap::new();
        let rel = |name: &str| PathBuf::from(&reg.subject_id).join(name);
        save_volume(study.reference(), dir.join("GED4.nii"))?;
        mods.insert("GED4".to_string(), rel("GED4.nii"));
        for (m, r, vol) in &reg.aligned {
            save_volume(vol, dir.join(format!("{m}.nii")))?;
            r.transform.save(dir.join(format!("{m}.transform.json")))?;
            mods.insert(m.to_string(), rel(&format!("{m}.nii")));
            let t = r.transform.translation;
            csv.serialize(RegRow {
                subject_id: &reg.subject_id,
                modality: m.name(),
                loss: r.loss,
                identity_loss: r.identity_loss,
                iterations: r.iterations,
                rotation_deg: r.transform.rotation_angle().to_degrees(),
                tx: t[0],
                ty: t[1],
                tz: t[2],
            })?;
            println!("{:<20} {:<6} {:>10.6} {:>10.6} {:>6}", reg.subject_id, m.name(), r.loss, r.identity_loss, r.iterations);
        }
        let mask = match &study.mask {
            Some(m) => {
                save_mask(m, dir.join("mask.nii"))?;
                Some(rel("mask.nii"))
            }
            None => None,
        };
        records.push(ManifestRecord {
            subject_id: reg.subject_id.clone(),
            stage: study.stage.map(Stage::get),
            mask,
            modalities: mods,
        });
    }
    csv.flush().with_context(|| csv_path.display().to_string())?;
    let aligned = out.join("manifest.json");
    write_manifest(&aligned, &records)?;
    partial(failed, total)?;
    Ok(aligned)
}

/// Patches of every masked study in manifest order, extracted in parallel.
fn extract_all(cfg: &RunConfig, studies: &[Study]) -> (PatchSet, usize) {
    let results: Vec<_> = studies.par_iter().map(|s| extract_patches(s, cfg.mode, &cfg.patches)).collect();
    let mut set = PatchSet { channels: cfg.mode.channels().to_vec(), patch_size: cfg.patches.patch_size, patches: Vec::new() };
    let mut failed = 0;
    for (s, r) in studies.iter().zip(results) {
        match r {
            Ok(p) => set.patches.extend(p),
            Err(e) => {
                log::error!("[{}] {e}", s.subject_id);
                failed += 1;
            }
        }
    }
    (set, failed)
}

fn training_set(cfg: &RunConfig, manifest: &Path) -> Result<(PatchSet, usize, usize), CliError> {
    let loaded = load_studies(manifest)?;
    let total = loaded.records.len();
    let (studies, no_mask) = with_masks(loaded.studies);
    let labeled: Vec<Study> = studies.into_iter().filter(|s| s.stage.is_some()).collect();
    let set = build_training_set(&labeled, cfg.mode, &cfg.patches)?;
    Ok((set, loaded.failed + no_mask, total))
}

fn extract(cfg: &RunConfig, out: &Path, training: bool) -> Result<(), CliError> {
    let manifest = cfg.manifest()?;
    let (set, failed, total) = if training {
        training_set(cfg, manifest)?
    } else {
        let loaded = load_studies(manifest)?;
        let total = loaded.records.len();
        let (studies, no_mask) = with_masks(loaded.studies);
        let (set, bad) = extract_all(cfg, &studies);
        (set, loaded.failed + no_mask + bad, total)
    };
    create_parent(out)?;
    write_patch_set(&set, out)?;
    log::info!("wrote {} patches to {}", set.len(), out.display());
    partial(failed, total)
}

fn train_model(cfg: &RunConfig, set: &PatchSet) -> Result<LogRegModel, CliError> {
    let labels: Vec<u8> = set.patches.iter().filter_map(|p| p.label).collect();
    log::info!(
        "training on {} patches ({} positive)",
        labels.len(),
        labels.iter().filter(|&&l| l == 1).count()
    );
    Ok(train_patches(set, &cfg.train_config())?)
}

fn train(cfg: &RunConfig, patches: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let (set, failed, total) = match patches {
        Some(p) => (read_patch_set(p)?, 0, 0),
        None => training_set(cfg, cfg.manifest()?)?,
    };
    let model = train_model(cfg, &set)?;
    create_parent(out)?;
    model.save(out)?;
    log::info!("final training loss {:.6}", model.final_loss);
    partial(failed, total)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<LogRegModel, CliError> {
    let model = LogRegModel::load(path)?;
    if model.patch_size != cfg.patches.patch_size {
        return Err(CliError::Config(format!(
            "model patch size {} differs from configured {}",
            model.patch_size, cfg.patches.patch_size
        )));
    }
    let expected = clf::feature_len(cfg.mode.channels().len());
    if model.weights.len() != expected {
        return Err(CliError::Config(format!(
            "model expects {} features but {} mode produces {expected}",
            model.weights.len(),
            cfg.mode
        )));
    }
    Ok(model)
}

/// Score patches subject by subject in parallel, keeping input order.
fn predict_patches(model: &LogRegModel, set: &PatchSet) -> Result<Vec<PatchPrediction>, CliError> {
    let chunks: Vec<_> = set
        .patches
        .par_chunks(256)
        .map(|c| predict_all(model, c))
        .collect::<Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn predict(cfg: &RunConfig, model: &Path, patches: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let model = load_model(cfg, model)?;
    let (set, failed, total) = match patches {
        Some(p) => (read_patch_set(p)?, 0, 0),
        None => {
            let loaded = load_studies(cfg.manifest()?)?;
            let total = loaded.records.len();
            let (studies, no_mask) = with_masks(loaded.studies);
            let (set, bad) = extract_all(cfg, &studies);
            (set, loaded.failed + no_mask + bad, total)
        }
    };
    let preds = predict_patches(&model, &set)?;
    create_parent(out)?;
    write_predictions(out, &preds)?;
    partial(failed, total)
}

fn manifest_stages(path: &Path) -> Result<HashMap<String, Stage>, CliError> {
    let mut out = HashMap::new();
    for r in manifest_records(path)? {
        if let Some(s) = r.stage {
            out.insert(r.subject_id.clone(), Stage::new(s).map_err(|e| CliError::Config(format!("{}: {e}", r.subject_id)))?);
        }
    }
    Ok(out)
}

/// Predictions grouped by subject in first-appearance order.
fn group_predictions(preds: &[PatchPrediction]) -> Vec<(String, Vec<PatchPrediction>)> {
    let mut order: Vec<(String, Vec<PatchPrediction>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for p in preds {
        let i = *index.entry(p.subject_id.clone()).or_insert_with(|| {
            order.push((p.subject_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[i].1.push(p.clone());
    }
    order
}

fn calibrate(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<(), CliError> {
    let stages = manifest_stages(cfg.manifest()?)?;
    let preds = load_external_predictions(predictions)?;
    let mut val = Vec::new();
    for (id, group) in group_predictions(&preds) {
        match stages.get(&id) {
            Some(&st) => val.push((subject_score(&group)?, st)),
            None => log::warn!("[{id}] no stage in manifest; not used for calibration"),
        }
    }
    if val.is_empty() {
        return Err(anyhow!("no staged subjects among the predictions").into());
    }
    let t = calibrate_or_default(&val, cfg.staging.folds, cfg.staging.grid_step, cfg.mode)?;
    create_parent(out)?;
    t.save(out)?;
    println!("tau1 {:.6} tau2 {:.6}", t.tau1, t.tau2);
    Ok(())
}

/// Flags, then a thresholds file, then the config, then the mode defaults.
fn resolve_thresholds(cfg: &RunConfig, args: &ThresholdArgs) -> Result<Thresholds, CliError> {
    let Some(path) = &args.thresholds else {
        return cfg.thresholds(args.tau1, args.tau2);
    };
    let base = Thresholds::load(path).map_err(|e| CliError::Config(e.to_string()))?;
    if base.mode != cfg.mode {
        return Err(CliError::Config(format!(
            "thresholds in {} were fitted for {} mode, run uses {}",
            path.display(),
            base.mode,
            cfg.mode
        )));
    }
    Thresholds::new(args.tau1.unwrap_or(base.tau1), args.tau2.unwrap_or(base.tau2), cfg.mode)
        .map_err(|e| CliError::Config(e.to_string()))
}

fn print_report(results: &[StageResult]) {
    println!("{:<20} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6}", "subject", "patches", "s", "y1", "y4", "task1", "task2");
    for r in results {
        println!(
            "{:<20} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6}",
            r.subject_id, r.n_patches, r.s, r.y1, r.y4, r.task1_positive as u8, r.task2_positive as u8
        );
    }
}

fn stage(cfg: &RunConfig, predictions: &Path, args: &ThresholdArgs, out: &Path) -> Result<(), CliError> {
    let t = resolve_thresholds(cfg, args)?;
    let preds = load_external_predictions(predictions)?;
    let results = stage_all(&preds, &t)?;
    create_parent(out)?;
    write_report(out, &results)?;
    print_report(&results);
    Ok(())
}

fn pipeline(
    cfg: &RunConfig,
    reg: bool,
    model: Option<&Path>,
    predictions: Option<&Path>,
    args: &ThresholdArgs,
) -> Result<(), CliError> {
    let t = resolve_thresholds(cfg, args)?;
    let out = cfg.output_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut failed = 0;

    let mut manifest = cfg.manifest()?.to_path_buf();
    if reg {
        match register(cfg, &manifest, &out.join("aligned")) {
            Ok(p) => manifest = p,
            Err(CliError::Partial { failed: f, .. }) => {
                failed += f;
                manifest = out.join("aligned").join("manifest.json");
            }
            Err(e) => return Err(e),
        }
    }
    let total = manifest_records(&manifest)?.len();

    let preds = match predictions {
        Some(p) => load_external_predictions(p)?,
        None => {
            let loaded = load_studies(&manifest)?;
            failed += loaded.failed;
            let (studies, no_mask) = with_masks(loaded.studies);
            failed += no_mask;
            let model = match model {
                Some(p) => load_model(cfg, p)?,
                None => {
                    let labeled: Vec<Study> = studies.iter().filter(|s| s.stage.is_some()).cloned().collect();
                    let set = build_training_set(&labeled, cfg.mode, &cfg.patches)?;
                    if set.is_empty() {
                        return Err(CliError::Config(
                            "no --model or --predictions and no stage 1/4 subjects to train on".into(),
                        ));
                    }
                    let m = train_model(cfg, &set)?;
                    m.save(out.join("model.json"))?;
                    m
                }
            };
            let (set, bad) = extract_all(cfg, &studies);
            failed += bad;
            for s in &studies {
                if !set.patches.iter().any(|p| p.subject_id == s.subject_id) {
                    log::error!("[{}] no patches met the coverage threshold", s.subject_id);
                    failed += 1;
                }
            }
            predict_patches(&model, &set)?
        }
    };
    write_predictions(out.join("predictions.csv"), &preds)?;
    t.save(out.join("thresholds.json"))?;

    let results = stage_all(&preds, &t)?;
    write_report(out.join("report.csv"), &results)?;
    print_report(&results);

    let stages = manifest_stages(&manifest)?;
    let staged: Vec<(StageResult, Stage)> =
        results.iter().filter_map(|r| stages.get(&r.subject_id).map(|&s| (r.clone(), s))).collect();
    if !staged.is_empty() {
        let rep = classification_report(&staged)?;
        rep.save(out.join("eval.json"))?;
        let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "task1 AUC {} ACC {}  task2 AUC {} ACC {}",
            show(rep.auc_task1),
            show(rep.acc_task1),
            show(rep.auc_task2),
            show(rep.acc_task2)
        );
    }
    partial(failed, total)
}

fn eval_seg(pred: &Path, truth: &Path, out: &Path) -> Result<(), CliError> {
    let masks = |p: &Path| -> Result<Vec<(String, PathBuf)>, CliError> {
        let base = p.parent().unwrap_or(Path::new("."));
        Ok(manifest_records(p)?
            .into_iter()
            .filter_map(|r| r.mask.map(|m| (r.subject_id, if m.is_absolute() { m } else { base.join(m) })))
            .collect())
    };
    let truth: HashMap<String, PathBuf> = masks(truth)?.into_iter().collect();
    let mut loaded = Vec::new();
    for (id, p) in masks(pred)? {
        let Some(t) = truth.get(&id) else {
            log::warn!("[{id}] no reference mask; skipped");
            continue;
        };
        loaded.push((id, fibro_core::imgcore::load_mask(p)?, fibro_core::imgcore::load_mask(t)?));
    }
    if loaded.is_empty() {
        return Err(anyhow!("no subject has both a predicted and a reference mask").into());
    }
    let cases: Vec<(String, _, _)> = loaded.iter().map(|(id, p, t)| (id.clone(), p, t)).collect();
    let rep = segmentation_report(&cases)?;
    create_parent(out)?;
    rep.save(out)?;
    println!("mean Dice {:.4} mean HD {:.3} mm", rep.mean_dice.unwrap_or(f64::NAN), rep.mean_hd.unwrap_or(f64::NAN));
    Ok(())
}

fn eval_cls(cfg: &RunConfig, report: &Path, out: &Path) -> Result<(), CliError> {
    let stages = manifest_stages(cfg.manifest()?)?;
    let results = read_report(report)?;
    let staged: Vec<(StageResult, Stage)> =
        results.into_iter().filter_map(|r| stages.get(&r.subject_id).copied().map(|s| (r, s))).collect();
    let rep = classification_report(&staged)?;
    create_parent(out)?;
    rep.save(out)?;
    Ok(())
}

fn overlay_cmd(cfg: &RunConfig, subject: &str, predictions: &Path, slice: usize, scale: u32, out: &Path) -> Result<(), CliError> {
    let manifest = cfg.manifest()?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let rec = manifest_records(manifest)?
        .into_iter()
        .find(|r| r.subject_id == subject)
        .ok_or_else(|| anyhow!("subject {subject} not in manifest"))?;
    let p = rec
        .modalities
        .iter()
        .find(|(k, _)| k.parse::<Modality>().ok() == Some(Modality::REFERENCE))
        .map(|(_, p)| p.clone())
        .ok_or_else(|| anyhow!("subject {subject} has no GED4"))?;
    let vol = fibro_core::imgcore::load_volume(if p.is_absolute() { p } else { base.join(p) })?;
    let preds: Vec<PatchPrediction> =
        load_external_predictions(predictions)?.into_iter().filter(|p| p.subject_id == subject).collect();
    let png = overlay::render(&vol, &preds, slice, cfg.patches.patch_size, scale)?;
    create_parent(out)?;
    std::fs::write(out, png).with_context(|| out.display().to_string())?;
    Ok(())
}

fn phantom(
    cfg: &RunConfig,
    groups: &[PhantomGroup],
    dims: [usize; 3],
    spacing: [f64; 3],
    max_rotation: f64,
    max_translation: f64,
) -> Result<(), CliError> {
    let out = cfg.output_dir()?;
    let mut specs = Vec::new();
    for g in groups {
        for _ in 0..g.count {
            let seed = cfg.seed + specs.len() as u64;
            let spec = PhantomSpec {
                lesion_fraction: g.fraction,
                stage: Some(g.stage),
                seed,
                ..PhantomSpec::new(dims, spacing)
            };
            let spec = if max_rotation > 0.0 || max_translation > 0.0 {
                spec.with_random_transforms(max_rotation, max_translation)
            } else {
                spec
            };
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            specs.push(spec);
        }
    }
    if specs.is_empty() {
        return Err(CliError::Config("no phantoms requested".into()));
    }
    let phantoms = specs.par_iter().map(generate).collect::<Result<Vec<_>, _>>()?;
    let path = write_cohort(&phantoms, out)?;
    println!("wrote {} phantoms; manifest {}", phantoms.len(), path.display());
    Ok(())
}
