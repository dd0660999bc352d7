use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use physseg::analysis::{
    annealing_arm_config, harmonization_arm_configs, pgs_subjects, run_annealing_study, run_harmonization_study,
    run_uncertainty_study, write_run_json, Distribution, Segmenter, StudyArm, StudySubject,
};
use physseg::harmonize::{apply_combat, fit_combat, FeatureTable};
use physseg::model::{load_checkpoint, predict, save_checkpoint, train as train_model, McConfig, Model, TrainMode};
use physseg::pgs::{fit_gmm, label_pgs};
use physseg::phantom::{abide_sites, generate_cohort, read_manifest, write_cohort, CohortMember, CohortSpec};
use physseg::seed::{derive_seed, rng_for};
use physseg::simulate::{augment, simulate_volume, SequenceKind, SequenceParams};
use physseg::uncertainty::{iqr_bounds, percentile_volumes, sweep_contour, SweepGrid, TissueMaps};
use physseg::volumes::{mvol_paths, read_mvol, write_mvol, MvolStack};
use physseg::{Grid3, HardSegmentation, MpmVolume, SoftSegmentation, Tissue};
use serde_json::{json, Value};

use crate::config::{artifact_hash, RunConfig};
use crate::CliError;

/// Seed stream of the multi-site cohort, distinct from the pool cohort.
const MULTISITE_STREAM: u64 = 0x4D53;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn missing(kind: &str, p: &Path) -> CliError {
    invalid(format!("missing input: {kind} '{}'", p.display()))
}

fn io_err(p: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(physseg::Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, body: &str) -> Result<(), CliError> {
    if let Some(d) = p.parent() {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    fs::write(p, body).map_err(|e| io_err(p, e))
}

fn write_json(p: &Path, v: &Value) -> Result<(), CliError> {
    write_text(p, &(serde_json::to_string_pretty(v).expect("json value") + "\n"))
}

fn read_json(kind: &str, p: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(p).map_err(|_| missing(kind, p))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{kind} '{}': {e}", p.display())))
}

fn mvol_exists(p: &Path) -> bool {
    mvol_paths(p).0.exists()
}

fn require_mvol(kind: &str, p: &Path) -> Result<MvolStack, CliError> {
    if !mvol_exists(p) {
        return Err(missing(kind, p));
    }
    Ok(read_mvol(p)?)
}

fn load_model(p: &Path) -> Result<(Model, Value), CliError> {
    let s = p.to_string_lossy();
    let stem = s.strip_suffix(".ckpt.json").unwrap_or(&s);
    if !Path::new(&format!("{stem}.ckpt.json")).exists() {
        return Err(missing("checkpoint", p));
    }
    Ok(load_checkpoint(p)?)
}

fn check_hash(cfg: &RunConfig, what: &str, meta: &Value, force: bool) -> Result<(), CliError> {
    match artifact_hash(meta) {
        Some(h) if h != cfg.hash() && !force => Err(invalid(format!(
            "{what} was produced with config hash {h} but the current config hashes to {}; pass --force to mix them",
            cfg.hash()
        ))),
        _ => Ok(()),
    }
}

/// Reads a cohort written by `phantom` and its run metadata.
fn load_cohort(dir: &Path) -> Result<(Vec<CohortMember>, Value), CliError> {
    let manifest = dir.join("manifest.csv");
    if !manifest.exists() {
        return Err(missing("cohort manifest", &manifest));
    }
    let mut members = Vec::new();
    for r in read_manifest(&manifest)? {
        let stack = require_mvol("quantitative map", &r.mpm_path)?;
        let params = match stack.meta.get("params") {
            Some(p) => Some(serde_json::from_value(p.clone()).map_err(physseg::Error::from)?),
            None => None,
        };
        let mpm = MpmVolume::from_stack(stack)?;
        let labels = HardSegmentation::from_stack(require_mvol("label map", &r.labels_path)?)?;
        members.push(CohortMember {
            mpm,
            labels,
            site_id: r.site_id,
            params,
            age: r.age,
        });
    }
    let meta = if dir.join("run.json").exists() {
        read_json("cohort metadata", &dir.join("run.json"))?
    } else {
        Value::Null
    };
    Ok((members, meta))
}

fn study_subjects(cfg: &RunConfig, members: Vec<CohortMember>) -> Result<Vec<StudySubject>, CliError> {
    Ok(pgs_subjects(members, &cfg.phantom.anatomy.tissue_params, &cfg.pgs)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

fn split<T>(cfg: &RunConfig, mut items: Vec<T>, which: Split) -> Result<Vec<T>, CliError> {
    let s = &cfg.split;
    let need = s.n_train + s.n_val + s.n_test;
    if items.len() < need {
        return Err(invalid(format!(
            "cohort has {} subjects but split needs {need}; regenerate it or change split",
            items.len()
        )));
    }
    let (start, len) = match which {
        Split::Train => (0, s.n_train),
        Split::Val => (s.n_train, s.n_val),
        Split::Test => (s.n_train + s.n_val, s.n_test),
    };
    items.truncate(start + len);
    Ok(items.split_off(start))
}

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Output directory (default: <work_dir>/cohort or <work_dir>/multisite).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Generate the multi-site cohort with one acquisition per site.
    #[arg(long)]
    pub multisite: bool,
}

pub fn phantom(cfg: &RunConfig, a: PhantomArgs) -> Result<(), CliError> {
    let p = &cfg.phantom;
    let spec = if a.multisite {
        let sites = abide_sites(p.subjects_per_site);
        CohortSpec {
            n_subjects: sites.iter().map(|s| s.n_subjects).sum(),
            dims: p.dims,
            seed: derive_seed(cfg.seed, &[MULTISITE_STREAM]),
            age_range: p.age_range,
            sites,
            phantom: p.anatomy.clone(),
        }
    } else {
        CohortSpec {
            n_subjects: p.n_subjects,
            dims: p.dims,
            seed: cfg.seed,
            age_range: p.age_range,
            sites: Vec::new(),
            phantom: p.anatomy.clone(),
        }
    };
    spec.validate().map_err(|e| invalid(format!("phantom: {e}")))?;
    let out = a
        .out
        .unwrap_or_else(|| cfg.work_dir.join(if a.multisite { "multisite" } else { "cohort" }));
    let members = generate_cohort(&spec)?;
    let meta = cfg.meta(json!({ "kind": "cohort", "multisite": a.multisite }));
    write_cohort(&members, &out, &meta)?;
    write_run_json(&out, &meta)?;
    println!("wrote {} subjects to {}", members.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Seq {
    Mprage,
    Spgr,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Quantitative map: an MVOL path or a subject id in the work cohort.
    #[arg(long)]
    pub mpm: PathBuf,
    #[arg(long, value_enum)]
    pub seq: Seq,
    /// Inversion time (ms), MPRAGE.
    #[arg(long)]
    pub ti: Option<f64>,
    /// Pseudo delay (ms), MPRAGE; TR = TI + pTD.
    #[arg(long, default_value_t = 800.0)]
    pub ptd: f64,
    /// Repetition time (ms), SPGR.
    #[arg(long)]
    pub tr: Option<f64>,
    /// Echo time (ms), SPGR.
    #[arg(long)]
    pub te: Option<f64>,
    /// Flip angle (degrees), SPGR.
    #[arg(long)]
    pub fa: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    /// Apply the configured bias-field and noise augmentation.
    #[arg(long)]
    pub augment: bool,
    /// Output MVOL stem.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn resolve_mpm(cfg: &RunConfig, p: &Path) -> Result<PathBuf, CliError> {
    let id = p.to_string_lossy();
    let candidates = [
        p.to_path_buf(),
        cfg.work_dir.join("cohort").join(format!("{id}_mpm")),
        cfg.work_dir.join("multisite").join(format!("{id}_mpm")),
    ];
    candidates
        .into_iter()
        .find(|c| mvol_exists(c))
        .ok_or_else(|| missing("quantitative map", p))
}

fn sequence_params(a: &SimulateArgs) -> Result<SequenceParams, CliError> {
    let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| invalid(format!("--{flag} is required for this sequence")));
    let p = match a.seq {
        Seq::Mprage => SequenceParams::mprage(need(a.ti, "ti")?, a.ptd),
        Seq::Spgr => SequenceParams::spgr(need(a.tr, "tr")?, need(a.te, "te")?, need(a.fa, "fa")?),
    }
    .and_then(|p| p.with_gain(a.gain).validated())
    .map_err(|e| invalid(format!("acquisition: {e}")))?;
    Ok(p)
}

pub fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<(), CliError> {
    let params = sequence_params(&a)?;
    let path = resolve_mpm(cfg, &a.mpm)?;
    let mpm = MpmVolume::from_stack(read_mvol(&path)?)?;
    let mut img = simulate_volume(&mpm, &params)?;
    if a.augment {
        let mut rng = rng_for(cfg.seed, &[fnv(&mpm.subject_id)]);
        img = augment(&img, &mpm.mask, &cfg.simulate.augment, &mut rng)?;
    }
    let meta = cfg.meta(json!({
        "kind": "image",
        "subject_id": mpm.subject_id,
        "params": params,
        "augmented": a.augment,
    }));
    let stack = MvolStack {
        channel_names: vec!["image".into(), "mask".into()],
        channels: vec![img, mpm.mask.clone()],
        meta,
    };
    write_mvol(&stack, &a.out)?;
    println!("wrote {}", mvol_paths(&a.out).0.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PgsArgs {
    /// Single quantitative map (MVOL path or work-cohort subject id).
    #[arg(long, conflicts_with = "cohort", required_unless_present = "cohort")]
    pub mpm: Option<PathBuf>,
    /// Label every subject of a cohort directory.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Output stem (single map) or directory (cohort).
    #[arg(short, long)]
    pub out: PathBuf,
}

fn pgs_one(cfg: &RunConfig, mpm: &MpmVolume, stem: &str) -> Result<(), CliError> {
    let fit = fit_gmm(mpm, &cfg.phantom.anatomy.tissue_params, &cfg.pgs)?;
    let (soft, hard) = label_pgs(mpm, &fit.gmm)?;
    let meta = cfg.meta(json!({ "kind": "pgs", "subject_id": mpm.subject_id }));
    write_mvol(&soft.to_stack(meta.clone()), format!("{stem}_soft"))?;
    write_mvol(&hard.to_stack(meta.clone()), format!("{stem}_labels"))?;
    let body = json!({
        "meta": meta,
        "gmm": fit.gmm,
        "iterations": fit.iterations,
        "log_likelihood": fit.log_likelihood,
    });
    write_json(Path::new(&format!("{stem}_gmm.json")), &body)
}

pub fn pgs(cfg: &RunConfig, a: PgsArgs) -> Result<(), CliError> {
    if let Some(dir) = &a.cohort {
        let (members, _) = load_cohort(dir)?;
        fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
        for m in &members {
            pgs_one(cfg, &m.mpm, &a.out.join(&m.mpm.subject_id).to_string_lossy())?;
        }
        write_run_json(&a.out, &cfg.meta(json!({ "kind": "pgs", "cohort": dir })))?;
        println!("labelled {} subjects into {}", members.len(), a.out.display());
    } else {
        let path = resolve_mpm(cfg, a.mpm.as_deref().expect("clap enforces one input"))?;
        let mpm = MpmVolume::from_stack(read_mvol(&path)?)?;
        pgs_one(cfg, &mpm, &a.out.to_string_lossy())?;
        println!("wrote {}_labels.mvol.json", a.out.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Arms of the training-mode ablation.
    Annealing,
    /// Arms of the multi-site study.
    Harmonization,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Annealing => "annealing",
            Preset::Harmonization => "harmonization",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training cohort (default: <work_dir>/cohort).
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Arm name (default: the configured arm, else phys_strat_aug).
    #[arg(long)]
    pub arm: Option<String>,
    #[arg(long, value_enum, default_value = "annealing")]
    pub preset: Preset,
    /// Checkpoint stem (default: <work_dir>/checkpoints/<preset>/<arm>).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

fn arm_name(cfg: &RunConfig, arm: Option<String>) -> String {
    arm.or_else(|| (!cfg.arm.is_empty()).then(|| cfg.arm.clone()))
        .unwrap_or_else(|| TrainMode::PhysStratAug.name().to_string())
}

pub fn train(cfg: &RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let arm = arm_name(cfg, a.arm);
    let tc = match a.preset {
        Preset::Annealing => {
            let mode: TrainMode = arm.parse().map_err(|e: physseg::Error| invalid(format!("--arm: {e}")))?;
            annealing_arm_config(&cfg.model, mode)
        }
        Preset::Harmonization => harmonization_arm_configs(&cfg.model)
            .into_iter()
            .find(|(n, _)| *n == arm)
            .map(|(_, c)| c)
            .ok_or_else(|| invalid(format!("--arm: '{arm}' is not a harmonization arm")))?,
    };
    tc.validate().map_err(|e| invalid(format!("model: {e}")))?;
    let cohort = a.cohort.unwrap_or_else(|| cfg.work_dir.join("cohort"));
    let (members, _) = load_cohort(&cohort)?;
    let train_subj = study_subjects(cfg, split(cfg, members.clone(), Split::Train)?)?;
    let val_subj = study_subjects(cfg, split(cfg, members, Split::Val)?)?;
    let tr: Vec<_> = train_subj.into_iter().map(|s| s.data).collect();
    let va: Vec<_> = val_subj.into_iter().map(|s| s.data).collect();
    let (model, log) = train_model(&tc, &tr, &va)?;
    let out = a
        .out
        .unwrap_or_else(|| cfg.work_dir.join("checkpoints").join(a.preset.name()).join(&arm));
    if let Some(d) = out.parent() {
        fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
    }
    let meta = cfg.meta(json!({
        "kind": "checkpoint",
        "arm": arm,
        "preset": a.preset.name(),
        "train_config": tc,
        "best_epoch": log.best_epoch,
        "stopped_early": log.stopped_early,
    }));
    save_checkpoint(&model, &out, meta)?;
    log.write_csv(Path::new(&format!("{}.log.csv", out.display())))?;
    println!(
        "trained {arm}: {} epochs, best {} (metric {:.4}); checkpoint {}",
        log.epochs.len(),
        log.best_epoch,
        log.epochs.iter().find(|e| e.epoch == log.best_epoch).map(|e| e.val.metric).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}


#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image written by `simulate` (channels image and mask).
    #[arg(long)]
    pub image: PathBuf,
    /// Monte-Carlo dropout samples; omitted means one deterministic pass.
    #[arg(long)]
    pub mc: Option<usize>,
    /// Also perturb logits by the predicted sigma in each sample.
    #[arg(long, requires = "mc")]
    pub logit_noise: bool,
    /// Calibration file from `calibrate`, for IQR bounds.
    #[arg(long, requires = "mc")]
    pub calibration: Option<PathBuf>,
    /// Output stem.
    #[arg(short, long)]
    pub out: PathBuf,
}

fn mean_soft(samples: &[SoftSegmentation]) -> Result<SoftSegmentation, CliError> {
    let first = &samples[0];
    let n = samples.len() as f64;
    let maps: Vec<Grid3> = (0..3)
        .map(|t| {
            let data = (0..first.mask.len())
                .map(|i| (samples.iter().map(|s| s.tissues[t].data()[i] as f64).sum::<f64>() / n) as f32)
                .collect();
            first.mask.with_data(data)
        })
        .collect::<physseg::Result<_>>()?;
    let [a, b, c]: [Grid3; 3] = maps.try_into().expect("three tissues");
    Ok(SoftSegmentation::new([a, b, c], first.mask.clone())?)
}

fn load_maps(p: &Path) -> Result<TissueMaps, CliError> {
    let v = read_json("calibration", p)?;
    let maps = v.get("maps").cloned().ok_or_else(|| invalid(format!("calibration '{}' has no maps", p.display())))?;
    serde_json::from_value(maps).map_err(|e| invalid(format!("calibration '{}': {e}", p.display())))
}

pub fn infer(cfg: &RunConfig, a: InferArgs) -> Result<(), CliError> {
    let (model, _) = load_model(&a.checkpoint)?;
    let stack = require_mvol("image", &a.image)?;
    let params: SequenceParams = stack
        .meta
        .get("params")
        .cloned()
        .ok_or_else(|| invalid(format!("image '{}' records no acquisition params", a.image.display())))
        .and_then(|p| serde_json::from_value(p).map_err(|e| invalid(format!("image params: {e}"))))?;
    let img = stack.channel("image").ok_or_else(|| invalid("image MVOL lacks channel 'image'"))?;
    let mask = stack.channel("mask").ok_or_else(|| invalid("image MVOL lacks channel 'mask'"))?;
    let maps = a.calibration.as_deref().map(load_maps).transpose()?;
    let mc = match a.mc {
        Some(n) if n < 2 => return Err(invalid("--mc needs >= 2 samples")),
        Some(n) => McConfig {
            dropout: true,
            logit_noise: a.logit_noise,
            n_samples: n,
        },
        None => McConfig::deterministic(),
    };
    let subject = stack.meta.get("subject_id").and_then(Value::as_str).unwrap_or("unknown").to_string();
    let mut rng = rng_for(cfg.seed, &[fnv(&subject), 0x1F]);
    let samples = predict(&model, img, mask, &params, &mc, &mut rng)?;
    let soft = mean_soft(&samples)?;
    let hard = soft.harden();
    let meta = cfg.meta(json!({
        "kind": "segmentation",
        "subject_id": subject,
        "params": params,
        "mc_samples": a.mc.unwrap_or(1),
        "logit_noise": a.logit_noise,
    }));
    write_mvol(&soft.to_stack(meta.clone()), &a.out)?;
    write_mvol(&hard.to_stack(meta.clone()), format!("{}_labels", a.out.display()))?;
    let mut tissues = Vec::new();
    for t in Tissue::ALL {
        let mut entry = json!({ "tissue": t.name(), "volume_ml": hard.volume_ml(t) });
        if a.mc.is_some() {
            let curve = percentile_volumes(&samples, t, cfg.uncertainty.aggregation)?;
            entry["percentile_volumes_ml"] = json!(curve.volumes);
            if let Some(m) = &maps {
                entry["iqr_ml"] = json!(iqr_bounds(&curve, &m[t.index()]));
            }
        }
        tissues.push(entry);
    }
    write_json(
        Path::new(&format!("{}_volumes.json", a.out.display())),
        &json!({ "meta": meta, "tissues": tissues }),
    )?;
    println!("wrote {}", mvol_paths(&a.out).0.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cohort whose validation split calibrates and test split evaluates.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Output directory (default: <work_dir>/calibration).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn calibrate(cfg: &RunConfig, a: CalibrateArgs) -> Result<(), CliError> {
    let (model, ckpt_meta) = load_model(&a.checkpoint)?;
    let (members, _) = load_cohort(&a.cohort.unwrap_or_else(|| cfg.work_dir.join("cohort")))?;
    let cal = study_subjects(cfg, split(cfg, members.clone(), Split::Val)?)?;
    let test = study_subjects(cfg, split(cfg, members, Split::Test)?)?;
    let r = run_uncertainty_study(&model, &cal, &test, &cfg.uncertainty)?;
    let out = a.out.unwrap_or_else(|| cfg.work_dir.join("calibration"));
    let meta = cfg.meta(json!({ "kind": "calibration", "arm": ckpt_meta.get("arm") }));
    r.write(&out, &meta)?;
    println!(
        "coverage of calibrated IQR (CSF, GM, WM): {:.2}, {:.2}, {:.2}; mean width in {:.3} ml, ood {:.3} ml",
        r.coverage[0], r.coverage[1], r.coverage[2], r.mean_width_in_ml, r.mean_width_ood_ml
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridKind {
    /// TR x flip angle at fixed TE.
    Spgr,
    /// TI x pTD.
    Mprage,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `calibration.json` from `calibrate`.
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Default grid of this sequence instead of the configured one.
    #[arg(long, value_enum)]
    pub grid: Option<GridKind>,
    /// Output directory (default: <work_dir>/sweep).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn sweep(cfg: &RunConfig, a: SweepArgs) -> Result<(), CliError> {
    let (model, _) = load_model(&a.checkpoint)?;
    let maps = load_maps(&a.calibration)?;
    let (members, _) = load_cohort(&a.cohort.unwrap_or_else(|| cfg.work_dir.join("cohort")))?;
    let mpms: Vec<MpmVolume> = split(cfg, members, Split::Test)?.into_iter().map(|m| m.mpm).collect();
    let mut spec = cfg.sweep.clone();
    match a.grid {
        Some(GridKind::Spgr) => spec.grid = SweepGrid::spgr_default(),
        Some(GridKind::Mprage) => spec.grid = SweepGrid::mprage_default(),
        None => {}
    }
    let r = sweep_contour(&model, &mpms, &maps, &spec)?;
    let out = a.out.unwrap_or_else(|| cfg.work_dir.join("sweep"));
    write_run_json(&out, &cfg.meta(json!({ "kind": "sweep", "spec": spec })))?;
    r.write_csv(&out.join("sweep.csv"))?;
    write_text(&out.join("sweep.svg"), &r.to_svg("log10 mean calibrated IQR (ml)"))?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// Feature table (subject_id, site_id, age, gm, wm, csf).
    #[arg(long)]
    pub features: PathBuf,
    /// Output directory (default: <work_dir>/harmonized).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn harmonize(cfg: &RunConfig, a: HarmonizeArgs) -> Result<(), CliError> {
    if !a.features.exists() {
        return Err(missing("feature table", &a.features));
    }
    let table = FeatureTable::read_csv(&a.features).map_err(|e| invalid(format!("{}: {e}", a.features.display())))?;
    let model = fit_combat(&table, &cfg.harmonize.combat)?;
    let harmonised = apply_combat(&model, &table)?;
    let out = a.out.unwrap_or_else(|| cfg.work_dir.join("harmonized"));
    let meta = cfg.meta(json!({ "kind": "harmonization", "features": a.features }));
    write_run_json(&out, &meta)?;
    harmonised.write_csv(&out.join("harmonized.csv"))?;
    write_json(&out.join("combat.json"), &json!({ "meta": meta, "model": model }))?;
    println!("harmonized {} subjects across {} sites", table.rows.len(), model.sites.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    /// Dice and CoV per arm, sequence, tissue and distribution.
    Annealing,
    /// Per-site trends, ComBat variants, age RMSE and Dice on the multi-site cohort.
    Harmonization,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_enum, default_value = "annealing")]
    pub study: Study,
    /// Comma-separated arm names; each needs `<checkpoints>/<arm>.ckpt.json`.
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
    /// Comma-separated distributions for the annealing study: in, ood.
    #[arg(long, value_delimiter = ',', default_value = "in,ood")]
    pub dist: Vec<String>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Checkpoint directory (default: <work_dir>/checkpoints/<study>).
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Output directory (default: <work_dir>/report/<study>).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Accept inputs produced under a different config hash.
    #[arg(long)]
    pub force: bool,
    /// Write every segmentation of the annealing study.
    #[arg(long)]
    pub persist_segmentations: bool,
}

pub fn report(cfg: &RunConfig, a: ReportArgs) -> Result<(), CliError> {
    let study = match a.study {
        Study::Annealing => "annealing",
        Study::Harmonization => "harmonization",
    };
    let arms: Vec<String> = if a.arms.is_empty() {
        match a.study {
            Study::Annealing => ["baseline", "phys", "phys_strat", "phys_strat_aug"].map(String::from).to_vec(),
            Study::Harmonization => ["phys_strat_aug", "phys_aug_base", "cnn_baseline"].map(String::from).to_vec(),
        }
    } else {
        a.arms.clone()
    };
    let ckpt_dir = a.checkpoints.clone().unwrap_or_else(|| cfg.work_dir.join("checkpoints").join(study));
    let mut models = Vec::new();
    for arm in &arms {
        let (m, meta) = load_model(&ckpt_dir.join(arm))?;
        check_hash(cfg, &format!("checkpoint '{arm}'"), &meta, a.force)?;
        models.push(m);
    }
    let cohort_dir = a.cohort.clone().unwrap_or_else(|| {
        cfg.work_dir.join(match a.study {
            Study::Annealing => "cohort",
            Study::Harmonization => "multisite",
        })
    });
    let (members, cohort_meta) = load_cohort(&cohort_dir)?;
    check_hash(cfg, "cohort", &cohort_meta, a.force)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.work_dir.join("report").join(study));
    let meta = cfg.meta(json!({ "kind": "report", "study": study, "arms": arms }));
    match a.study {
        Study::Annealing => {
            let dists = a
                .dist
                .iter()
                .map(|d| d.parse::<Distribution>().map_err(|e| invalid(format!("--dist: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let subjects = study_subjects(cfg, split(cfg, members, Split::Test)?)?;
            let sequence: SequenceKind = cfg.model.train_range.kind();
            let study_arms: Vec<StudyArm<'_>> = arms
                .iter()
                .zip(&models)
                .map(|(n, m)| StudyArm {
                    name: n.clone(),
                    sequence,
                    segmenter: m as &dyn Segmenter,
                })
                .collect();
            let acfg = physseg::analysis::AnnealingConfig {
                distributions: dists,
                ..cfg.annealing.clone()
            };
            let persist = a.persist_segmentations.then(|| out.join("segmentations"));
            let r = run_annealing_study(&subjects, &study_arms, &acfg, persist.as_deref())?;
            r.write_csv(&out, &meta)?;
            for c in r.cells.iter().filter(|c| c.tissue == Tissue::Gm) {
                println!(
                    "{:<16} {:<6} {:<3} GM dice {:.4} ± {:.4}  CoV×1e3 {:.3} ± {:.3}",
                    c.arm,
                    c.sequence.name(),
                    c.distribution.name(),
                    c.dice_mean,
                    c.dice_std,
                    c.cov_mean_x1e3,
                    c.cov_std_x1e3
                );
            }
        }
        Study::Harmonization => {
            let subjects = study_subjects(cfg, members)?;
            let seg_arms: Vec<(&str, &dyn Segmenter)> =
                arms.iter().zip(&models).map(|(n, m)| (n.as_str(), m as &dyn Segmenter)).collect();
            let r = run_harmonization_study(&subjects, &seg_arms, &cfg.harmonize)?;
            r.write(&out, &meta)?;
            for arm in &r.arms {
                let mean_rmse = arm.age_rmse.iter().sum::<f64>() / arm.age_rmse.len().max(1) as f64;
                println!("{:<18} age RMSE {:.2} y", arm.arm, mean_rmse);
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
