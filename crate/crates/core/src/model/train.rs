//! Training loop, validation and Monte-Carlo prediction.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    featurize_padded, forward_batch, loss_and_grad, sample_masks, shared_masks, softmax, BatchInput, LossTerms, MlpConfig,
    Model, ModelWeights, Problem, N_CLASSES, NEIGHBOURHOOD,
};
use crate::error::{Error, Result};
use crate::metrics::{cov, dice};
use crate::seed::rng_for;
use crate::simulate::{make_batch, simulate_volume, AugmentConfig, ParamRange, ParamSource, SequenceParams};
use crate::volumes::{Grid3, HardSegmentation, MpmVolume, SoftSegmentation, Tissue};

/// Experiment arms. Pre-generated arms draw from a fixed list of simulated
/// acquisitions; the others sample parameters on the fly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Phys,
    PhysStrat,
    PhysStratAug,
    PhysAugBase,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Baseline,
        TrainMode::Phys,
        TrainMode::PhysStrat,
        TrainMode::PhysStratAug,
        TrainMode::PhysAugBase,
    ];

    pub fn physics(self) -> bool {
        matches!(self, TrainMode::Phys | TrainMode::PhysStrat | TrainMode::PhysStratAug)
    }

    pub fn stratified(self) -> bool {
        matches!(self, TrainMode::PhysStrat | TrainMode::PhysStratAug | TrainMode::PhysAugBase)
    }

    pub fn on_the_fly(self) -> bool {
        matches!(self, TrainMode::PhysStratAug | TrainMode::PhysAugBase)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Phys => "phys",
            TrainMode::PhysStrat => "phys_strat",
            TrainMode::PhysStratAug => "phys_strat_aug",
            TrainMode::PhysAugBase => "phys_aug_base",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub mlp: MlpConfig,
    pub batch_size: usize,
    /// Edge length of the cubic training patch.
    pub patch_size: usize,
    /// Voxel positions sampled from each patch per step.
    pub voxels_per_patch: usize,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub train_range: ParamRange,
    pub val_range: ParamRange,
    /// Size of the fixed acquisition list for pre-generated arms.
    pub n_pregenerated: usize,
    pub n_val_params: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::PhysStratAug,
            mlp: MlpConfig::default(),
            batch_size: 4,
            patch_size: 24,
            voxels_per_patch: 512,
            steps_per_epoch: 100,
            max_epochs: 60,
            patience: 7,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
            train_range: ParamRange::mprage_in_distribution(),
            val_range: ParamRange::mprage_in_distribution(),
            n_pregenerated: 121,
            n_val_params: 5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.train_range.validate()?;
        self.val_range.validate()?;
        self.augment.validate()?;
        let positive = [
            ("batch_size", self.batch_size),
            ("voxels_per_patch", self.voxels_per_patch),
            ("steps_per_epoch", self.steps_per_epoch),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("n_pregenerated", self.n_pregenerated),
            ("n_val_params", self.n_val_params),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
        }
        if self.patch_size < 3 {
            return Err(Error::InvalidParameter("patch_size must be >= 3".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate {} / momentum {} out of range",
                self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }

    /// Network configuration with the physics switch set by the mode.
    pub fn model_config(&self) -> MlpConfig {
        MlpConfig {
            physics: self.mode.physics(),
            ..self.mlp.clone()
        }
    }
}

/// An MPM with its PGS labels.
#[derive(Debug, Clone)]
pub struct LabelledSubject {
    pub mpm: MpmVolume,
    pub soft: SoftSegmentation,
    pub hard: HardSegmentation,
}

impl LabelledSubject {
    pub fn new(mpm: MpmVolume, soft: SoftSegmentation) -> Result<Self> {
        if !soft.mask.same_shape(&mpm.mask) {
            return Err(Error::DimMismatch("labels do not match the MPM".into()));
        }
        let hard = soft.harden();
        Ok(Self { mpm, soft, hard })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dropout: bool,
    /// Perturb logits by sigma-scaled Gaussian noise (heteroscedastic
    /// sampling).
    pub logit_noise: bool,
    pub n_samples: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            dropout: true,
            logit_noise: false,
            n_samples: 50,
        }
    }
}

impl McConfig {
    pub fn deterministic() -> Self {
        Self {
            dropout: false,
            logit_noise: false,
            n_samples: 1,
        }
    }
}

/// Reciprocal mean absolute intensity over the mask; the network sees
/// images divided by this so that global gain carries no information.
pub fn image_scale(img: &Grid3, mask: &Grid3) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&v, &m) in img.data().iter().zip(mask.data()) {
        if m > 0.0 {
            sum += (v as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if !(sum > 0.0) {
        return Err(Error::Degenerate("image is zero inside the mask".into()));
    }
    Ok(n as f64 / sum)
}

/// [`image_scale`] of the noise-free simulation of `mpm` under `params`.
pub fn intensity_scale(mpm: &MpmVolume, params: &SequenceParams) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in mpm.mask_indices() {
        let v = params.signal(mpm.t1_ms.data()[i] as f64, mpm.t2s_ms.data()[i] as f64, mpm.pd.data()[i] as f64)?;
        // Matches the f32 rounding of a simulated volume.
        sum += (v as f32 as f64).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if !(sum > 0.0) {
        return Err(Error::Degenerate("simulated image is zero inside the mask".into()));
    }
    Ok(n as f64 / sum)
}

const PREDICT_CHUNK: usize = 8192;

/// Softmax probabilities for `coords`, rows in the same order.
fn predict_rows<R: Rng + ?Sized>(
    model: &Model,
    img: &Grid3,
    coords: &[[usize; 3]],
    scale: f64,
    params: &SequenceParams,
    mc: &McConfig,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut probs = Array2::zeros((coords.len(), N_CLASSES));
    for (ci, chunk) in coords.chunks(PREDICT_CHUNK).enumerate() {
        let mut x = Array2::zeros((chunk.len(), NEIGHBOURHOOD));
        for (r, c) in chunk.iter().enumerate() {
            featurize_padded(img, *c, scale, x.row_mut(r).as_slice_mut().expect("row-major"));
        }
        let input = BatchInput {
            x,
            item: vec![0; chunk.len()],
            params: vec![*params],
        };
        let masks = mc.dropout.then(|| sample_masks(&model.config, chunk.len(), rng));
        let (out, _) = forward_batch(model, &input, masks.as_ref())?;
        let start = ci * PREDICT_CHUNK;
        for r in 0..chunk.len() {
            let mut logits = out.logits.row(r).to_vec();
            if mc.logit_noise {
                for l in logits.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *l += out.sigma[r] * z;
                }
            }
            let p = softmax(&logits);
            for c in 0..N_CLASSES {
                probs[[start + r, c]] = p[c];
            }
        }
    }
    Ok(probs)
}

fn to_soft(probs: &Array2<f64>, indices: &[usize], mask: &Grid3) -> Result<SoftSegmentation> {
    let n = mask.len();
    let mut maps = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..N_CLASSES {
            maps[c][i] = probs[[r, c]] as f32;
        }
    }
    let [a, b, c] = maps;
    SoftSegmentation::new([mask.with_data(a)?, mask.with_data(b)?, mask.with_data(c)?], mask.clone())
}

/// Segments `image` inside `mask`. Without dropout or logit noise every
/// sample is the deterministic prediction.
pub fn predict<R: Rng + ?Sized>(
    model: &Model,
    image: &Grid3,
    mask: &Grid3,
    params: &SequenceParams,
    mc: &McConfig,
    rng: &mut R,
) -> Result<Vec<SoftSegmentation>> {
    if !image.same_shape(mask) {
        return Err(Error::DimMismatch("image and mask differ in shape".into()));
    }
    let indices = crate::volumes::mask_indices(mask);
    let coords: Vec<[usize; 3]> = indices.iter().map(|&i| mask.coords(i)).collect();
    let scale = image_scale(image, mask)?;
    let n = mc.n_samples.max(1);
    if !mc.dropout && !mc.logit_noise {
        let probs = predict_rows(model, image, &coords, scale, params, mc, rng)?;
        let seg = to_soft(&probs, &indices, mask)?;
        return Ok(vec![seg; n]);
    }
    (0..n)
        .map(|_| {
            let probs = predict_rows(model, image, &coords, scale, params, mc, rng)?;
            to_soft(&probs, &indices, mask)
        })
        .collect()
}

/// Simulates `mpm` under `params` and segments the result.
pub fn predict_mpm<R: Rng + ?Sized>(
    model: &Model,
    mpm: &MpmVolume,
    params: &SequenceParams,
    mc: &McConfig,
    rng: &mut R,
) -> Result<Vec<SoftSegmentation>> {
    let img = simulate_volume(mpm, params)?;
    predict(model, &img, &mpm.mask, params, mc, rng)
}

/// Validation scores averaged over subjects; CoV is taken across the
/// acquisitions of each subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationScores {
    pub dice: [f64; 3],
    pub cov: [f64; 3],
    /// Mean over tissues of dice + (1 - CoV).
    pub metric: f64,
}

pub fn validate_model(model: &Model, subjects: &[LabelledSubject], params: &[SequenceParams]) -> Result<ValidationScores> {
    if subjects.is_empty() || params.is_empty() {
        return Err(Error::InsufficientData("validation needs subjects and parameters".into()));
    }
    let mut rng = rng_for(0, &[]);
    let mut dsum = [0f64; 3];
    let mut csum = [0f64; 3];
    for s in subjects {
        let mut vols = [Vec::new(), Vec::new(), Vec::new()];
        for p in params {
            let seg = predict_mpm(model, &s.mpm, p, &McConfig::deterministic(), &mut rng)?
                .pop()
                .expect("one sample")
                .harden();
            for t in Tissue::ALL {
                dsum[t.index()] += dice(&seg, &s.hard, t)?;
                vols[t.index()].push(seg.volume_ml(t));
            }
        }
        for t in 0..3 {
            if vols[t].len() >= 2 {
                csum[t] += cov(&vols[t]).unwrap_or(1.0);
            }
        }
    }
    let nd = (subjects.len() * params.len()) as f64;
    let dice = dsum.map(|v| v / nd);
    let cov = csum.map(|v| v / subjects.len() as f64);
    let metric = (0..3).map(|t| dice[t] + 1.0 - cov[t]).sum::<f64>() / 3.0;
    Ok(ValidationScores { dice, cov, metric })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossTerms,
    pub val: ValidationScores,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub const CSV_HEADER: [&'static str; 11] = [
        "epoch", "loss_seg", "loss_strat", "loss_total", "dice_csf", "dice_gm", "dice_wm", "cov_csf", "cov_gm", "cov_wm",
        "metric",
    ];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.loss.segmentation.to_string(),
                e.loss.stratification.to_string(),
                e.loss.total.to_string(),
            ];
            row.extend(e.val.dice.iter().map(|v| v.to_string()));
            row.extend(e.val.cov.iter().map(|v| v.to_string()));
            row.push(e.val.metric.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Interior masked voxels of a patch (1-voxel margin).
fn interior_positions(mask: &Grid3) -> Vec<usize> {
    let d = mask.dims();
    (0..mask.len())
        .filter(|&i| {
            let c = mask.coords(i);
            mask.data()[i] > 0.0 && (0..3).all(|a| c[a] >= 1 && c[a] + 1 < d[a])
        })
        .collect()
}

/// Builds one stratified training problem, or `None` when the patch has no
/// usable voxels.
fn training_problem<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    mlp: &MlpConfig,
    subject: &LabelledSubject,
    source: &ParamSource,
    rng: &mut R,
) -> Result<Option<Problem>> {
    let p = cfg.patch_size;
    let size = [
        p.min(subject.mpm.dims()[0]),
        p.min(subject.mpm.dims()[1]),
        p.min(subject.mpm.dims()[2]),
    ];
    let batch = make_batch(&subject.mpm, &subject.soft, cfg.batch_size, size, source, &cfg.augment, rng)?;
    let interior = interior_positions(&batch.mask_patch);
    if interior.is_empty() {
        return Ok(None);
    }
    let v = cfg.voxels_per_patch.min(interior.len());
    let positions: Vec<usize> = rand::seq::index::sample(rng, interior.len(), v)
        .into_iter()
        .map(|k| interior[k])
        .collect();
    let label_hard = batch.items[0].label_patch.harden();
    let labels_v: Vec<usize> = positions.iter().map(|&i| label_hard.labels()[i] as usize - 1).collect();

    let b = batch.items.len();
    let mut x = Array2::zeros((b * v, NEIGHBOURHOOD));
    let mut labels = Vec::with_capacity(b * v);
    for (bi, item) in batch.items.iter().enumerate() {
        let scale = intensity_scale(&subject.mpm, &item.params)?;
        for (vi, &pos) in positions.iter().enumerate() {
            let c = item.patch.coords(pos);
            featurize_padded(&item.patch, c, scale, x.row_mut(bi * v + vi).as_slice_mut().expect("row-major"));
        }
        labels.extend_from_slice(&labels_v);
    }
    let masks = shared_masks(mlp, v, b, rng);
    let noise = mlp.heteroscedastic.then(|| {
        Array3::from_shape_fn((b * v, mlp.mc_loss_samples, N_CLASSES), |_| rng.sample(StandardNormal))
    });
    let item = (0..b).flat_map(|bi| std::iter::repeat_n(bi, v)).collect();
    Ok(Some(Problem {
        input: BatchInput {
            x,
            item,
            params: batch.items.iter().map(|i| i.params).collect(),
        },
        labels,
        masks: Some(masks),
        noise,
        strat_positions: (cfg.mode.stratified() && b >= 2).then_some(v),
    }))
}

/// Momentum SGD: `v <- mu v - lr g; w <- w + v`.
pub fn sgd_step(weights: &mut ModelWeights, velocity: &mut ModelWeights, grads: &ModelWeights, lr: f64, momentum: f64) {
    let g = grads.tensors();
    for ((_, w), ((_, vel), (_, gt))) in weights
        .tensors_mut()
        .into_iter()
        .zip(velocity.tensors_mut().into_iter().zip(g))
    {
        for ((wi, vi), gi) in w.iter_mut().zip(vel.iter_mut()).zip(gt) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
}

/// Trains until the validation metric has not improved for `patience`
/// epochs and returns the best-validation model.
pub fn train(cfg: &TrainConfig, train: &[LabelledSubject], val: &[LabelledSubject]) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(format!(
            "need training and validation subjects, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mlp = cfg.model_config();
    let mut model = Model::new(mlp.clone(), &mut rng_for(cfg.seed, &[1]))?;
    let mut rng = rng_for(cfg.seed, &[2]);
    let source = if cfg.mode.on_the_fly() {
        ParamSource::Range(cfg.train_range.clone())
    } else {
        ParamSource::Fixed(cfg.train_range.pregenerated(cfg.n_pregenerated, &mut rng_for(cfg.seed, &[3]))?)
    };
    let val_params = cfg.val_range.pregenerated(cfg.n_val_params, &mut rng_for(cfg.seed, &[4]))?;

    let mut velocity = model.weights.zeros_like();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ModelWeights)> = None;
    let mut waited = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut acc = [0f64; 3];
        let mut steps = 0usize;
        for step in 1..=cfg.steps_per_epoch {
            let subject = &train[rng.random_range(0..train.len())];
            let Some(problem) = training_problem(cfg, &mlp, subject, &source, &mut rng)? else {
                continue;
            };
            let (terms, grads) = match loss_and_grad(&model, &problem) {
                Ok(r) => r,
                Err(Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_)) => {
                    return Err(Error::Diverged { epoch, step })
                }
                Err(e) => return Err(e),
            };
            if !terms.total.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            sgd_step(&mut model.weights, &mut velocity, &grads, cfg.learning_rate, cfg.momentum);
            acc[0] += terms.segmentation;
            acc[1] += terms.stratification;
            acc[2] += terms.total;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let scores = validate_model(&model, val, &val_params)?;
        let improved = best.as_ref().is_none_or(|(m, _)| scores.metric > *m);
        log.epochs.push(EpochRecord {
            epoch,
            loss: LossTerms {
                segmentation: acc[0] / k,
                stratification: acc[1] / k,
                total: acc[2] / k,
            },
            val: scores,
            improved,
        });
        if improved {
            best = Some((scores.metric, model.weights.clone()));
            log.best_epoch = epoch;
            waited = 0;
        } else {
            waited += 1;
            if waited >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, w)) = best {
        model.weights = w;
    }
    Ok((model, log))
}
