//! Voxelwise physics-conditioned segmenter.
//!
//! Each voxel is classified from its 3x3x3 intensity neighbourhood. A small
//! embedding of the sequence parameters is concatenated to the input and
//! again to the input of the last hidden layer. Dropout after every hidden
//! layer doubles as the Monte-Carlo sampler at inference, and an optional
//! softplus head predicts a per-voxel logit noise scale.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    intensity_scale, predict, predict_mpm, train, validate_model, EpochRecord, LabelledSubject, McConfig, TrainConfig,
    TrainLog, TrainMode,
};

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::SequenceParams;
use crate::volumes::Grid3;

pub const NEIGHBOURHOOD: usize = 27;
pub const EMBED_INPUTS: usize = 7;
pub const EMBED_WIDTH: usize = 40;
pub const N_CLASSES: usize = 3;
/// Lower bound on the predicted noise scale.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Order of the embedding input vector.
pub const EMBED_SCHEMA: [&str; EMBED_INPUTS] = ["is_mprage", "is_spgr", "ti", "ptd", "tr", "te", "fa"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    /// Dropout rate after each hidden layer.
    pub dropout: Vec<f64>,
    /// Feed the physics embedding; when false a zero embedding is used.
    pub physics: bool,
    pub heteroscedastic: bool,
    /// Noise draws per voxel in the attenuated loss.
    pub mc_loss_samples: usize,
    pub lambda_strat: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 48],
            dropout: vec![0.05, 0.5, 0.5],
            physics: true,
            heteroscedastic: false,
            mc_loss_samples: 10,
            lambda_strat: 0.1,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(format!("hidden widths must be >= 1: {:?}", self.hidden)));
        }
        if self.dropout.len() != self.hidden.len() {
            return Err(Error::InvalidParameter(format!(
                "{} dropout rates for {} hidden layers",
                self.dropout.len(),
                self.hidden.len()
            )));
        }
        if let Some(p) = self.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::InvalidParameter(format!("dropout rate {p} outside [0, 1)")));
        }
        if self.mc_loss_samples == 0 {
            return Err(Error::InvalidParameter("mc_loss_samples must be >= 1".into()));
        }
        if !(self.lambda_strat >= 0.0) {
            return Err(Error::InvalidParameter(format!("lambda_strat {} < 0", self.lambda_strat)));
        }
        Ok(())
    }

    fn layer_inputs(&self) -> Vec<usize> {
        let l = self.hidden.len();
        (0..l)
            .map(|i| match i {
                0 => NEIGHBOURHOOD + EMBED_WIDTH,
                _ if i == l - 1 => self.hidden[i - 1] + EMBED_WIDTH,
                _ => self.hidden[i - 1],
            })
            .collect()
    }

    pub fn penultimate_width(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

/// Fully connected layer, `y = x W + b` with `W` stored inputs x outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let sd = (2.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("positive sd");
        Self {
            w: Array2::from_shape_fn((inputs, outputs), |_| normal.sample(rng)),
            b: Array1::zeros(outputs),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn shape(&self) -> (usize, usize) {
        self.w.dim()
    }
}

/// Every trainable tensor. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: [Dense; 2],
    pub hidden: Vec<Dense>,
    pub out: Dense,
    pub sigma: Dense,
}

impl ModelWeights {
    pub fn init<R: Rng + ?Sized>(config: &MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = [
            Dense::he(EMBED_INPUTS, EMBED_WIDTH, rng),
            Dense::he(EMBED_WIDTH, EMBED_WIDTH, rng),
        ];
        let hidden = config
            .layer_inputs()
            .into_iter()
            .zip(&config.hidden)
            .map(|(i, &o)| Dense::he(i, o, rng))
            .collect();
        let p = config.penultimate_width();
        let out = Dense::he(p, N_CLASSES, rng);
        let mut sigma = Dense::he(p, 1, rng);
        sigma.w.mapv_inplace(|v| 0.1 * v);
        sigma.b.fill(-3.0);
        Ok(Self { embed, hidden, out, sigma })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| {
            let (i, o) = d.shape();
            Dense::zeros(i, o)
        };
        Self {
            embed: [z(&self.embed[0]), z(&self.embed[1])],
            hidden: self.hidden.iter().map(z).collect(),
            out: z(&self.out),
            sigma: z(&self.sigma),
        }
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut v = vec![("embed.0".to_string(), &self.embed[0]), ("embed.1".to_string(), &self.embed[1])];
        v.extend(self.hidden.iter().enumerate().map(|(i, d)| (format!("hidden.{i}"), d)));
        v.push(("out".into(), &self.out));
        v.push(("sigma".into(), &self.sigma));
        v
    }

    fn layers_mut(&mut self) -> Vec<(String, &mut Dense)> {
        let mut v: Vec<(String, &mut Dense)> = Vec::new();
        let [e0, e1] = &mut self.embed;
        v.push(("embed.0".into(), e0));
        v.push(("embed.1".into(), e1));
        v.extend(self.hidden.iter_mut().enumerate().map(|(i, d)| (format!("hidden.{i}"), d)));
        v.push(("out".into(), &mut self.out));
        v.push(("sigma".into(), &mut self.sigma));
        v
    }

    /// Named flat views of every tensor, weights before biases.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(n, d)| {
                [
                    (format!("{n}.w"), d.w.as_slice().expect("standard layout")),
                    (format!("{n}.b"), d.b.as_slice().expect("standard layout")),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(n, d)| {
                [
                    (format!("{n}.w"), d.w.as_slice_mut().expect("standard layout")),
                    (format!("{n}.b"), d.b.as_slice_mut().expect("standard layout")),
                ]
            })
            .collect()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|(n, d)| {
                let (i, o) = d.shape();
                [(format!("{n}.w"), vec![i, o]), (format!("{n}.b"), vec![o])]
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("non-finite weight in {name}")));
            }
        }
        Ok(())
    }

    fn check_shapes(&self, config: &MlpConfig) -> Result<()> {
        if expected_shapes(config) != self.shapes() {
            return Err(Error::DimMismatch("weight shapes do not match the configuration".into()));
        }
        Ok(())
    }
}

/// Tensor names and shapes implied by a configuration, in payload order.
pub fn expected_shapes(config: &MlpConfig) -> Vec<(String, Vec<usize>)> {
    let mut dims = vec![
        ("embed.0".to_string(), EMBED_INPUTS, EMBED_WIDTH),
        ("embed.1".to_string(), EMBED_WIDTH, EMBED_WIDTH),
    ];
    for (i, (inp, &o)) in config.layer_inputs().into_iter().zip(&config.hidden).enumerate() {
        dims.push((format!("hidden.{i}"), inp, o));
    }
    let p = config.penultimate_width();
    dims.push(("out".into(), p, N_CLASSES));
    dims.push(("sigma".into(), p, 1));
    dims.into_iter()
        .flat_map(|(n, i, o)| [(format!("{n}.w"), vec![i, o]), (format!("{n}.b"), vec![o])])
        .collect()
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: MlpConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        let weights = ModelWeights::init(&config, rng)?;
        Ok(Self { config, weights })
    }

    pub fn from_parts(config: MlpConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        weights.check_finite()?;
        Ok(Self { config, weights })
    }
}

/// Embedding input for one acquisition, each entry scaled by the
/// out-of-distribution maximum of its parameter.
pub fn embed_input(params: &SequenceParams) -> [f64; EMBED_INPUTS] {
    match params {
        SequenceParams::Mprage(m) => [1.0, 0.0, m.ti_ms / 2000.0, m.ptd_ms / 2000.0, m.tr_ms() / 4000.0, 0.0, 0.0],
        SequenceParams::Spgr(p) => [0.0, 1.0, 0.0, 0.0, p.tr_ms / 200.0, p.te_ms / 20.0, p.fa_deg / 90.0],
    }
}

/// The 27 intensities around `index`, z outermost and x innermost.
pub fn featurize(patch: &Grid3, index: [usize; 3]) -> Result<[f64; NEIGHBOURHOOD]> {
    let d = patch.dims();
    for a in 0..3 {
        if index[a] == 0 || index[a] + 1 >= d[a] {
            return Err(Error::OutOfBounds(format!(
                "voxel {index:?} has no 1-voxel margin in patch {d:?}"
            )));
        }
    }
    let mut f = [0f64; NEIGHBOURHOOD];
    let mut k = 0;
    for z in index[2] - 1..=index[2] + 1 {
        for y in index[1] - 1..=index[1] + 1 {
            for x in index[0] - 1..=index[0] + 1 {
                f[k] = patch.get(x, y, z) as f64;
                k += 1;
            }
        }
    }
    Ok(f)
}

/// Like [`featurize`] but reads zeros outside the grid.
pub(crate) fn featurize_padded(img: &Grid3, index: [usize; 3], scale: f64, out: &mut [f64]) {
    let d = img.dims();
    let data = img.data();
    let mut k = 0;
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let c = [index[0] as i64 + dx, index[1] as i64 + dy, index[2] as i64 + dz];
                let inside = (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < d[a]);
                out[k] = if inside {
                    data[c[0] as usize + d[0] * (c[1] as usize + d[1] * c[2] as usize)] as f64 * scale
                } else {
                    0.0
                };
                k += 1;
            }
        }
    }
}

/// Inverted-dropout multipliers, one matrix per hidden layer (rows x width).
pub type DropoutMasks = Vec<Array2<f64>>;

/// Independent masks for every row.
pub fn sample_masks<R: Rng + ?Sized>(config: &MlpConfig, rows: usize, rng: &mut R) -> DropoutMasks {
    config
        .hidden
        .iter()
        .zip(&config.dropout)
        .map(|(&w, &p)| {
            let keep = 1.0 / (1.0 - p);
            Array2::from_shape_fn((rows, w), |_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
        })
        .collect()
}

/// Masks drawn once per voxel position and repeated for each of `items`
/// batch elements; row `b * positions + v` shares the mask of position `v`.
pub fn shared_masks<R: Rng + ?Sized>(config: &MlpConfig, positions: usize, items: usize, rng: &mut R) -> DropoutMasks {
    sample_masks(config, positions, rng)
        .into_iter()
        .map(|m| {
            let views: Vec<_> = (0..items).map(|_| m.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same widths")
        })
        .collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inputs for a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchInput {
    /// Neighbourhood features, one row per voxel.
    pub x: Array2<f64>,
    /// Index into `params` for every row.
    pub item: Vec<usize>,
    pub params: Vec<SequenceParams>,
}

impl BatchInput {
    pub fn single(features: &[f64; NEIGHBOURHOOD], params: SequenceParams) -> Self {
        Self {
            x: Array2::from_shape_vec((1, NEIGHBOURHOOD), features.to_vec()).expect("27 features"),
            item: vec![0],
            params: vec![params],
        }
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    fn validate(&self) -> Result<()> {
        if self.x.ncols() != NEIGHBOURHOOD || self.item.len() != self.x.nrows() {
            return Err(Error::DimMismatch(format!(
                "features {:?} with {} item indices",
                self.x.dim(),
                self.item.len()
            )));
        }
        if let Some(&i) = self.item.iter().find(|&&i| i >= self.params.len()) {
            return Err(Error::OutOfBounds(format!("item {i} of {}", self.params.len())));
        }
        Ok(())
    }
}

/// Batched forward outputs.
#[derive(Debug, Clone)]
pub struct Output {
    pub logits: Array2<f64>,
    pub sigma: Array1<f64>,
    /// Last hidden layer activations before dropout.
    pub penultimate: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    item: Vec<usize>,
    p: Array2<f64>,
    u: Array2<f64>,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Option<DropoutMasks>,
    head_in: Array2<f64>,
    s: Array1<f64>,
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer))
    }
}

fn concat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same row count")
}

/// Batched forward pass. Layer indices in errors: 0 embedding, 1..=L hidden,
/// L+1 heads.
pub fn forward_batch(model: &Model, input: &BatchInput, masks: Option<&DropoutMasks>) -> Result<(Output, ForwardCache)> {
    input.validate()?;
    let cfg = &model.config;
    let w = &model.weights;
    let n = input.rows();
    let l = cfg.hidden.len();
    if let Some(m) = masks {
        if m.len() != l || m.iter().zip(&cfg.hidden).any(|(m, &h)| m.dim() != (n, h)) {
            return Err(Error::DimMismatch("dropout masks do not match the batch".into()));
        }
    }

    let k = input.params.len();
    let mut p = Array2::zeros((k, EMBED_INPUTS));
    for (i, prm) in input.params.iter().enumerate() {
        p.row_mut(i).assign(&Array1::from(embed_input(prm).to_vec()));
    }
    let (u, e_rows) = if cfg.physics {
        let u = w.embed[0].apply(&p).mapv(f64::tanh);
        let e = w.embed[1].apply(&u);
        check_finite(&e, 0)?;
        let mut rows = Array2::zeros((n, EMBED_WIDTH));
        for (r, &it) in input.item.iter().enumerate() {
            rows.row_mut(r).assign(&e.row(it));
        }
        (u, rows)
    } else {
        (Array2::zeros((k, EMBED_WIDTH)), Array2::zeros((n, EMBED_WIDTH)))
    };

    let mut inputs = Vec::with_capacity(l);
    let mut pre = Vec::with_capacity(l);
    let mut prev = Array2::zeros((0, 0));
    let mut penultimate = Array2::zeros((0, 0));
    for i in 0..l {
        let inp = if i == 0 {
            concat(&input.x, &e_rows)
        } else if i == l - 1 {
            concat(&prev, &e_rows)
        } else {
            prev
        };
        let a = w.hidden[i].apply(&inp);
        check_finite(&a, i + 1)?;
        let h = a.mapv(|v| v.max(0.0));
        prev = match masks {
            Some(m) => &h * &m[i],
            None => h.clone(),
        };
        if i == l - 1 {
            penultimate = h;
        }
        inputs.push(inp);
        pre.push(a);
    }
    let head_in = prev;
    let logits = w.out.apply(&head_in);
    check_finite(&logits, l + 1)?;
    let s = w.sigma.apply(&head_in).column(0).to_owned();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation(l + 1));
    }
    let sigma = s.mapv(|v| softplus(v).max(SIGMA_FLOOR));
    Ok((
        Output { logits, sigma, penultimate },
        ForwardCache {
            item: input.item.clone(),
            p,
            u,
            inputs,
            pre,
            masks: masks.cloned(),
            head_in,
            s,
        },
    ))
}

/// Single-voxel forward pass: (logits, sigma, penultimate activations).
pub fn forward(
    model: &Model,
    features: &[f64; NEIGHBOURHOOD],
    params: &SequenceParams,
    masks: Option<&DropoutMasks>,
) -> Result<([f64; N_CLASSES], f64, Vec<f64>)> {
    let (o, _) = forward_batch(model, &BatchInput::single(features, *params), masks)?;
    let l = o.logits.row(0);
    Ok(([l[0], l[1], l[2]], o.sigma[0], o.penultimate.row(0).to_vec()))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Attenuated cross-entropy for fixed standard-normal draws `eps` (one
/// 3-vector per draw). Returns the loss and its gradients with respect to
/// the logits and sigma.
pub fn heteroscedastic_with_noise(
    logits: &[f64; N_CLASSES],
    sigma: f64,
    label: usize,
    eps: &[[f64; N_CLASSES]],
) -> (f64, [f64; N_CLASSES], f64) {
    let t = eps.len();
    let mut neg_ce = Vec::with_capacity(t);
    let mut probs = Vec::with_capacity(t);
    for e in eps {
        let x: Vec<f64> = (0..N_CLASSES).map(|c| logits[c] + sigma * e[c]).collect();
        neg_ce.push(-cross_entropy(&x, label));
        probs.push(softmax(&x));
    }
    let lse = log_sum_exp(&neg_ce);
    let loss = (t as f64).ln() - lse;
    let mut dl = [0f64; N_CLASSES];
    let mut ds = 0.0;
    for i in 0..t {
        let wt = (neg_ce[i] - lse).exp();
        for c in 0..N_CLASSES {
            let g = wt * (probs[i][c] - (c == label) as u8 as f64);
            dl[c] += g;
            ds += g * eps[i][c];
        }
    }
    (loss, dl, ds)
}

/// `-log(mean_t exp(-CE_t))` over `t` noisy copies of the logits.
pub fn loss_heteroscedastic<R: Rng + ?Sized>(
    logits: &[f64; N_CLASSES],
    sigma: f64,
    label: usize,
    t: usize,
    rng: &mut R,
) -> f64 {
    let eps: Vec<[f64; N_CLASSES]> = (0..t.max(1))
        .map(|_| [0; N_CLASSES].map(|_| StandardNormal.sample(rng)))
        .collect();
    heteroscedastic_with_noise(logits, sigma.max(SIGMA_FLOOR), label, &eps).0
}

/// Per-element mean squared deviation of each vector from the batch mean.
/// Batches of fewer than two vectors give 0.
pub fn loss_stratification(penultimates: &[Vec<f64>]) -> f64 {
    let b = penultimates.len();
    if b < 2 {
        return 0.0;
    }
    let d = penultimates[0].len();
    let mean: Vec<f64> = (0..d).map(|j| penultimates.iter().map(|v| v[j]).sum::<f64>() / b as f64).collect();
    let ss: f64 = penultimates
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
        .sum();
    ss / (b * d) as f64
}

/// Segmentation term plus weighted stratification term.
pub fn total_loss(segmentation: f64, stratification: f64, lambda_strat: f64) -> f64 {
    segmentation + lambda_strat * stratification
}

/// A fully specified objective: fixed inputs, labels, dropout and noise.
#[derive(Debug, Clone)]
pub struct Problem {
    pub input: BatchInput,
    pub labels: Vec<usize>,
    pub masks: Option<DropoutMasks>,
    /// Standard-normal draws, rows x T x 3; required when the model is
    /// heteroscedastic.
    pub noise: Option<Array3<f64>>,
    /// Number of voxel positions per item when rows are laid out
    /// item-major; enables the stratification term.
    pub strat_positions: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub segmentation: f64,
    pub stratification: f64,
    pub total: f64,
}

fn stratification_batch(h: &Array2<f64>, positions: usize) -> Result<(f64, Array2<f64>)> {
    let (n, d) = h.dim();
    if positions == 0 || n % positions != 0 {
        return Err(Error::DimMismatch(format!("{n} rows do not split into {positions} positions")));
    }
    let b = n / positions;
    let mut grad = Array2::zeros((n, d));
    if b < 2 {
        return Ok((0.0, grad));
    }
    let norm = (positions * b * d) as f64;
    let mut total = 0.0;
    for v in 0..positions {
        let mut mean = Array1::<f64>::zeros(d);
        for bi in 0..b {
            mean += &h.row(bi * positions + v);
        }
        mean /= b as f64;
        for bi in 0..b {
            let r = bi * positions + v;
            let dev = &h.row(r) - &mean;
            total += dev.iter().map(|x| x * x).sum::<f64>();
            grad.row_mut(r).assign(&(dev * (2.0 / norm)));
        }
    }
    Ok((total / norm, grad))
}

fn segmentation_terms(model: &Model, problem: &Problem, out: &Output) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let n = problem.input.rows();
    if problem.labels.len() != n {
        return Err(Error::DimMismatch(format!("{} labels for {n} rows", problem.labels.len())));
    }
    let mut dlogits = Array2::zeros((n, N_CLASSES));
    let mut dsigma = Array1::zeros(n);
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    let noise = if model.config.heteroscedastic {
        let z = problem
            .noise
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("heteroscedastic loss needs noise draws".into()))?;
        if z.dim().0 != n || z.dim().2 != N_CLASSES || z.dim().1 == 0 {
            return Err(Error::DimMismatch(format!("noise {:?} for {n} rows", z.dim())));
        }
        Some(z)
    } else {
        None
    };
    for r in 0..n {
        let lab = problem.labels[r];
        if lab >= N_CLASSES {
            return Err(Error::OutOfBounds(format!("label {lab}")));
        }
        let lg = out.logits.row(r);
        let logits = [lg[0], lg[1], lg[2]];
        match noise {
            Some(z) => {
                let eps: Vec<[f64; N_CLASSES]> = z
                    .slice(s![r, .., ..])
                    .outer_iter()
                    .map(|e| [e[0], e[1], e[2]])
                    .collect();
                let (l, dl, ds) = heteroscedastic_with_noise(&logits, out.sigma[r], lab, &eps);
                total += l;
                for c in 0..N_CLASSES {
                    dlogits[[r, c]] = dl[c] * inv;
                }
                dsigma[r] = ds * inv;
            }
            None => {
                total += cross_entropy(&logits, lab);
                let p = softmax(&logits);
                for c in 0..N_CLASSES {
                    dlogits[[r, c]] = (p[c] - (c == lab) as u8 as f64) * inv;
                }
            }
        }
    }
    Ok((total * inv, dlogits, dsigma))
}

/// Loss terms without gradients.
pub fn evaluate_loss(model: &Model, problem: &Problem) -> Result<LossTerms> {
    let (out, _) = forward_batch(model, &problem.input, problem.masks.as_ref())?;
    let (seg, _, _) = segmentation_terms(model, problem, &out)?;
    let strat = match problem.strat_positions {
        Some(v) => stratification_batch(&out.penultimate, v)?.0,
        None => 0.0,
    };
    Ok(LossTerms {
        segmentation: seg,
        stratification: strat,
        total: total_loss(seg, strat, model.config.lambda_strat),
    })
}

/// Loss terms and the gradient of the total with respect to every weight.
pub fn loss_and_grad(model: &Model, problem: &Problem) -> Result<(LossTerms, ModelWeights)> {
    let (out, cache) = forward_batch(model, &problem.input, problem.masks.as_ref())?;
    let (seg, dlogits, dsigma) = segmentation_terms(model, problem, &out)?;
    let (strat, dpen) = match problem.strat_positions {
        Some(v) => {
            let (s, g) = stratification_batch(&out.penultimate, v)?;
            (s, Some(g * model.config.lambda_strat))
        }
        None => (0.0, None),
    };
    let grads = backward(model, &cache, &dlogits, &dsigma, dpen.as_ref())?;
    Ok((
        LossTerms {
            segmentation: seg,
            stratification: strat,
            total: total_loss(seg, strat, model.config.lambda_strat),
        },
        grads,
    ))
}

fn accumulate(g: &mut Dense, input: &Array2<f64>, delta: &Array2<f64>) {
    g.w = input.t().dot(delta);
    g.b = delta.sum_axis(Axis(0));
}

/// Backpropagate output gradients through a cached forward pass.
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
    dsigma: &Array1<f64>,
    dpenultimate: Option<&Array2<f64>>,
) -> Result<ModelWeights> {
    let cfg = &model.config;
    let w = &model.weights;
    let l = cfg.hidden.len();
    let n = cache.head_in.nrows();
    let mut g = w.zeros_like();

    accumulate(&mut g.out, &cache.head_in, dlogits);
    let mut dhead = dlogits.dot(&w.out.w.t());
    if cfg.heteroscedastic {
        let ds: Array1<f64> = cache
            .s
            .iter()
            .zip(dsigma)
            .map(|(&s, &d)| if softplus(s) > SIGMA_FLOOR { d * sigmoid(s) } else { 0.0 })
            .collect();
        let ds = ds.insert_axis(Axis(1));
        accumulate(&mut g.sigma, &cache.head_in, &ds);
        dhead += &ds.dot(&w.sigma.w.t());
    }

    let mut de_rows = Array2::<f64>::zeros((n, EMBED_WIDTH));
    let mut d_out = dhead;
    for i in (0..l).rev() {
        let mut dpost = match &cache.masks {
            Some(m) => &d_out * &m[i],
            None => d_out.clone(),
        };
        if i == l - 1 {
            if let Some(dp) = dpenultimate {
                dpost += dp;
            }
        }
        let dpre = ndarray::Zip::from(&dpost)
            .and(&cache.pre[i])
            .map_collect(|&d, &a| if a > 0.0 { d } else { 0.0 });
        accumulate(&mut g.hidden[i], &cache.inputs[i], &dpre);
        let din = dpre.dot(&w.hidden[i].w.t());
        let has_embed = i == 0 || i == l - 1;
        let split = if has_embed { din.ncols() - EMBED_WIDTH } else { din.ncols() };
        if has_embed {
            de_rows += &din.slice(s![.., split..]);
        }
        if i > 0 {
            d_out = if has_embed { din.slice(s![.., ..split]).to_owned() } else { din };
        }
    }

    if cfg.physics {
        let k = cache.p.nrows();
        let mut de = Array2::<f64>::zeros((k, EMBED_WIDTH));
        for (r, &it) in cache.item.iter().enumerate() {
            let mut row = de.row_mut(it);
            row += &de_rows.row(r);
        }
        accumulate(&mut g.embed[1], &cache.u, &de);
        let du = de.dot(&w.embed[1].w.t());
        let dpre = &du * &cache.u.mapv(|v| 1.0 - v * v);
        accumulate(&mut g.embed[0], &cache.p, &dpre);
    }

    for (name, t) in g.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests;
