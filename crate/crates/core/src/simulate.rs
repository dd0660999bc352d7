//! Static-equation MR signal simulation and the training-time augmentation
//! layer.
//!
//! Signals are evaluated in 64-bit and stored as 32-bit grids. MPRAGE values
//! keep their sign below the inversion null point.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{extract_patch, Grid3, MpmVolume, SoftSegmentation};

/// Maximum number of redraws before `sample_params` gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Mprage,
    Spgr,
}

impl SequenceKind {
    pub fn name(self) -> &'static str {
        match self {
            SequenceKind::Mprage => "mprage",
            SequenceKind::Spgr => "spgr",
        }
    }
}

impl std::str::FromStr for SequenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mprage" => Ok(SequenceKind::Mprage),
            "spgr" => Ok(SequenceKind::Spgr),
            other => Err(Error::InvalidParameter(format!("unknown sequence '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mprage {
    pub ti_ms: f64,
    /// Pseudo delay: delay time plus echo spacing, so that TR = TI + pTD.
    pub ptd_ms: f64,
    pub gain: f64,
}

impl Mprage {
    pub fn tr_ms(&self) -> f64 {
        self.ti_ms + self.ptd_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spgr {
    pub tr_ms: f64,
    pub te_ms: f64,
    pub fa_deg: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sequence", rename_all = "lowercase")]
pub enum SequenceParams {
    Mprage(Mprage),
    Spgr(Spgr),
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

impl SequenceParams {
    /// Compact CSV-safe label, e.g. `ti=900;ptd=800`.
    pub fn describe(&self) -> String {
        match self {
            SequenceParams::Mprage(m) => format!("ti={};ptd={}", m.ti_ms, m.ptd_ms),
            SequenceParams::Spgr(s) => format!("tr={};te={};fa={}", s.tr_ms, s.te_ms, s.fa_deg),
        }
    }

    pub fn mprage(ti_ms: f64, ptd_ms: f64) -> Result<Self> {
        Self::Mprage(Mprage { ti_ms, ptd_ms, gain: 1.0 }).validated()
    }

    pub fn spgr(tr_ms: f64, te_ms: f64, fa_deg: f64) -> Result<Self> {
        Self::Spgr(Spgr { tr_ms, te_ms, fa_deg, gain: 1.0 }).validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SequenceParams::Mprage(p) => {
                positive("ti_ms", p.ti_ms)?;
                positive("ptd_ms", p.ptd_ms)?;
                positive("gain", p.gain)
            }
            SequenceParams::Spgr(p) => {
                positive("tr_ms", p.tr_ms)?;
                positive("te_ms", p.te_ms)?;
                positive("gain", p.gain)?;
                if !(p.fa_deg > 0.0 && p.fa_deg < 180.0) {
                    return Err(Error::InvalidParameter(format!(
                        "fa_deg must lie in (0, 180), got {}",
                        p.fa_deg
                    )));
                }
                if p.te_ms >= p.tr_ms {
                    return Err(Error::InvalidParameter(format!(
                        "te_ms ({}) must be below tr_ms ({})",
                        p.te_ms, p.tr_ms
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn kind(&self) -> SequenceKind {
        match self {
            SequenceParams::Mprage(_) => SequenceKind::Mprage,
            SequenceParams::Spgr(_) => SequenceKind::Spgr,
        }
    }

    pub fn gain(&self) -> f64 {
        match self {
            SequenceParams::Mprage(p) => p.gain,
            SequenceParams::Spgr(p) => p.gain,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        match &mut self {
            SequenceParams::Mprage(p) => p.gain = gain,
            SequenceParams::Spgr(p) => p.gain = gain,
        }
        self
    }

    pub fn tr_ms(&self) -> f64 {
        match self {
            SequenceParams::Mprage(p) => p.tr_ms(),
            SequenceParams::Spgr(p) => p.tr_ms,
        }
    }

    /// Signal for a single voxel's quantitative values.
    pub fn signal(&self, t1_ms: f64, t2s_ms: f64, pd: f64) -> Result<f64> {
        match self {
            SequenceParams::Mprage(p) => signal_mprage(t1_ms, pd, p),
            SequenceParams::Spgr(p) => signal_spgr(t1_ms, t2s_ms, pd, p),
        }
    }
}

/// MPRAGE static signal written in terms of TR = TI + pTD:
/// `G·PD·(1 − 2·e^(−TI/T1) / (1 + e^(−TR/T1)))`.
pub fn signal_mprage(t1_ms: f64, pd: f64, params: &Mprage) -> Result<f64> {
    positive("t1_ms", t1_ms)?;
    Ok(mprage_with_tr(t1_ms, pd, params.ti_ms, params.tr_ms(), params.gain))
}

#[inline]
pub fn mprage_with_tr(t1_ms: f64, pd: f64, ti_ms: f64, tr_ms: f64, gain: f64) -> f64 {
    gain * pd * (1.0 - 2.0 * (-ti_ms / t1_ms).exp() / (1.0 + (-tr_ms / t1_ms).exp()))
}

/// MPRAGE in its original form with separate delay and echo-spacing times.
#[inline]
pub fn mprage_with_delays(t1_ms: f64, pd: f64, ti_ms: f64, td_ms: f64, tau_ms: f64, gain: f64) -> f64 {
    gain * pd * (1.0 - 2.0 * (-ti_ms / t1_ms).exp() / (1.0 + (-(ti_ms + td_ms + tau_ms) / t1_ms).exp()))
}

/// Spoiled gradient echo static signal.
pub fn signal_spgr(t1_ms: f64, t2s_ms: f64, pd: f64, params: &Spgr) -> Result<f64> {
    positive("t1_ms", t1_ms)?;
    positive("t2s_ms", t2s_ms)?;
    if !(params.fa_deg > 0.0 && params.fa_deg < 180.0) {
        return Err(Error::InvalidParameter(format!(
            "fa_deg must lie in (0, 180), got {}",
            params.fa_deg
        )));
    }
    let theta = params.fa_deg.to_radians();
    let e1 = (-params.tr_ms / t1_ms).exp();
    Ok(params.gain * pd * theta.sin() * (1.0 - e1) / (1.0 - theta.cos() * e1)
        * (-params.te_ms / t2s_ms).exp())
}

/// Applies the matching signal equation inside the mask; zero outside.
pub fn simulate_volume(mpm: &MpmVolume, params: &SequenceParams) -> Result<Grid3> {
    params.validate()?;
    let n = mpm.mask.len();
    let mut out = vec![0f32; n];
    let (t1, t2, pd, mask) = (
        mpm.t1_ms.data(),
        mpm.t2s_ms.data(),
        mpm.pd.data(),
        mpm.mask.data(),
    );
    for i in 0..n {
        if mask[i] > 0.0 {
            out[i] = params.signal(t1[i] as f64, t2[i] as f64, pd[i] as f64)? as f32;
        }
    }
    mpm.mask.with_data(out)
}

/// Scales a simulated image by `1 / (gain · reference_pd)` for presentation
/// to the network. No per-image normalisation is applied.
pub fn present(img: &Grid3, params: &SequenceParams, reference_pd: f64) -> Grid3 {
    let s = (1.0 / (params.gain() * reference_pd)) as f32;
    img.map(|v| v * s)
}

/// Closed sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * rng.random::<f64>()
        }
    }

    /// `n` equally spaced points including both ends.
    pub fn linspace(&self, n: usize) -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![0.5 * (self.lo + self.hi)],
            _ => (0..n)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn check(&self, name: &str, open_hi: Option<f64>) -> Result<()> {
        if !(self.lo <= self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{name} range [{}, {}] is not an interval",
                self.lo, self.hi
            )));
        }
        if self.lo <= 0.0 {
            return Err(Error::InvalidParameter(format!("{name} range must be positive")));
        }
        if let Some(max) = open_hi {
            if self.hi >= max {
                return Err(Error::InvalidParameter(format!("{name} range must stay below {max}")));
            }
        }
        Ok(())
    }
}

/// Box of sequence parameters sampled uniformly and independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sequence", rename_all = "lowercase")]
pub enum ParamRange {
    Mprage {
        ti_ms: Interval,
        ptd_ms: Interval,
        #[serde(default = "unit_gain")]
        gain: Interval,
    },
    Spgr {
        tr_ms: Interval,
        te_ms: Interval,
        fa_deg: Interval,
        #[serde(default = "unit_gain")]
        gain: Interval,
    },
}

fn unit_gain() -> Interval {
    Interval::point(1.0)
}

/// pTD used for MPRAGE studies that only vary TI.
pub const DEFAULT_PTD_MS: f64 = 800.0;

impl ParamRange {
    pub fn mprage(ti: (f64, f64), ptd: (f64, f64)) -> Self {
        ParamRange::Mprage {
            ti_ms: Interval::new(ti.0, ti.1),
            ptd_ms: Interval::new(ptd.0, ptd.1),
            gain: unit_gain(),
        }
    }

    pub fn spgr(tr: (f64, f64), te: (f64, f64), fa: (f64, f64)) -> Self {
        ParamRange::Spgr {
            tr_ms: Interval::new(tr.0, tr.1),
            te_ms: Interval::new(te.0, te.1),
            fa_deg: Interval::new(fa.0, fa.1),
            gain: unit_gain(),
        }
    }

    /// MPRAGE training range: TI 600–1200 ms at fixed pTD.
    pub fn mprage_in_distribution() -> Self {
        Self::mprage((600.0, 1200.0), (DEFAULT_PTD_MS, DEFAULT_PTD_MS))
    }

    /// MPRAGE extrapolation range: TI 100–2000 ms.
    pub fn mprage_out_of_distribution() -> Self {
        Self::mprage((100.0, 2000.0), (DEFAULT_PTD_MS, DEFAULT_PTD_MS))
    }

    /// MPRAGE range varying both TI (600–1200 ms) and pTD (500–1600 ms),
    /// used for multi-site training.
    pub fn mprage_multisite() -> Self {
        Self::mprage((600.0, 1200.0), (500.0, 1600.0))
    }

    pub fn spgr_in_distribution() -> Self {
        Self::spgr((15.0, 100.0), (4.0, 10.0), (15.0, 75.0))
    }

    pub fn spgr_out_of_distribution() -> Self {
        Self::spgr((10.0, 200.0), (2.0, 20.0), (5.0, 90.0))
    }

    pub fn kind(&self) -> SequenceKind {
        match self {
            ParamRange::Mprage { .. } => SequenceKind::Mprage,
            ParamRange::Spgr { .. } => SequenceKind::Spgr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ParamRange::Mprage { ti_ms, ptd_ms, gain } => {
                ti_ms.check("ti_ms", None)?;
                ptd_ms.check("ptd_ms", None)?;
                gain.check("gain", None)
            }
            ParamRange::Spgr { tr_ms, te_ms, fa_deg, gain } => {
                tr_ms.check("tr_ms", None)?;
                te_ms.check("te_ms", None)?;
                fa_deg.check("fa_deg", Some(180.0))?;
                gain.check("gain", None)
            }
        }
    }

    /// Parameters on a fixed grid: equally spaced TIs (MPRAGE, pTD and gain
    /// at their midpoints) or `n` seeded random draws (SPGR).
    pub fn pregenerated<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<SequenceParams>> {
        self.validate()?;
        match self {
            ParamRange::Mprage { ti_ms, ptd_ms, gain } => ti_ms
                .linspace(n)
                .into_iter()
                .map(|ti| {
                    SequenceParams::Mprage(Mprage {
                        ti_ms: ti,
                        ptd_ms: 0.5 * (ptd_ms.lo + ptd_ms.hi),
                        gain: 0.5 * (gain.lo + gain.hi),
                    })
                    .validated()
                })
                .collect(),
            ParamRange::Spgr { .. } => (0..n).map(|_| sample_params(self, rng)).collect(),
        }
    }
}

/// Draws one parameter set uniformly from `range`, redrawing until the
/// joint constraints hold.
pub fn sample_params<R: Rng + ?Sized>(range: &ParamRange, rng: &mut R) -> Result<SequenceParams> {
    range.validate()?;
    match range {
        ParamRange::Mprage { ti_ms, ptd_ms, gain } => SequenceParams::Mprage(Mprage {
            ti_ms: ti_ms.sample(rng),
            ptd_ms: ptd_ms.sample(rng),
            gain: gain.sample(rng),
        })
        .validated(),
        ParamRange::Spgr { tr_ms, te_ms, fa_deg, gain } => {
            for _ in 0..MAX_REJECTIONS {
                let p = SequenceParams::Spgr(Spgr {
                    tr_ms: tr_ms.sample(rng),
                    te_ms: te_ms.sample(rng),
                    fa_deg: fa_deg.sample(rng),
                    gain: gain.sample(rng),
                });
                if p.validate().is_ok() {
                    return Ok(p);
                }
            }
            Err(Error::NoValidSample {
                attempts: MAX_REJECTIONS,
                reason: "TE must be shorter than TR".into(),
            })
        }
    }
}

/// Where training parameters come from: a continuous box or a fixed list
/// of pre-generated acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSource {
    Range(ParamRange),
    Fixed(Vec<SequenceParams>),
}

impl ParamSource {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SequenceParams> {
        match self {
            ParamSource::Range(r) => sample_params(r, rng),
            ParamSource::Fixed(list) => {
                if list.is_empty() {
                    return Err(Error::InvalidParameter("empty parameter list".into()));
                }
                Ok(list[rng.random_range(0..list.len())])
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasFieldConfig {
    pub enabled: bool,
    /// Largest allowed fractional deviation of the multiplicative field.
    pub max_amplitude: f64,
    /// Total polynomial order of the log-field.
    pub order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Standard deviation as a fraction of the mean masked magnitude.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub bias_field: BiasFieldConfig,
    pub noise: NoiseConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            bias_field: BiasFieldConfig {
                enabled: true,
                max_amplitude: 0.1,
                order: 3,
            },
            noise: NoiseConfig {
                enabled: true,
                sigma: 0.02,
            },
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.bias_field.enabled = false;
        c.noise.enabled = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bias_field.max_amplitude >= 0.0 && self.bias_field.max_amplitude < 1.0) {
            return Err(Error::InvalidParameter("bias max_amplitude must lie in [0, 1)".into()));
        }
        if !(self.noise.sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn monomials(order: usize) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for total in 1..=order as u32 {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
    }
    out
}

/// Multiplies the image by `exp(P(x, y, z))` for a random polynomial `P`
/// scaled so that the multiplier stays within `1 ± max_amplitude` inside
/// the mask.
pub fn apply_bias_field<R: Rng + ?Sized>(
    img: &Grid3,
    mask: &Grid3,
    config: &BiasFieldConfig,
    rng: &mut R,
) -> Result<Grid3> {
    if !img.same_shape(mask) {
        return Err(Error::DimMismatch("image vs mask".into()));
    }
    let terms = monomials(config.order);
    let coeffs: Vec<f64> = terms
        .iter()
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let strength: f64 = rng.random();
    if !config.enabled || config.max_amplitude == 0.0 || terms.is_empty() {
        return Ok(img.clone());
    }
    let dims = img.dims();
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut field = vec![0f64; img.len()];
    let (mut lo, mut hi) = (0f64, 0f64);
    for (i, f) in field.iter_mut().enumerate() {
        if mask.data()[i] == 0.0 {
            continue;
        }
        let [x, y, z] = img.coords(i);
        let c = [norm(x, dims[0]), norm(y, dims[1]), norm(z, dims[2])];
        let v: f64 = terms
            .iter()
            .zip(&coeffs)
            .map(|(e, k)| k * c[0].powi(e[0] as i32) * c[1].powi(e[1] as i32) * c[2].powi(e[2] as i32))
            .sum();
        lo = lo.min(v);
        hi = hi.max(v);
        *f = v;
    }
    let a = config.max_amplitude;
    let mut scale = f64::INFINITY;
    if hi > 0.0 {
        scale = scale.min((1.0 + a).ln() / hi);
    }
    if lo < 0.0 {
        scale = scale.min(-(1.0 - a).ln() / -lo);
    }
    if !scale.is_finite() {
        return Ok(img.clone());
    }
    scale *= strength;
    let data = img
        .data()
        .iter()
        .zip(&field)
        .zip(mask.data())
        .map(|((&v, &f), &m)| if m > 0.0 { (v as f64 * (scale * f).exp()) as f32 } else { v })
        .collect();
    img.with_data(data)
}

/// Adds zero-mean Gaussian noise inside the mask with standard deviation
/// `sigma` times the mean masked magnitude.
pub fn apply_noise<R: Rng + ?Sized>(
    img: &Grid3,
    mask: &Grid3,
    config: &NoiseConfig,
    rng: &mut R,
) -> Result<Grid3> {
    if !img.same_shape(mask) {
        return Err(Error::DimMismatch("image vs mask".into()));
    }
    if !config.enabled || config.sigma == 0.0 {
        return Ok(img.clone());
    }
    let (sum, count) = img
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.0)
        .fold((0f64, 0usize), |(s, c), (&v, _)| (s + (v as f64).abs(), c + 1));
    if count == 0 {
        return Ok(img.clone());
    }
    let sd = config.sigma * sum / count as f64;
    let data = img
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if m > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                (v as f64 + sd * e) as f32
            } else {
                v
            }
        })
        .collect();
    img.with_data(data)
}

/// Applies the enabled augmentations in order: bias field, then noise.
pub fn augment<R: Rng + ?Sized>(img: &Grid3, mask: &Grid3, config: &AugmentConfig, rng: &mut R) -> Result<Grid3> {
    let mut out = img.clone();
    if config.bias_field.enabled {
        out = apply_bias_field(&out, mask, &config.bias_field, rng)?;
    }
    if config.noise.enabled {
        out = apply_noise(&out, mask, &config.noise, rng)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BatchItem {
    pub patch: Grid3,
    pub params: SequenceParams,
    pub label_patch: SoftSegmentation,
}

/// A single-subject batch: every item shares the patch location and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub corner: [usize; 3],
    pub mask_patch: Grid3,
    pub items: Vec<BatchItem>,
}

/// Uniformly picks a masked voxel and returns the patch corner centred on
/// it, shifted to lie inside the volume.
pub fn sample_patch_corner<R: Rng + ?Sized>(mask: &Grid3, size: [usize; 3], rng: &mut R) -> Result<[usize; 3]> {
    let dims = mask.dims();
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return Err(Error::OutOfBounds(format!(
            "patch size {size:?} does not fit volume {dims:?}"
        )));
    }
    let inside: Vec<usize> = crate::volumes::mask_indices(mask);
    if inside.is_empty() {
        return Err(Error::EmptyMask);
    }
    let c = mask.coords(inside[rng.random_range(0..inside.len())]);
    let mut corner = [0; 3];
    for a in 0..3 {
        corner[a] = c[a].saturating_sub(size[a] / 2).min(dims[a] - size[a]);
    }
    Ok(corner)
}

/// Builds a single-subject batch of `n` contrasts at one patch location.
pub fn make_batch<R: Rng + ?Sized>(
    mpm: &MpmVolume,
    labels: &SoftSegmentation,
    n: usize,
    patch_size: [usize; 3],
    source: &ParamSource,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<Batch> {
    if n == 0 {
        return Err(Error::InvalidParameter("batch size must be at least 1".into()));
    }
    aug.validate()?;
    let corner = sample_patch_corner(&mpm.mask, patch_size, rng)?;
    let sub = MpmVolume {
        t1_ms: extract_patch(&mpm.t1_ms, corner, patch_size)?,
        t2s_ms: extract_patch(&mpm.t2s_ms, corner, patch_size)?,
        pd: extract_patch(&mpm.pd, corner, patch_size)?,
        mask: extract_patch(&mpm.mask, corner, patch_size)?,
        subject_id: mpm.subject_id.clone(),
        age_years: mpm.age_years,
    };
    let label_patch = labels.extract_patch(corner, patch_size)?;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let params = source.draw(rng)?;
        let clean = simulate_volume(&sub, &params)?;
        let patch = augment(&clean, &sub.mask, aug, rng)?;
        items.push(BatchItem {
            patch,
            params,
            label_patch: label_patch.clone(),
        });
    }
    Ok(Batch {
        corner,
        mask_patch: sub.mask,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mp(ti: f64, ptd: f64) -> Mprage {
        Mprage { ti_ms: ti, ptd_ms: ptd, gain: 1.0 }
    }

    fn sp(tr: f64, te: f64, fa: f64) -> Spgr {
        Spgr { tr_ms: tr, te_ms: te, fa_deg: fa, gain: 1.0 }
    }

    #[test]
    fn mprage_zero_pd_is_zero() {
        for ti in [100.0, 900.0, 2000.0] {
            assert_eq!(signal_mprage(830.0, 0.0, &mp(ti, 800.0)).unwrap(), 0.0);
        }
    }

    #[test]
    fn mprage_long_ti_tends_to_pd() {
        let s = signal_mprage(830.0, 0.7, &mp(1e9, 800.0)).unwrap();
        assert!((s - 0.7).abs() < 1e-12);
    }

    #[test]
    fn mprage_reference_value() {
        // 40-digit evaluation: 0.28070009351501587915968...
        let s = signal_mprage(830.0, 0.7, &mp(900.0, 800.0)).unwrap();
        assert!((s - 0.280_700_093_515_015_9).abs() < 1e-12, "{s}");
    }

    #[test]
    fn mprage_rejects_nonpositive_t1() {
        assert!(signal_mprage(0.0, 0.7, &mp(900.0, 800.0)).is_err());
        assert!(signal_mprage(-5.0, 0.7, &mp(900.0, 800.0)).is_err());
    }

    #[test]
    fn spgr_reference_value() {
        // 40-digit evaluation: 0.03794875368419259980...
        let s = signal_spgr(830.0, 53.0, 0.7, &sp(50.0, 4.0, 90.0)).unwrap();
        assert!((s - 0.037_948_753_684_192_6).abs() < 1e-13, "{s}");
    }

    #[test]
    fn spgr_vanishes_at_small_flip_angle() {
        let s = signal_spgr(830.0, 53.0, 0.7, &sp(50.0, 4.0, 1e-9)).unwrap();
        assert!(s.abs() < 1e-10);
    }

    #[test]
    fn spgr_errors() {
        assert!(signal_spgr(830.0, 0.0, 0.7, &sp(50.0, 4.0, 30.0)).is_err());
        assert!(signal_spgr(0.0, 50.0, 0.7, &sp(50.0, 4.0, 30.0)).is_err());
        assert!(signal_spgr(830.0, 50.0, 0.7, &sp(50.0, 4.0, 180.0)).is_err());
        assert!(signal_spgr(830.0, 50.0, 0.7, &sp(50.0, 4.0, 0.0)).is_err());
    }

    #[test]
    fn spgr_grid_argmax_is_ernst_angle() {
        let (tr, t1) = (50.0, 830.0);
        let mut best = (0.0, f64::MIN);
        let mut fa = 0.01;
        while fa < 180.0 {
            let s = signal_spgr(t1, 60.0, 1.0, &sp(tr, 4.0, fa)).unwrap();
            if s > best.1 {
                best = (fa, s);
            }
            fa += 0.01;
        }
        // arccos(e^(-50/830)) = 19.68859446925435...
        assert!((best.0 - 19.688_594_469).abs() < 0.01, "{best:?}");
    }

    #[test]
    fn delay_form_matches_tr_form_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t1 = 200.0 + 4000.0 * rng.random::<f64>();
            let (ti, td, tau) = (
                100.0 + 1900.0 * rng.random::<f64>(),
                100.0 + 1500.0 * rng.random::<f64>(),
                1.0 + 20.0 * rng.random::<f64>(),
            );
            let a = mprage_with_delays(t1, 0.8, ti, td, tau, 1.0);
            let b = mprage_with_tr(t1, 0.8, ti, ti + td + tau, 1.0);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sample_degenerate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = ParamRange::mprage((900.0, 900.0), (800.0, 800.0));
        for _ in 0..10 {
            match sample_params(&r, &mut rng).unwrap() {
                SequenceParams::Mprage(p) => assert_eq!(p.ti_ms, 900.0),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn sample_ti_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = ParamRange::mprage_in_distribution();
        let n = 100_000;
        let mean = (0..n)
            .map(|_| match sample_params(&r, &mut rng).unwrap() {
                SequenceParams::Mprage(p) => p.ti_ms,
                _ => unreachable!(),
            })
            .sum::<f64>()
            / n as f64;
        // uniform on [600, 1200]: sd = 600 / sqrt(12), standard error sd / sqrt(n)
        let se = 600.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 900.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn sample_unsatisfiable_spgr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ParamRange::spgr((15.0, 40.0), (50.0, 60.0), (10.0, 20.0));
        assert!(matches!(sample_params(&r, &mut rng), Err(Error::NoValidSample { .. })));
    }

    #[test]
    fn sampled_spgr_respects_te_below_tr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = ParamRange::spgr((10.0, 20.0), (2.0, 20.0), (5.0, 90.0));
        for _ in 0..500 {
            let p = sample_params(&r, &mut rng).unwrap();
            assert!(p.validate().is_ok());
        }
    }

    fn box_mask(n: usize) -> Grid3 {
        Grid3::from_fn([n, n, n], [1.0; 3], |x, y, z| {
            if [x, y, z].iter().all(|&c| c >= 2 && c < n - 2) { 1.0 } else { 0.0 }
        })
    }

    #[test]
    fn zero_amplitude_bias_is_identity() {
        let mask = box_mask(12);
        let img = mask.map(|m| m * 0.4);
        let cfg = BiasFieldConfig { enabled: true, max_amplitude: 0.0, order: 3 };
        let out = apply_bias_field(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn bias_ratio_is_bounded_and_seeded() {
        let mask = box_mask(16);
        let img = mask.map(|m| m * 0.5);
        let cfg = BiasFieldConfig { enabled: true, max_amplitude: 0.2, order: 3 };
        for seed in 0..20 {
            let out = apply_bias_field(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let again = apply_bias_field(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(out, again);
            for i in 0..img.len() {
                if mask.data()[i] > 0.0 {
                    let r = out.data()[i] / img.data()[i];
                    assert!(r >= 0.8 - 1e-6 && r <= 1.2 + 1e-6, "{r}");
                }
            }
        }
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let mask = box_mask(8);
        let img = mask.map(|m| m * 0.3);
        let cfg = NoiseConfig { enabled: true, sigma: 0.0 };
        assert_eq!(apply_noise(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), img);
    }

    #[test]
    fn noise_std_matches_target_and_stays_in_mask() {
        let n = 64;
        let mask = Grid3::from_fn([n; 3], [1.0; 3], |x, _, _| if x < 60 { 1.0 } else { 0.0 });
        let img = mask.map(|m| m * 0.5);
        let cfg = NoiseConfig { enabled: true, sigma: 0.1 };
        let out = apply_noise(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let diffs: Vec<f64> = (0..img.len())
            .filter(|&i| mask.data()[i] > 0.0)
            .map(|i| (out.data()[i] - img.data()[i]) as f64)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() < 0.05 * 0.05, "{sd}");
        for i in 0..img.len() {
            if mask.data()[i] == 0.0 {
                assert_eq!(out.data()[i], img.data()[i]);
            }
        }
    }

    fn uniform_mpm(n: usize) -> MpmVolume {
        let mask = box_mask(n);
        MpmVolume::new(
            mask.map(|m| m * 830.0),
            mask.map(|m| m * 53.0),
            mask.map(|m| m * 0.7),
            mask.clone(),
            "u",
            30.0,
        )
        .unwrap()
    }

    #[test]
    fn uniform_mpm_gives_constant_image() {
        let mpm = uniform_mpm(10);
        let img = simulate_volume(&mpm, &SequenceParams::mprage(900.0, 800.0).unwrap()).unwrap();
        let inside: Vec<f32> = (0..img.len())
            .filter(|&i| mpm.mask.data()[i] > 0.0)
            .map(|i| img.data()[i])
            .collect();
        assert!(inside.windows(2).all(|w| w[0] == w[1]));
        assert!((0..img.len()).all(|i| mpm.mask.data()[i] > 0.0 || img.data()[i] == 0.0));
        let again = simulate_volume(&mpm, &SequenceParams::mprage(900.0, 800.0).unwrap()).unwrap();
        assert_eq!(img, again);
    }

    #[test]
    fn gain_doubles_every_voxel() {
        let mpm = uniform_mpm(8);
        let p = SequenceParams::spgr(30.0, 4.0, 20.0).unwrap();
        let a = simulate_volume(&mpm, &p).unwrap();
        let b = simulate_volume(&mpm, &p.with_gain(2.0)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, 2.0 * *x);
        }
    }

    #[test]
    fn white_matter_nulls_at_bisected_ti() {
        // Solve 2 e^(-TI/T1) = 1 + e^(-(TI + pTD)/T1) for T1 = 830, pTD = 800.
        let f = |ti: f64| 2.0 * (-ti / 830.0).exp() - 1.0 - (-(ti + 800.0) / 830.0).exp();
        let (mut lo, mut hi) = (1.0, 5000.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if f(lo) * f(m) <= 0.0 { hi = m } else { lo = m }
        }
        // 40-digit bisection: 399.6861029290143...
        assert!((lo - 399.686_102_929).abs() < 1e-6);
        let n = 8;
        let dims = [n, n, n];
        let mask = Grid3::filled(dims, [1.0; 3], 1.0);
        let t1 = Grid3::from_fn(dims, [1.0; 3], |x, _, _| if x < 4 { 830.0 } else { 4000.0 });
        let pd = Grid3::from_fn(dims, [1.0; 3], |x, _, _| if x < 4 { 0.7 } else { 1.0 });
        let mpm = MpmVolume::new(t1, Grid3::filled(dims, [1.0; 3], 60.0), pd, mask, "n", 1.0).unwrap();
        let img = simulate_volume(&mpm, &SequenceParams::mprage(lo, 800.0).unwrap()).unwrap();
        assert!(img.get(0, 0, 0).abs() < 1e-6);
        assert!(img.get(7, 0, 0).abs() > 0.03);
    }

    fn stripes(n: usize) -> (MpmVolume, SoftSegmentation) {
        let dims = [n; 3];
        let mask = Grid3::filled(dims, [1.0; 3], 1.0);
        let lab = |x: usize| x % 3;
        let t1 = Grid3::from_fn(dims, [1.0; 3], |x, _, _| [4000.0, 1330.0, 830.0][lab(x)]);
        let t2 = Grid3::from_fn(dims, [1.0; 3], |x, _, _| [1500.0, 66.0, 53.0][lab(x)]);
        let pd = Grid3::from_fn(dims, [1.0; 3], |x, _, _| [1.0, 0.82, 0.7][lab(x)]);
        let mpm = MpmVolume::new(t1, t2, pd, mask.clone(), "s", 20.0).unwrap();
        let one_hot = |k| Grid3::from_fn(dims, [1.0; 3], move |x, _, _| if lab(x) == k { 1.0 } else { 0.0 });
        let soft = SoftSegmentation::new([one_hot(0), one_hot(1), one_hot(2)], mask).unwrap();
        (mpm, soft)
    }

    #[test]
    fn batch_shares_location_and_labels() {
        let (mpm, soft) = stripes(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = ParamSource::Range(ParamRange::mprage_in_distribution());
        let b = make_batch(&mpm, &soft, 4, [8, 8, 8], &src, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(b.items.len(), 4);
        for it in &b.items[1..] {
            assert_eq!(it.label_patch, b.items[0].label_patch);
        }
        let single = make_batch(&mpm, &soft, 1, [8, 8, 8], &src, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(single.items.len(), 1);
    }

    #[test]
    fn degenerate_range_gives_identical_patches() {
        let (mpm, soft) = stripes(16);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = ParamSource::Range(ParamRange::mprage((900.0, 900.0), (800.0, 800.0)));
        let b = make_batch(&mpm, &soft, 4, [8, 8, 8], &src, &AugmentConfig::disabled(), &mut rng).unwrap();
        for it in &b.items[1..] {
            assert_eq!(it.patch, b.items[0].patch);
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (mpm, soft) = stripes(16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = ParamSource::Range(ParamRange::mprage_in_distribution());
        assert!(make_batch(&mpm, &soft, 2, [17, 8, 8], &src, &AugmentConfig::disabled(), &mut rng).is_err());
    }

    #[test]
    fn pregenerated_mprage_is_equally_spaced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let list = ParamRange::mprage_in_distribution().pregenerated(11, &mut rng).unwrap();
        let tis: Vec<f64> = list
            .iter()
            .map(|p| match p {
                SequenceParams::Mprage(m) => m.ti_ms,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(tis[0], 600.0);
        assert_eq!(tis[10], 1200.0);
        assert!((tis[5] - 900.0).abs() < 1e-9);
    }

    #[test]
    fn params_round_trip_through_json() {
        let p = SequenceParams::spgr(30.0, 4.0, 20.0).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"sequence\":\"spgr\""));
        assert_eq!(serde_json::from_str::<SequenceParams>(&s).unwrap(), p);
    }
}
