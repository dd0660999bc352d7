//! Physics gold-standard labels: a Gaussian mixture fitted to the masked
//! (T1, T2*, PD) triples, initialised at the tissue literature means so that
//! each component keeps its tissue identity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::TissueParams;
use crate::volumes::{Grid3, HardSegmentation, MpmVolume, SoftSegmentation, Tissue};

/// Variance floor in standardised units.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Components whose weight falls below this are reported as collapsed.
pub const COLLAPSE_WEIGHT: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub tissue: Tissue,
    pub weight: f64,
    /// Mean of (T1 ms, T2* ms, PD).
    pub mean: [f64; 3],
    /// Diagonal covariance in the same units squared.
    pub var: [f64; 3],
}

impl GmmComponent {
    fn log_density(&self, x: &[f64; 3]) -> f64 {
        let mut s = self.weight.ln();
        for c in 0..3 {
            let d = x[c] - self.mean[c];
            s -= 0.5 * (LN_2PI + self.var[c].ln() + d * d / self.var[c]);
        }
        s
    }
}

/// Diagonal-covariance mixture with components tagged by tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueGmm {
    pub components: Vec<GmmComponent>,
}

impl TissueGmm {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Invariant("mixture has no components".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("mixture weights sum to {total}")));
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.weight < 1.0 || self.components.len() == 1) {
                return Err(Error::Invariant(format!("{} weight {} outside (0, 1)", c.tissue, c.weight)));
            }
            if c.var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Invariant(format!("{} has non-positive variance", c.tissue)));
            }
        }
        Ok(())
    }

    /// Posterior tissue probabilities for one voxel, in CSF, GM, WM order.
    pub fn posterior(&self, x: &[f64; 3]) -> [f64; 3] {
        let logs: Vec<f64> = self.components.iter().map(|c| c.log_density(x)).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0f64; 3];
        for (c, l) in self.components.iter().zip(&logs) {
            p[c.tissue.index()] += (l - m).exp();
        }
        let s: f64 = p.iter().sum();
        p.map(|v| v / s)
    }

    /// Weight-summed parameters per tissue (the first component's mean when
    /// a tissue has a single component).
    pub fn tissue_mean(&self, t: Tissue) -> Option<[f64; 3]> {
        let comps: Vec<&GmmComponent> = self.components.iter().filter(|c| c.tissue == t).collect();
        let w: f64 = comps.iter().map(|c| c.weight).sum();
        if comps.is_empty() || w == 0.0 {
            return None;
        }
        let mut m = [0f64; 3];
        for c in comps {
            for k in 0..3 {
                m[k] += c.weight * c.mean[k] / w;
            }
        }
        Some(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub tol: f64,
    pub components_per_tissue: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-8,
            components_per_tissue: 1,
        }
    }
}

/// Fitted mixture plus its convergence record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub gmm: TissueGmm,
    pub iterations: usize,
    /// Log-likelihood (standardised features) evaluated before each M-step.
    pub log_likelihood: Vec<f64>,
}

impl GmmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood.last().unwrap_or(&f64::NAN)
    }
}

struct Standardiser {
    mean: [f64; 3],
    scale: [f64; 3],
}

impl Standardiser {
    fn fit(x: &[[f64; 3]]) -> Self {
        let n = x.len() as f64;
        let mut mean = [0f64; 3];
        let mut scale = [0f64; 3];
        for c in 0..3 {
            mean[c] = chunked_sum(x.iter().map(|v| v[c])) / n;
            let var = chunked_sum(x.iter().map(|v| (v[c] - mean[c]).powi(2))) / n;
            let sd = var.sqrt();
            scale[c] = if sd > 1e-12 * mean[c].abs().max(1.0) { sd } else { 1.0 };
        }
        Self { mean, scale }
    }

    fn apply(&self, v: &[f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|c| (v[c] - self.mean[c]) / self.scale[c])
    }
}

/// Sum in fixed-size chunks so the reduction order is independent of how
/// the caller iterates.
fn chunked_sum(it: impl Iterator<Item = f64>) -> f64 {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    let mut part = 0.0;
    for (i, v) in it.enumerate() {
        part += v;
        if (i + 1) % CHUNK == 0 {
            total += part;
            part = 0.0;
        }
    }
    total + part
}

fn masked_features(mpm: &MpmVolume) -> Vec<[f64; 3]> {
    mpm.mask_indices()
        .into_iter()
        .map(|i| {
            [
                mpm.t1_ms.data()[i] as f64,
                mpm.t2s_ms.data()[i] as f64,
                mpm.pd.data()[i] as f64,
            ]
        })
        .collect()
}

/// EM on the masked voxels of `mpm`.
pub fn fit_gmm(mpm: &MpmVolume, init: &TissueParams, config: &GmmConfig) -> Result<GmmFit> {
    fit_gmm_features(&masked_features(mpm), init, config)
}

/// EM on raw feature triples.
pub fn fit_gmm_features(x_raw: &[[f64; 3]], init: &TissueParams, config: &GmmConfig) -> Result<GmmFit> {
    if x_raw.is_empty() {
        return Err(Error::EmptyMask);
    }
    init.validate()?;
    if config.components_per_tissue == 0 {
        return Err(Error::InvalidParameter("components_per_tissue must be >= 1".into()));
    }
    let st = Standardiser::fit(x_raw);
    let x: Vec<[f64; 3]> = x_raw.iter().map(|v| st.apply(v)).collect();
    let n = x.len() as f64;
    let k_per = config.components_per_tissue;

    let mut comps: Vec<GmmComponent> = Vec::new();
    for t in Tissue::ALL {
        let s = init.get(t);
        let mean = st.apply(&s.mean);
        let sd = [0, 1, 2].map(|c| (s.std[c] / st.scale[c]).max(0.1));
        for j in 0..k_per {
            let off = j as f64 - (k_per as f64 - 1.0) / 2.0;
            comps.push(GmmComponent {
                tissue: t,
                weight: 1.0 / (3 * k_per) as f64,
                mean: [0, 1, 2].map(|c| mean[c] + 0.5 * off * sd[c]),
                var: sd.map(|v| (v * v).max(VARIANCE_FLOOR)),
            });
        }
    }

    let k = comps.len();
    let mut trace = Vec::new();
    let mut resp = vec![0f64; x.len() * k];
    let mut iterations = 0;
    for it in 0..config.max_iters.max(1) {
        // E-step
        let mut ll_terms = Vec::with_capacity(x.len());
        for (i, xi) in x.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut m = f64::NEG_INFINITY;
            for (j, c) in comps.iter().enumerate() {
                row[j] = c.log_density(xi);
                m = m.max(row[j]);
            }
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            for r in row.iter_mut() {
                *r /= s;
            }
            ll_terms.push(m + s.ln());
        }
        let ll = chunked_sum(ll_terms.into_iter());
        iterations = it + 1;
        let converged = trace
            .last()
            .map(|&prev: &f64| ((ll - prev) / prev.abs().max(1e-300)).abs() < config.tol)
            .unwrap_or(false);
        trace.push(ll);
        if converged {
            break;
        }
        // M-step
        for (j, c) in comps.iter_mut().enumerate() {
            let nk = chunked_sum((0..x.len()).map(|i| resp[i * k + j]));
            if nk / n < COLLAPSE_WEIGHT {
                return Err(Error::CollapsedComponent(format!(
                    "{} (component {j}) at iteration {}",
                    c.tissue,
                    it + 1
                )));
            }
            let mut mean = [0f64; 3];
            for ch in 0..3 {
                mean[ch] = chunked_sum((0..x.len()).map(|i| resp[i * k + j] * x[i][ch])) / nk;
            }
            let mut var = [0f64; 3];
            for ch in 0..3 {
                var[ch] = (chunked_sum((0..x.len()).map(|i| resp[i * k + j] * (x[i][ch] - mean[ch]).powi(2)))
                    / nk)
                    .max(VARIANCE_FLOOR);
            }
            c.weight = nk / n;
            c.mean = mean;
            c.var = var;
        }
        let wsum: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= wsum;
        }
    }

    let gmm = TissueGmm {
        components: comps
            .into_iter()
            .map(|c| GmmComponent {
                tissue: c.tissue,
                weight: c.weight,
                mean: [0, 1, 2].map(|ch| c.mean[ch] * st.scale[ch] + st.mean[ch]),
                var: [0, 1, 2].map(|ch| c.var[ch] * st.scale[ch] * st.scale[ch]),
            })
            .collect(),
    };
    Ok(GmmFit {
        gmm,
        iterations,
        log_likelihood: trace,
    })
}

/// Posterior soft labels and their argmax (ties resolve CSF < GM < WM).
pub fn label_pgs(mpm: &MpmVolume, gmm: &TissueGmm) -> Result<(SoftSegmentation, HardSegmentation)> {
    gmm.validate()?;
    let n = mpm.mask.len();
    let mut probs = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    let mut labels = vec![0u8; n];
    for i in mpm.mask_indices() {
        let x = [
            mpm.t1_ms.data()[i] as f64,
            mpm.t2s_ms.data()[i] as f64,
            mpm.pd.data()[i] as f64,
        ];
        let p = gmm.posterior(&x);
        let mut best = 0;
        for k in 1..3 {
            if p[k] > p[best] {
                best = k;
            }
        }
        labels[i] = Tissue::ALL[best].label();
        for k in 0..3 {
            probs[k][i] = p[k] as f32;
        }
    }
    let [a, b, c] = probs;
    let g = |d: Vec<f32>| Grid3::new(mpm.dims(), mpm.spacing(), d);
    let soft = SoftSegmentation::new([g(a)?, g(b)?, g(c)?], mpm.mask.clone())?;
    let hard = HardSegmentation::new(mpm.dims(), mpm.spacing(), labels)?;
    Ok((soft, hard))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn phantom(seed: u64, n: usize, cfg: &PhantomConfig) -> (MpmVolume, HardSegmentation) {
        generate_phantom(seed, [n; 3], cfg, 30.0, "t").unwrap()
    }

    #[test]
    fn log_likelihood_is_monotone_and_means_recovered() {
        let cfg = PhantomConfig::default();
        let (mpm, truth) = phantom(11, 24, &cfg);
        let fit = fit_gmm(&mpm, &cfg.tissue_params, &GmmConfig::default()).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{w:?}");
        }
        for t in Tissue::ALL {
            let idx: Vec<usize> = (0..truth.labels().len()).filter(|&i| truth.labels()[i] == t.label()).collect();
            let s = cfg.tissue_params.get(t);
            let m = fit.gmm.tissue_mean(t).unwrap();
            for ch in 0..3 {
                let se = s.std[ch] / (idx.len() as f64).sqrt();
                assert!((m[ch] - s.mean[ch]).abs() < 3.0 * se, "{t} {ch}");
            }
        }
    }

    #[test]
    fn single_tissue_collapses() {
        let n = 16;
        let dims = [n; 3];
        let mask = Grid3::filled(dims, [1.0; 3], 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let noisy = |m: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            use rand_distr::Distribution;
            Grid3::from_fn(dims, [1.0; 3], |_, _, _| {
                (m * (1.0 + 0.05 * { let z: f64 = rand_distr::StandardNormal.sample(&mut *rng); z })) as f32
            })
        };
        let mpm = MpmVolume::new(
            noisy(1330.0, &mut rng),
            noisy(66.0, &mut rng),
            noisy(0.82, &mut rng),
            mask,
            "gm",
            1.0,
        )
        .unwrap();
        let err = fit_gmm(&mpm, &TissueParams::default(), &GmmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::CollapsedComponent(_)), "{err}");
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(
            fit_gmm_features(&[], &TissueParams::default(), &GmmConfig::default()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn refit_from_solution_is_a_fixed_point() {
        let cfg = PhantomConfig::default();
        let (mpm, _) = phantom(12, 20, &cfg);
        let gc = GmmConfig { tol: 1e-10, ..Default::default() };
        let fit = fit_gmm(&mpm, &cfg.tissue_params, &gc).unwrap();
        let n = fit.log_likelihood.len();
        let gain = fit.log_likelihood[n - 1] - fit.log_likelihood[n - 2];
        assert!(gain.abs() / fit.log_likelihood[n - 1].abs() < gc.tol);
    }

    #[test]
    fn shuffled_voxels_give_the_same_fit() {
        let cfg = PhantomConfig::default();
        let (mpm, _) = phantom(13, 20, &cfg);
        let mut x = masked_features(&mpm);
        let a = fit_gmm_features(&x, &cfg.tissue_params, &GmmConfig::default()).unwrap();
        x.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let b = fit_gmm_features(&x, &cfg.tissue_params, &GmmConfig::default()).unwrap();
        for (ca, cb) in a.gmm.components.iter().zip(&b.gmm.components) {
            assert!((ca.weight - cb.weight).abs() < 1e-9);
            for k in 0..3 {
                assert!((ca.mean[k] - cb.mean[k]).abs() <= 1e-9 * ca.mean[k].abs().max(1.0));
                assert!((ca.var[k] - cb.var[k]).abs() <= 1e-9 * ca.var[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn posterior_at_gm_mean_is_confident() {
        let tp = TissueParams::default();
        let comps = Tissue::ALL
            .iter()
            .map(|&t| GmmComponent {
                tissue: t,
                weight: 1.0 / 3.0,
                mean: tp.get(t).mean,
                var: tp.get(t).std.map(|s| s * s),
            })
            .collect();
        let g = TissueGmm { components: comps };
        let p = g.posterior(&tp.gm.mean);
        // With 5% stds the nearest competitor (WM) sits ~7.6 sd away in T1
        // alone, so its posterior share is below e^-28.
        assert!(p[1] > 0.99, "{p:?}");
    }

    #[test]
    fn labels_are_normalised_and_match_zero_std_truth() {
        let mut cfg = PhantomConfig::default();
        cfg.tissue_params = cfg.tissue_params.zero_std();
        let (mpm, truth) = phantom(14, 20, &cfg);
        let fit = fit_gmm(&mpm, &cfg.tissue_params, &GmmConfig::default()).unwrap();
        let (soft, hard) = label_pgs(&mpm, &fit.gmm).unwrap();
        for i in mpm.mask_indices() {
            let s: f32 = soft.probabilities(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(hard, truth);
    }

    #[test]
    fn labels_do_not_depend_on_contrast() {
        // PGS is a function of the quantitative map only; simulating any
        // contrast leaves the input to label_pgs untouched.
        let cfg = PhantomConfig::default();
        let (mpm, _) = phantom(15, 16, &cfg);
        let fit = fit_gmm(&mpm, &cfg.tissue_params, &GmmConfig::default()).unwrap();
        let a = label_pgs(&mpm, &fit.gmm).unwrap();
        let _ = crate::simulate::simulate_volume(&mpm, &crate::SequenceParams::mprage(700.0, 800.0).unwrap());
        let b = label_pgs(&mpm, &fit.gmm).unwrap();
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn multiple_components_per_tissue_fit() {
        let cfg = PhantomConfig::default();
        let (mpm, truth) = phantom(16, 20, &cfg);
        let gc = GmmConfig { components_per_tissue: 2, ..Default::default() };
        let fit = fit_gmm(&mpm, &cfg.tissue_params, &gc).unwrap();
        assert_eq!(fit.gmm.components.len(), 6);
        let (_, hard) = label_pgs(&mpm, &fit.gmm).unwrap();
        let agree = hard.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / truth.labels().len() as f64 > 0.999);
    }
}
