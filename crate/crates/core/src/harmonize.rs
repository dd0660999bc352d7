//! ComBat-style harmonisation of tissue-volume features and the multi-site
//! statistics used to judge it.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};

pub use crate::metrics::{cov, dice};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::svg::{Axes, Svg, PALETTE};
use crate::volumes::Tissue;

/// Site mean age below which a site is "Young".
pub const YOUNG_MAX_AGE: f64 = 16.0;
/// Site mean age above which a site is "Old".
pub const OLD_MIN_AGE: f64 = 22.0;

/// Feature column order in tables and models.
pub const FEATURES: [Tissue; 3] = [Tissue::Gm, Tissue::Wm, Tissue::Csf];

fn feature_index(t: Tissue) -> usize {
    FEATURES.iter().position(|&f| f == t).expect("all tissues are features")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub subject_id: String,
    pub site_id: String,
    pub age: f64,
    pub gm: f64,
    pub wm: f64,
    pub csf: f64,
}

impl FeatureRow {
    pub fn features(&self) -> [f64; 3] {
        [self.gm, self.wm, self.csf]
    }

    pub fn feature(&self, t: Tissue) -> f64 {
        self.features()[feature_index(t)]
    }

    fn set_features(&mut self, f: [f64; 3]) {
        [self.gm, self.wm, self.csf] = f;
    }
}

/// One row per subject; features are tissue volumes (ml) or volume ratios.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn new(rows: Vec<FeatureRow>) -> Result<Self> {
        let t = Self { rows };
        t.validate()?;
        Ok(t)
    }

    /// Builds a row from tissue volumes, as ratios of their sum when
    /// `ratios` is set.
    pub fn row_from_volumes(subject_id: &str, site_id: &str, age: f64, volumes_ml: [f64; 3], ratios: bool) -> FeatureRow {
        // volumes_ml is in CSF, GM, WM order.
        let total: f64 = volumes_ml.iter().sum();
        let f = |v: f64| if ratios && total > 0.0 { v / total } else { v };
        FeatureRow {
            subject_id: subject_id.into(),
            site_id: site_id.into(),
            age,
            gm: f(volumes_ml[1]),
            wm: f(volumes_ml[2]),
            csf: f(volumes_ml[0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !r.age.is_finite() || r.features().iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!("subject {} has missing or non-finite values", r.subject_id)));
            }
        }
        Ok(())
    }

    /// Site ids in sorted order with their row indices.
    pub fn sites(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            m.entry(r.site_id.clone()).or_default().push(i);
        }
        m
    }

    pub fn filter_sites(&self, sites: &[String]) -> FeatureTable {
        FeatureTable {
            rows: self.rows.iter().filter(|r| sites.contains(&r.site_id)).cloned().collect(),
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<FeatureRow>, _>>()?;
        Self::new(rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    AgeSquared,
}

impl Covariate {
    fn value(self, row: &FeatureRow) -> f64 {
        match self {
            Covariate::Age => row.age,
            Covariate::AgeSquared => row.age * row.age,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombatConfig {
    pub covariates: Vec<Covariate>,
}

impl Default for CombatConfig {
    fn default() -> Self {
        Self {
            covariates: vec![Covariate::Age],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEffects {
    pub site_id: String,
    pub n: usize,
    /// Additive effect per feature (GM, WM, CSF).
    pub gamma: [f64; 3],
    /// Multiplicative effect per feature.
    pub delta: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombatModel {
    pub covariates: Vec<Covariate>,
    pub alpha: [f64; 3],
    /// `beta[k][v]` for covariate k and feature v.
    pub beta: Vec<[f64; 3]>,
    pub sites: Vec<SiteEffects>,
    pub pooled_sd: [f64; 3],
}

impl CombatModel {
    fn site(&self, id: &str) -> Result<&SiteEffects> {
        self.sites
            .iter()
            .find(|s| s.site_id == id)
            .ok_or_else(|| Error::UnknownSite(id.to_string()))
    }

    fn covariate_effect(&self, row: &FeatureRow) -> [f64; 3] {
        let mut e = [0.0; 3];
        for (c, b) in self.covariates.iter().zip(&self.beta) {
            let x = c.value(row);
            for v in 0..3 {
                e[v] += x * b[v];
            }
        }
        e
    }
}

/// Least squares through an SVD; rank below `min_rank` is an error.
fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, min_rank: usize) -> Result<DMatrix<f64>> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (x.nrows().max(x.ncols()) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < min_rank {
        return Err(Error::RankDeficient(format!("design rank {rank} < {min_rank}")));
    }
    svd.solve(y, tol).map_err(|e| Error::RankDeficient(e.to_string()))
}

/// Fits intercepts per site, shared covariate slopes, and per-site residual
/// scales. The grand mean is the subject-weighted mean of site intercepts,
/// so the weighted mean of the additive effects is zero.
pub fn fit_combat(table: &FeatureTable, config: &CombatConfig) -> Result<CombatModel> {
    table.validate()?;
    let sites = table.sites();
    if sites.is_empty() {
        return Err(Error::InsufficientData("empty feature table".into()));
    }
    if let Some((id, rows)) = sites.iter().find(|(_, r)| r.len() < 3) {
        return Err(Error::InsufficientData(format!("site {id} has {} subjects, need >= 3", rows.len())));
    }
    let n = table.rows.len();
    let s = sites.len();
    let p = config.covariates.len();
    let site_col: BTreeMap<&str, usize> = sites.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut x = DMatrix::zeros(n, s + p);
    let mut y = DMatrix::zeros(n, 3);
    for (i, r) in table.rows.iter().enumerate() {
        x[(i, site_col[r.site_id.as_str()])] = 1.0;
        for (k, c) in config.covariates.iter().enumerate() {
            x[(i, s + k)] = c.value(r);
        }
        for v in 0..3 {
            y[(i, v)] = r.features()[v];
        }
    }
    let coef = least_squares(&x, &y, s + p)?;
    let mut alpha = [0.0; 3];
    for (id, rows) in &sites {
        for v in 0..3 {
            alpha[v] += coef[(site_col[id.as_str()], v)] * rows.len() as f64 / n as f64;
        }
    }
    let beta: Vec<[f64; 3]> = (0..p).map(|k| [0, 1, 2].map(|v| coef[(s + k, v)])).collect();
    let resid = &y - &x * &coef;
    let rms = |idx: &[usize], v: usize| (idx.iter().map(|&i| resid[(i, v)].powi(2)).sum::<f64>() / idx.len() as f64).sqrt();
    let all: Vec<usize> = (0..n).collect();
    let pooled_sd = [0, 1, 2].map(|v| rms(&all, v));
    let site_effects = sites
        .iter()
        .map(|(id, rows)| {
            let col = site_col[id.as_str()];
            SiteEffects {
                site_id: id.clone(),
                n: rows.len(),
                gamma: [0, 1, 2].map(|v| coef[(col, v)] - alpha[v]),
                delta: [0, 1, 2].map(|v| if pooled_sd[v] > 0.0 { rms(rows, v) / pooled_sd[v] } else { 1.0 }),
            }
        })
        .collect::<Vec<_>>();
    if let Some(bad) = site_effects.iter().find(|e| e.delta.iter().any(|&d| !(d > 0.0))) {
        return Err(Error::Degenerate(format!("site {} has zero residual spread", bad.site_id)));
    }
    Ok(CombatModel {
        covariates: config.covariates.clone(),
        alpha,
        beta,
        sites: site_effects,
        pooled_sd,
    })
}

/// `(y - alpha - X beta - gamma) / delta + alpha + X beta` per feature.
pub fn apply_combat(model: &CombatModel, table: &FeatureTable) -> Result<FeatureTable> {
    let mut out = table.clone();
    for r in &mut out.rows {
        let site = model.site(&r.site_id)?;
        let xb = model.covariate_effect(r);
        let y = r.features();
        let h = [0, 1, 2].map(|v| (y[v] - model.alpha[v] - xb[v] - site.gamma[v]) / site.delta[v] + model.alpha[v] + xb[v]);
        r.set_features(h);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTrend {
    pub site_id: String,
    pub n: usize,
    /// Intercept.
    pub b: f64,
    /// Slope per year.
    pub m: f64,
}

/// Ordinary least-squares line of one feature against age for each site,
/// optionally restricted to `sites`.
pub fn fit_site_trends(table: &FeatureTable, tissue: Tissue, sites: Option<&[String]>) -> Result<Vec<SiteTrend>> {
    let mut out = Vec::new();
    for (id, rows) in table.sites() {
        if sites.is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let n = rows.len() as f64;
        let ages: Vec<f64> = rows.iter().map(|&i| table.rows[i].age).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| table.rows[i].feature(tissue)).collect();
        let ma = ages.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = ages.iter().map(|a| (a - ma).powi(2)).sum();
        if !(sxx > 0.0) {
            return Err(Error::Degenerate(format!("site {id} has a single distinct age")));
        }
        let sxy: f64 = ages.iter().zip(&ys).map(|(a, y)| (a - ma) * (y - my)).sum();
        let m = sxy / sxx;
        out.push(SiteTrend {
            site_id: id,
            n: rows.len(),
            b: my - m * ma,
            m,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgePartition {
    pub young: Vec<String>,
    pub old: Vec<String>,
    pub excluded: Vec<String>,
}

/// Splits sites by mean age: below 16 Young, above 22 Old, otherwise
/// excluded.
pub fn partition_age_groups(table: &FeatureTable) -> AgePartition {
    let mut p = AgePartition::default();
    for (id, rows) in table.sites() {
        let mean = rows.iter().map(|&i| table.rows[i].age).sum::<f64>() / rows.len() as f64;
        if mean < YOUNG_MAX_AGE {
            p.young.push(id);
        } else if mean > OLD_MIN_AGE {
            p.old.push(id);
        } else {
            p.excluded.push(id);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendDispersion {
    pub mean_b: f64,
    pub std_b: f64,
    pub mean_m: f64,
    pub std_m: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Sample mean and standard deviation of intercepts and slopes across sites.
pub fn trend_dispersion(trends: &[SiteTrend]) -> Result<TrendDispersion> {
    if trends.len() < 2 {
        return Err(Error::InsufficientData(format!("need >= 2 sites, got {}", trends.len())));
    }
    let (mean_b, std_b) = mean_std(&trends.iter().map(|t| t.b).collect::<Vec<_>>());
    let (mean_m, std_m) = mean_std(&trends.iter().map(|t| t.m).collect::<Vec<_>>());
    Ok(TrendDispersion {
        mean_b,
        std_b,
        mean_m,
        std_m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeveneCenter {
    #[default]
    Mean,
    /// Brown-Forsythe variant.
    Median,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Levene's test for equal variances across groups: one-way ANOVA on
/// absolute deviations from each group's centre. Returns (W, p).
pub fn levene_test(groups: &[&[f64]], center: LeveneCenter) -> Result<(f64, f64)> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::InsufficientData("levene needs >= 2 groups of >= 2 values".into()));
    }
    let z: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let c = match center {
                LeveneCenter::Mean => g.iter().sum::<f64>() / g.len() as f64,
                LeveneCenter::Median => median(g),
            };
            g.iter().map(|v| (v - c).abs()).collect()
        })
        .collect();
    let k = z.len() as f64;
    let n: f64 = z.iter().map(|g| g.len() as f64).sum();
    let means: Vec<f64> = z.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let grand = z.iter().flatten().sum::<f64>() / n;
    let between: f64 = z.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum();
    let within: f64 = z
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        .sum();
    if within == 0.0 {
        if between == 0.0 {
            return Err(Error::Degenerate("levene: all groups have constant deviations".into()));
        }
        return Ok((f64::INFINITY, 0.0));
    }
    let w = (n - k) / (k - 1.0) * between / within;
    let f = FisherSnedecor::new(k - 1.0, n - k).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok((w, f.sf(w)))
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn rank_average(v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Wilcoxon signed-rank test with the tie-corrected normal
/// approximation. Zero differences are dropped; the statistic is the smaller
/// of the positive and negative rank sums.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!("{} vs {} paired values", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    if d.len() < 6 {
        return Err(Error::InsufficientData(format!(
            "{} non-zero differences; the normal approximation needs >= 6",
            d.len()
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = rank_average(&abs);
    let r_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let r_minus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v < 0.0).map(|(_, r)| r).sum();
    let t = r_plus.min(r_minus);
    let n = d.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    let z = (t - mean) / var.sqrt();
    let p = 2.0 * Normal::new(0.0, 1.0).expect("unit normal").sf(z.abs());
    Ok((t, p.min(1.0)))
}

/// Repeated random-split RMSE of a linear age model on the three tissue
/// features. Collinear features (ratios that sum to one) are handled by the
/// minimum-norm least-squares solution.
pub fn age_regression_rmse(table: &FeatureTable, train_fraction: f64, seed: u64, repeats: usize) -> Result<Vec<f64>> {
    let n = table.rows.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!("age regression needs >= 20 subjects, got {n}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(2, n - 1);
    let design = |idx: &[usize]| {
        DMatrix::from_fn(idx.len(), 4, |i, j| if j == 0 { 1.0 } else { table.rows[idx[i]].features()[j - 1] })
    };
    let mut out = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, &[r as u64]));
        let (tr, te) = idx.split_at(n_train);
        let y = DMatrix::from_iterator(tr.len(), 1, tr.iter().map(|&i| table.rows[i].age));
        let coef = least_squares(&design(tr), &y, 2)?;
        let pred = design(te) * coef;
        let truth = DVector::from_iterator(te.len(), te.iter().map(|&i| table.rows[i].age));
        let mse = (pred.column(0) - truth).map(|v| v * v).mean();
        out.push(mse.sqrt());
    }
    Ok(out)
}

/// Scatter of one feature against age, coloured by site, with each site's
/// trend line drawn across the full age range.
pub fn trend_scatter_svg(table: &FeatureTable, tissue: Tissue, trends: &[SiteTrend], title: &str) -> String {
    let ages: Vec<f64> = table.rows.iter().map(|r| r.age).collect();
    let vals: Vec<f64> = table.rows.iter().map(|r| r.feature(tissue)).collect();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a0, a1) = if ages.is_empty() { (0.0, 1.0) } else { (min(&ages), max(&ages)) };
    let (v0, v1) = if vals.is_empty() { (0.0, 1.0) } else { (min(&vals), max(&vals)) };
    let pad = (v1 - v0).max(1e-9) * 0.1;
    let ax = Axes::new((a0, a1), (v0 - pad, v1 + pad), 80.0, 40.0, 460.0, 320.0);
    let mut svg = Svg::new(700.0, 420.0);
    let sites: Vec<String> = table.sites().into_keys().collect();
    let colour = |id: &str| PALETTE[sites.iter().position(|s| s == id).unwrap_or(0) % PALETTE.len()];
    for r in &table.rows {
        svg.circle(ax.px(r.age, r.feature(tissue)), 2.5, colour(&r.site_id));
    }
    for t in trends {
        let y0 = (t.b + t.m * a0).clamp(v0 - pad, v1 + pad);
        let y1 = (t.b + t.m * a1).clamp(v0 - pad, v1 + pad);
        svg.line(ax.px(a0, y0), ax.px(a1, y1), colour(&t.site_id), 1.5);
    }
    ax.draw(&mut svg, "age (years)", &format!("{} feature", tissue.name()), title);
    for (i, s) in sites.iter().enumerate() {
        let y = 50.0 + 16.0 * i as f64;
        svg.rect(560.0, y - 8.0, 10.0, 10.0, colour(s));
        svg.text((576.0, y), s, 11.0, "start", false);
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal as NormalDist};

    fn row(site: &str, i: usize, age: f64, f: [f64; 3]) -> FeatureRow {
        FeatureRow {
            subject_id: format!("{site}-{i}"),
            site_id: site.into(),
            age,
            gm: f[0],
            wm: f[1],
            csf: f[2],
        }
    }

    /// y = 0.5 + 0.001 age + site offset + noise, per feature.
    fn two_site(offset_b: f64, scale_b: f64, seed: u64) -> FeatureTable {
        let mut rng = rng_for(seed, &[]);
        let noise = NormalDist::new(0.0, 1e-4).unwrap();
        let mut rows = Vec::new();
        for (site, off, sc) in [("A", 0.0, 1.0), ("B", offset_b, scale_b)] {
            for i in 0..200 {
                let age = rng.random_range(10.0..60.0);
                let f = [0, 1, 2].map(|_| 0.5 + 0.001 * age + off + sc * noise.sample(&mut rng));
                rows.push(row(site, i, age, f));
            }
        }
        FeatureTable::new(rows).unwrap()
    }

    #[test]
    fn combat_recovers_injected_effects() {
        let t = two_site(0.02, 2.0, 1);
        let m = fit_combat(&t, &CombatConfig::default()).unwrap();
        let (a, b) = (&m.sites[0], &m.sites[1]);
        for v in 0..3 {
            let dg = b.gamma[v] - a.gamma[v];
            assert!((dg / 0.02 - 1.0).abs() < 0.05, "{dg}");
            let ratio = b.delta[v] / a.delta[v];
            assert!((ratio / 2.0 - 1.0).abs() < 0.15, "{ratio}");
            assert!((m.beta[0][v] / 0.001 - 1.0).abs() < 0.05);
            let wmean = (a.gamma[v] * a.n as f64 + b.gamma[v] * b.n as f64) / (a.n + b.n) as f64;
            assert!(wmean.abs() < 1e-12);
        }
        let h = apply_combat(&m, &t).unwrap();
        let m2 = fit_combat(&h, &CombatConfig::default()).unwrap();
        for v in 0..3 {
            assert!((m2.sites[1].gamma[v] - m2.sites[0].gamma[v]).abs() < 1e-3);
            assert!((m2.beta[0][v] / 0.001 - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn combat_identity_and_single_site() {
        let t = two_site(0.0, 1.0, 2);
        let mut m = fit_combat(&t, &CombatConfig::default()).unwrap();
        for s in &mut m.sites {
            s.gamma = [0.0; 3];
            s.delta = [1.0; 3];
        }
        let h = apply_combat(&m, &t).unwrap();
        for (a, b) in h.rows.iter().zip(&t.rows) {
            for v in 0..3 {
                assert!((a.features()[v] - b.features()[v]).abs() < 1e-15);
            }
        }
        let one = t.filter_sites(&["A".to_string()]);
        let m = fit_combat(&one, &CombatConfig::default()).unwrap();
        assert_eq!(m.sites.len(), 1);
        for v in 0..3 {
            assert!(m.sites[0].gamma[v].abs() < 1e-15);
            assert!((m.sites[0].delta[v] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn combat_without_site_effects_barely_moves_features() {
        let t = two_site(0.0, 1.0, 3);
        let m = fit_combat(&t, &CombatConfig::default()).unwrap();
        let h = apply_combat(&m, &t).unwrap();
        let se = 1e-4 / (200f64).sqrt();
        for site in ["A", "B"] {
            let idx: Vec<usize> = (0..t.rows.len()).filter(|&i| t.rows[i].site_id == site).collect();
            for v in 0..3 {
                let shift = idx.iter().map(|&i| h.rows[i].features()[v] - t.rows[i].features()[v]).sum::<f64>()
                    / idx.len() as f64;
                assert!(shift.abs() < 3.0 * se, "{shift}");
            }
        }
    }

    #[test]
    fn combat_errors() {
        let t = FeatureTable::new(vec![row("A", 0, 10.0, [1.0; 3]), row("A", 1, 11.0, [1.0; 3])]).unwrap();
        assert!(matches!(fit_combat(&t, &CombatConfig::default()), Err(Error::InsufficientData(_))));
        let t = FeatureTable::new((0..4).map(|i| row("A", i, 10.0, [i as f64; 3])).collect()).unwrap();
        let cfg = CombatConfig {
            covariates: vec![Covariate::Age],
        };
        assert!(matches!(fit_combat(&t, &cfg), Err(Error::RankDeficient(_))));
        let m = fit_combat(&two_site(0.0, 1.0, 4), &cfg).unwrap();
        let other = FeatureTable::new(vec![row("Z", 0, 10.0, [1.0; 3])]).unwrap();
        assert!(matches!(apply_combat(&m, &other), Err(Error::UnknownSite(_))));
    }

    #[test]
    fn harmonisation_preserves_within_site_order() {
        let t = two_site(0.02, 2.0, 5);
        let m = fit_combat(&t, &CombatConfig { covariates: vec![] }).unwrap();
        let h = apply_combat(&m, &t).unwrap();
        for i in 200..210 {
            for j in 200..210 {
                assert_eq!(t.rows[i].gm < t.rows[j].gm, h.rows[i].gm < h.rows[j].gm);
            }
        }
    }

    #[test]
    fn trends() {
        let rows = (0..10).map(|i| {
            let age = 10.0 + i as f64;
            row("S", i, age, [0.5 - 0.003 * age; 3])
        });
        let t = FeatureTable::new(rows.collect()).unwrap();
        let tr = fit_site_trends(&t, Tissue::Gm, None).unwrap();
        assert!((tr[0].b - 0.5).abs() < 1e-12 && (tr[0].m + 0.003).abs() < 1e-12);

        // Symmetric noise pairs at equal ages leave the fit unchanged.
        let mut pairs = Vec::new();
        for r in &t.rows {
            let mut up = r.clone();
            up.gm += 0.01;
            let mut down = r.clone();
            down.gm -= 0.01;
            pairs.push(up);
            pairs.push(down);
        }
        let tr2 = fit_site_trends(&FeatureTable::new(pairs).unwrap(), Tissue::Gm, None).unwrap();
        assert!((tr2[0].b - tr[0].b).abs() < 1e-12 && (tr2[0].m - tr[0].m).abs() < 1e-12);

        let flat = FeatureTable::new((0..3).map(|i| row("S", i, 12.0, [i as f64; 3])).collect()).unwrap();
        assert!(fit_site_trends(&flat, Tissue::Gm, None).is_err());
    }

    #[test]
    fn age_partition_thresholds() {
        let t = FeatureTable::new(vec![
            row("Y", 0, 15.8, [1.0; 3]),
            row("Y", 1, 16.0, [1.0; 3]),
            row("M", 0, 19.0, [1.0; 3]),
            row("O", 0, 22.1, [1.0; 3]),
            row("E", 0, 22.0, [1.0; 3]),
        ])
        .unwrap();
        let p = partition_age_groups(&t);
        assert_eq!(p.young, vec!["Y"]);
        assert_eq!(p.old, vec!["O"]);
        assert_eq!(p.excluded, vec!["E", "M"]);
    }

    #[test]
    fn dispersion() {
        let tr = |b: f64, m: f64, id: &str| SiteTrend {
            site_id: id.into(),
            n: 5,
            b,
            m,
        };
        let d = trend_dispersion(&[tr(0.4, 0.0, "a"), tr(0.6, 0.0, "b")]).unwrap();
        assert!((d.mean_b - 0.5).abs() < 1e-15);
        assert!((d.std_b - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(d.std_m, 0.0);
        let e = trend_dispersion(&[tr(0.6, 0.0, "b"), tr(0.4, 0.0, "a")]).unwrap();
        assert_eq!(d, e);
        assert!(trend_dispersion(&[tr(0.6, 0.0, "b")]).is_err());
    }

    // Reference values computed with scipy.stats 1.15.3.
    #[test]
    fn levene_matches_reference() {
        let (w, p) = levene_test(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[-4.0, -2.0, 0.0, 2.0, 4.0]], LeveneCenter::Mean).unwrap();
        assert!((w - 2.057_142_857_142_856_5).abs() < 1e-6 && (p - 0.189_403_661_093_321_19).abs() < 1e-6);
        let (w, p) = levene_test(
            &[&[2.1, 3.4, 1.9, 5.6, 4.4, 3.3], &[1.0, 7.2, 0.3, 9.9, 4.1]],
            LeveneCenter::Mean,
        )
        .unwrap();
        assert!((w - 6.876_800_842_470_857).abs() < 1e-6 && (p - 0.027_703_274_897_113_658).abs() < 1e-6);
        let (w, p) = levene_test(
            &[
                &[10.0, 12.0, 11.0, 13.0, 9.0, 10.0, 12.0],
                &[8.0, 15.0, 3.0, 20.0, 11.0, 9.0, 14.0],
                &[5.0, 5.5, 6.0, 4.5, 5.0],
            ],
            LeveneCenter::Mean,
        )
        .unwrap();
        assert!((w - 6.691_641_178_095_213).abs() < 1e-6 && (p - 0.007_729_606_646_590_785).abs() < 1e-6);
        let (w, p) = levene_test(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[-4.0, -2.0, 0.0, 2.0, 4.0]], LeveneCenter::Median).unwrap();
        assert!((w - 2.057_142_857_142_856_5).abs() < 1e-6 && (p - 0.189_403_661_093_321_19).abs() < 1e-6);
    }

    #[test]
    fn levene_properties() {
        let a = [1.0, 4.0, 2.0, 8.0];
        let (w, p) = levene_test(&[&a, &a], LeveneCenter::Mean).unwrap();
        assert_eq!(w, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        let b = [3.0, -1.0, 0.5, 2.0, 7.0];
        let (w1, _) = levene_test(&[&a, &b], LeveneCenter::Mean).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| v * 3.5).collect();
        let b2: Vec<f64> = b.iter().map(|v| v * 3.5).collect();
        let (w2, _) = levene_test(&[&a2, &b2], LeveneCenter::Mean).unwrap();
        assert!((w1 - w2).abs() < 1e-9);
        assert!(levene_test(&[&[1.0, 1.0], &[2.0, 2.0]], LeveneCenter::Mean).is_err());
    }

    // Reference values computed with scipy.stats.wilcoxon 1.15.3
    // (method="approx", correction=False, zero_method="wilcox").
    #[test]
    fn wilcoxon_matches_reference() {
        let cases: [(&[f64], &[f64], f64, f64); 3] = [
            (
                &[125.0, 115.0, 130.0, 140.0, 140.0, 115.0, 140.0, 125.0, 140.0, 135.0],
                &[110.0, 122.0, 125.0, 120.0, 140.0, 124.0, 123.0, 137.0, 135.0, 145.0],
                18.0,
                0.593_630_591_442_529_5,
            ),
            (
                &[1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30],
                &[0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29],
                5.0,
                0.038_151_710_173_415_135,
            ),
            (
                &[3.0, 5.0, 2.0, 8.0, 7.0, 6.0, 4.0, 9.0, 1.0, 10.0, 12.0, 11.0],
                &[1.0, 2.0, 4.0, 3.0, 9.0, 2.0, 6.0, 5.0, 0.0, 7.0, 3.0, 8.0],
                10.5,
                0.024_529_357_622_079_348,
            ),
        ];
        for (a, b, stat, p) in cases {
            let (s, q) = wilcoxon_signed_rank(a, b).unwrap();
            assert!((s - stat).abs() < 1e-6 && (q - p).abs() < 1e-6, "{s} {q}");
            let (_, q2) = wilcoxon_signed_rank(b, a).unwrap();
            assert!((q - q2).abs() < 1e-15);
        }
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::AllZeroDifferences)));
        assert!(matches!(
            wilcoxon_signed_rank(&a[..5], &[0.0; 5]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn age_regression() {
        let mut rng = rng_for(7, &[]);
        let rows: Vec<FeatureRow> = (0..60)
            .map(|i| {
                let f = [rng.random_range(0.3..0.6), rng.random_range(0.2..0.5), rng.random_range(0.05..0.2)];
                let age = 5.0 + 40.0 * f[0] - 10.0 * f[1] + 3.0 * f[2];
                row("S", i, age, f)
            })
            .collect();
        let t = FeatureTable::new(rows).unwrap();
        let r = age_regression_rmse(&t, 0.8, 1, 50).unwrap();
        assert_eq!(r.len(), 50);
        assert!(r.iter().all(|&e| e < 1e-9));
        assert_eq!(r, age_regression_rmse(&t, 0.8, 1, 50).unwrap());

        // Ages unrelated to features: RMSE near the age spread.
        let mut rng = rng_for(8, &[]);
        let rows: Vec<FeatureRow> = (0..400)
            .map(|i| {
                let f = [rng.random_range(0.3..0.6), rng.random_range(0.2..0.5), rng.random_range(0.05..0.2)];
                row("S", i, rng.random_range(10.0..50.0), f)
            })
            .collect();
        let t = FeatureTable::new(rows).unwrap();
        let ages: Vec<f64> = t.rows.iter().map(|r| r.age).collect();
        let sd = mean_std(&ages).1;
        let r = age_regression_rmse(&t, 0.8, 2, 50).unwrap();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!((mean / sd - 1.0).abs() < 0.1, "{mean} vs {sd}");
        assert!(age_regression_rmse(&t.filter_sites(&[]), 0.8, 1, 5).is_err());
    }

    #[test]
    fn csv_round_trip_and_scatter() {
        let t = two_site(0.01, 1.0, 9);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("subject_id,site_id,age,gm,wm,csf\n"));
        assert_eq!(FeatureTable::read_csv(&p).unwrap(), t);
        let tr = fit_site_trends(&t, Tissue::Wm, None).unwrap();
        let svg = trend_scatter_svg(&t, Tissue::Wm, &tr, "WM ratio");
        assert_eq!(svg.matches("<circle").count(), 400);
    }

    #[test]
    fn ratio_rows() {
        let r = FeatureTable::row_from_volumes("s", "x", 20.0, [10.0, 50.0, 40.0], true);
        assert_eq!((r.csf, r.gm, r.wm), (0.1, 0.5, 0.4));
        let r = FeatureTable::row_from_volumes("s", "x", 20.0, [10.0, 50.0, 40.0], false);
        assert_eq!((r.csf, r.gm, r.wm), (10.0, 50.0, 40.0));
    }
}
