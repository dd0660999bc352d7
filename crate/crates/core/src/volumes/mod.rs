//! Voxel grids, quantitative maps, segmentations and the MVOL file format.
//!
//! Storage order everywhere is x fastest, then y, then z. Multi-channel
//! volumes store one contiguous block per channel.

mod io;

pub use io::{mvol_paths, read_mvol, write_mvol, MvolHeader, MvolStack, MVOL_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

/// The three tissue classes in fixed order. The order doubles as the
/// tie-breaking order for hard labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Csf,
    Gm,
    Wm,
}

impl Tissue {
    pub const ALL: [Tissue; 3] = [Tissue::Csf, Tissue::Gm, Tissue::Wm];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Label value used in hard segmentations (0 is background).
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_index(i: usize) -> Option<Tissue> {
        Tissue::ALL.get(i).copied()
    }

    pub fn from_label(label: u8) -> Option<Tissue> {
        label.checked_sub(1).and_then(|i| Tissue::from_index(i as usize))
    }

    pub fn name(self) -> &'static str {
        match self {
            Tissue::Csf => "csf",
            Tissue::Gm => "gm",
            Tissue::Wm => "wm",
        }
    }
}

impl std::fmt::Display for Tissue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tissue::Csf => "CSF",
            Tissue::Gm => "GM",
            Tissue::Wm => "WM",
        })
    }
}

/// A scalar 3D grid of 32-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Grid3 {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invariant(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invariant(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::PayloadLength {
                expected: n,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let [x, y, z] = unravel(dims, i);
            return Err(Error::NonFinite { channel: 0, x, y, z });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing, vec![value; n]).expect("filled grid with invalid dims or value")
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self::filled(dims, spacing, 0.0)
    }

    /// Builds a grid by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data).expect("from_fn produced an invalid grid")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Voxel volume in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        unravel(self.dims, i)
    }

    pub fn same_shape(&self, other: &Grid3) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Returns a new grid with `f` applied to every value. Panics if `f`
    /// produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid3 {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Grid3::new(self.dims, self.spacing, data).expect("map produced non-finite value")
    }

    /// Replaces the payload, keeping dims and spacing.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Grid3> {
        Grid3::new(self.dims, self.spacing, data)
    }

    pub fn extract_patch(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Grid3> {
        extract_patch(self, corner, size)
    }
}

pub(crate) fn unravel(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

/// Copies the sub-block `[corner, corner + size)` out of `grid`.
pub fn extract_patch(grid: &Grid3, corner: [usize; 3], size: [usize; 3]) -> Result<Grid3> {
    let dims = grid.dims();
    for a in 0..3 {
        if size[a] == 0 || corner[a] + size[a] > dims[a] {
            return Err(Error::OutOfBounds(format!(
                "patch corner {corner:?} size {size:?} exceeds grid dims {dims:?}"
            )));
        }
    }
    let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in corner[2]..corner[2] + size[2] {
        for y in corner[1]..corner[1] + size[1] {
            let start = grid.index(corner[0], y, z);
            data.extend_from_slice(&grid.data()[start..start + size[0]]);
        }
    }
    Grid3::new(size, grid.spacing(), data)
}

fn check_mask(mask: &Grid3) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invariant("mask values must be 0 or 1".into()));
    }
    Ok(())
}

/// Quantitative multi-parameter map of one subject: T1 and T2* in ms,
/// proton density (dimensionless), and a brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MpmVolume {
    pub t1_ms: Grid3,
    pub t2s_ms: Grid3,
    pub pd: Grid3,
    pub mask: Grid3,
    pub subject_id: String,
    pub age_years: f64,
}

impl MpmVolume {
    pub fn new(
        t1_ms: Grid3,
        t2s_ms: Grid3,
        pd: Grid3,
        mask: Grid3,
        subject_id: impl Into<String>,
        age_years: f64,
    ) -> Result<Self> {
        let v = Self {
            t1_ms,
            t2s_ms,
            pd,
            mask,
            subject_id: subject_id.into(),
            age_years,
        };
        v.validate()?;
        Ok(v)
    }

    /// Builds a map from relaxation rates (R1, R2* in 1/s) as delivered by
    /// most MPM pipelines.
    pub fn from_rates(
        r1_per_s: &Grid3,
        r2s_per_s: &Grid3,
        pd: Grid3,
        mask: Grid3,
        subject_id: impl Into<String>,
        age_years: f64,
    ) -> Result<Self> {
        let to_ms = |g: &Grid3, m: &Grid3| -> Result<Grid3> {
            let data = g
                .data()
                .iter()
                .zip(m.data())
                .map(|(&r, &inside)| if inside > 0.0 && r > 0.0 { 1000.0 / r } else { 0.0 })
                .collect();
            g.with_data(data)
        };
        let t1 = to_ms(r1_per_s, &mask)?;
        let t2s = to_ms(r2s_per_s, &mask)?;
        Self::new(t1, t2s, pd, mask, subject_id, age_years)
    }

    pub fn validate(&self) -> Result<()> {
        let chans = [&self.t1_ms, &self.t2s_ms, &self.pd];
        if chans.iter().any(|g| !g.same_shape(&self.mask)) {
            return Err(Error::Invariant(
                "MPM channels must share dims and spacing".into(),
            ));
        }
        check_mask(&self.mask)?;
        if !(self.age_years >= 0.0) {
            return Err(Error::Invariant(format!("negative age {}", self.age_years)));
        }
        for (i, &m) in self.mask.data().iter().enumerate() {
            if m > 0.0
                && (self.t1_ms.data()[i] <= 0.0
                    || self.t2s_ms.data()[i] <= 0.0
                    || self.pd.data()[i] < 0.0)
            {
                let [x, y, z] = self.mask.coords(i);
                return Err(Error::Invariant(format!(
                    "non-physical quantitative value inside mask at ({x}, {y}, {z})"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.mask.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.mask.spacing()
    }

    pub fn mask_indices(&self) -> Vec<usize> {
        mask_indices(&self.mask)
    }
}

pub(crate) fn mask_indices(mask: &Grid3) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Per-tissue probability maps in the order CSF, GM, WM.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSegmentation {
    pub tissues: [Grid3; 3],
    pub mask: Grid3,
}

impl SoftSegmentation {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(tissues: [Grid3; 3], mask: Grid3) -> Result<Self> {
        let s = Self { tissues, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tissues.iter().any(|g| !g.same_shape(&self.mask)) {
            return Err(Error::Invariant("tissue maps must match the mask".into()));
        }
        check_mask(&self.mask)?;
        for i in 0..self.mask.len() {
            let p = [
                self.tissues[0].data()[i],
                self.tissues[1].data()[i],
                self.tissues[2].data()[i],
            ];
            if self.mask.data()[i] > 0.0 {
                if p.iter().any(|&v| !(0.0..=1.0).contains(&v))
                    || (p.iter().sum::<f32>() - 1.0).abs() > Self::SUM_TOLERANCE
                {
                    let [x, y, z] = self.mask.coords(i);
                    return Err(Error::Invariant(format!(
                        "probabilities at ({x}, {y}, {z}) are not a distribution: {p:?}"
                    )));
                }
            } else if p.iter().any(|&v| v != 0.0) {
                return Err(Error::Invariant("non-zero probability outside mask".into()));
            }
        }
        Ok(())
    }

    pub fn probabilities(&self, i: usize) -> [f32; 3] {
        [
            self.tissues[0].data()[i],
            self.tissues[1].data()[i],
            self.tissues[2].data()[i],
        ]
    }

    /// Argmax per voxel; ties resolve to the earlier tissue (CSF < GM < WM).
    pub fn harden(&self) -> HardSegmentation {
        let data = (0..self.mask.len())
            .map(|i| {
                if self.mask.data()[i] > 0.0 {
                    let p = self.probabilities(i);
                    let mut best = 0;
                    for k in 1..3 {
                        if p[k] > p[best] {
                            best = k;
                        }
                    }
                    Tissue::ALL[best].label()
                } else {
                    0
                }
            })
            .collect();
        HardSegmentation {
            dims: self.mask.dims(),
            spacing: self.mask.spacing(),
            labels: data,
        }
    }

    pub fn extract_patch(&self, corner: [usize; 3], size: [usize; 3]) -> Result<SoftSegmentation> {
        Ok(SoftSegmentation {
            tissues: [
                self.tissues[0].extract_patch(corner, size)?,
                self.tissues[1].extract_patch(corner, size)?,
                self.tissues[2].extract_patch(corner, size)?,
            ],
            mask: self.mask.extract_patch(corner, size)?,
        })
    }

    pub fn to_stack(&self, meta: serde_json::Value) -> MvolStack {
        MvolStack {
            channel_names: vec!["csf".into(), "gm".into(), "wm".into(), "mask".into()],
            channels: vec![
                self.tissues[0].clone(),
                self.tissues[1].clone(),
                self.tissues[2].clone(),
                self.mask.clone(),
            ],
            meta,
        }
    }
}

/// Integer tissue labels: 0 background, 1 CSF, 2 GM, 3 WM.
#[derive(Debug, Clone, PartialEq)]
pub struct HardSegmentation {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
}

impl HardSegmentation {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::PayloadLength {
                expected: dims[0] * dims[1] * dims[2],
                actual: labels.len(),
            });
        }
        if let Some(l) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::Invariant(format!("label {l} outside 0..=3")));
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn count(&self, tissue: Tissue) -> usize {
        let l = tissue.label();
        self.labels.iter().filter(|&&v| v == l).count()
    }

    pub fn volume_ml(&self, tissue: Tissue) -> f64 {
        self.count(tissue) as f64 * self.voxel_volume_ml()
    }

    /// Checks that background coincides exactly with the zero region of `mask`.
    pub fn check_mask(&self, mask: &Grid3) -> Result<()> {
        if mask.dims() != self.dims {
            return Err(Error::DimMismatch("labels vs mask".into()));
        }
        for (i, (&l, &m)) in self.labels.iter().zip(mask.data()).enumerate() {
            if (l == 0) != (m == 0.0) {
                let [x, y, z] = unravel(self.dims, i);
                return Err(Error::Invariant(format!(
                    "label/mask disagreement at ({x}, {y}, {z})"
                )));
            }
        }
        Ok(())
    }

    pub fn to_grid(&self) -> Grid3 {
        Grid3::new(
            self.dims,
            self.spacing,
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .expect("label grid")
    }

    pub fn from_grid(grid: &Grid3) -> Result<Self> {
        let labels = grid
            .data()
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || !(0.0..=3.0).contains(&v) {
                    Err(Error::Invariant(format!("{v} is not a tissue label")))
                } else {
                    Ok(v as u8)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.dims(), grid.spacing(), labels)
    }

    /// Single-channel `labels` stack.
    pub fn to_stack(&self, meta: serde_json::Value) -> MvolStack {
        MvolStack::single("labels", self.to_grid(), meta)
    }

    pub fn from_stack(stack: MvolStack) -> Result<Self> {
        let grid = stack
            .channel("labels")
            .ok_or_else(|| Error::Invariant("label stack lacks channel 'labels'".into()))?;
        Self::from_grid(grid)
    }

    /// One-hot soft segmentation of these labels.
    pub fn to_soft(&self) -> SoftSegmentation {
        let mk = |t: Tissue| {
            Grid3::new(
                self.dims,
                self.spacing,
                self.labels
                    .iter()
                    .map(|&l| if l == t.label() { 1.0 } else { 0.0 })
                    .collect(),
            )
            .expect("one-hot grid")
        };
        let mask = Grid3::new(
            self.dims,
            self.spacing,
            self.labels.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask grid");
        SoftSegmentation {
            tissues: [mk(Tissue::Csf), mk(Tissue::Gm), mk(Tissue::Wm)],
            mask,
        }
    }
}

impl MpmVolume {
    pub fn to_stack(&self, extra_meta: serde_json::Value) -> MvolStack {
        let mut meta = serde_json::json!({
            "kind": "mpm",
            "subject_id": self.subject_id,
            "age_years": self.age_years,
        });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra_meta) {
            m.extend(extra);
        }
        MvolStack {
            channel_names: vec!["t1_ms".into(), "t2s_ms".into(), "pd".into(), "mask".into()],
            channels: vec![
                self.t1_ms.clone(),
                self.t2s_ms.clone(),
                self.pd.clone(),
                self.mask.clone(),
            ],
            meta,
        }
    }

    pub fn from_stack(stack: MvolStack) -> Result<Self> {
        let find = |name: &str| -> Result<Grid3> {
            stack
                .channel(name)
                .cloned()
                .ok_or_else(|| Error::Invariant(format!("MPM stack lacks channel '{name}'")))
        };
        let subject_id = stack
            .meta
            .get("subject_id")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_string();
        let age = stack.meta.get("age_years").and_then(|v| v.as_f64()).unwrap_or(0.0);
        MpmVolume::new(
            find("t1_ms")?,
            find("t2s_ms")?,
            find("pd")?,
            find("mask")?,
            subject_id,
            age,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Grid3 {
        Grid3::from_fn([n, n, n], [1.0; 3], |x, y, z| (x + 10 * y + 100 * z) as f32)
    }

    #[test]
    fn full_patch_is_identity() {
        let g = ramp(4);
        assert_eq!(g.extract_patch([0, 0, 0], [4, 4, 4]).unwrap(), g);
    }

    #[test]
    fn patch_values_follow_index_arithmetic() {
        let g = ramp(4);
        let p = g.extract_patch([1, 1, 1], [2, 2, 2]).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expected = ((x + 1) + 10 * (y + 1) + 100 * (z + 1)) as f32;
                    assert_eq!(p.get(x, y, z), expected);
                }
            }
        }
    }

    #[test]
    fn patch_out_of_bounds() {
        let g = ramp(4);
        assert!(matches!(
            g.extract_patch([3, 3, 3], [2, 2, 2]),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn patch_composition_adds_corners() {
        let g = Grid3::from_fn([7, 6, 5], [1.0, 2.0, 1.5], |x, y, z| (x * 31 + y * 7 + z) as f32);
        let a = g.extract_patch([1, 2, 0], [5, 4, 4]).unwrap();
        let b = a.extract_patch([2, 1, 3], [2, 2, 1]).unwrap();
        let direct = g.extract_patch([3, 3, 3], [2, 2, 1]).unwrap();
        assert_eq!(b, direct);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(Grid3::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(Grid3::new([2, 2, 2], [0.0, 1.0, 1.0], vec![0.0; 8]).is_err());
        let mut d = vec![0.0; 8];
        d[5] = f32::NAN;
        match Grid3::new([2, 2, 2], [1.0; 3], d) {
            Err(Error::NonFinite { x, y, z, .. }) => assert_eq!([x, y, z], [1, 0, 1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mpm_rejects_mismatched_channels() {
        let a = Grid3::filled([2, 2, 2], [1.0; 3], 1.0);
        let b = Grid3::filled([2, 2, 3], [1.0; 3], 1.0);
        assert!(MpmVolume::new(a.clone(), a.clone(), b, a, "s", 30.0).is_err());
    }

    #[test]
    fn rates_convert_to_times() {
        let dims = [2, 1, 1];
        let r1 = Grid3::new(dims, [1.0; 3], vec![1.0, 0.5]).unwrap();
        let r2 = Grid3::new(dims, [1.0; 3], vec![20.0, 10.0]).unwrap();
        let pd = Grid3::filled(dims, [1.0; 3], 0.8);
        let mask = Grid3::filled(dims, [1.0; 3], 1.0);
        let m = MpmVolume::from_rates(&r1, &r2, pd, mask, "s", 1.0).unwrap();
        assert_eq!(m.t1_ms.data(), &[1000.0, 2000.0]);
        assert_eq!(m.t2s_ms.data(), &[50.0, 100.0]);
    }

    #[test]
    fn harden_breaks_ties_in_tissue_order() {
        let dims = [3, 1, 1];
        let g = |v: Vec<f32>| Grid3::new(dims, [1.0; 3], v).unwrap();
        let soft = SoftSegmentation::new(
            [
                g(vec![0.5, 0.0, 0.0]),
                g(vec![0.5, 0.5, 0.0]),
                g(vec![0.0, 0.5, 0.0]),
            ],
            g(vec![1.0, 1.0, 0.0]),
        )
        .unwrap();
        assert_eq!(soft.harden().labels(), &[1, 2, 0]);
    }

    #[test]
    fn soft_segmentation_validates_sums() {
        let dims = [1, 1, 1];
        let g = |v: f32| Grid3::new(dims, [1.0; 3], vec![v]).unwrap();
        assert!(SoftSegmentation::new([g(0.5), g(0.2), g(0.2)], g(1.0)).is_err());
        assert!(SoftSegmentation::new([g(0.1), g(0.0), g(0.0)], g(0.0)).is_err());
    }
}
