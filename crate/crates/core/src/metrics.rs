//! Overlap and consistency metrics.

use crate::error::{Error, Result};
use crate::volumes::{HardSegmentation, Tissue};

/// 2|A∩B| / (|A|+|B|) for one tissue; 1 when both are empty.
pub fn dice(a: &HardSegmentation, b: &HardSegmentation, tissue: Tissue) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let l = tissue.label();
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == l, y == l);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Sample standard deviation over mean.
pub fn cov(volumes: &[f64]) -> Result<f64> {
    if volumes.len() < 2 {
        return Err(Error::InsufficientData(format!("cov needs at least 2 values, got {}", volumes.len())));
    }
    let n = volumes.len() as f64;
    let mean = volumes.iter().sum::<f64>() / n;
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::Degenerate(format!("cov undefined for mean {mean}")));
    }
    // The rounded mean of equal values can differ from them by an ulp.
    if volumes.iter().all(|&v| v == volumes[0]) {
        return Ok(0.0);
    }
    let var = volumes.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(labels: Vec<u8>) -> HardSegmentation {
        let n = labels.len();
        HardSegmentation::new([n, 1, 1], [1.0; 3], labels).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = seg(vec![2; 10]);
        assert_eq!(dice(&a, &a, Tissue::Gm).unwrap(), 1.0);
        let b = seg(vec![3; 10]);
        assert_eq!(dice(&a, &b, Tissue::Gm).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, Tissue::Csf).unwrap(), 1.0);
        // |A| = |B| = 100 with 50 shared voxels.
        let mut la = vec![0u8; 150];
        let mut lb = vec![0u8; 150];
        la[..100].iter_mut().for_each(|v| *v = 2);
        lb[50..].iter_mut().for_each(|v| *v = 2);
        assert_eq!(dice(&seg(la), &seg(lb), Tissue::Gm).unwrap(), 0.5);
        assert!(dice(&seg(vec![1; 4]), &seg(vec![1; 5]), Tissue::Csf).is_err());
    }

    #[test]
    fn cov_cases() {
        assert_eq!(cov(&[3.0, 3.0, 3.0]).unwrap(), 0.0);
        assert!((cov(&[90.0, 110.0]).unwrap() - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert!(cov(&[1.0]).is_err());
        assert!(cov(&[-1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn cov_is_scale_invariant(v in prop::collection::vec(1.0f64..100.0, 2..20), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert!((cov(&v).unwrap() - cov(&scaled).unwrap()).abs() < 1e-9);
        }
    }
}
