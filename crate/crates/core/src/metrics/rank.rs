use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{self, clamp_spectrum, Matrix};
use crate::model::{head_slice, ParamGroup};

/// A rank estimate plus a flag for the all-zero spectrum, where it is
/// defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub erank: f64,
    pub srank: f64,
    pub rank_r: usize,
    pub degenerate: bool,
}

fn check_spectrum(sv: &[f64]) -> Result<Vec<f64>> {
    if sv.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidInput("singular values must be finite and non-negative".into()));
    }
    Ok(clamp_spectrum(sv))
}

/// exp of the Shannon entropy of sigma_i / sum(sigma).
pub fn erank(singular_values: &[f64]) -> Result<RankEstimate> {
    let sv = check_spectrum(singular_values)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Ok(RankEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    let entropy: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(RankEstimate {
        value: entropy.exp(),
        degenerate: false,
    })
}

/// sum(sigma_i^2) / sigma_max^2.
pub fn srank(singular_values: &[f64]) -> Result<RankEstimate> {
    let sv = check_spectrum(singular_values)?;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(RankEstimate {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = sv.iter().map(|s| (s / max) * (s / max)).sum();
    Ok(RankEstimate {
        value,
        degenerate: false,
    })
}

pub fn rank_metrics_from_spectrum(singular_values: &[f64]) -> Result<RankMetrics> {
    let e = erank(singular_values)?;
    let s = srank(singular_values)?;
    let rank_r = clamp_spectrum(singular_values).iter().filter(|&&v| v > 0.0).count();
    Ok(RankMetrics {
        erank: e.value,
        srank: s.value,
        rank_r,
        degenerate: e.degenerate,
    })
}

pub fn rank_of_matrix(m: &Matrix) -> Result<RankMetrics> {
    rank_metrics_from_spectrum(&linalg::singular_values(m)?)
}

/// Rank of a (samples x channels) capture; any leading token axis is
/// already flattened into the sample axis.
pub fn rank_of_features(capture: &Tensor) -> Result<RankMetrics> {
    rank_of_matrix(&capture.to_matrix())
}

pub fn rank_of_weights(group: &ParamGroup) -> Result<RankMetrics> {
    if !group.is_matrix() {
        return Err(Error::InvalidInput(format!("{} is not a weight matrix", group.name)));
    }
    rank_of_matrix(&group.tensor.to_matrix())
}

/// Per-head rank of a (dim, dim) Q/K/V projection, one entry per head.
pub fn rank_per_head(group: &ParamGroup, heads: usize) -> Result<Vec<RankMetrics>> {
    (0..heads)
        .map(|h| rank_of_matrix(&head_slice(&group.tensor, h, heads)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectrum_fixtures() {
        assert!((erank(&[1.0; 4]).unwrap().value - 4.0).abs() < 1e-12);
        assert!((srank(&[1.0; 4]).unwrap().value - 4.0).abs() < 1e-12);
        assert_eq!(srank(&[2.0, 1.0]).unwrap().value, 1.25);
        // -(0.75 ln 0.75 + 0.25 ln 0.25) = 0.562335..., exp = 1.754765...
        let e = erank(&[3.0, 1.0]).unwrap().value;
        assert!((e - 1.754_765).abs() < 1e-5, "{e}");
        assert!((srank(&[3.0, 1.0]).unwrap().value - 10.0 / 9.0).abs() < 1e-12);
        assert_eq!(erank(&[1.0, 0.0, 0.0]).unwrap().value, 1.0);
    }

    #[test]
    fn all_zero_spectrum_is_degenerate() {
        let e = erank(&[0.0, 0.0]).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.degenerate);
        assert!(srank(&[0.0]).unwrap().degenerate);
        let m = rank_of_matrix(&Matrix::zeros(3, 3)).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.rank_r, 0);
        assert!(erank(&[-1.0]).is_err());
    }

    #[test]
    fn orthonormal_rows_have_full_erank() {
        let m = Matrix::identity(5);
        let r = rank_of_matrix(&m).unwrap();
        assert!((r.erank - 5.0).abs() < 1e-10);
        let mut wide = Matrix::zeros(3, 6);
        for i in 0..3 {
            wide.set(i, 2 * i, 1.0);
        }
        assert!((rank_of_matrix(&wide).unwrap().erank - 3.0).abs() < 1e-10);
    }
}
