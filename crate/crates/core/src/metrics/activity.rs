use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ActivationProbe;

/// Smallest probe batch accepted by [`fau`].
pub const MIN_PROBE_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitActivity {
    pub layer: String,
    pub fau: f64,
    pub fdu: f64,
}

/// Mean over units of the fraction of rows where the unit is > 0.
pub fn active_fraction(capture: &Tensor) -> f64 {
    let (rows, units) = capture.rows_cols();
    if rows == 0 || units == 0 {
        return 0.0;
    }
    let mut active = vec![0usize; units];
    for row in capture.data().chunks(units) {
        for (a, v) in active.iter_mut().zip(row) {
            if *v > 0.0 {
                *a += 1;
            }
        }
    }
    active.iter().map(|&a| a as f64 / rows as f64).sum::<f64>() / units as f64
}

pub fn fau(probe: &ActivationProbe, layer: &str) -> Result<UnitActivity> {
    if probe.batch_size < MIN_PROBE_BATCH {
        return Err(Error::Contract(format!(
            "FAU needs a probe batch of at least {MIN_PROBE_BATCH}, got {}",
            probe.batch_size
        )));
    }
    let fau = active_fraction(probe.capture(layer)?);
    Ok(UnitActivity {
        layer: layer.to_string(),
        fau,
        fdu: 1.0 - fau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn probe(capture: Tensor, batch: usize) -> ActivationProbe {
        let mut captures = BTreeMap::new();
        captures.insert("l".to_string(), capture);
        ActivationProbe {
            batch_size: batch,
            captures,
            cls: vec![],
        }
    }

    #[test]
    fn all_positive_is_fully_active() {
        let p = probe(Tensor::filled(&[32, 5], 0.5), 32);
        let u = fau(&p, "l").unwrap();
        assert_eq!((u.fau, u.fdu), (1.0, 0.0));
    }

    #[test]
    fn dead_unit_contributes_zero() {
        let mut t = Tensor::filled(&[32, 4], 1.0);
        for r in 0..32 {
            t.data_mut()[r * 4 + 2] = if r % 2 == 0 { 0.0 } else { -3.0 };
        }
        let u = fau(&probe(t, 32), "l").unwrap();
        assert_eq!(u.fau, 0.75);
    }

    #[test]
    fn contract_and_lookup_errors() {
        let p = probe(Tensor::filled(&[8, 2], 1.0), 8);
        assert!(matches!(fau(&p, "l"), Err(Error::Contract(_))));
        let p = probe(Tensor::filled(&[32, 2], 1.0), 32);
        assert!(matches!(fau(&p, "missing"), Err(Error::Lookup(_))));
    }
}
