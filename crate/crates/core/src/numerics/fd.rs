//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Estimates `∂f/∂p` for every coordinate of every parameter with
/// `(f(p+h) − f(p−h)) / 2h`.
pub fn finite_diff<F>(mut f: F, params: &ParamSet, h: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let mut grad = vec![0.0; n];
        for (j, g) in grad.iter_mut().enumerate() {
            let orig = params.get(&name)?.data()[j];
            work.get_mut(&name)?.data_mut()[j] = orig + h;
            let plus = f(&work)?;
            work.get_mut(&name)?.data_mut()[j] = orig - h;
            let minus = f(&work)?;
            work.get_mut(&name)?.data_mut()[j] = orig;
            *g = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(params.get(&name)?.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest coordinate-wise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let Some(b) = numeric.get(name) else {
            return f64::INFINITY;
        };
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
