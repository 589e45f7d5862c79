//! Central finite differences over a whole [`ParamSet`], for verifying
//! hand-derived backward passes.

use crate::params::ParamSet;

/// Numerical gradient of `loss` with respect to every scalar of `params`.
pub fn numeric_gradient(params: &ParamSet, step: f64, mut loss: impl FnMut(&ParamSet) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut scratch = base.clone();
    for i in 0..base.len() {
        scratch[i] = base[i] + step;
        probe.set_flat(&scratch);
        let up = loss(&probe);
        scratch[i] = base[i] - step;
        probe.set_flat(&scratch);
        let down = loss(&probe);
        scratch[i] = base[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, with a tiny floor on the denominator.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}
