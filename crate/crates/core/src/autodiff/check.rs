//! Central finite differences, kept apart from the reverse sweep so that
//! gradient tests compare two independent routes to the same derivative.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Step used by every gradient check in this crate.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance of gradient checks.
pub const FD_RTOL: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FD_FLOOR: f64 = 1e-5;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let hi = f(&probe);
            probe[i] = x[i] - step;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest element-wise relative error between two gradients.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest element-wise relative error among checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose difference stencil changed some ReLU's active side.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= FD_RTOL
    }
}

/// Compare reverse-mode gradients of the scalar built by `build` against
/// central differences, for every parameter in `store` (at most
/// `max_coords` evenly spaced coordinates per parameter).
pub fn check_gradients<B>(store: &ParamStore<f64>, max_coords: usize, build: B) -> Result<GradCheck>
where
    B: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let base_pattern = tape.relu_pattern();
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward(loss, &mut analytic)?;

    let eval = |s: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        Ok((t.value(l).item(), t.relu_pattern() == base_pattern))
    };

    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..store.len() {
        let id = super::ParamId(pi);
        let len = store.get(id).value.len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let x0 = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = x0 + FD_STEP;
            let (hi, same_hi) = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x0 - FD_STEP;
            let (lo, same_lo) = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x0;
            if !(same_hi && same_lo) {
                report.skipped += 1;
                continue;
            }
            let numeric = (hi - lo) / (2.0 * FD_STEP);
            let a = analytic.get(id).grad.data()[i];
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(a, numeric, FD_FLOOR));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, -1.0], FD_STEP);
        assert!((g[0] - 12.0).abs() < 1e-5);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn floor_limits_small_denominators() {
        assert_eq!(relative_error(0.0, 1e-9, 1e-5), 1e-4);
        assert!((relative_error(1.0, 1.001, 1e-5) - 0.001 / 1.001).abs() < 1e-15);
    }
}
