//! Central finite-difference gradient checker.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const FD_STEP: f64 = 1e-6;
const MAX_COORDS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("fd_check loss"));
    }
    Ok(v)
}

/// Checks the tape gradient of the scalar built by `f` against central
/// differences over every trainable parameter of `store`.
pub fn fd_check<F>(store: &ParamStore, f: F, rng: &mut SplitMix64) -> Result<FdReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    fd_check_with(store, f, FD_STEP, MAX_COORDS, rng)
}

pub fn fd_check_with<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    max_coords: usize,
    rng: &mut SplitMix64,
) -> Result<FdReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&work, &mut tape)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("fd_check loss"));
    }
    tape.backward(loss)?.accumulate(&mut work)?;

    let mut report = FdReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        worst_pair: (0.0, 0.0),
    };
    let ids: Vec<_> = work.ids().filter(|&id| work.get(id).trainable).collect();
    for id in ids {
        let n = work.value(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        for i in coords {
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&work, &f)?;
            work.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic = work.get(id).grad.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((work.get(id).name.clone(), i));
                report.worst_pair = (analytic, numeric);
            }
        }
    }
    Ok(report)
}
