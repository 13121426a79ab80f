use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error, so coordinates whose
/// true gradient is ~0 are judged on an absolute scale instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Multiple of `eps * max(1, |f|) / h`, the rounding error of a central
/// difference. A coordinate failing the relative test still agrees when
/// its absolute mismatch is below this noise level (e.g. a gradient that
/// is exactly zero by symmetry).
pub const FD_NOISE_FACTOR: f64 = 1e2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a probe moved some ReLU input across 0.
    pub skipped_kinks: usize,
    /// Coordinates that failed the relative test but whose mismatch was
    /// within finite-difference rounding noise. They count as agreeing and
    /// are left out of `max_rel_error`.
    pub within_noise: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares tape gradients of the scalar produced by `f` against central
/// finite differences over every parameter coordinate.
pub fn grad_check<F>(f: F, store: &mut ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(f, store, h, tol, usize::MAX)
}

/// As [`grad_check`], probing at most `per_param` evenly spaced coordinates
/// of each parameter tensor.
pub fn grad_check_sampled<F>(
    f: F,
    store: &mut ParamStore,
    h: f64,
    tol: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base_signature = tape.relu_signature();
    let noise = FD_NOISE_FACTOR * f64::EPSILON * tape.value(out).data()[0].abs().max(1.0) / h;
    let saved_grads: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    tape.backward(out, store)?;
    let analytic: Vec<_> = store.iter().map(|p| p.grad.clone()).collect();
    for (p, g) in store.iter_mut().zip(saved_grads) {
        p.grad = g;
    }

    let eval = |store: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        Ok((tape.value(v).data()[0], tape.relu_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        within_noise: 0,
        tol,
        passed: true,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + h;
            let (fp, sp) = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - h;
            let (fm, sm) = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            if sp != base_signature || sm != base_signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.index()].data()[idx];
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel >= tol && (a - numeric).abs() <= noise {
                report.within_noise += 1;
                continue;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
