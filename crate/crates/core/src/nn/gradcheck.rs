use super::Parameters;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst relative error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so parameters with vanishing gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Checks `analytic` (the gradient of `f` at `params`) against central
/// finite differences with step `h`.
pub fn gradcheck<P, F>(params: &P, analytic: &P, h: f64, f: F) -> GradReport
where
    P: Parameters,
    F: Fn(&P) -> f64,
{
    let base = params.flatten();
    let grads = analytic.flatten();
    assert_eq!(base.len(), grads.len(), "gradient layout mismatch");
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: base.len(),
    };
    for i in 0..base.len() {
        flat[i] = base[i] + h;
        probe.assign_flat(&flat);
        let up = f(&probe);
        flat[i] = base[i] - h;
        probe.assign_flat(&flat);
        let down = f(&probe);
        flat[i] = base[i];
        let numeric = (up - down) / (2.0 * h);
        let abs = (numeric - grads[i]).abs();
        let rel = abs / numeric.abs().max(grads[i].abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}
