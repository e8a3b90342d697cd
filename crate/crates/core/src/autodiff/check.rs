use super::{Graph, Tensor, Var};
use crate::error::Result;

const STEP: f64 = 1e-6;
/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale instead of amplifying round-off.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate, if any coordinate was compared.
    pub worst_index: Option<usize>,
    /// Coordinates skipped because the one-sided differences disagree (kinks).
    pub excluded: Vec<usize>,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.param(point.clone());
    Ok(f(&g, x)?.item())
}

/// Compares the tape gradient of scalar `f` at `point` against central
/// differences with step `1e-6`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, tol: f64) -> Result<FiniteDiffReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.param(point.clone());
        let y = f(&g, x)?;
        g.grad(y, &[x], false)?[0].value()
    };

    let f0 = eval(&f, point)?;
    let mut max_rel_error: f64 = 0.0;
    let mut worst_index = None;
    let mut excluded = Vec::new();
    let mut probe = point.clone();
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *point.iter().nth(k).expect("index in range");
        let set = |p: &mut Tensor, v: f64| {
            let cell = p.iter_mut().nth(k).expect("index in range");
            *cell = v;
        };
        set(&mut probe, orig + STEP);
        let fp = eval(&f, &probe)?;
        set(&mut probe, orig - STEP);
        let fm = eval(&f, &probe)?;
        set(&mut probe, orig);

        let forward = (fp - f0) / STEP;
        let backward = (f0 - fm) / STEP;
        if (forward - backward).abs() > 1e-3 * forward.abs().max(backward.abs()).max(1.0) {
            excluded.push(k);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if worst_index.is_none() || rel > max_rel_error {
            max_rel_error = rel;
            worst_index = Some(k);
        }
    }
    Ok(FiniteDiffReport {
        max_rel_error,
        worst_index,
        excluded,
        tol,
        passed: max_rel_error < tol,
    })
}
