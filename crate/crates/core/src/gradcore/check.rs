//! Central finite-difference gradient checking.

use super::{GradError, Graph, Tensor, Var};

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index and flat element of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Checks `backward` against central differences with step `h`.
///
/// `build` records a scalar function of the parameter leaves it receives; it
/// is re-run on fresh graphs with perturbed parameters for the numeric side.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    h: f64,
    build: F,
) -> Result<GradCheck, GradError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, GradError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, GradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let root = build(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).data().to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, e);
            }
        }
    }
    Ok(report)
}
