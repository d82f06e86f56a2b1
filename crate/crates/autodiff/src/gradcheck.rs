//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{ParamId, ParamStore};

/// Step used for central differences.
pub const STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale:
/// `rel = |a - n| / max(|a|, |n|, FLOOR)`.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the analytic gradient of the scalar returned by `loss` against
/// central differences for every entry of `params` (or at most `max_entries`
/// per parameter, evenly strided, when given).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    max_entries: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    let grads = g.backward(out)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.scalar(out))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &id in params {
        let len = store.tensor(id).len();
        let stride = match max_entries {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for k in (0..len).step_by(stride) {
            let original = store.tensor(id).values()[k];
            store.tensor_mut(id).values_mut()[k] = original + STEP;
            let plus = eval(store)?;
            store.tensor_mut(id).values_mut()[k] = original - STEP;
            let minus = eval(store)?;
            store.tensor_mut(id).values_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g[k]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
            }
        }
    }
    Ok(report)
}
