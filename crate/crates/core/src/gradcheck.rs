//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::tensor::{Graph, ParamSet, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self
    }
}

/// Denominator floor for the relative error, so that gradients which are
/// zero up to round-off are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks every scalar of every tensor in `params`.
///
/// `loss` must build a scalar on the graph reading its parameters through
/// [`crate::tensor::Scope::train`] on the set it is handed.
pub fn check_params<F>(params: &mut ParamSet, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    params.clear_grads();
    let mut g = Graph::new();
    let out = loss(&mut g, params)?;
    g.backward(out)?.accumulate_into(params);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    params.clear_grads();

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, ps)?;
        Ok(g.value(out)[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.get(id).numel() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[id.index()][j], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
