use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

const ATTEMPTS: [(f64, Stencil); 6] = [
    (1e-5, Stencil::Central),
    (1e-6, Stencil::Central),
    (1e-5, Stencil::Forward),
    (1e-5, Stencil::Backward),
    (1e-7, Stencil::Central),
    (1e-4, Stencil::Central),
];

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients with central differences, step
/// `1e-5 · (|w| + 1)`, on at most `max_per_param` evenly spaced entries of
/// every trainable parameter. An entry that disagrees is retried with a
/// smaller step and with one-sided stencils, since a ReLU or max-pool switch
/// inside the interval breaks the difference, not the gradient; then with a
/// larger step, for gradients small enough that rounding in the loss
/// dominates. The best attempt's error counts.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    loss: F,
    tolerance: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let (g, l) = loss(s)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok(v)
    };
    store.zero_grad();
    let (g, l) = loss(store)?;
    g.backward(l, store)?;
    drop(g);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::new();
    for id in ids {
        let analytic = store.grad(id).clone();
        if !analytic.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
        }
        let n = analytic.len();
        let count = n.min(max_per_param.max(1));
        let mut worst: f64 = 0.0;
        for s in 0..count {
            let i = s * n / count;
            let a = analytic.data()[i];
            let mut err = f64::INFINITY;
            for (scale, stencil) in ATTEMPTS {
                let numeric = difference(store, id, i, scale, stencil, &eval)?;
                err = err.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
                if err < tolerance {
                    break;
                }
            }
            worst = worst.max(err);
        }
        params.push(ParamCheck { name: store.get(id).name.clone(), checked: count, max_rel_error: worst });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_error, tolerance, passed: max_rel_error < tolerance })
}

/// Where the difference stencil sits around the weight.
#[derive(Clone, Copy)]
enum Stencil {
    Central,
    /// Second-order one-sided: `(∓3f(w) ± 4f(w±h) ∓ f(w±2h)) / 2h`.
    Forward,
    Backward,
}

fn difference(
    store: &mut ParamStore<f64>,
    id: ParamId,
    i: usize,
    scale: f64,
    stencil: Stencil,
    eval: &impl Fn(&ParamStore<f64>) -> Result<f64>,
) -> Result<f64> {
    let w = store.value(id).data()[i];
    let h = scale * (w.abs() + 1.0);
    let mut at = |offset: f64| {
        store.get_mut(id).value.data_mut()[i] = w + offset * h;
        let v = eval(store);
        store.get_mut(id).value.data_mut()[i] = w;
        v
    };
    Ok(match stencil {
        Stencil::Central => (at(1.0)? - at(-1.0)?) / (2.0 * h),
        Stencil::Forward => (-3.0 * at(0.0)? + 4.0 * at(1.0)? - at(2.0)?) / (2.0 * h),
        Stencil::Backward => (3.0 * at(0.0)? - 4.0 * at(-1.0)? + at(-2.0)?) / (2.0 * h),
    })
}
