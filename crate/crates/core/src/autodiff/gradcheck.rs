use serde::Serialize;

use crate::autodiff::{Graph, NodeId, ParamId, ParameterStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are judged on an absolute scale instead of amplifying
/// round-off from the central difference.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

/// Round-off allowance, in units of `eps * |f| / h`, of one central difference.
pub const ROUNDOFF_ULPS: f64 = 16.0;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares backward-pass gradients with central differences
/// `(f(p+h) - f(p-h)) / 2h` for every coordinate of the selected parameters
/// (all of them when `only` is `None`).
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`, where
/// the floor is the larger of [`DEFAULT_REL_FLOOR`] and the difference's own
/// round-off scale divided by `tolerance`. Coordinates with a vanishing
/// gradient are thus held to the absolute accuracy a central difference can
/// deliver.
///
/// `f` must be deterministic given the store; any sampling noise has to be
/// drawn from a fixed seed inside `f`.
pub fn grad_check<F>(
    mut f: F,
    store: &mut ParameterStore,
    only: Option<&[ParamId]>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::domain("grad_check", format!("step {step} must be > 0")));
    }
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };

    store.zero_grad();
    let mut graph = Graph::new();
    let root = f(&mut graph, store)?;
    if !graph.scalar_value(root).is_finite() {
        return Err(Error::Evaluation {
            param: "<unperturbed>".into(),
        });
    }
    graph.backward(root, store)?;
    drop(graph);

    let mut eval = |store: &ParameterStore, name: &str| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        let v = g.scalar_value(root);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation {
                param: name.to_string(),
            })
        }
    };

    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.grad(id).clone();
        let name = store.get(id).name.clone();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for c in 0..analytic.len() {
            let orig = store.value(id).data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + step;
            let plus = eval(store, &name);
            store.get_mut(id).value.data_mut()[c] = orig - step;
            let minus = eval(store, &name);
            store.get_mut(id).value.data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            let numeric = (plus - minus) / (2.0 * step);
            let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.abs().max(minus.abs()) / step;
            let floor = DEFAULT_REL_FLOOR.max(noise / tolerance);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        params.push(ParamCheck {
            name,
            coords: analytic.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            analytic_norm: analytic.norm(),
        });
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        step,
        tolerance,
        params,
        max_rel_error,
        passed: max_rel_error < tolerance,
    })
}
