//! Central-difference gradient verification against the tape.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Max relative error between tape gradients and central differences over
/// the trainable entries of `params`.
///
/// `build` constructs the scalar loss on a fresh graph from the store; it
/// is re-invoked for every probe. At most `max_coords` coordinates per
/// entry are probed (evenly strided) to keep the check cheap on large
/// tensors.
pub fn finite_diff_check(
    build: &dyn Fn(&mut Graph, &ParamStore) -> Result<Var>,
    params: &mut ParamStore,
    h: f32,
    max_coords: usize,
) -> Result<f64> {
    params.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    g.backward(loss)?;
    g.accumulate_param_grads(params)?;
    let mut analytic = BTreeMap::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in &names {
        analytic.insert(name.clone(), params.get(name)?.grad.data.clone());
    }
    params.zero_grads();

    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        Ok(g.scalar_value(loss) as f64)
    };

    let mut max_rel = 0.0f64;
    for name in &names {
        if !params.get(name)?.trainable {
            continue;
        }
        let n = params.get(name)?.value.numel();
        let stride = (n / max_coords.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = params.get(name)?.value.data[idx];
            params.get_mut(name)?.value.data[idx] = orig + h;
            let fp = eval(params)?;
            params.get_mut(name)?.value.data[idx] = orig - h;
            let fm = eval(params)?;
            params.get_mut(name)?.value.data[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h as f64);
            let a = analytic[name][idx] as f64;
            // Each loss evaluation is a rounded f32, so the central
            // difference can only resolve gradients down to this floor;
            // differences inside it are measurement noise, not error.
            let floor =
                4.0 * f32::EPSILON as f64 * fp.abs().max(fm.abs()) / (2.0 * h as f64);
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = ((a - numeric).abs() - floor).max(0.0) / denom;
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
