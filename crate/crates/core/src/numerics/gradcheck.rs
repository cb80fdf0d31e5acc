//! Central finite-difference checker. It only ever evaluates the forward
//! function, so it stays independent of the reverse-mode path it audits.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Absolute floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_coords` coordinates per input are
/// probed (chosen with `rng`); pass `usize::MAX` for all of them.
pub fn check<Fun>(
    inputs: &[Tensor<f64>],
    f: Fun,
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&graph, &vars)?;
    graph.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<_> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut coords: Vec<usize> = (0..input.len()).collect();
        if coords.len() > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
        }
        for &j in &coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Random tensor with entries in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(-scale, scale))
}

/// Like [`check`], but probes the trainable entries of a parameter store.
/// `f` receives the store bound to a fresh graph.
pub fn check_params<Fun>(
    store: &ParamStore<f64>,
    f: Fun,
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    Fun: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let bound = store.bind(&graph);
    let out = f(&graph, &bound)?;
    graph.backward(out)?;
    let analytic = bound.grads();

    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let b = work.bind_constant(&g);
        Ok(f(&g, &b)?.value().item())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (i, entry) in store.entries().iter().enumerate() {
        if entry.frozen {
            continue;
        }
        let id = ParamId(i);
        let mut coords: Vec<usize> = (0..entry.value.len()).collect();
        if coords.len() > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
        }
        for &j in &coords {
            let orig = entry.value.data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
