//! Central finite differences, used as the oracle for the analytic tape.

use super::graph::{Gradients, Graph, NodeId};
use super::params::ParameterStore;
use crate::error::Result;

/// Denominator floor for relative error, so coordinates whose true gradient
/// is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference gradient of `f` for every coordinate of every trainable tensor.
pub fn finite_diff_gradient<F>(mut f: F, store: &ParameterStore, eps: f64) -> Result<Gradients>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Gradients::new();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = work.get(&name).map_or(0, |t| t.numel());
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = central_difference(&mut f, &mut work, &name, i, eps)?;
        }
        out.insert(name, g);
    }
    Ok(out)
}

fn central_difference<F>(f: &mut F, work: &mut ParameterStore, name: &str, i: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let orig = work.get(name).expect("known parameter").data()[i];
    work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
    let plus = f(work)?;
    work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
    let minus = f(work)?;
    work.get_mut(name).unwrap().data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Largest analytic gradient magnitude seen, to catch vacuous all-zero checks.
    pub max_abs_grad: f64,
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences. With `max_coords`, at most that many evenly spaced
/// coordinates are probed per tensor.
pub fn check_gradients<B>(
    store: &ParameterStore,
    mut build: B,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    B: FnMut(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    let analytic = graph.gradients(loss)?;

    let mut eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        max_abs_grad: 0.0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = store.get(&name).unwrap().numel();
        let zeros = vec![0.0; n];
        let a = analytic.get(&name).unwrap_or(&zeros);
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let numeric = central_difference(&mut eval, &mut work, &name, i, eps)?;
            let err = relative_error(a[i], numeric);
            report.coords_checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(a[i].abs());
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
