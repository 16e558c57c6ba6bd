//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over probed elements.
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub probes: Vec<Probe>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// One probed element: `inputs[input].data()[element]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Checks a scalar function of one tensor at every element.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let probes = (0..at.numel()).map(|element| Probe { input: 0, element }).collect::<Vec<_>>();
    grad_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(at), &probes, eps, tol)
}

/// Checks a scalar function of several tensors at the listed probes.
pub fn grad_check_inputs<F>(
    f: F,
    inputs: &[Tensor],
    probes: &[Probe],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = g.backward(out)?;

    let mut analytic = Vec::with_capacity(probes.len());
    let mut numeric = Vec::with_capacity(probes.len());
    let mut max_rel: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for p in probes {
        let a = grads.get(vars[p.input]).map_or(0.0, |t| t.data()[p.element]);
        let orig = work[p.input].data()[p.element];
        work[p.input].data_mut()[p.element] = orig + eps;
        let fp = eval_scalar(&f, &work)?;
        work[p.input].data_mut()[p.element] = orig - eps;
        let fm = eval_scalar(&f, &work)?;
        work[p.input].data_mut()[p.element] = orig;
        let n = (fp - fm) / (2.0 * eps);
        max_rel = max_rel.max((a - n).abs() / n.abs().max(1.0));
        analytic.push(a);
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        tol,
        passed: max_rel < tol,
        probes: probes.to_vec(),
        analytic,
        numeric,
    })
}

/// Picks up to `max` probes spread uniformly over all elements of `inputs`.
pub fn sample_probes<R: Rng + ?Sized>(inputs: &[Tensor], max: usize, rng: &mut R) -> Vec<Probe> {
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut picks = sample(rng, total, max.min(total)).into_vec();
    picks.sort_unstable();
    let mut out = Vec::with_capacity(picks.len());
    let (mut input, mut base) = (0, 0);
    for flat in picks {
        while flat >= base + inputs[input].numel() {
            base += inputs[input].numel();
            input += 1;
        }
        out.push(Probe { input, element: flat - base });
    }
    out
}
