//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs the forward pass, so it is an independent
//! oracle for the backward rules on the tape.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-input comparison between reverse-mode and finite-difference gradients.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub max_abs_err: f64,
    /// `max_abs_err / max(|numeric|_inf, floor)`.
    pub rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation switched a relu or maxpool branch.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

/// Fixed pseudo-random projection weights so the checked scalar is a generic
/// linear functional of the output (a plain sum can hide errors, e.g. behind
/// batch norm).
fn probe(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.618_033_988_75).fract() * 2.0 - 1.0).collect()
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F, track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { g.variable(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let w = Tensor::new(g.shape(out).to_vec(), probe(g.value(out).len()))?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    Ok((g, vars, loss))
}

/// Checks `d/dx <probe, f(x)>` for every element of every input.
///
/// A coordinate whose `x +- step` evaluation lands on a different relu or
/// maxpool branch than `x` straddles a kink, where the central difference
/// does not estimate the derivative; such coordinates are counted in
/// `skipped` instead of being compared.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = eval(inputs, &f, true)?;
    g.backward(loss)?;
    let base = g.branch_pattern();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad_slice(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, an) in analytic.iter().enumerate() {
        let mut max_err = 0.0f64;
        let mut scale = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let (gp, _, lp) = eval(&work, &f, false)?;
            work[k].data_mut()[i] = orig - step;
            let (gm, _, lm) = eval(&work, &f, false)?;
            work[k].data_mut()[i] = orig;
            if gp.branch_pattern() != base || gm.branch_pattern() != base {
                skipped += 1;
                continue;
            }
            checked += 1;
            let num = (gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * step);
            max_err = max_err.max((num - an[i]).abs());
            scale = scale.max(num.abs());
        }
        reports.push(InputReport {
            max_abs_err: max_err,
            rel_err: max_err / scale.max(1e-8),
            checked,
            skipped,
        });
    }
    Ok(GradReport { inputs: reports })
}
