//! Finite-difference gradient checks.
//!
//! The loss is the mean squared error against fixed targets. Analytic
//! gradients come from the network in its own scalar type; the
//! central-difference oracle always runs in `f64` on the same parameter values,
//! so the check measures the backward pass rather than rounding of the loss.
//! The stencil is the fourth-order central difference over `±eps` and `±2 eps`.
//! Parameters whose perturbation flips a ReLU or max-pool branch are redrawn:
//! the loss is not differentiable across such a switch.

use rand::Rng;

use super::{ClassInput, Forward, Grads, Mode, ModelState, Real};
use crate::error::Result;
use crate::geometry::BodyRegion;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Scale below which gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub struct Problem<'a, T> {
    pub input: &'a [T],
    pub regions: &'a [BodyRegion],
    pub targets: &'a [f64],
    pub class: ClassInput,
    pub mode: Mode,
}

pub fn mse<T: Real>(fwd: &Forward<T>, targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    fwd.outputs.iter().zip(targets).map(|(&p, &t)| (p.f64() - t).powi(2)).sum::<f64>() / n
}

pub fn mse_grad<T: Real>(fwd: &Forward<T>, targets: &[f64]) -> Vec<T> {
    let n = targets.len() as f64;
    fwd.outputs.iter().zip(targets).map(|(&p, &t)| T::of(2.0 * (p.f64() - t) / n)).collect()
}

pub fn analytic<T: Real>(state: &ModelState<T>, p: &Problem<'_, T>) -> Result<Grads<T>> {
    let fwd = state.forward(p.input, p.regions, p.class, p.mode)?;
    state.backward(&fwd, &mse_grad(&fwd, p.targets))
}

/// Checks `n` random entries drawn from the parameter tensors in `tensors`.
pub fn check<T: Real>(
    state: &ModelState<T>,
    p: &Problem<'_, T>,
    tensors: &[usize],
    n: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let grads = analytic(state, p)?;
    let mut s64: ModelState<f64> = state.cast();
    let input: Vec<f64> = p.input.iter().map(|v| v.f64()).collect();
    let base = s64.forward(&input, p.regions, p.class, p.mode)?;
    let sizes: Vec<usize> = tensors.iter().map(|&t| s64.params()[t].data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng_for(seed, &[0x6C]);
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_err: 0.0, max_abs_err: 0.0 };
    let budget = 20 * n.max(1);
    while report.checked < n.min(total) && report.checked + report.skipped < budget {
        let mut k = rng.gen_range(0..total);
        let mut slot = 0;
        while k >= sizes[slot] {
            k -= sizes[slot];
            slot += 1;
        }
        let t = tensors[slot];
        let w0 = s64.params()[t].data[k];
        let mut eval = |w: f64| -> Result<(f64, Forward<f64>)> {
            s64.params_mut()[t].data[k] = w;
            let f = s64.forward(&input, p.regions, p.class, p.mode)?;
            Ok((mse(&f, p.targets), f))
        };
        let mut losses = [0.0; 4];
        let mut smooth = true;
        for (l, step) in losses.iter_mut().zip([eps, -eps, 2.0 * eps, -2.0 * eps]) {
            let (loss, f) = eval(w0 + step)?;
            *l = loss;
            smooth &= base.same_switches(&f);
        }
        s64.params_mut()[t].data[k] = w0;
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let [lp, lm, lp2, lm2] = losses;
        let numeric = (8.0 * (lp - lm) - (lp2 - lm2)) / (12.0 * eps);
        let a = grads[t][k].f64();
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Parameter tensors grouped by layer type: conv, batch norm, fully connected.
pub fn layer_groups<T: Real>(state: &ModelState<T>) -> [(&'static str, Vec<usize>); 3] {
    let names = |pred: &dyn Fn(&str) -> bool| -> Vec<usize> {
        state.params().iter().enumerate().filter(|(_, t)| pred(&t.name)).map(|(i, _)| i).collect()
    };
    [
        ("conv", names(&|n| n.starts_with("conv"))),
        ("batch_norm", names(&|n| n.starts_with("bn"))),
        ("fc", names(&|n| n.starts_with("head"))),
    ]
}
