//! Central finite-difference checks of tape gradients.

use crate::error::{CcpError, Result};
use crate::network::Network;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error floor: differences are measured against
/// `max(|analytic|, |numeric|, REL_FLOOR)` so exact zeros do not blow up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the tape gradient of a scalar function of one tensor.
pub fn grad_check<F>(f: F, at: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(at), step, tol)
}

/// Checks the tape gradient of a scalar function of several tensors, every
/// one of them treated as trainable.
pub fn grad_check_many<F>(f: F, at: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if at.iter().any(|t| !t.is_finite()) {
        return Err(CcpError::InvalidArgument(
            "gradient check requested at a non-finite point".into(),
        ));
    }
    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(CcpError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;

    let mut point = at.to_vec();
    let mut per_input = Vec::with_capacity(at.len());
    for (which, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(at[which].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let mut worst: f64 = 0.0;
        for idx in 0..at[which].len() {
            let orig = at[which].data()[idx];
            point[which].data_mut()[idx] = orig + step;
            let up = eval(&point)?;
            point[which].data_mut()[idx] = orig - step;
            let down = eval(&point)?;
            point[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[idx], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}

/// Checks the total-loss gradient of every parameter of `net` on a fixed
/// batch, dropout off. `per_input` follows [`Network::param_names`]. A
/// frozen hierarchy stays as cached, so frozen memberships check as zero.
pub fn network_grad_check(
    net: &Network,
    signals: &Tensor,
    labels: &[usize],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let loss = |net: &Network| -> Result<f64> {
        let mut tape = Tape::new();
        let rec = net.record(&mut tape, signals, labels, None)?;
        Ok(tape.scalar(rec.total))
    };
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, signals, labels, None)?;
    let grads = tape.backward(rec.total)?;
    let analytic: Vec<Tensor> = rec
        .params
        .iter()
        .zip(net.params())
        .map(|(v, t)| {
            v.and_then(|v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let mut probe = net.clone();
    let mut per_input = Vec::with_capacity(analytic.len());
    for (which, g) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for idx in 0..g.len() {
            let orig = probe.params()[which].data()[idx];
            probe.params_mut()[which].data_mut()[idx] = orig + step;
            let up = loss(&probe)?;
            probe.params_mut()[which].data_mut()[idx] = orig - step;
            let down = loss(&probe)?;
            probe.params_mut()[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[idx], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}
