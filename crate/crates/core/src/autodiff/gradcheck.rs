use crate::error::{Error, Result};

use super::{Binding, ParamSet, Tape, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1, |a|, |n|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval_loss<F>(sets: &[ParamSet<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<Var>,
{
    let mut tape = Tape::new();
    let refs: Vec<&ParamSet<f64>> = sets.iter().collect();
    let binding = Binding::bind(&mut tape, &refs);
    let loss = f(&mut tape, &binding)?;
    tape.value(loss).item()
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on every coordinate of every set.
///
/// The sets are cloned, so callers keep their parameters untouched.
pub fn grad_check<F>(sets: &[ParamSet<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Binding) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::contract(format!(
            "finite-difference step {eps} outside [1e-6, 1e-4]"
        )));
    }
    let mut work: Vec<ParamSet<f64>> = sets.to_vec();

    let mut tape = Tape::new();
    let refs: Vec<&ParamSet<f64>> = work.iter().collect();
    let binding = Binding::bind(&mut tape, &refs);
    let loss = f(&mut tape, &binding)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for s in 0..work.len() {
        let ids: Vec<_> = work[s].ids().collect();
        for id in ids {
            let analytic = grads
                .get(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; work[s].value(id).numel()]);
            for (k, &a) in analytic.iter().enumerate() {
                let orig = work[s].value(id).data()[k];
                work[s].value_mut(id).data_mut()[k] = orig + eps;
                let up = eval_loss(&work, &f)?;
                work[s].value_mut(id).data_mut()[k] = orig - eps;
                let down = eval_loss(&work, &f)?;
                work[s].value_mut(id).data_mut()[k] = orig;

                let n = (up - down) / (2.0 * eps);
                let rel = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
                report.coordinates += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel >= report.max_rel_error {
                        report.worst = Some((work[s].name(id).to_string(), k));
                    }
                }
            }
        }
    }
    Ok(report)
}
