//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only evaluates forward values in `f64`; it never touches the
//! reverse pass it is used to check.

use crate::error::Result;

use super::{ParamStore, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-3;
/// Magnitude below which errors are measured absolutely rather than
/// relatively (`|a − n| / max(|a|, |n|, floor)`).
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if self.checked == 1 || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = format!("{} analytic={analytic:.8e} numeric={numeric:.8e}", label());
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < REL_TOLERANCE
    }
}

/// Checks `d f / d inputs` for a scalar-valued graph builder.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.input(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(|| format!("input {i}[{j}]"), analytic[j], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks `d f / d θ` for every parameter element in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_params_with_step(store, FD_STEP, f)
}

/// Same as [`check_params`] with an explicit central-difference step. Deep
/// graphs with ReLU and max-pool kinks need a step small enough not to cross
/// a branch.
pub fn check_params_with_step<F>(store: &ParamStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&tape, &grads);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        Ok(tape.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for id in store.ids() {
        for j in 0..store.tensor(id).numel() {
            let orig = store.tensor(id).data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{j}]"), analytic.get(id).grad[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
