//! Central finite-difference checking of analytic gradients.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! the backward rules it checks.

use crate::kernel::{Graph, KernelError, ParamId, Tensor, Var};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    /// Lower bound on the relative-error denominator. Gradients smaller than
    /// this are compared in absolute terms.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    /// `(analytic, numeric)` at the worst entry.
    pub worst_values: (f64, f64),
}

impl FdReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((input, elem));
            self.worst_values = (analytic, numeric);
        }
    }

    pub fn merge(&mut self, other: &FdReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every element of every input of `f`, a scalar-valued graph
/// function.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: FdConfig, f: F) -> Result<FdReport, KernelError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, KernelError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = FdReport::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let analytic = grads.wrt(*var).map_or(0.0, |t| t.data()[e]);
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(i, e, analytic, numeric, cfg.floor);
        }
    }
    Ok(report)
}

/// Checks parameters of `store` against central differences. `select`
/// returns the flat element indices to check for a parameter; returning
/// `0..numel` checks every scalar.
pub fn check_params<F, S>(
    store: &ParamStore,
    ids: &[ParamId],
    cfg: FdConfig,
    select: S,
    f: F,
) -> Result<FdReport, KernelError>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Result<Var, KernelError>,
    S: Fn(ParamId, usize) -> Vec<usize>,
{
    let grads = {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        g.backward(out)?
    };
    let analytic: Vec<Option<Tensor>> = ids
        .iter()
        .map(|id| {
            grads.params().filter(|(p, _)| p == id).fold(None, |acc: Option<Tensor>, (_, t)| {
                Some(match acc {
                    None => t.clone(),
                    Some(mut a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                            *x += y;
                        }
                        a
                    }
                })
            })
        })
        .collect();
    let eval = |s: &ParamStore| -> Result<f64, KernelError> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut work = store.clone();
    let mut report = FdReport::default();
    for (i, &id) in ids.iter().enumerate() {
        for e in select(id, store.value(id).numel()) {
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[e]);
            let orig = store.value(id).data()[e];
            work.get_mut(id).value.data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            report.record(id.0, e, a, (plus - minus) / (2.0 * cfg.step), cfg.floor);
        }
    }
    Ok(report)
}
