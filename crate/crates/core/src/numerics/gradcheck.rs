//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Var};

/// Which entries of each parameter get perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// Every element of every parameter.
    All,
    /// Up to `n` evenly spaced elements of every parameter (always including
    /// the first and last).
    PerParam(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub entries_checked: usize,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// |a − n| / (max(|a|, |n|) + 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

fn entry_indices(len: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..len).collect(),
        Coverage::PerParam(n) if n >= len => (0..len).collect(),
        Coverage::PerParam(0) => Vec::new(),
        Coverage::PerParam(1) => vec![0],
        Coverage::PerParam(n) => {
            let mut v: Vec<usize> = (0..n).map(|i| i * (len - 1) / (n - 1)).collect();
            v.dedup();
            v
        }
    }
}

fn eval<T: Real, F>(store: &ParamStore<T>, f: &mut F) -> Result<(Graph<T>, Var)>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let v = g.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric("gradcheck: non-finite loss".into()));
    }
    Ok((g, loss))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(p+h) − f(p−h)) / 2h`, restricted to `params`.
pub fn finite_diff_gradcheck<T: Real, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    h: f64,
    coverage: Coverage,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let (graph, loss) = eval(store, &mut f)?;
    let grads = graph.backward(loss)?;
    drop(graph);

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        params: Vec::new(),
    };
    for &id in params {
        let analytic = grads.param(id).cloned();
        let name = store.get(id).name.clone();
        let len = store.tensor(id).len();
        let mut worst = 0.0f64;
        let idx = entry_indices(len, coverage);
        for &e in &idx {
            let orig = store.tensor(id).data()[e];
            store.get_mut(id).tensor.data_mut()[e] = T::lit(orig.as_f64() + h);
            let (gp, lp) = eval(store, &mut f)?;
            let fp = gp.value(lp).data()[0].as_f64();
            store.get_mut(id).tensor.data_mut()[e] = T::lit(orig.as_f64() - h);
            let (gm, lm) = eval(store, &mut f)?;
            let fm = gm.value(lm).data()[0].as_f64();
            store.get_mut(id).tensor.data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[e].as_f64());
            let rel = relative_error(a, numeric);
            if rel > worst {
                worst = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(format!("{name}[{e}]: analytic {a:e} vs numeric {numeric:e}"));
            }
        }
        report.entries_checked += idx.len();
        report.params.push(ParamCheck {
            name,
            checked: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

/// Every parameter in the store.
pub fn all_params<T: Real>(store: &ParamStore<T>) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}
