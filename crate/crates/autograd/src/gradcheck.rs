//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of every backward rule it is used to verify.

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||, floor)`.
    pub rel_error: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

const NORM_FLOOR: f64 = 1e-6;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

fn eval<E, F>(store: &ParamStore<f64>, f: &mut F) -> Result<f64, E>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    Ok(g.value(out).item())
}

/// Checks the gradient of the scalar built by `f` w.r.t. every trainable
/// parameter in `store`, using step `h`.
pub fn check_params<E, F>(store: &ParamStore<f64>, h: f64, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let analytic = g.backward(out)?.for_store(store);
    drop(g);

    let mut work = store.clone();
    let mut tensors = Vec::new();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let numel = store.get(id).numel();
        let mut numeric = vec![0.0; numel];
        for j in 0..numel {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work, &mut f)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work, &mut f)?;
            work.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * h);
        }
        let an = analytic[id.index()]
            .as_ref()
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            numel,
            rel_error: rel_error(&an, &numeric),
            numeric_norm: numeric.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(GradCheckReport { tensors })
}

/// Numeric gradient of a scalar function of one tensor.
pub fn numeric_gradient<E>(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64, E>,
) -> Result<Tensor<f64>, E> {
    let mut work = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for j in 0..x.numel() {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + h;
        let plus = f(&work)?;
        work.data_mut()[j] = orig - h;
        let minus = f(&work)?;
        work.data_mut()[j] = orig;
        out.data_mut()[j] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Relative error between two gradient tensors with the same floor as
/// [`check_params`].
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    rel_error(analytic.data(), numeric.data())
}
