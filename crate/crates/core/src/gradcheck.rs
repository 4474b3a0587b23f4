//! Central finite-difference verification of analytic gradients.

use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss is not finite at probe {param}[{element}] (offset {offset:+e})")]
    Probe {
        param: String,
        element: usize,
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Element index of the worst error.
    pub worst_element: usize,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares `backward` against central differences for every element of
/// every parameter in `store`.
///
/// `loss_fn` builds a rank-0 loss from the store's current values. Stored
/// gradients are left zeroed afterwards.
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradReport, GradCheckError>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, TensorError>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss_fn(store, &mut g)?;
    g.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    store.zero_grad();
    check_against(store, &analytic, loss_fn, step, tolerance)
}

/// Like [`check_gradients`] but with caller-supplied analytic gradients,
/// one vector per parameter in store order.
pub fn check_against<F>(
    store: &mut ParamStore<f64>,
    analytic: &[Vec<f64>],
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
) -> Result<GradReport, GradCheckError>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, TensorError>,
{
    let mut eval = |store: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let out = loss_fn(store, &mut g)?;
        Ok(g.value(out).item())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (pi, id) in ids.into_iter().enumerate() {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let mut report = ParamReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_element: 0,
            flagged: Vec::new(),
        };
        for e in 0..n {
            let orig = store.value(id).data()[e];
            let mut probe = |offset: f64, store: &mut ParamStore<f64>| {
                store.get_mut(id).value.data_mut()[e] = orig + offset;
                let v = eval(store);
                store.get_mut(id).value.data_mut()[e] = orig;
                match v {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) | Err(TensorError::NonFinite { .. }) | Err(TensorError::Domain { .. }) => Err(GradCheckError::Probe {
                        param: name.clone(),
                        element: e,
                        offset,
                    }),
                    Err(other) => Err(other.into()),
                }
            };
            let plus = probe(step, store)?;
            let minus = probe(-step, store)?;
            let fd = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[pi][e], fd);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_element = e;
            }
            if err > tolerance {
                report.flagged.push(e);
            }
        }
        params.push(report);
    }
    Ok(GradReport { tolerance, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_loss_has_zero_error() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[3], &[0.1, -2.0, 5.0]).unwrap()).unwrap();
        let id = s.id("p").unwrap();
        let rep = check_gradients(
            &mut s,
            |st, g| {
                let p = g.param(st, id)?;
                g.sum(p)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed());
        assert!(rep.max_rel_error() < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
        let rep = check_against(
            &mut s,
            &[vec![2.0, 4.5]],
            |st, g| {
                let p = g.param(st, id)?;
                let sq = g.mul(p, p)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.params[0].flagged, vec![1]);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let mut s = ParamStore::new();
        // log(p) with p exactly at the step size: the minus probe hits 0.
        let id = s.add("p", Tensor::from_f64(&[1], &[1e-4]).unwrap()).unwrap();
        let err = check_gradients(
            &mut s,
            |st, g| {
                let p = g.param(st, id)?;
                let l = g.log(p)?;
                g.sum(l)
            },
            1e-4,
            1e-4,
        );
        assert!(matches!(err, Err(GradCheckError::Probe { element: 0, .. })));
    }
}
