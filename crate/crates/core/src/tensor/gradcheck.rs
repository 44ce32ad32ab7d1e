use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

/// Worst analytic-vs-numeric discrepancy for each parameter of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` in parameter-table order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// `|a - n|_2 / (|a|_2 + |n|_2)`, zero when both vanish.
pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares analytic gradients of `loss` against central differences.
///
/// Every scalar of every parameter is perturbed by `±epsilon` and the graph is
/// replayed. Only 64-bit graphs are accepted. The graph's parameters are
/// restored and re-evaluated before returning.
pub fn grad_check<T: Scalar>(graph: &mut Graph<T>, loss: NodeId, epsilon: f64) -> Result<GradCheckReport> {
    if T::PRECISION != Precision::Verification {
        return Err(Error::PrecisionRequired("grad_check"));
    }
    let analytic = graph.backward(loss)?;
    let eps = T::from_f64_lossy(epsilon);
    let two_eps = epsilon * 2.0;
    let mut per_param = Vec::with_capacity(graph.params().len());
    for id in 0..graph.params().len() {
        let len = graph.params().by_id(id).len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = graph.params().by_id(id).data()[i];
            graph.params_mut().by_id_mut(id).data_mut()[i] = orig + eps;
            graph.evaluate()?;
            let plus = graph.value(loss).item()?.as_f64();
            graph.params_mut().by_id_mut(id).data_mut()[i] = orig - eps;
            graph.evaluate()?;
            let minus = graph.value(loss).item()?.as_f64();
            graph.params_mut().by_id_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / two_eps);
        }
        let a: Vec<f64> = analytic.by_id(id).data().iter().map(|v| v.as_f64()).collect();
        per_param.push((graph.params().name(id).to_string(), relative_error(&a, &numeric)));
    }
    graph.evaluate()?;
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamSet, Tensor};

    #[test]
    fn identity_graph_is_exact() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::<f64>::scalar(0.0));
        let mut g = Graph::new(p);
        let loss = g.param("p").unwrap();
        let report = grad_check(&mut g, loss, 1e-5).unwrap();
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn linear_graph_is_tight() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::<f64>::from_fn([1, 2, 3, 3], |_, c, y, x| 0.1 * (c + y) as f64 - 0.07 * x as f64));
        let mut g = Graph::new(p);
        let x = g.param("p").unwrap();
        let s = g.scale(x, -2.5).unwrap();
        let loss = g.sum(s).unwrap();
        assert!(grad_check(&mut g, loss, 1e-5).unwrap().worst() <= 1e-10);
    }

    #[test]
    fn single_precision_is_rejected() {
        let mut p = ParamSet::new();
        p.insert("p", Tensor::<f32>::scalar(1.0));
        let mut g = Graph::new(p);
        let loss = g.param("p").unwrap();
        assert!(matches!(grad_check(&mut g, loss, 1e-3), Err(Error::PrecisionRequired(_))));
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[-1.0]), 1.0);
    }
}
