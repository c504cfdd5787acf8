use super::{Graph, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index (over parameters in registration order) of the worst scalar.
    pub worst_parameter_index: Option<usize>,
    /// Parameter node holding the worst scalar.
    pub worst_node: Option<NodeId>,
    /// Analytic and numeric derivative at the worst scalar.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub pass: bool,
}

/// `|a - n| / max(1e-12, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compare the analytic gradient of `loss` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every scalar parameter.
///
/// Leaves the graph with its original parameter values and a fresh forward
/// pass.
pub fn grad_check(
    graph: &mut Graph,
    loss: NodeId,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    graph.forward()?;
    let analytic = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_index: None,
        worst_node: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        pass: true,
    };
    let params = graph.params().to_vec();
    let mut flat = 0;
    for p in params {
        let original = graph.value(p)?.clone();
        let grad = analytic.get(p).expect("every parameter has a gradient").clone();
        for j in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[j] += epsilon;
            graph.set_value(p, plus)?;
            graph.forward()?;
            let lp = graph.value(loss)?.item();

            let mut minus = original.clone();
            minus.data_mut()[j] -= epsilon;
            graph.set_value(p, minus)?;
            graph.forward()?;
            let lm = graph.value(loss)?.item();

            let numeric = (lp - lm) / (2.0 * epsilon);
            let err = relative_error(grad.data()[j], numeric);
            if err > report.max_relative_error || report.worst_parameter_index.is_none() {
                report.max_relative_error = err;
                report.worst_parameter_index = Some(flat);
                report.worst_node = Some(p);
                report.worst_analytic = grad.data()[j];
                report.worst_numeric = numeric;
            }
            flat += 1;
            report.checked += 1;
        }
        graph.set_value(p, original)?;
    }
    graph.forward()?;
    report.pass = report.max_relative_error <= tolerance;
    Ok(report)
}
