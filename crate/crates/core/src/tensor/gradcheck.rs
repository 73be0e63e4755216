use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `loss` against central finite
/// differences for every element of every trainable parameter and returns
/// the worst relative error.
pub fn grad_check(
    graph: &Graph,
    feed: &[(&str, &Tensor)],
    params: &ParamStore,
    loss: NodeId,
    eps: f64,
) -> Result<f64> {
    let analytic = {
        let fwd = graph.eval(feed, params)?;
        graph.backprop(&fwd, loss, params)?
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = probe.require(name)?.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + eps;
            let plus = graph.eval(feed, &probe)?.value(loss).item()?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - eps;
            let minus = graph.eval(feed, &probe)?.value(loss).item()?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
