//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamStore};

/// Analytic and numeric gradients of one parameter tensor, restricted to the
/// probed entries.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both gradients vanish.
    pub fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Compares backpropagated gradients of `loss` with central differences of
/// step `h`, probing at most `max_entries` evenly spaced entries per tensor.
pub fn check_gradients<F>(store: &ParamStore<f64>, h: f64, max_entries: usize, loss: F) -> Vec<GradCheck>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Var<'g, f64>,
{
    let analytic = {
        let g = Graph::new();
        let p = store.bind(&g, true);
        let out = loss(&g, &p);
        let mut grads = g.backward(&out);
        p.vars()
            .iter()
            .map(|v| grads.take(v).map(|t| t.data))
            .collect::<Vec<_>>()
    };
    let eval = |s: &ParamStore<f64>| {
        let g = Graph::new();
        let p = s.bind(&g, false);
        let out = loss(&g, &p);
        let v = out.value().data[0];
        v
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for (i, spec) in store.specs().iter().enumerate() {
        let n = store.values()[i].numel();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut a = Vec::new();
        let mut num = Vec::new();
        for j in (0..n).step_by(stride) {
            let orig = work.values()[i].data[j];
            work.values_mut()[i].data[j] = orig + h;
            let plus = eval(&work);
            work.values_mut()[i].data[j] = orig - h;
            let minus = eval(&work);
            work.values_mut()[i].data[j] = orig;
            num.push((plus - minus) / (2.0 * h));
            a.push(analytic[i].as_ref().map_or(0.0, |g| g[j]));
        }
        out.push(GradCheck {
            name: spec.name.clone(),
            analytic: a,
            numeric: num,
        });
    }
    out
}

/// The largest relative error of a set of checks, with its tensor name.
pub fn worst(checks: &[GradCheck]) -> (String, f64) {
    checks
        .iter()
        .map(|c| (c.name.clone(), c.rel_error()))
        .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}
