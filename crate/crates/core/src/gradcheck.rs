//! Central finite-difference check of tape gradients against a scalar loss.

use std::sync::Arc;

use crate::autograd::{Mat, Var};
use crate::backbone::Graph;
use crate::error::Result;
use crate::params::ParamStore;

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, GRAD_FLOOR)`.
    pub relative_error: f64,
}

/// Denominator floor so that gradients which vanish analytically (and are
/// only round-off numerically) do not count as mismatches.
pub const GRAD_FLOOR: f64 = 1e-5;

fn norm(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Compares `loss`'s gradients with central differences of step `h` for
/// every parameter in `store` (or the subset whose names start with one of
/// `only`, when non-empty).
pub fn check_params(
    store: &ParamStore,
    only: &[&str],
    h: f64,
    loss: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.tape.scalar(l))
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    let names: Vec<String> = store
        .names()
        .filter(|n| only.is_empty() || only.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    for name in names {
        let base = store.get(&name).expect("listed").clone();
        let mut numeric = Mat::zeros(base.raw_dim());
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let mut plus = base.clone();
            plus[[r, c]] += h;
            work.insert_arc(name.clone(), Arc::new(plus));
            let fp = eval(&work)?;
            let mut minus = base.clone();
            minus[[r, c]] -= h;
            work.insert_arc(name.clone(), Arc::new(minus));
            let fm = eval(&work)?;
            numeric[[r, c]] = (fp - fm) / (2.0 * h);
        }
        work.insert(name.clone(), base.clone());
        let a = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(base.raw_dim()));
        let (an, nn) = (norm(&a), norm(&numeric));
        let diff = norm(&(&a - &numeric));
        let relative_error = diff / (an + nn).max(GRAD_FLOOR);
        out.push(GradCheck {
            name,
            analytic_norm: an,
            numeric_norm: nn,
            relative_error,
        });
    }
    Ok(out)
}

/// Largest relative error reported by [`check_params`].
pub fn worst(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.relative_error).fold(0.0, f64::max)
}
