//! Central finite-difference check of parameter gradients.

use super::params::{Graph, ParamStore};
use crate::error::Result;
use crate::numcore::Var;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `‖g_analytic − g_fd‖ / max(‖g_analytic‖, ‖g_fd‖, 1e-12)`
    pub rel_err: f64,
    pub abs_err: f64,
    pub analytic_norm: f64,
}

/// Below this absolute error both gradients are treated as zero: the
/// difference quotient carries roundoff of order `1e-16 · |loss| / h`.
pub const ABS_FLOOR: f64 = 1e-8;

impl GradCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.rel_err < rel_tol || self.abs_err < ABS_FLOOR
    }
}

/// Compares the tape gradient of `loss` against central differences with
/// step `h` for every trainable parameter of `store`.
pub fn param_gradcheck(
    store: &ParamStore,
    h: f64,
    loss: impl Fn(&mut Graph<'_>) -> Result<Var>,
) -> Result<Vec<GradCheck>> {
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad(s);
        let l = loss(&mut g)?;
        Ok(g.tape.scalar_value(l))
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.trainable().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let zeros = vec![0.0; n];
        let ga = analytic.get(id).unwrap_or(&zeros);
        let mut fd = vec![0.0; n];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = ga.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(ga).max(norm(&fd)).max(1e-12);
        out.push(GradCheck {
            name: store.name(id).to_string(),
            rel_err: norm(&diff) / scale,
            abs_err: norm(&diff),
            analytic_norm: norm(ga),
        });
    }
    Ok(out)
}
