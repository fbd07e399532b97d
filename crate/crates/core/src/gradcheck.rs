//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::model::Model;
use crate::Result;

/// Gradients with magnitude below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            xs[i] = x[i] + h;
            let up = f(&xs);
            xs[i] = x[i] - h;
            let down = f(&xs);
            xs[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic parameter gradients of `loss_fn` against central
/// differences with step `h`.
///
/// Up to `coords_per_param` randomly chosen coordinates of every parameter
/// are perturbed (all of them when the parameter is smaller). `loss_fn` must
/// be a pure function of the model: it may record batch statistics in the
/// graph but the model itself is never mutated.
pub fn finite_diff_check<F>(
    model: &Model<f64>,
    loss_fn: F,
    h: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Model<f64>, &mut Graph<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(model, &mut g)?;
    let grads = g.backward(loss)?;
    let eval = |m: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(m, &mut g)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let n_params = model.params().len();
    for pi in 0..n_params {
        let (id, len) = {
            let p = model.params()[pi];
            (p.id, p.len())
        };
        let zero = crate::Tensor::zeros(model.params()[pi].value.dims());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        let coords: Vec<usize> = if len <= coords_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, coords_per_param).into_vec()
        };
        for i in coords {
            let orig = model.params()[pi].value.data()[i];
            probe.params_mut()[pi].value.data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_rel_error = max_rel_error.max(rel_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error, checked })
}
