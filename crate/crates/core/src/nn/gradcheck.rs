//! Central finite-difference gradient checker.
//!
//! The numerical side only ever evaluates forward passes, so it is
//! independent of every backward rule it validates.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOutcome {
    /// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` over checked entries.
    pub rel_error: f64,
    pub checked: usize,
    /// Entries where a ReLU changed its active piece inside `[x−h, x+h]`;
    /// the finite difference is meaningless there.
    pub skipped_kinks: usize,
}

impl GradCheckOutcome {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.rel_error < tol
    }
}

/// Compares backprop gradients of `loss_fn` with central differences of step
/// `h` on the parameters `targets`. At most `max_entries` coordinates
/// (sampled without replacement) are checked.
pub fn check_gradients<R, F>(
    store: &mut ParamStore,
    targets: &[ParamId],
    h: f32,
    max_entries: usize,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<GradCheckOutcome>
where
    R: Rng,
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let (analytic, base_sig) = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        let grads = g.backward(loss)?;
        let per_param: Vec<Vec<f32>> = targets
            .iter()
            .map(|&id| {
                grads
                    .param(id)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).len()])
            })
            .collect();
        (per_param, g.relu_signature())
    };

    let coords: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .flat_map(|(k, &id)| (0..store.get(id).len()).map(move |i| (k, i)))
        .collect();
    let picked: Vec<(usize, usize)> = if coords.len() > max_entries {
        sample(rng, coords.len(), max_entries).into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        Ok((g.scalar(loss) as f64, g.relu_signature()))
    };

    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for (k, i) in picked {
        let id = targets[k];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let (lp, sp) = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - h;
        let (lm, sm) = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            continue;
        }
        // the step actually taken in f32
        let step = ((orig + h) as f64) - ((orig - h) as f64);
        let numeric = (lp - lm) / step;
        let a = analytic[k][i] as f64;
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        checked += 1;
    }
    let denom = a2.sqrt() + n2.sqrt();
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheckOutcome {
        rel_error,
        checked,
        skipped_kinks: skipped,
    })
}

/// Scalar `Σ r ⊙ y` with a fixed random `r ∈ [-1, 1]`, so every output
/// element contributes with a distinct weight.
pub fn random_projection<R: Rng>(g: &mut Graph, y: Var, rng: &mut R) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())?;
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}
