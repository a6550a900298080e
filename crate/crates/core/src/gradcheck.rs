//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward kernels it checks.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Draws discarded because `[p - h, p + h]` straddles a relu6 clamp
    /// boundary or a max-pool argmax change, where differences are invalid.
    pub skipped_at_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// turning round-off into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `d loss / d p` from [`Graph::backward`] with central differences
/// of step `h` on `count` scalar entries drawn at random from `store`, with
/// every tensor sampled at least once. Entries whose difference stencil
/// crosses a non-differentiable point are redrawn.
pub fn check_gradients<F, R>(
    store: &mut ParamStore,
    loss_fn: F,
    count: usize,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, Var)>,
    R: Rng,
{
    store.zero_grad();
    for p in store.iter_mut() {
        p.tensor.clear_grad();
    }
    let (graph, loss) = loss_fn(store)?;
    graph.backward(loss, store)?;

    let base_sig = graph.kink_signature();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut forced: Vec<ParamId> = ids.clone();
    forced.reverse();

    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let (g, l) = loss_fn(s)?;
        Ok((g.value(l).item()?, g.kink_signature()))
    };

    let mut report = GradCheckReport::default();
    let max_draws = 50 * count.max(ids.len());
    let mut draws = 0;
    while report.samples.len() < count.max(ids.len()) && draws < max_draws {
        draws += 1;
        let id = match forced.last() {
            Some(&id) => id,
            None => *ids.choose(rng).expect("non-empty store"),
        };
        let index = rng.random_range(0..store.tensor(id).numel());
        let analytic = store.tensor(id).grad().map(|g| g[index]).unwrap_or(0.0);
        let orig = store.tensor(id).data()[index];
        store.tensor_mut(id).data_mut()[index] = orig + h;
        let (plus, sig_plus) = eval(store)?;
        store.tensor_mut(id).data_mut()[index] = orig - h;
        let (minus, sig_minus) = eval(store)?;
        store.tensor_mut(id).data_mut()[index] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_at_kinks += 1;
            continue;
        }
        if forced.last() == Some(&id) {
            forced.pop();
        }
        let numeric = (plus - minus) / (2.0 * h);
        report.samples.push(GradSample {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
