//! Central finite-difference checks of tape gradients.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Worst relative error against the extrapolated difference.
    pub max_rel_error: f64,
    /// Worst relative error against the plain central difference at `eps`.
    pub max_rel_error_plain: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    /// Coordinates whose `+-eps` probes switched a max-pool winner or ReLU
    /// sign; central differences are not valid there, so they are redrawn.
    pub straddled: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on
/// near-zero gradients from dominating.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of `build`'s scalar output against finite
/// differences on `coords` coordinates drawn uniformly from all parameters
/// (every coordinate when the store is small enough).
///
/// The reference is the central difference at `eps` with one Richardson
/// step, `(4 D(eps/2) - D(eps)) / 3`, which cancels the `eps^2` truncation
/// term. The plain `D(eps)` error is reported alongside.
pub fn check<F>(
    store: &ParamStore<f64>,
    build: F,
    eps: f64,
    coords: usize,
    seed_value: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    check_where(store, build, eps, coords, seed_value, |_| true)
}

/// As [`check`], drawing coordinates only from parameters whose name
/// satisfies `keep`.
pub fn check_where<F, K>(
    store: &ParamStore<f64>,
    build: F,
    eps: f64,
    coords: usize,
    seed_value: u64,
    keep: K,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
    K: Fn(&str) -> bool,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    g.accumulate_param_grads(&grads, &mut with_grads)?;

    let index: Vec<(String, usize)> = store
        .iter()
        .filter(|(name, _)| keep(name))
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    // Small stores are checked exhaustively; otherwise coordinates are drawn
    // at random until `coords` valid ones have been compared.
    let exhaustive = index.len() <= coords;
    let mut rng = seed::rng(seed_value);
    let max_draws = if exhaustive { index.len() } else { 4 * coords };

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::inference();
        let out = build(&mut g, s)?;
        Ok((g.value(out).data()[0], g.branch_signature()))
    };
    let base_sig = g.branch_signature();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_rel_error_plain: 0.0,
        worst: None,
        straddled: 0,
    };
    let mut probe = store.clone();
    for draw in 0..max_draws {
        if !exhaustive && report.checked == coords {
            break;
        }
        let (name, i) = if exhaustive {
            index[draw].clone()
        } else {
            index[rng.gen_range(0..index.len())].clone()
        };
        let orig = probe.value(&name)?.data()[i];
        let mut diff = |h: f64| -> Result<Option<f64>> {
            probe.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let (up, sig_up) = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let (down, sig_down) = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            Ok((sig_up == base_sig && sig_down == base_sig).then(|| (up - down) / (2.0 * h)))
        };
        let (Some(d1), Some(d2)) = (diff(eps)?, diff(eps / 2.0)?) else {
            report.straddled += 1;
            continue;
        };
        let numeric = (4.0 * d2 - d1) / 3.0;
        let analytic = with_grads.get(&name)?.grad.data()[i];
        let err = rel_error(analytic, numeric, 1e-6);
        report.max_rel_error_plain = report.max_rel_error_plain.max(rel_error(analytic, d1, 1e-6));
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name, i, analytic, numeric));
        }
    }
    Ok(report)
}
