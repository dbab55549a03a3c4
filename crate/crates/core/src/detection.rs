//! Viterbi sequence detection and BCJR symbol posteriors on the chip trellis.

use crate::channel::{ChannelConfig, LayerSymbols, ObservationSequence, RateTable, StateVector};
use crate::error::{Error, Result};
use crate::hmm::{for_each_submask, HmmView, TrellisPosterior};

/// Tolerance for the per-span consistency check on symbol posteriors.
const SPAN_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub hard_bits: LayerSymbols,
    /// Row-major `L × M` values of `P(z = 1 | N_T)`; BCJR only.
    pub posteriors: Option<Vec<f64>>,
    /// Log-likelihood metric of the detected path; Viterbi only.
    pub path_metric: Option<f64>,
}

/// `N·log(τλ) − τλ`, with `0·log 0 = 0`.
fn chip_metric(n: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mean.ln() - mean
}

/// Sum of chip metrics along the state path induced by `symbols`.
pub fn path_metric(
    config: &ChannelConfig,
    rates: &RateTable,
    obs: &ObservationSequence,
    symbols: &LayerSymbols,
) -> Result<f64> {
    rates.check(config)?;
    obs.check_length(config)?;
    let path = config.state_path(symbols)?;
    Ok(path
        .iter()
        .enumerate()
        .map(|(c, &s)| chip_metric(obs.counts[c], config.chip_duration(c) * rates.rate(s)))
        .sum())
}

fn symbols_from_path(config: &ChannelConfig, path: &[usize]) -> LayerSymbols {
    let mut z = LayerSymbols::zeros(config.layers(), config.symbols());
    for i in 0..config.layers() {
        for m in 0..config.symbols() {
            let c = *config.symbol_span(i, m).start();
            z.set(i, m, (path[c] >> i & 1) as u8);
        }
    }
    z
}

/// Maximum-likelihood state path over transitions with positive prior
/// probability. Ties resolve to the smallest state index, both for the final
/// state and for every predecessor.
pub fn viterbi_detect(
    config: &ChannelConfig,
    rates: &RateTable,
    obs: &ObservationSequence,
) -> Result<DetectionOutput> {
    let hmm = HmmView::with_rates(config, rates.clone())?;
    obs.check_length(config)?;
    let states = config.num_states();
    let chips = obs.len();
    let mut back = vec![0usize; chips * states];
    let metric = |c: usize, s: usize| {
        chip_metric(obs.counts[c], config.chip_duration(c) * rates.rate(StateVector(s)))
    };

    let mut delta: Vec<f64> = (0..states)
        .map(|s| {
            if hmm.initial()[s] > 0.0 {
                metric(0, s)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let mut next = vec![f64::NEG_INFINITY; states];
    for c in 1..chips {
        let mask = config.changing_mask(c - 1);
        for base in (0..states).filter(|b| b & mask == 0) {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for_each_submask(mask, |y| {
                let v = base | y;
                if delta[v] > best || (delta[v] == best && v < arg) {
                    best = delta[v];
                    arg = v;
                }
            });
            for_each_submask(mask, |y| {
                let s = base | y;
                back[c * states + s] = arg;
                next[s] = if hmm.entry_weight(c - 1, s) > 0.0 {
                    best + metric(c, s)
                } else {
                    f64::NEG_INFINITY
                };
            });
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let (mut state, best) = delta
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (s, &d)| if d > m { (s, d) } else { (a, m) });
    if best == f64::NEG_INFINITY {
        return Err(Error::DegenerateLikelihood { chip: chips - 1 });
    }
    let mut path = vec![0usize; chips];
    for c in (0..chips).rev() {
        path[c] = state;
        if c > 0 {
            state = back[c * states + state];
        }
    }
    Ok(DetectionOutput {
        hard_bits: symbols_from_path(config, &path),
        posteriors: None,
        path_metric: Some(best),
    })
}

/// `P(z_{i,m} = 1 | N_T)` in row-major `L × M` order, read off the trellis
/// posterior at the first chip of each symbol's span.
pub fn symbol_posteriors(config: &ChannelConfig, post: &TrellisPosterior) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.layers() * config.symbols());
    for i in 0..config.layers() {
        for m in 0..config.symbols() {
            let span = config.symbol_span(i, m);
            let p = post.layer_marginal(*span.start(), i);
            debug_assert!(
                span.clone()
                    .all(|c| (post.layer_marginal(c, i) - p).abs() < SPAN_TOLERANCE),
                "inconsistent span posterior for layer {i} symbol {m}"
            );
            out.push(p.clamp(0.0, 1.0));
        }
    }
    out
}

/// Symbol-wise MAP detection; hard decisions are `posterior > 0.5`.
pub fn bcjr_posteriors(
    config: &ChannelConfig,
    rates: &RateTable,
    obs: &ObservationSequence,
) -> Result<DetectionOutput> {
    let post = HmmView::with_rates(config, rates.clone())?.forward_backward(obs)?;
    let posteriors = symbol_posteriors(config, &post);
    let mut hard_bits = LayerSymbols::zeros(config.layers(), config.symbols());
    for (k, &p) in posteriors.iter().enumerate() {
        hard_bits.set(k / config.symbols(), k % config.symbols(), u8::from(p > 0.5));
    }
    Ok(DetectionOutput {
        hard_bits,
        posteriors: Some(posteriors),
        path_metric: None,
    })
}
