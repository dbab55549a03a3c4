//! EM estimation of per-state rates with pilots on a subset of layers.
//!
//! Chips are treated as independent mixture draws: at chip `c` the state
//! is known on the pilot layers (and on any layer sitting on a boundary
//! symbol) and free on the rest, with equal weight on every completion.

use crate::channel::{ChannelConfig, ObservationSequence, RateTable};
use crate::error::{Error, Result};
use crate::hmm::{for_each_submask, poisson_logpmf};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 200;

/// Per-state changes are measured relative to `max(λ_s, RELATIVE_FLOOR · max λ)`
/// so that a state with a vanishing rate cannot stall convergence.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Known symbols on the first `pilot_bits.len()` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    /// One row of `M` bits per pilot layer.
    pub pilot_bits: Vec<Vec<u8>>,
}

impl PilotConfig {
    pub fn none() -> Self {
        PilotConfig { pilot_bits: Vec::new() }
    }

    /// `layers` pilot rows, each the sequence `seq` repeated to length `symbols`.
    pub fn tiled(seq: &[u8], layers: usize, symbols: usize) -> Result<Self> {
        if seq.is_empty() && layers > 0 && symbols > 0 {
            return Err(Error::config("pilot_bits", "empty pilot sequence"));
        }
        let row: Vec<u8> = seq.iter().copied().cycle().take(symbols).collect();
        Ok(PilotConfig {
            pilot_bits: vec![row; layers],
        })
    }

    pub fn num_pilot_layers(&self) -> usize {
        self.pilot_bits.len()
    }

    fn check(&self, config: &ChannelConfig) -> Result<()> {
        if self.pilot_bits.len() > config.layers() {
            return Err(Error::config(
                "pilot_bits",
                format!("{} pilot layers for {} layers", self.pilot_bits.len(), config.layers()),
            ));
        }
        for (i, row) in self.pilot_bits.iter().enumerate() {
            if row.len() != config.symbols() {
                return Err(Error::LengthMismatch {
                    what: "pilot row",
                    expected: config.symbols(),
                    actual: row.len(),
                });
            }
            if let Some(j) = row.iter().position(|&b| b > 1) {
                return Err(Error::config(format!("pilot_bits[{i}][{j}]"), "must be 0 or 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    /// Estimated total rate per state, background included.
    pub lambda_hat: RateTable,
    /// Number of M-steps performed.
    pub iterations_run: usize,
    pub converged: bool,
    /// Rates before the first iteration and after each one.
    pub trajectory: Vec<Vec<f64>>,
    /// Mixture log-likelihood (nats) of each entry of `trajectory`.
    pub log_likelihood: Vec<f64>,
}

/// Candidate states at one chip: `fixed | y` for every submask `y` of `free`.
#[derive(Debug, Clone, Copy)]
struct Candidates {
    fixed: usize,
    free: usize,
}

fn candidates(config: &ChannelConfig, pilots: &PilotConfig) -> Vec<Candidates> {
    let lp = pilots.num_pilot_layers();
    (0..config.chip_count())
        .map(|c| {
            let mut fixed = 0;
            let mut free = 0;
            for i in 0..config.layers() {
                match config.symbol_index(i, c) {
                    None => {}
                    Some(m) if i < lp => fixed |= (pilots.pilot_bits[i][m] as usize) << i,
                    Some(_) => free |= 1 << i,
                }
            }
            Candidates { fixed, free }
        })
        .collect()
}

struct EStep {
    /// `Σ_t Q·N` per state.
    counts: Vec<f64>,
    /// `Σ_t Q·τ` per state.
    exposure: Vec<f64>,
    log_likelihood: f64,
}

fn e_step(
    config: &ChannelConfig,
    cands: &[Candidates],
    obs: &ObservationSequence,
    rates: &[f64],
) -> Result<EStep> {
    let states = rates.len();
    let mut counts = vec![0.0; states];
    let mut exposure = vec![0.0; states];
    let mut log_likelihood = 0.0;
    let mut logp: Vec<(usize, f64)> = Vec::with_capacity(states);
    for (c, cand) in cands.iter().enumerate() {
        let n = obs.counts[c];
        let tau = config.chip_duration(c);
        logp.clear();
        for_each_submask(cand.free, |y| {
            let s = cand.fixed | y;
            logp.push((s, poisson_logpmf(n, tau * rates[s])));
        });
        let shift = logp.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
        if shift == f64::NEG_INFINITY {
            return Err(Error::DegenerateLikelihood { chip: c });
        }
        let total: f64 = logp.iter().map(|&(_, l)| (l - shift).exp()).sum();
        log_likelihood += shift + (total / logp.len() as f64).ln();
        for &(s, l) in &logp {
            let q = (l - shift).exp() / total;
            counts[s] += q * n as f64;
            exposure[s] += q * tau;
        }
    }
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite("EM log-likelihood"));
    }
    Ok(EStep {
        counts,
        exposure,
        log_likelihood,
    })
}

fn check_init(config: &ChannelConfig, init: &RateTable) -> Result<()> {
    init.check(config)?;
    let r = init.as_slice();
    if let Some(s) = r.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::BadInit(format!("state {s} has rate {}", r[s])));
    }
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            if r[i] == r[j] {
                return Err(Error::BadInit(format!("states {i} and {j} share rate {}", r[i])));
            }
        }
    }
    Ok(())
}

/// Runs EM from `init` until the largest per-state relative change falls
/// below `tol` or `max_iters` M-steps have been performed.
///
/// `init` must be positive with distinct entries, ordered like the true
/// rates are believed to be. States never reachable given the pilots keep
/// their initial value.
pub fn em_estimate(
    config: &ChannelConfig,
    pilots: &PilotConfig,
    obs: &ObservationSequence,
    init: &RateTable,
    max_iters: usize,
    tol: f64,
) -> Result<EstimationResult> {
    pilots.check(config)?;
    obs.check_length(config)?;
    check_init(config, init)?;
    if !(tol >= 0.0) {
        return Err(Error::config("tol", "must be nonnegative"));
    }
    let cands = candidates(config, pilots);
    // With every state pinned the posteriors are indicators and one M-step is exact.
    let one_shot = cands.iter().all(|c| c.free == 0);

    let mut rates = init.as_slice().to_vec();
    let mut trajectory = vec![rates.clone()];
    let mut log_likelihood = Vec::new();
    let mut converged = false;
    let mut iterations_run = 0;
    while iterations_run < max_iters {
        let e = e_step(config, &cands, obs, &rates)?;
        log_likelihood.push(e.log_likelihood);
        let next: Vec<f64> = rates
            .iter()
            .enumerate()
            .map(|(s, &old)| {
                if e.exposure[s] > 0.0 {
                    e.counts[s] / e.exposure[s]
                } else {
                    old
                }
            })
            .collect();
        iterations_run += 1;
        let scale = next.iter().copied().fold(0.0, f64::max) * RELATIVE_FLOOR;
        let change = rates
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (b - a).abs() / a.max(b).max(scale).max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        rates = next;
        trajectory.push(rates.clone());
        if one_shot || change < tol {
            converged = true;
            break;
        }
    }
    log_likelihood.push(e_step(config, &cands, obs, &rates)?.log_likelihood);
    Ok(EstimationResult {
        lambda_hat: RateTable::new(rates)?,
        iterations_run,
        converged,
        trajectory,
        log_likelihood,
    })
}

/// A positive, strictly ordered starting point scaled to the observed mean
/// rate: state `s` gets `c·(0.01 + |s| + s/2^{L+1})` where `c` is the mean
/// per-layer rate implied by the counts.
pub fn default_init(
    config: &ChannelConfig,
    pilots: &PilotConfig,
    obs: &ObservationSequence,
) -> Result<RateTable> {
    pilots.check(config)?;
    obs.check_length(config)?;
    let layers = config.layers();
    let chips = obs.len() as f64;
    let mean_count = obs.counts.iter().map(|&n| n as f64).sum::<f64>() / chips;
    let mean_tau = (0..obs.len()).map(|c| config.chip_duration(c)).sum::<f64>() / chips;
    let mut c = 2.0 * mean_count / mean_tau / layers as f64;
    if !(c > 0.0) {
        c = 1.0;
    }
    let states = config.num_states();
    let rates = (0..states)
        .map(|s| c * (0.01 + s.count_ones() as f64 + 0.5 * s as f64 / states as f64))
        .collect();
    RateTable::new(rates)
}

/// Least-squares fit of `λ_s = λ0 + Σ_k λ_k s_k` over all states, returned
/// as `(λ0, [λ_1..λ_L])`.
pub fn layer_rates_from_states(rates: &RateTable) -> (f64, Vec<f64>) {
    let r = rates.as_slice();
    let states = r.len();
    let layers = states.trailing_zeros() as usize;
    let half = (states / 2) as f64;
    let mean = r.iter().sum::<f64>() / states as f64;
    // Full factorial design: each coefficient is a difference of half-means.
    let lambdas: Vec<f64> = (0..layers)
        .map(|k| {
            let (on, off) = r.iter().enumerate().fold((0.0, 0.0), |(on, off), (s, &x)| {
                if s >> k & 1 == 1 {
                    (on + x, off)
                } else {
                    (on, off + x)
                }
            });
            (on - off) / half
        })
        .collect();
    let background = mean - lambdas.iter().sum::<f64>() / 2.0;
    (background, lambdas)
}
