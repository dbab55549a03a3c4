//! Chip-level hidden Markov model.
//!
//! Between chips `c` and `c + 1` only the layers in
//! [`ChannelConfig::changing_mask`] draw a new symbol, independently of the
//! symbol they replace. The transition probability into `to` is therefore a
//! function of `to` alone, provided `from` and `to` agree outside the mask.
//! Every recursion here exploits that: predecessor sums are sums over the
//! class of states that agree outside the mask.

use statrs::function::factorial::ln_factorial;

use crate::channel::{ChannelConfig, ObservationSequence, RateTable, StateVector};
use crate::error::{Error, Result};

/// Emission log-probability `log P(N = n)` for `N ~ Poisson(mean)`, with
/// `0·log 0 = 0`.
pub fn poisson_logpmf(n: u64, mean: f64) -> f64 {
    if mean <= 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mean.ln() - mean - ln_factorial(n)
}

/// Calls `f` on every submask of `mask`, including `0` and `mask` itself.
#[inline]
pub(crate) fn for_each_submask(mask: usize, mut f: impl FnMut(usize)) {
    let mut y = mask;
    loop {
        f(y);
        if y == 0 {
            break;
        }
        y = (y - 1) & mask;
    }
}

/// Replaces every entry with the sum over its class (states equal outside `mask`).
fn class_sums(values: &mut [f64], mask: usize) {
    if mask == 0 {
        return;
    }
    for base in 0..values.len() {
        if base & mask != 0 {
            continue;
        }
        let mut total = 0.0;
        for_each_submask(mask, |y| total += values[base | y]);
        for_each_submask(mask, |y| values[base | y] = total);
    }
}

/// HMM parameters derived from a channel configuration and a per-state rate table.
#[derive(Debug, Clone)]
pub struct HmmView<'a> {
    config: &'a ChannelConfig,
    rates: RateTable,
    initial: Vec<f64>,
}

/// Scaled forward/backward quantities.
#[derive(Debug, Clone)]
pub struct TrellisPosterior {
    states: usize,
    /// `T × S`, each row sums to 1.
    pub alpha: Vec<f64>,
    /// `T × S`, scaled so that `Σ_s alpha·beta = 1` on every row.
    pub beta: Vec<f64>,
    /// `log` of the per-chip normalizer, including the emission shift.
    pub log_scale: Vec<f64>,
    /// `log P(N_T)` in nats.
    pub log_likelihood: f64,
}

impl TrellisPosterior {
    pub fn chips(&self) -> usize {
        self.log_scale.len()
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// `P(S_c = s | N_T)`.
    pub fn posterior(&self, chip: usize, s: StateVector) -> f64 {
        let i = chip * self.states + s.0;
        self.alpha[i] * self.beta[i]
    }

    pub fn state_marginals(&self, chip: usize) -> Vec<f64> {
        (0..self.states)
            .map(|s| self.posterior(chip, StateVector(s)))
            .collect()
    }

    /// `P(bit `layer` of S_c = 1 | N_T)`.
    pub fn layer_marginal(&self, chip: usize, layer: usize) -> f64 {
        (0..self.states)
            .filter(|s| (s >> layer) & 1 == 1)
            .map(|s| self.posterior(chip, StateVector(s)))
            .sum()
    }
}

struct Forward {
    alpha: Vec<f64>,
    log_scale: Vec<f64>,
    /// Emission probabilities divided by `exp(shift_c)`.
    emission: Vec<f64>,
    /// Per-chip normalizer of the shifted emissions.
    scale: Vec<f64>,
}

impl<'a> HmmView<'a> {
    /// HMM with the configured rates `λ0 + Λᵀs`.
    pub fn new(config: &'a ChannelConfig) -> Self {
        Self::build(config, RateTable::from_config(config))
    }

    /// HMM with externally supplied per-state rates (e.g. channel estimates).
    pub fn with_rates(config: &'a ChannelConfig, rates: RateTable) -> Result<Self> {
        rates.check(config)?;
        Ok(Self::build(config, rates))
    }

    fn build(config: &'a ChannelConfig, rates: RateTable) -> Self {
        let initial = initial_distribution(config);
        HmmView {
            config,
            rates,
            initial,
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        self.config
    }

    pub fn rates(&self) -> &RateTable {
        &self.rates
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    fn states(&self) -> usize {
        self.config.num_states()
    }

    /// Probability of entering state `to` at chip `chip + 1`, before the
    /// class constraint is applied.
    pub(crate) fn entry_weight(&self, chip: usize, to: usize) -> f64 {
        let mask = self.config.changing_mask(chip);
        let mut w = 1.0;
        for i in 0..self.config.layers() {
            if mask >> i & 1 == 0 {
                continue;
            }
            let q = self
                .config
                .boundary_prior(i, self.config.symbol_index(i, chip + 1));
            w *= if to >> i & 1 == 1 { q } else { 1.0 - q };
        }
        w
    }

    /// `P(S_{c+1} = to | S_c = from)`.
    pub fn transition_prob(&self, chip: usize, from: StateVector, to: StateVector) -> Result<f64> {
        let chips = self.config.chip_count();
        if chip + 1 >= chips {
            return Err(Error::ChipOutOfRange {
                index: chip,
                count: chips.saturating_sub(1),
            });
        }
        let mask = self.config.changing_mask(chip);
        if (from.0 ^ to.0) & !mask != 0 {
            return Ok(0.0);
        }
        Ok(self.entry_weight(chip, to.0))
    }

    /// `log P(N_c = n | S_c = s)`.
    pub fn emission_logprob(&self, chip: usize, s: StateVector, n: u64) -> f64 {
        poisson_logpmf(n, self.config.chip_duration(chip) * self.rates.rate(s))
    }

    fn forward(&self, obs: &ObservationSequence) -> Result<Forward> {
        obs.check_length(self.config)?;
        let states = self.states();
        let chips = obs.len();
        let mut alpha = vec![0.0; chips * states];
        let mut emission = vec![0.0; chips * states];
        let mut log_scale = vec![0.0; chips];
        let mut scale = vec![0.0; chips];
        let mut pred = self.initial.clone();
        let mut logp = vec![0.0; states];

        for c in 0..chips {
            if c > 0 {
                let prev = &alpha[(c - 1) * states..c * states];
                pred.copy_from_slice(prev);
                class_sums(&mut pred, self.config.changing_mask(c - 1));
                for (s, p) in pred.iter_mut().enumerate() {
                    *p *= self.entry_weight(c - 1, s);
                }
            }
            let n = obs.counts[c];
            let mut shift = f64::NEG_INFINITY;
            for s in 0..states {
                logp[s] = self.emission_logprob(c, StateVector(s), n);
                if pred[s] > 0.0 && logp[s] > shift {
                    shift = logp[s];
                }
            }
            if shift == f64::NEG_INFINITY {
                return Err(Error::DegenerateLikelihood { chip: c });
            }
            let row = c * states;
            let mut total = 0.0;
            for s in 0..states {
                let b = (logp[s] - shift).exp();
                emission[row + s] = b;
                let a = pred[s] * b;
                alpha[row + s] = a;
                total += a;
            }
            if !(total > 0.0 && total.is_finite()) {
                return Err(Error::DegenerateLikelihood { chip: c });
            }
            alpha[row..row + states].iter_mut().for_each(|a| *a /= total);
            scale[c] = total;
            log_scale[c] = total.ln() + shift;
        }
        Ok(Forward {
            alpha,
            log_scale,
            emission,
            scale,
        })
    }

    /// Scaled forward-backward pass.
    pub fn forward_backward(&self, obs: &ObservationSequence) -> Result<TrellisPosterior> {
        let fwd = self.forward(obs)?;
        let states = self.states();
        let chips = obs.len();
        let mut beta = vec![0.0; chips * states];
        beta[(chips - 1) * states..].fill(1.0);
        let mut h = vec![0.0; states];
        for c in (0..chips - 1).rev() {
            let next = (c + 1) * states;
            for s in 0..states {
                h[s] = self.entry_weight(c, s) * fwd.emission[next + s] * beta[next + s];
            }
            class_sums(&mut h, self.config.changing_mask(c));
            let row = c * states;
            for s in 0..states {
                beta[row + s] = h[s] / fwd.scale[c + 1];
            }
        }
        let log_likelihood = fwd.log_scale.iter().sum();
        Ok(TrellisPosterior {
            states,
            alpha: fwd.alpha,
            beta,
            log_scale: fwd.log_scale,
            log_likelihood,
        })
    }

    /// Unconditional state marginals `P(S_c = s)`, one row per chip.
    pub fn prior_marginals(&self) -> Vec<Vec<f64>> {
        let chips = self.config.chip_count();
        let mut rows = Vec::with_capacity(chips);
        let mut cur = self.initial.clone();
        for c in 0..chips {
            if c > 0 {
                class_sums(&mut cur, self.config.changing_mask(c - 1));
                for (s, p) in cur.iter_mut().enumerate() {
                    *p *= self.entry_weight(c - 1, s);
                }
            }
            rows.push(cur.clone());
        }
        rows
    }

    /// `H(S_T | N_T = n)` in bits, by forward propagation of the entropy of
    /// the path posterior conditioned on the current state.
    pub fn sequence_entropy_given_obs(&self, obs: &ObservationSequence) -> Result<f64> {
        let fwd = self.forward(obs)?;
        let states = self.states();
        let chips = obs.len();
        // path entropy (nats) of S_0..S_{c-1} given S_c = s and N_0..N_c
        let mut h = vec![0.0; states];
        let mut next = vec![0.0; states];
        for c in 1..chips {
            let prev = &fwd.alpha[(c - 1) * states..c * states];
            let mask = self.config.changing_mask(c - 1);
            for base in 0..states {
                if base & mask != 0 {
                    continue;
                }
                let mut z = 0.0;
                for_each_submask(mask, |y| z += prev[base | y]);
                let mut acc = 0.0;
                if z > 0.0 {
                    for_each_submask(mask, |y| {
                        let p = prev[base | y] / z;
                        if p > 0.0 {
                            acc += p * (h[base | y] - p.ln());
                        }
                    });
                }
                for_each_submask(mask, |y| next[base | y] = acc);
            }
            std::mem::swap(&mut h, &mut next);
        }
        let last = &fwd.alpha[(chips - 1) * states..];
        let nats: f64 = last
            .iter()
            .zip(&h)
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, hs)| a * (hs - a.ln()))
            .sum();
        Ok((nats / std::f64::consts::LN_2).max(0.0))
    }
}

/// Initial state distribution: each layer's component is its first active
/// symbol, which is the implicit zero for every layer but the first in the
/// staggered layout.
pub fn initial_distribution(config: &ChannelConfig) -> Vec<f64> {
    (0..config.num_states())
        .map(|s| {
            (0..config.layers())
                .map(|i| {
                    let q = config.boundary_prior(i, config.symbol_index(i, 0));
                    if s >> i & 1 == 1 {
                        q
                    } else {
                        1.0 - q
                    }
                })
                .product()
        })
        .collect()
}

pub fn transition_prob(
    config: &ChannelConfig,
    chip: usize,
    from: StateVector,
    to: StateVector,
) -> Result<f64> {
    HmmView::new(config).transition_prob(chip, from, to)
}

pub fn emission_logprob(config: &ChannelConfig, chip: usize, s: StateVector, n: u64) -> f64 {
    HmmView::new(config).emission_logprob(chip, s, n)
}

pub fn forward_backward(
    config: &ChannelConfig,
    obs: &ObservationSequence,
) -> Result<TrellisPosterior> {
    HmmView::new(config).forward_backward(obs)
}

pub fn prior_marginals(config: &ChannelConfig) -> Vec<Vec<f64>> {
    HmmView::new(config).prior_marginals()
}

pub fn sequence_entropy_given_obs(config: &ChannelConfig, obs: &ObservationSequence) -> Result<f64> {
    HmmView::new(config).sequence_entropy_given_obs(obs)
}
