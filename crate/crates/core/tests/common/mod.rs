//! Exhaustive-enumeration reference for small channels. Everything here is
//! computed from first principles over all `2^(LM)` symbol matrices and does
//! not touch the trellis code.

#![allow(dead_code)]

use rand::Rng;
use superpos::{ChannelConfig, LayerSymbols, ObservationSequence};

pub fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

pub fn poisson_ln(n: u64, mean: f64) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mean.ln() - mean - ln_factorial(n)
}

/// Matrix number `index`: bit `i·M + m` is `z_{i,m}`.
pub fn matrix(layers: usize, symbols: usize, index: usize) -> LayerSymbols {
    let rows: Vec<Vec<u8>> = (0..layers)
        .map(|i| (0..symbols).map(|m| ((index >> (i * symbols + m)) & 1) as u8).collect())
        .collect();
    LayerSymbols::from_rows(&rows).unwrap()
}

/// Symbol of `layer` on `chip`; `None` on the implicit boundary zeros.
pub fn active_symbol(cfg: &ChannelConfig, layer: usize, chip: usize) -> Option<usize> {
    if cfg.is_aligned() {
        return Some(chip);
    }
    let l = cfg.layers();
    let start = chip.checked_sub(layer)?;
    Some(start / l).filter(|&m| m < cfg.symbols())
}

pub fn duration(cfg: &ChannelConfig, chip: usize) -> f64 {
    if cfg.is_aligned() {
        1.0
    } else {
        cfg.delays()[chip % cfg.layers()]
    }
}

pub fn chips(cfg: &ChannelConfig) -> usize {
    if cfg.is_aligned() {
        cfg.symbols()
    } else {
        cfg.symbols() * cfg.layers() + cfg.layers() - 1
    }
}

/// Expected count on `chip` given the full symbol matrix.
pub fn chip_mean(cfg: &ChannelConfig, z: &LayerSymbols, chip: usize) -> f64 {
    let mut rate = cfg.background_rate();
    for i in 0..cfg.layers() {
        if let Some(m) = active_symbol(cfg, i, chip) {
            if z.get(i, m) == 1 {
                rate += cfg.layer_rates()[i];
            }
        }
    }
    duration(cfg, chip) * rate
}

pub fn prior_prob(cfg: &ChannelConfig, z: &LayerSymbols) -> f64 {
    let mut p = 1.0;
    for i in 0..cfg.layers() {
        for m in 0..cfg.symbols() {
            let q = cfg.prior(i, m);
            p *= if z.get(i, m) == 1 { q } else { 1.0 - q };
        }
    }
    p
}

pub fn log_likelihood(cfg: &ChannelConfig, z: &LayerSymbols, obs: &ObservationSequence) -> f64 {
    (0..chips(cfg))
        .map(|c| poisson_ln(obs.counts[c], chip_mean(cfg, z, c)))
        .sum()
}

/// `N ln μ − μ` summed over chips: the detection metric without `ln N!`.
pub fn path_metric(cfg: &ChannelConfig, z: &LayerSymbols, obs: &ObservationSequence) -> f64 {
    (0..chips(cfg))
        .map(|c| {
            let mu = chip_mean(cfg, z, c);
            let n = obs.counts[c];
            if mu == 0.0 {
                if n == 0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                n as f64 * mu.ln() - mu
            }
        })
        .sum()
}

pub struct Enumeration {
    /// `ln P(N)`.
    pub log_evidence: f64,
    /// `P(z | N)` for every matrix index.
    pub posterior: Vec<f64>,
    /// Row-major `P(z_{i,m} = 1 | N)`.
    pub marginals: Vec<f64>,
    /// `H(Z | N = n)` in bits.
    pub entropy_bits: f64,
    /// Largest detection metric over matrices of positive prior.
    pub best_metric: f64,
}

pub fn enumerate(cfg: &ChannelConfig, obs: &ObservationSequence) -> Enumeration {
    let (l, m) = (cfg.layers(), cfg.symbols());
    let count = 1usize << (l * m);
    let mut log_joint = vec![f64::NEG_INFINITY; count];
    let mut best_metric = f64::NEG_INFINITY;
    for k in 0..count {
        let z = matrix(l, m, k);
        let p = prior_prob(cfg, &z);
        if p > 0.0 {
            log_joint[k] = p.ln() + log_likelihood(cfg, &z, obs);
            best_metric = best_metric.max(path_metric(cfg, &z, obs));
        }
    }
    let shift = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_joint.iter().map(|v| (v - shift).exp()).collect();
    let total: f64 = weights.iter().sum();
    let posterior: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut marginals = vec![0.0; l * m];
    for (k, p) in posterior.iter().enumerate() {
        for (b, slot) in marginals.iter_mut().enumerate() {
            if (k >> b) & 1 == 1 {
                *slot += p;
            }
        }
    }
    let entropy_bits = -posterior
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>();
    Enumeration {
        log_evidence: shift + total.ln(),
        posterior,
        marginals,
        entropy_bits,
        best_metric,
    }
}

/// Random staggered two-layer-or-more instance with counts in `0..=max_count`.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    layers: usize,
    symbols: usize,
    max_count: u64,
) -> (ChannelConfig, ObservationSequence) {
    let raw: Vec<f64> = (0..layers).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    let delays: Vec<f64> = raw.iter().map(|d| d / sum).collect();
    let rates: Vec<f64> = (0..layers).map(|_| rng.random_range(0.5..6.0)).collect();
    let priors: Vec<f64> = (0..layers * symbols).map(|_| rng.random_range(0.1..0.9)).collect();
    let background = rng.random_range(0.05..1.0);
    let cfg = ChannelConfig::new(layers, symbols, delays, rates, background, priors, false).unwrap();
    let counts = (0..cfg.chip_count()).map(|_| rng.random_range(0..=max_count)).collect();
    (cfg, ObservationSequence::new(counts))
}
