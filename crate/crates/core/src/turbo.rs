//! Iterative joint detection and decoding.
//!
//! Each global iteration runs the per-chip soft detector, hands per-layer
//! log-ratios to the LDPC decoders, and turns the decoder outputs into
//! symbol probabilities that the next detector pass uses to marginalize the
//! interfering layers.

use rayon::prelude::*;

use crate::channel::{ChannelConfig, LayerSymbols, ObservationSequence, RateTable};
use crate::error::{Error, Result};
use crate::hmm::poisson_logpmf;
use crate::ldpc::{LdpcCode, DEFAULT_MIN_SUM_SCALE};

/// Magnitude cap applied to every log-ratio before it is exponentiated.
pub const LLR_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftKind {
    /// `log P(N | z = 1) / P(N | z = 0)`.
    Llr,
    /// `log P(z = 1 | N) / P(z = 0 | N)`.
    Lar,
}

/// Row-major `L × M` log-ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftInfo {
    pub values: Vec<f64>,
    pub kind: SoftKind,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Decoders receive LLRs.
    Ml,
    /// Decoders receive LARs (LLR plus prior log-odds).
    Map,
}

/// How an LLR is turned into `P(z = 1)` in ML mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlrPosterior {
    /// `1 / (1 + exp(−(q/(1−q))·LLR))`.
    PriorScaled,
    /// `1 / (1 + exp(−(LLR + log(q/(1−q)))))`.
    PriorOffset,
}

pub fn logistic(x: f64) -> f64 {
    let x = x.clamp(-LLR_CLAMP, LLR_CLAMP);
    1.0 / (1.0 + (-x).exp())
}

/// `log(p / (1 − p))`, clamped.
pub fn log_odds(p: f64) -> f64 {
    (p.ln() - (1.0 - p).ln()).clamp(-LLR_CLAMP, LLR_CLAMP)
}

impl SoftInfo {
    /// LAR = LLR + prior log-odds, elementwise.
    pub fn to_lar(&self, config: &ChannelConfig) -> SoftInfo {
        match self.kind {
            SoftKind::Lar => self.clone(),
            SoftKind::Llr => SoftInfo {
                values: self
                    .values
                    .iter()
                    .zip(config.priors())
                    .map(|(&v, &q)| (v + log_odds(q)).clamp(-LLR_CLAMP, LLR_CLAMP))
                    .collect(),
                kind: SoftKind::Lar,
                iteration: self.iteration,
            },
        }
    }

    /// Symbol probabilities `P(z = 1)`.
    pub fn probabilities(&self, config: &ChannelConfig, form: LlrPosterior) -> Vec<f64> {
        self.values
            .iter()
            .zip(config.priors())
            .map(|(&v, &q)| match (self.kind, form) {
                (SoftKind::Lar, _) => logistic(v),
                (SoftKind::Llr, LlrPosterior::PriorScaled) => {
                    if q <= 0.0 {
                        0.0
                    } else if q >= 1.0 {
                        1.0
                    } else {
                        logistic(q / (1.0 - q) * v)
                    }
                }
                (SoftKind::Llr, LlrPosterior::PriorOffset) => logistic(v + log_odds(q)),
            })
            .collect()
    }
}

/// Per-symbol log-likelihood ratios summed over each symbol's chips.
///
/// At every chip the other active layers are averaged out using
/// `interferers` (row-major `P(z = 1)`), or the configured priors when
/// `None`. Layers sitting on a boundary symbol are known to be zero.
pub fn detector_llr(
    config: &ChannelConfig,
    rates: &RateTable,
    obs: &ObservationSequence,
    interferers: Option<&[f64]>,
) -> Result<SoftInfo> {
    rates.check(config)?;
    obs.check_length(config)?;
    let layers = config.layers();
    let symbols = config.symbols();
    let probs = interferers.unwrap_or(config.priors());
    if probs.len() != layers * symbols {
        return Err(Error::LengthMismatch {
            what: "interferer probabilities",
            expected: layers * symbols,
            actual: probs.len(),
        });
    }
    let states = config.num_states();
    let mut values = vec![0.0; layers * symbols];
    let mut logb = vec![0.0; states];
    let mut active: Vec<(usize, usize)> = Vec::with_capacity(layers);
    for c in 0..obs.len() {
        let tau = config.chip_duration(c);
        active.clear();
        active.extend((0..layers).filter_map(|i| config.symbol_index(i, c).map(|m| (i, m))));
        let live: usize = active.iter().map(|&(i, _)| 1 << i).sum();
        let mut shift = f64::NEG_INFINITY;
        for s in (0..states).filter(|s| s & !live == 0) {
            logb[s] = poisson_logpmf(obs.counts[c], tau * rates.as_slice()[s]);
            shift = shift.max(logb[s]);
        }
        if shift == f64::NEG_INFINITY {
            return Err(Error::DegenerateLikelihood { chip: c });
        }
        for &(k, m) in &active {
            let mut e = [0.0f64; 2];
            for s in (0..states).filter(|s| s & !live == 0) {
                let w: f64 = active
                    .iter()
                    .filter(|&&(j, _)| j != k)
                    .map(|&(j, mj)| {
                        let p = probs[j * symbols + mj];
                        if s >> j & 1 == 1 {
                            p
                        } else {
                            1.0 - p
                        }
                    })
                    .product();
                e[s >> k & 1] += w * (logb[s] - shift).exp();
            }
            let term = match (e[1] > 0.0, e[0] > 0.0) {
                (true, true) => e[1].ln() - e[0].ln(),
                (true, false) => LLR_CLAMP,
                (false, true) => -LLR_CLAMP,
                (false, false) => 0.0,
            };
            values[k * symbols + m] += term;
        }
    }
    values.iter_mut().for_each(|v| *v = v.clamp(-LLR_CLAMP, LLR_CLAMP));
    Ok(SoftInfo {
        values,
        kind: SoftKind::Llr,
        iteration: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurboOptions {
    pub mode: DecodeMode,
    pub global_iters: usize,
    pub ldpc_iters: usize,
    pub min_sum_scale: f64,
    pub llr_posterior: LlrPosterior,
    /// Feed back decoder output minus decoder input instead of the full posterior.
    pub extrinsic: bool,
}

impl Default for TurboOptions {
    fn default() -> Self {
        TurboOptions {
            mode: DecodeMode::Map,
            global_iters: 5,
            ldpc_iters: 25,
            min_sum_scale: DEFAULT_MIN_SUM_SCALE,
            llr_posterior: LlrPosterior::PriorScaled,
            extrinsic: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointDecodeOutput {
    /// Hard codeword decisions of the best iteration, one row per layer.
    pub codewords: LayerSymbols,
    /// Information bits of each layer from the best iteration.
    pub info_bits: Vec<Vec<u8>>,
    /// Whether each layer's parity checks pass in the best iteration.
    pub converged: Vec<bool>,
    /// Global iteration (1-based) reported.
    pub best_iteration: usize,
    pub iterations_run: usize,
    /// Unsatisfied checks summed over layers, per global iteration.
    pub unsatisfied: Vec<usize>,
    /// Decoder input of every global iteration.
    pub soft_inputs: Vec<SoftInfo>,
}

/// Turbo detection and decoding with one codeword per layer. Stops after
/// `global_iters` or once every layer decodes to a valid codeword, and
/// reports the iteration with the fewest unsatisfied checks (the latest
/// on ties).
pub fn joint_decode(
    config: &ChannelConfig,
    rates: &RateTable,
    obs: &ObservationSequence,
    codes: &[LdpcCode],
    options: &TurboOptions,
) -> Result<JointDecodeOutput> {
    let layers = config.layers();
    let symbols = config.symbols();
    if codes.len() != layers {
        return Err(Error::LengthMismatch {
            what: "codes per layer",
            expected: layers,
            actual: codes.len(),
        });
    }
    for code in codes {
        if code.n() != symbols {
            return Err(Error::LengthMismatch {
                what: "code length",
                expected: symbols,
                actual: code.n(),
            });
        }
    }
    let mut probs: Option<Vec<f64>> = None;
    let mut soft_inputs = Vec::new();
    let mut unsatisfied = Vec::new();
    let mut best: Option<(usize, Vec<crate::ldpc::DecodeResult>)> = None;
    for v in 1..=options.global_iters.max(1) {
        let mut soft = detector_llr(config, rates, obs, probs.as_deref())?;
        soft.iteration = v;
        if options.mode == DecodeMode::Map {
            soft = soft.to_lar(config);
        }
        let decoded: Vec<_> = codes
            .par_iter()
            .enumerate()
            .map(|(k, code)| {
                code.decode(
                    &soft.values[k * symbols..(k + 1) * symbols],
                    options.ldpc_iters,
                    options.min_sum_scale,
                )
            })
            .collect::<Result<_>>()?;
        let unsat: usize = decoded.iter().map(|d| d.unsatisfied).sum();
        unsatisfied.push(unsat);
        let done = decoded.iter().all(|d| d.converged);

        let mut out: Vec<f64> = decoded.iter().flat_map(|d| d.posterior_llr.iter().copied()).collect();
        if options.extrinsic {
            out.iter_mut().zip(&soft.values).for_each(|(o, i)| *o -= i);
        }
        let feedback = SoftInfo {
            values: out,
            kind: soft.kind,
            iteration: v,
        };
        probs = Some(feedback.probabilities(config, options.llr_posterior));
        soft_inputs.push(soft);

        if best.as_ref().is_none_or(|(b, _)| unsat <= unsatisfied[*b - 1]) {
            best = Some((v, decoded));
        }
        if done {
            break;
        }
    }
    let (best_iteration, decoded) = best.expect("at least one iteration");
    let mut codewords = LayerSymbols::zeros(layers, symbols);
    for (k, d) in decoded.iter().enumerate() {
        codewords.set_row(k, &d.bits);
    }
    Ok(JointDecodeOutput {
        info_bits: decoded
            .iter()
            .zip(codes)
            .map(|(d, code)| code.extract_info(&d.bits))
            .collect(),
        converged: decoded.iter().map(|d| d.converged).collect(),
        codewords,
        best_iteration,
        iterations_run: unsatisfied.len(),
        unsatisfied,
        soft_inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_llr_is_exact() {
        let cfg = ChannelConfig::symmetric(1, 4, 3.0, 0.5, 0.5).unwrap();
        let obs = ObservationSequence::new(vec![0, 2, 5, 1]);
        let soft = detector_llr(&cfg, &RateTable::from_config(&cfg), &obs, None).unwrap();
        for (m, &n) in obs.counts.iter().enumerate() {
            let expected = n as f64 * (3.5f64 / 0.5).ln() - 3.0;
            assert!((soft.values[m] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn known_interferer_gives_genie_llr() {
        let cfg = ChannelConfig::new(2, 3, vec![0.3, 0.7], vec![4.0, 6.0], 0.2, vec![0.5; 6], false)
            .unwrap();
        let z = LayerSymbols::from_rows(&[vec![1, 0, 1], vec![0, 1, 1]]).unwrap();
        let obs = cfg.sample_observations(&z, 3).unwrap();
        let rates = RateTable::from_config(&cfg);
        let mut probs = vec![0.5; 6];
        for m in 0..3 {
            probs[3 + m] = logistic(if z.get(1, m) == 1 { LLR_CLAMP } else { -LLR_CLAMP });
        }
        let soft = detector_llr(&cfg, &rates, &obs, Some(&probs)).unwrap();
        for m in 0..3 {
            let genie: f64 = cfg
                .symbol_span(0, m)
                .map(|c| {
                    let other = match cfg.symbol_index(1, c) {
                        Some(j) => z.get(1, j) as usize,
                        None => 0,
                    };
                    let tau = cfg.chip_duration(c);
                    let n = obs.counts[c];
                    poisson_logpmf(n, tau * rates.as_slice()[1 | other << 1])
                        - poisson_logpmf(n, tau * rates.as_slice()[other << 1])
                })
                .sum();
            assert!((soft.values[m] - genie).abs() < 1e-6, "{} vs {genie}", soft.values[m]);
        }
    }

    #[test]
    fn lar_offsets_llr_by_prior() {
        let priors = vec![0.2, 0.5, 0.9, 0.7];
        let cfg = ChannelConfig::new(2, 2, vec![0.5, 0.5], vec![1.0, 1.0], 0.1, priors.clone(), false).unwrap();
        let llr = SoftInfo {
            values: vec![0.3, -1.0, 2.0, 0.0],
            kind: SoftKind::Llr,
            iteration: 1,
        };
        let lar = llr.to_lar(&cfg);
        for ((a, b), q) in lar.values.iter().zip(&llr.values).zip(&priors) {
            assert!((a - b - (q / (1.0 - q)).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_inverts_log_odds() {
        for p in [1e-6, 0.1, 0.5, 0.73, 0.999] {
            assert!((logistic(log_odds(p)) - p).abs() < 1e-12);
        }
        for x in [-7.5, -0.2, 0.0, 3.0, 12.0] {
            assert!((log_odds(logistic(x)) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_priors_make_modes_agree() {
        let cfg = ChannelConfig::symmetric(2, 3, 2.0, 0.1, 0.5).unwrap();
        let soft = SoftInfo {
            values: vec![0.4, -2.0, 1.0, 0.0, 3.0, -0.5],
            kind: SoftKind::Llr,
            iteration: 0,
        };
        let a = soft.probabilities(&cfg, LlrPosterior::PriorScaled);
        let b = soft.to_lar(&cfg).probabilities(&cfg, LlrPosterior::PriorScaled);
        let c = soft.probabilities(&cfg, LlrPosterior::PriorOffset);
        for i in 0..6 {
            assert_eq!(a[i], b[i]);
            assert!((a[i] - c[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn code_length_must_match_frame() {
        let cfg = ChannelConfig::symmetric(1, 10, 2.0, 0.1, 0.5).unwrap();
        let obs = ObservationSequence::new(vec![0; 10]);
        let code = LdpcCode::desk_default();
        let err = joint_decode(&cfg, &RateTable::from_config(&cfg), &obs, &[code], &TurboOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }
}
