mod common;

use common::poisson_ln;
use rand::Rng;
use superpos::channel::seeded_rng;
use superpos::detection::bcjr_posteriors;
use superpos::ldpc::LdpcCode;
use superpos::turbo::{
    detector_llr, joint_decode, logistic, DecodeMode, LlrPosterior, SoftKind, TurboOptions,
};
use superpos::{ChannelConfig, LayerSymbols, RateTable};

/// Per-symbol log-ratio summed over the symbol's chips, with the other
/// layer's symbol on each chip averaged over its probability.
fn two_layer_llr(cfg: &ChannelConfig, counts: &[u64], probs: &[f64]) -> Vec<f64> {
    let m = cfg.symbols();
    let lam = cfg.layer_rates();
    let mut out = vec![0.0; 2 * m];
    for k in 0..2 {
        let o = 1 - k;
        for j in 0..m {
            for c in k + 2 * j..k + 2 * j + 2 {
                let tau = common::duration(cfg, c);
                let p_other = common::active_symbol(cfg, o, c).map_or(0.0, |mo| probs[o * m + mo]);
                let lik = |zk: f64| {
                    (0..2)
                        .map(|zo| {
                            let w = if zo == 1 { p_other } else { 1.0 - p_other };
                            let mean = tau * (cfg.background_rate() + zk * lam[k] + zo as f64 * lam[o]);
                            w * poisson_ln(counts[c], mean).exp()
                        })
                        .sum::<f64>()
                };
                out[k * m + j] += (lik(1.0) / lik(0.0)).ln();
            }
        }
    }
    out
}

#[test]
fn detector_llr_matches_direct_marginalization() {
    let cfg = ChannelConfig::new(2, 6, vec![0.35, 0.65], vec![3.0, 5.0], 0.4, vec![0.5; 12], false).unwrap();
    let z = cfg.sample_symbols(2);
    let obs = cfg.sample_observations(&z, 3).unwrap();
    let rates = RateTable::from_config(&cfg);

    let from_priors = detector_llr(&cfg, &rates, &obs, None).unwrap();
    assert_eq!(from_priors.kind, SoftKind::Llr);
    for (a, b) in from_priors.values.iter().zip(two_layer_llr(&cfg, &obs.counts, cfg.priors())) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    let mut rng = seeded_rng(4, 0);
    let probs: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let informed = detector_llr(&cfg, &rates, &obs, Some(&probs)).unwrap();
    for (a, b) in informed.values.iter().zip(two_layer_llr(&cfg, &obs.counts, &probs)) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn soft_conversions() {
    let cfg = ChannelConfig::new(1, 3, vec![1.0], vec![1.0], 0.1, vec![0.2, 0.5, 0.8], false).unwrap();
    let soft = superpos::turbo::SoftInfo {
        values: vec![1.0, 1.0, 1.0],
        kind: SoftKind::Llr,
        iteration: 0,
    };
    let lar = soft.to_lar(&cfg);
    assert!((lar.values[0] - (1.0 + (0.2f64 / 0.8).ln())).abs() < 1e-12);
    assert!((lar.values[1] - 1.0).abs() < 1e-12);
    let scaled = soft.probabilities(&cfg, LlrPosterior::PriorScaled);
    assert!((scaled[0] - logistic(0.25)).abs() < 1e-12);
    assert!((scaled[2] - logistic(4.0)).abs() < 1e-12);
    let offset = soft.probabilities(&cfg, LlrPosterior::PriorOffset);
    assert!((offset[2] - logistic(1.0 + 4f64.ln())).abs() < 1e-12);
}

fn coded_frame(cfg: &ChannelConfig, code: &LdpcCode, seed: u64) -> (Vec<Vec<u8>>, LayerSymbols, superpos::ObservationSequence) {
    let mut rng = seeded_rng(seed, 0);
    let info: Vec<Vec<u8>> = (0..cfg.layers())
        .map(|_| (0..code.k()).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    let rows: Vec<Vec<u8>> = info.iter().map(|i| code.encode(i).unwrap()).collect();
    let z = LayerSymbols::from_rows(&rows).unwrap();
    let obs = cfg.sample_observations_with(&z, &mut rng).unwrap();
    (info, z, obs)
}

#[test]
fn strong_signal_decodes_every_layer() {
    let code = LdpcCode::desk_default();
    let cfg = ChannelConfig::symmetric(2, code.n(), 30.0, 0.01, 0.5).unwrap();
    let rates = RateTable::from_config(&cfg);
    let codes = vec![code.clone(), code.clone()];
    for mode in [DecodeMode::Map, DecodeMode::Ml] {
        let (info, z, obs) = coded_frame(&cfg, &code, 5);
        let opts = TurboOptions { mode, ..TurboOptions::default() };
        let out = joint_decode(&cfg, &rates, &obs, &codes, &opts).unwrap();
        assert_eq!(out.info_bits, info);
        assert_eq!(out.codewords, z);
        assert!(out.converged.iter().all(|&c| c));
    }
}

#[test]
fn turbo_improves_on_uncoded_detection() {
    let code = LdpcCode::desk_default();
    let cfg = ChannelConfig::symmetric(2, code.n(), 8.0, 0.01, 0.5).unwrap();
    let rates = RateTable::from_config(&cfg);
    let codes = vec![code.clone(), code.clone()];
    let (mut uncoded, mut coded) = (0, 0);
    for seed in 0..4 {
        let (info, z, obs) = coded_frame(&cfg, &code, 100 + seed);
        uncoded += bcjr_posteriors(&cfg, &rates, &obs).unwrap().hard_bits.hamming(&z);
        let out = joint_decode(&cfg, &rates, &obs, &codes, &TurboOptions::default()).unwrap();
        coded += out
            .info_bits
            .iter()
            .zip(&info)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
            .sum::<usize>();
    }
    // Error rates: coded over 2·k bits per frame, uncoded over 2·n symbols.
    assert!((coded as f64 / code.k() as f64) < (uncoded as f64 / code.n() as f64), "{coded} vs {uncoded}");
}

#[test]
fn code_length_must_match_frame() {
    let code = LdpcCode::desk_default();
    let cfg = ChannelConfig::symmetric(2, 100, 5.0, 0.01, 0.5).unwrap();
    let z = cfg.sample_symbols(0);
    let obs = cfg.sample_observations(&z, 0).unwrap();
    let rates = RateTable::from_config(&cfg);
    assert!(joint_decode(&cfg, &rates, &obs, &[code.clone(), code], &TurboOptions::default()).is_err());
}
