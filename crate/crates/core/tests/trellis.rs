mod common;

use common::{enumerate, matrix, poisson_ln, random_instance};
use proptest::prelude::*;
use superpos::channel::seeded_rng;
use superpos::detection::{bcjr_posteriors, path_metric, viterbi_detect};
use superpos::hmm::HmmView;
use superpos::{ChannelConfig, LayerSymbols, ObservationSequence, RateTable};

const TOL: f64 = 1e-9;

fn fixtures(layers: usize, symbols: usize, n: usize) -> Vec<(ChannelConfig, ObservationSequence)> {
    let mut rng = seeded_rng(0x5eed, (layers * 100 + symbols) as u64);
    (0..n).map(|_| random_instance(&mut rng, layers, symbols, 6)).collect()
}

fn check_against_enumeration(cfg: &ChannelConfig, obs: &ObservationSequence) {
    let truth = enumerate(cfg, obs);
    let rates = RateTable::from_config(cfg);
    let hmm = HmmView::new(cfg);
    let post = hmm.forward_backward(obs).unwrap();
    assert!(
        (post.log_likelihood - truth.log_evidence).abs() < TOL * truth.log_evidence.abs().max(1.0),
        "evidence {} vs {}",
        post.log_likelihood,
        truth.log_evidence
    );

    let bcjr = bcjr_posteriors(cfg, &rates, obs).unwrap();
    for (k, (a, b)) in bcjr.posteriors.unwrap().iter().zip(&truth.marginals).enumerate() {
        assert!((a - b).abs() < TOL, "marginal {k}: {a} vs {b}");
    }

    let vit = viterbi_detect(cfg, &rates, obs).unwrap();
    let found = path_metric(cfg, &rates, obs, &vit.hard_bits).unwrap();
    assert!((found - truth.best_metric).abs() < TOL * truth.best_metric.abs().max(1.0));
    assert!((vit.path_metric.unwrap() - truth.best_metric).abs() < TOL * truth.best_metric.abs().max(1.0));

    let h = hmm.sequence_entropy_given_obs(obs).unwrap();
    assert!((h - truth.entropy_bits).abs() < TOL, "entropy {h} vs {}", truth.entropy_bits);
}

#[test]
fn two_layers_three_symbols_match_enumeration() {
    for (cfg, obs) in fixtures(2, 3, 50) {
        check_against_enumeration(&cfg, &obs);
    }
}

#[test]
fn three_layers_two_symbols_match_enumeration() {
    for (cfg, obs) in fixtures(3, 2, 20) {
        check_against_enumeration(&cfg, &obs);
    }
}

#[test]
fn aligned_layout_matches_enumeration() {
    let mut rng = seeded_rng(0xa11, 0);
    for _ in 0..10 {
        let (cfg, _) = random_instance(&mut rng, 2, 3, 6);
        let cfg = ChannelConfig::new(2, 3, vec![], cfg.layer_rates().to_vec(), 0.3, cfg.priors().to_vec(), true)
            .unwrap();
        let obs = ObservationSequence::new(vec![0, 3, 6]);
        check_against_enumeration(&cfg, &obs);
    }
}

/// `P(Z_k | Z_others, N)` equals the product over symbols of each symbol's
/// conditional given only the overlapping symbols and the counts on its span.
#[test]
fn layer_posterior_factorizes_over_symbols() {
    for (cfg, obs) in fixtures(2, 3, 50) {
        let (l, m) = (cfg.layers(), cfg.symbols());
        for k in 0..l {
            for idx in 0..1usize << (l * m) {
                let z = matrix(l, m, idx);
                let joint = |z: &LayerSymbols| common::prior_prob(&cfg, z).ln() + common::log_likelihood(&cfg, z, &obs);
                // Full conditional by enumerating layer k's row.
                let mut alternatives = Vec::new();
                for row in 0..1usize << m {
                    let mut w = z.clone();
                    for j in 0..m {
                        w.set(k, j, ((row >> j) & 1) as u8);
                    }
                    alternatives.push(joint(&w));
                }
                let top = alternatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let norm: f64 = alternatives.iter().map(|a| (a - top).exp()).sum();
                let full = (joint(&z) - top).exp() / norm;

                let mut product = 1.0;
                for j in 0..m {
                    let local = |bit: u8| {
                        let mut w = z.clone();
                        w.set(k, j, bit);
                        let q = cfg.prior(k, j);
                        let p = if bit == 1 { q } else { 1.0 - q };
                        let span = k + j * l..k + j * l + l;
                        p * span
                            .map(|c| poisson_ln(obs.counts[c], common::chip_mean(&cfg, &w, c)).exp())
                            .product::<f64>()
                    };
                    let (p0, p1) = (local(0), local(1));
                    product *= if z.get(k, j) == 1 { p1 } else { p0 } / (p0 + p1);
                }
                assert!((full - product).abs() < TOL, "layer {k} matrix {idx}: {full} vs {product}");
            }
        }
    }
}

#[test]
fn prior_marginals_match_priors() {
    for (cfg, _) in fixtures(2, 3, 10) {
        let rows = HmmView::new(&cfg).prior_marginals();
        for (c, row) in rows.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < TOL);
            for i in 0..cfg.layers() {
                let expected = common::active_symbol(&cfg, i, c).map_or(0.0, |m| cfg.prior(i, m));
                let got: f64 = row.iter().enumerate().filter(|(s, _)| (s >> i) & 1 == 1).map(|(_, p)| p).sum();
                assert!((got - expected).abs() < TOL);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posteriors_are_probabilities_and_viterbi_dominates_truth(
        seed in any::<u64>(),
        layers in 1usize..4,
        symbols in 1usize..12,
        rate in 0.5f64..8.0,
        background in 0.01f64..1.0,
    ) {
        let cfg = ChannelConfig::symmetric(layers, symbols, rate, background, 0.5).unwrap();
        let z = cfg.sample_symbols(seed);
        let obs = cfg.sample_observations(&z, seed ^ 1).unwrap();
        let rates = RateTable::from_config(&cfg);
        let post = bcjr_posteriors(&cfg, &rates, &obs).unwrap().posteriors.unwrap();
        prop_assert!(post.iter().all(|p| (0.0..=1.0).contains(p)));
        let vit = viterbi_detect(&cfg, &rates, &obs).unwrap();
        let truth = path_metric(&cfg, &rates, &obs, &z).unwrap();
        prop_assert!(vit.path_metric.unwrap() >= truth - 1e-9 * truth.abs().max(1.0));
        let h = HmmView::new(&cfg).sequence_entropy_given_obs(&obs).unwrap();
        prop_assert!(h >= 0.0 && h <= (layers * symbols) as f64 + 1e-9);
    }

    #[test]
    fn state_posteriors_sum_to_one(seed in any::<u64>(), symbols in 1usize..20) {
        let cfg = ChannelConfig::symmetric(2, symbols, 4.0, 0.1, 0.5).unwrap();
        let z = cfg.sample_symbols(seed);
        let obs = cfg.sample_observations(&z, seed).unwrap();
        let post = HmmView::new(&cfg).forward_backward(&obs).unwrap();
        for c in 0..post.chips() {
            let s: f64 = post.state_marginals(c).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
