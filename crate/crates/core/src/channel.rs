//! Channel configuration, chip/layer index algebra and forward simulation.
//!
//! Indexing is zero-based throughout: layer `i` in `0..L`, symbol `m` in
//! `0..M`, chip `c` in `0..T`. Layer `i` carries symbol `m` on the chips
//! `i + m·L ..= i + m·L + L − 1`, so the first layer leads and each later
//! layer starts one chip behind its predecessor. In aligned mode every layer
//! carries symbol `m` on chip `m` and `T = M`.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DELAY_SUM_TOL: f64 = 1e-9;

/// RNG stream reserved for symbol draws.
pub const SYMBOL_STREAM: u64 = 0;
/// RNG stream reserved for photon-count draws.
pub const OBSERVATION_STREAM: u64 = 1;

/// Seeded ChaCha8 generator on a given stream. Distinct streams of the same
/// seed are independent, which is how per-purpose and per-trial generators
/// are split off a single user seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Point in the state space `{0,1}^L`. Bit `i` of the index is the symbol
/// currently active on layer `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct StateVector(pub usize);

impl StateVector {
    pub fn from_bits(bits: &[u8]) -> Self {
        StateVector(
            bits.iter()
                .enumerate()
                .filter(|(_, &b)| b != 0)
                .fold(0, |acc, (i, _)| acc | (1 << i)),
        )
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn bit(self, layer: usize) -> u8 {
        ((self.0 >> layer) & 1) as u8
    }

    pub fn bits(self, layers: usize) -> Vec<u8> {
        (0..layers).map(|i| self.bit(i)).collect()
    }

    pub fn active_layers(self) -> u32 {
        self.0.count_ones()
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelConfig {
    layers: usize,
    symbols: usize,
    delays: Vec<f64>,
    layer_rates: Vec<f64>,
    background_rate: f64,
    /// Row-major `L × M` matrix of `P(z = 1)`.
    priors: Vec<f64>,
    aligned: bool,
}

impl ChannelConfig {
    /// Validated constructor. `priors` is row-major `L × M`.
    pub fn new(
        layers: usize,
        symbols: usize,
        delays: Vec<f64>,
        layer_rates: Vec<f64>,
        background_rate: f64,
        priors: Vec<f64>,
        aligned: bool,
    ) -> Result<Self> {
        let cfg = ChannelConfig {
            layers,
            symbols,
            delays,
            layer_rates,
            background_rate,
            priors,
            aligned,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `L` layers with equal delays `1/L`, equal rate `lambda`, uniform prior `q`.
    pub fn symmetric(
        layers: usize,
        symbols: usize,
        lambda: f64,
        background_rate: f64,
        q: f64,
    ) -> Result<Self> {
        let delays = if layers == 0 {
            vec![]
        } else {
            vec![1.0 / layers as f64; layers]
        };
        Self::new(
            layers,
            symbols,
            delays,
            vec![lambda; layers],
            background_rate,
            vec![q; layers * symbols],
            false,
        )
    }

    /// Symbol-aligned baseline: `M` unit-width chips, all layers switching together.
    pub fn aligned(
        layers: usize,
        symbols: usize,
        layer_rates: Vec<f64>,
        background_rate: f64,
        q: f64,
    ) -> Result<Self> {
        Self::new(
            layers,
            symbols,
            vec![],
            layer_rates,
            background_rate,
            vec![q; layers * symbols],
            true,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.layers > 16 {
            return Err(Error::config("layers", "at most 16 layers are supported"));
        }
        if self.symbols == 0 {
            return Err(Error::config("symbols_per_layer", "must be at least 1"));
        }
        if self.layer_rates.len() != self.layers {
            return Err(Error::config(
                "layer_rates",
                format!("expected {} entries, got {}", self.layers, self.layer_rates.len()),
            ));
        }
        for (i, &l) in self.layer_rates.iter().enumerate() {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::config(format!("layer_rates[{i}]"), "must be finite and >= 0"));
            }
        }
        if !(self.background_rate.is_finite() && self.background_rate >= 0.0) {
            return Err(Error::config("background_rate", "must be finite and >= 0"));
        }
        if self.priors.len() != self.layers * self.symbols {
            return Err(Error::config(
                "priors",
                format!(
                    "expected {}x{} matrix, got {} entries",
                    self.layers,
                    self.symbols,
                    self.priors.len()
                ),
            ));
        }
        if let Some(p) = self.priors.iter().position(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::config(
                format!("priors[{}][{}]", p / self.symbols, p % self.symbols),
                "must lie in [0, 1]",
            ));
        }
        if self.aligned {
            if !self.delays.is_empty() && self.delays.len() != self.layers {
                return Err(Error::config("delays", "must be empty or have one entry per layer"));
            }
            return Ok(());
        }
        if self.delays.len() != self.layers {
            return Err(Error::config(
                "delays",
                format!("expected {} entries, got {}", self.layers, self.delays.len()),
            ));
        }
        for (i, &d) in self.delays.iter().enumerate() {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::config(format!("delays[{i}]"), "must lie in (0, 1]"));
            }
        }
        let sum: f64 = self.delays.iter().sum();
        if (sum - 1.0).abs() > DELAY_SUM_TOL {
            return Err(Error::config("delays", format!("must sum to 1, got {sum}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn layer_rates(&self) -> &[f64] {
        &self.layer_rates
    }

    pub fn background_rate(&self) -> f64 {
        self.background_rate
    }

    pub fn is_aligned(&self) -> bool {
        self.aligned
    }

    pub fn num_states(&self) -> usize {
        1 << self.layers
    }

    pub fn prior(&self, layer: usize, symbol: usize) -> f64 {
        self.priors[layer * self.symbols + symbol]
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Prior of the symbol `symbol` on `layer`, where out-of-range symbol
    /// indices denote the all-zero boundary symbols.
    pub fn boundary_prior(&self, layer: usize, symbol: Option<usize>) -> f64 {
        symbol.map_or(0.0, |m| self.prior(layer, m))
    }

    pub fn has_uniform_priors(&self) -> bool {
        let q0 = self.priors[0];
        self.priors.iter().all(|&q| q == q0)
    }

    pub fn with_layer_rates(&self, layer_rates: Vec<f64>) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.layer_rates = layer_rates;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_background_rate(&self, background_rate: f64) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.background_rate = background_rate;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_symbols(&self, symbols: usize) -> Result<Self> {
        let q = self.priors[0];
        if !self.has_uniform_priors() {
            return Err(Error::config("priors", "resizing requires a scalar prior"));
        }
        let mut cfg = self.clone();
        cfg.symbols = symbols;
        cfg.priors = vec![q; self.layers * symbols];
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_priors(&self, priors: Vec<f64>) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.priors = priors;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Total number of chips `T`: `M·L + L − 1`, or `M` when aligned.
    pub fn chip_count(&self) -> usize {
        if self.aligned {
            self.symbols
        } else {
            self.symbols * self.layers + self.layers - 1
        }
    }

    fn check_chip(&self, chip: usize) -> Result<()> {
        let count = self.chip_count();
        if chip >= count {
            return Err(Error::ChipOutOfRange { index: chip, count });
        }
        Ok(())
    }

    /// Width of chip `c` in symbol durations. Cycles through the delays with
    /// period `L`.
    pub fn chip_duration(&self, chip: usize) -> f64 {
        if self.aligned {
            1.0
        } else {
            self.delays[chip % self.layers]
        }
    }

    /// Symbol of `layer` active during `chip`, or `None` on the implicit
    /// zero symbols before the first and after the last symbol.
    pub fn symbol_index(&self, layer: usize, chip: usize) -> Option<usize> {
        if self.aligned {
            return (chip < self.symbols).then_some(chip);
        }
        if chip < layer {
            return None;
        }
        let m = (chip - layer) / self.layers;
        (m < self.symbols).then_some(m)
    }

    /// Chips spanned by symbol `symbol` of `layer`.
    pub fn symbol_span(&self, layer: usize, symbol: usize) -> RangeInclusive<usize> {
        if self.aligned {
            symbol..=symbol
        } else {
            let start = layer + symbol * self.layers;
            start..=start + self.layers - 1
        }
    }

    /// Bitmask of layers whose active symbol changes between chip `c` and `c + 1`.
    pub fn changing_mask(&self, chip: usize) -> usize {
        if self.aligned {
            self.num_states() - 1
        } else {
            1 << ((chip + 1) % self.layers)
        }
    }

    /// Total Poisson rate per symbol duration in state `s`: `λ0 + Λᵀs`.
    pub fn state_rate(&self, state: StateVector) -> f64 {
        self.background_rate
            + self
                .layer_rates
                .iter()
                .enumerate()
                .filter(|(i, _)| state.bit(*i) == 1)
                .map(|(_, l)| l)
                .sum::<f64>()
    }

    pub fn state_at_chip(&self, symbols: &LayerSymbols, chip: usize) -> Result<StateVector> {
        self.check_chip(chip)?;
        if symbols.layers() != self.layers || symbols.symbols() != self.symbols {
            return Err(Error::LengthMismatch {
                what: "symbol matrix",
                expected: self.layers * self.symbols,
                actual: symbols.layers() * symbols.symbols(),
            });
        }
        let mut s = 0usize;
        for i in 0..self.layers {
            if let Some(m) = self.symbol_index(i, chip) {
                s |= (symbols.get(i, m) as usize) << i;
            }
        }
        Ok(StateVector(s))
    }

    /// State sequence induced by a symbol matrix, one entry per chip.
    pub fn state_path(&self, symbols: &LayerSymbols) -> Result<Vec<StateVector>> {
        (0..self.chip_count())
            .map(|c| self.state_at_chip(symbols, c))
            .collect()
    }

    /// Draws every symbol independently with `P(1) = q[i][m]`.
    pub fn sample_symbols(&self, seed: u64) -> LayerSymbols {
        let mut rng = seeded_rng(seed, SYMBOL_STREAM);
        self.sample_symbols_with(&mut rng)
    }

    pub fn sample_symbols_with<R: Rng>(&self, rng: &mut R) -> LayerSymbols {
        let bits = self
            .priors
            .iter()
            .map(|&q| u8::from(rng.random::<f64>() < q))
            .collect();
        LayerSymbols {
            layers: self.layers,
            symbols: self.symbols,
            bits,
        }
    }

    /// Draws `N_c ~ Poisson(τ_c · rate(S_c))` independently per chip, in chip order.
    pub fn sample_observations(
        &self,
        symbols: &LayerSymbols,
        seed: u64,
    ) -> Result<ObservationSequence> {
        let mut rng = seeded_rng(seed, OBSERVATION_STREAM);
        self.sample_observations_with(symbols, &mut rng)
    }

    pub fn sample_observations_with<R: Rng>(
        &self,
        symbols: &LayerSymbols,
        rng: &mut R,
    ) -> Result<ObservationSequence> {
        let path = self.state_path(symbols)?;
        let counts = path
            .iter()
            .enumerate()
            .map(|(c, &s)| sample_poisson(rng, self.chip_duration(c) * self.state_rate(s)))
            .collect();
        Ok(ObservationSequence { counts })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ChannelConfigFile =
            toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self) -> ChannelConfigFile {
        let priors = if self.has_uniform_priors() {
            Priors::Scalar(self.priors[0])
        } else {
            Priors::Matrix(self.priors.chunks(self.symbols).map(<[f64]>::to_vec).collect())
        };
        ChannelConfigFile {
            layers: self.layers,
            symbols_per_layer: self.symbols,
            delays: self.delays.clone(),
            layer_rates: self.layer_rates.clone(),
            background_rate: self.background_rate,
            priors,
            aligned: self.aligned,
        }
    }
}

/// Rates at or above this use the library sampler instead of inversion.
const INVERSION_LIMIT: f64 = 500.0;

/// Poisson draw. Below [`INVERSION_LIMIT`] this is sequential CDF inversion
/// of a single uniform, so draws at different rates from the same stream are
/// monotonically coupled.
pub fn sample_poisson<R: Rng>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    if rate >= INVERSION_LIMIT {
        return Poisson::new(rate).expect("finite positive rate").sample(rng) as u64;
    }
    let u: f64 = rng.random();
    let mut p = (-rate).exp();
    let mut cdf = p;
    let mut n = 0u64;
    while u > cdf {
        n += 1;
        p *= rate / n as f64;
        let next = cdf + p;
        if next == cdf && n as f64 > rate {
            break;
        }
        cdf = next;
    }
    n
}

/// Serialized shape of [`ChannelConfig`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfigFile {
    pub layers: usize,
    pub symbols_per_layer: usize,
    #[serde(default)]
    pub delays: Vec<f64>,
    pub layer_rates: Vec<f64>,
    pub background_rate: f64,
    pub priors: Priors,
    #[serde(default)]
    pub aligned: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Priors {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl TryFrom<ChannelConfigFile> for ChannelConfig {
    type Error = Error;

    fn try_from(f: ChannelConfigFile) -> Result<Self> {
        let priors = match f.priors {
            Priors::Scalar(q) => vec![q; f.layers * f.symbols_per_layer],
            Priors::Matrix(rows) => {
                if rows.len() != f.layers {
                    return Err(Error::config(
                        "priors",
                        format!("expected {} rows, got {}", f.layers, rows.len()),
                    ));
                }
                for (i, r) in rows.iter().enumerate() {
                    if r.len() != f.symbols_per_layer {
                        return Err(Error::config(
                            format!("priors[{i}]"),
                            format!("expected {} entries, got {}", f.symbols_per_layer, r.len()),
                        ));
                    }
                }
                rows.into_iter().flatten().collect()
            }
        };
        ChannelConfig::new(
            f.layers,
            f.symbols_per_layer,
            f.delays,
            f.layer_rates,
            f.background_rate,
            priors,
            f.aligned,
        )
    }
}

/// The `L × M` transmitted bit matrix. Boundary symbols are implicit zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSymbols {
    layers: usize,
    symbols: usize,
    bits: Vec<u8>,
}

impl LayerSymbols {
    pub fn zeros(layers: usize, symbols: usize) -> Self {
        LayerSymbols {
            layers,
            symbols,
            bits: vec![0; layers * symbols],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let layers = rows.len();
        let symbols = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != symbols) {
            return Err(Error::LengthMismatch {
                what: "symbol row",
                expected: symbols,
                actual: r.len(),
            });
        }
        if rows.iter().flatten().any(|&b| b > 1) {
            return Err(Error::Parse("symbols must be 0 or 1".into()));
        }
        Ok(LayerSymbols {
            layers,
            symbols,
            bits: rows.concat(),
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn get(&self, layer: usize, symbol: usize) -> u8 {
        self.bits[layer * self.symbols + symbol]
    }

    pub fn set(&mut self, layer: usize, symbol: usize, bit: u8) {
        self.bits[layer * self.symbols + symbol] = bit & 1;
    }

    pub fn row(&self, layer: usize) -> &[u8] {
        &self.bits[layer * self.symbols..(layer + 1) * self.symbols]
    }

    pub fn set_row(&mut self, layer: usize, row: &[u8]) {
        self.bits[layer * self.symbols..(layer + 1) * self.symbols].copy_from_slice(row);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &LayerSymbols) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Photoelectron counts, one per chip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSequence {
    pub counts: Vec<u64>,
}

impl ObservationSequence {
    pub fn new(counts: Vec<u64>) -> Self {
        ObservationSequence { counts }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn check_length(&self, config: &ChannelConfig) -> Result<()> {
        if self.counts.len() != config.chip_count() {
            return Err(Error::LengthMismatch {
                what: "observation sequence",
                expected: config.chip_count(),
                actual: self.counts.len(),
            });
        }
        Ok(())
    }

    /// One decimal count per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in &self.counts {
            writeln!(w, "{c}")?;
        }
        Ok(())
    }

    /// Parses one count per line; blank lines and `#` comments are skipped.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut counts = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let n = line
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
            counts.push(n);
        }
        Ok(ObservationSequence { counts })
    }
}

/// Total Poisson rate per symbol duration for every state, indexed by state.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable(Vec<f64>);

impl RateTable {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if !rates.len().is_power_of_two() {
            return Err(Error::config("rates", "table length must be 2^L"));
        }
        if let Some(i) = rates.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config(format!("rates[{i}]"), "must be finite and >= 0"));
        }
        Ok(RateTable(rates))
    }

    pub fn from_config(config: &ChannelConfig) -> Self {
        RateTable(
            (0..config.num_states())
                .map(|s| config.state_rate(StateVector(s)))
                .collect(),
        )
    }

    pub fn rate(&self, s: StateVector) -> f64 {
        self.0[s.0]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check(&self, config: &ChannelConfig) -> Result<()> {
        if self.0.len() != config.num_states() {
            return Err(Error::LengthMismatch {
                what: "rate table",
                expected: config.num_states(),
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}
