//! Config-driven numerical studies with CSV output and a JSON manifest.
//!
//! Every sweep point draws its randomness from a seed derived from the run
//! seed and the point's position, and points are assembled in sweep order,
//! so a rerun with the same spec and seed writes an identical CSV whatever
//! the worker count.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{seeded_rng, ChannelConfig, LayerSymbols, RateTable};
use crate::detection::{bcjr_posteriors, viterbi_detect};
use crate::error::{Error, Result};
use crate::estimation::{default_init, em_estimate, PilotConfig};
use crate::ldpc::{LdpcCode, QcShape, DEFAULT_CODE_SEED};
use crate::pilot::{default_pilot, parse_pilot_bits};
use crate::rates::{
    ook_vs_ppm, power_alloc_constrained, power_alloc_sum, single_layer_rate, sum_rate_mc, RateQuery,
    RateResult, DEFAULT_TAIL_EPSILON,
};
use crate::turbo::{joint_decode, DecodeMode, LlrPosterior, TurboOptions};

/// Budget preset. `Desk` shrinks sample counts, frame counts and code length
/// so that every study finishes in minutes; channel parameters are unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    fn pick<T>(self, desk: T, paper: T) -> T {
        match self {
            Scale::Desk => desk,
            Scale::Paper => paper,
        }
    }
}

/// A sweep axis: an explicit list or an inclusive arithmetic range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl Sweep {
    pub fn values(&self, field: &str) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self {
            Sweep::List(v) => v.clone(),
            Sweep::Range { start, stop, step } => {
                if !(*step > 0.0) || stop < start {
                    return Err(Error::config(field, "range needs step > 0 and stop >= start"));
                }
                let n = ((stop - start) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| start + i as f64 * step).collect()
            }
        };
        if v.is_empty() {
            return Err(Error::config(field, "sweep is empty"));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::config(format!("{field}[{i}]"), "not finite"));
        }
        Ok(v)
    }
}

/// Placement of symbol boundaries across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Layout {
    Named(LayoutName),
    Delays(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutName {
    /// All layers share symbol boundaries.
    Aligned,
    /// Delays `1/L` each.
    Equal,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Named(LayoutName::Aligned) => f.write_str("aligned"),
            Layout::Named(LayoutName::Equal) => f.write_str("equal"),
            Layout::Delays(d) => {
                let parts: Vec<String> = d.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(";"))
            }
        }
    }
}

impl Layout {
    fn default_two_layer() -> Vec<Layout> {
        vec![
            Layout::Delays(vec![0.1, 0.9]),
            Layout::Delays(vec![0.3, 0.7]),
            Layout::Delays(vec![0.5, 0.5]),
            Layout::Named(LayoutName::Aligned),
        ]
    }

    fn config(
        &self,
        symbols: usize,
        layer_rates: Vec<f64>,
        background: f64,
        prior: f64,
    ) -> Result<ChannelConfig> {
        let layers = layer_rates.len();
        let priors = vec![prior; layers * symbols];
        match self {
            Layout::Named(LayoutName::Aligned) => {
                ChannelConfig::new(layers, symbols, vec![], layer_rates, background, priors, true)
            }
            Layout::Named(LayoutName::Equal) => ChannelConfig::new(
                layers,
                symbols,
                vec![1.0 / layers as f64; layers],
                layer_rates,
                background,
                priors,
                false,
            ),
            Layout::Delays(d) => {
                ChannelConfig::new(layers, symbols, d.clone(), layer_rates, background, priors, false)
            }
        }
    }
}

fn default_prior() -> f64 {
    0.5
}

fn default_background() -> f64 {
    0.01
}

/// `R*_Σ` versus frame length and delay layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSumSpec {
    pub layer_rates: Vec<f64>,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default = "default_prior")]
    pub prior: f64,
    #[serde(default)]
    pub symbols: Option<Vec<usize>>,
    #[serde(default)]
    pub layouts: Option<Vec<Layout>>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
}

/// Exact `R*_k` versus a common per-layer rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSingleSpec {
    pub layers: usize,
    pub lambda: Sweep,
    #[serde(default)]
    pub layer: usize,
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default = "default_prior")]
    pub prior: f64,
    #[serde(default)]
    pub symbols: Option<usize>,
    #[serde(default)]
    pub tail_epsilon: Option<f64>,
}

/// Smallest useful layer count per common per-layer rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSelectSpec {
    pub lambda: Sweep,
    #[serde(default = "default_max_layers")]
    pub max_layers: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default)]
    pub symbols: Option<usize>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
}

fn default_max_layers() -> usize {
    4
}

fn default_sigma() -> f64 {
    0.2
}

/// Two-layer power split: unconstrained sum rate and a floor on layer 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerAllocSpec {
    pub lambda_s: Sweep,
    #[serde(default = "default_half")]
    pub rho: f64,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default)]
    pub symbols: Option<usize>,
    #[serde(default)]
    pub grid: Option<usize>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
    /// Floors on `R*_2` for the constrained problem, solved at every `lambda_s`.
    #[serde(default)]
    pub r2_floor: Option<Sweep>,
}

fn default_half() -> f64 {
    0.5
}

/// EM convergence with pilots on the first `L_p` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSpec {
    pub layer_rates: Vec<f64>,
    #[serde(default)]
    pub layout: Option<Layout>,
    #[serde(default = "default_estimate_background")]
    pub background_rate: f64,
    #[serde(default = "default_estimate_symbols")]
    pub symbols: usize,
    #[serde(default = "default_pilot_layers")]
    pub pilot_layers: Vec<usize>,
    /// Pilot bits as `0`/`1` text or `0x` hex; the 255-bit m-sequence if absent.
    #[serde(default)]
    pub pilot: Option<String>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_estimate_background() -> f64 {
    1e-4
}

fn default_estimate_symbols() -> usize {
    5000
}

fn default_pilot_layers() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_trials() -> usize {
    1
}

fn default_max_iters() -> usize {
    crate::estimation::DEFAULT_MAX_ITERS
}

fn default_tol() -> f64 {
    crate::estimation::DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Viterbi,
    Bcjr,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Viterbi => "viterbi",
            Algo::Bcjr => "bcjr",
        })
    }
}

/// Uncoded symbol error rate of the trellis detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectSpec {
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub lambda_ave: Sweep,
    #[serde(default)]
    pub layouts: Option<Vec<Layout>>,
    #[serde(default = "default_algos")]
    pub algos: Vec<Algo>,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default)]
    pub symbols: Option<usize>,
    #[serde(default)]
    pub frames: Option<usize>,
}

fn default_layers() -> usize {
    2
}

fn default_algos() -> Vec<Algo> {
    vec![Algo::Viterbi, Algo::Bcjr]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Ml,
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorName {
    PriorScaled,
    PriorOffset,
}

/// Coded bit error rate of turbo detection and decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BerSimSpec {
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub lambda_ave: Sweep,
    #[serde(default)]
    pub layouts: Option<Vec<Layout>>,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default = "default_mode")]
    pub mode: ModeName,
    /// alist file; the built-in quasi-cyclic code of the chosen scale if absent.
    #[serde(default)]
    pub code: Option<PathBuf>,
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default = "default_global_iters")]
    pub global_iters: usize,
    #[serde(default = "default_ldpc_iters")]
    pub ldpc_iters: usize,
    #[serde(default = "default_posterior")]
    pub llr_posterior: PosteriorName,
    #[serde(default)]
    pub extrinsic: bool,
}

fn default_mode() -> ModeName {
    ModeName::Map
}

fn default_global_iters() -> usize {
    5
}

fn default_ldpc_iters() -> usize {
    25
}

fn default_posterior() -> PosteriorName {
    PosteriorName::PriorScaled
}

/// Best single-use mutual information of OOK and 2-PPM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OokVsPpmSpec {
    pub lambda1: Sweep,
    #[serde(default = "default_background")]
    pub background_rate: f64,
    #[serde(default = "default_grid")]
    pub q_grid: usize,
    #[serde(default = "default_grid")]
    pub tau_grid: usize,
}

fn default_grid() -> usize {
    crate::rates::DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    RateSum(RateSumSpec),
    RateSingle(RateSingleSpec),
    LayerSelect(LayerSelectSpec),
    PowerAlloc(PowerAllocSpec),
    Estimate(EstimateSpec),
    Detect(DetectSpec),
    BerSim(BerSimSpec),
    OokVsPpm(OokVsPpmSpec),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::RateSum(_) => "rate-sum",
            Experiment::RateSingle(_) => "rate-single",
            Experiment::LayerSelect(_) => "layer-select",
            Experiment::PowerAlloc(_) => "power-alloc",
            Experiment::Estimate(_) => "estimate",
            Experiment::Detect(_) => "detect",
            Experiment::BerSim(_) => "ber-sim",
            Experiment::OokVsPpm(_) => "ook-vs-ppm",
        }
    }
}

/// Top level of an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scale: Scale,
    #[serde(flatten)]
    pub experiment: Experiment,
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// CSV text plus the parameters actually used, for the manifest.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub csv: String,
    pub resolved: serde_json::Value,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct RunFiles {
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

/// Seed of sweep point `index`, derived from the run seed.
pub fn point_seed(seed: u64, index: u64) -> u64 {
    seeded_rng(seed, u64::MAX - index).next_u64()
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn header(cols: &[&str]) -> String {
    let mut s = cols.join(",");
    s.push('\n');
    s
}

fn positive(field: &str, v: usize) -> Result<usize> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(v)
}

/// Computes an experiment in memory on the current rayon pool.
pub fn execute(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    let seed = spec.seed;
    let scale = spec.scale;
    match &spec.experiment {
        Experiment::RateSum(s) => rate_sum(s, seed, scale),
        Experiment::RateSingle(s) => rate_single(s, scale),
        Experiment::LayerSelect(s) => layer_select(s, seed, scale),
        Experiment::PowerAlloc(s) => power_alloc(s, seed, scale),
        Experiment::Estimate(s) => estimate(s, seed),
        Experiment::Detect(s) => detect(s, seed, scale),
        Experiment::BerSim(s) => ber_sim(s, seed, scale),
        Experiment::OokVsPpm(s) => ook_ppm(s),
    }
}

/// Runs `spec` on `workers` threads (all cores when 0) and writes
/// `<kind>.csv` and `<kind>.manifest.json` under `out_dir`.
pub fn run(spec: &ExperimentSpec, out_dir: &Path, workers: usize) -> Result<RunFiles> {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    let output = pool.install(|| execute(spec))?;
    std::fs::create_dir_all(out_dir)?;
    let kind = spec.experiment.kind();
    let csv = out_dir.join(format!("{kind}.csv"));
    let manifest = out_dir.join(format!("{kind}.manifest.json"));
    std::fs::write(&csv, &output.csv)?;
    let doc = serde_json::json!({
        "kind": kind,
        "spec": to_json(spec),
        "seed": spec.seed,
        "scale": spec.scale,
        "resolved": output.resolved,
        "summary": output.summary,
        "library_version": env!("CARGO_PKG_VERSION"),
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "csv": csv.file_name().and_then(|n| n.to_str()),
    });
    std::fs::write(
        &manifest,
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(RunFiles { csv, manifest })
}

fn rate_sum(s: &RateSumSpec, seed: u64, scale: Scale) -> Result<ExperimentOutput> {
    let symbols = s.symbols.clone().unwrap_or_else(|| {
        scale.pick(
            vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000],
            vec![1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000],
        )
    });
    if symbols.is_empty() {
        return Err(Error::config("symbols", "sweep is empty"));
    }
    let layouts = s.layouts.clone().unwrap_or_else(Layout::default_two_layer);
    if layouts.is_empty() {
        return Err(Error::config("layouts", "sweep is empty"));
    }
    let samples = positive("mc_samples", s.mc_samples.unwrap_or(scale.pick(200, 2000)))?;
    let mut points = Vec::new();
    for layout in &layouts {
        for &m in &symbols {
            points.push((layout.clone(), m, layout.config(m, s.layer_rates.clone(), s.background_rate, s.prior)?));
        }
    }
    // Common random numbers across the sweep.
    let results: Vec<RateResult> = points
        .iter()
        .map(|(_, _, cfg)| sum_rate_mc(cfg, &RateQuery::all_layers(cfg, samples, seed)))
        .collect::<Result<_>>()?;
    let mut csv = header(&["symbols", "layout", "rate_bits_per_symbol", "std_error", "samples"]);
    for ((layout, m, _), r) in points.iter().zip(&results) {
        writeln!(csv, "{m},{layout},{},{},{}", r.rate_bits_per_symbol, r.std_error, r.samples_used).unwrap();
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "symbols": symbols, "layouts": to_json(&layouts), "mc_samples": samples }),
        summary: serde_json::json!({ "points": results.len() }),
    })
}

fn rate_single(s: &RateSingleSpec, scale: Scale) -> Result<ExperimentOutput> {
    let lambdas = s.lambda.values("lambda")?;
    let symbols = s.symbols.unwrap_or(scale.pick(100, 10_000));
    let layout = s.layout.clone().unwrap_or(Layout::Named(LayoutName::Equal));
    let eps = s.tail_epsilon.unwrap_or(DEFAULT_TAIL_EPSILON);
    let results: Vec<RateResult> = lambdas
        .par_iter()
        .map(|&l| {
            let cfg = layout.config(symbols, vec![l; s.layers], s.background_rate, s.prior)?;
            single_layer_rate(&cfg, s.layer, eps)
        })
        .collect::<Result<_>>()?;
    let mut csv = header(&["lambda", "layer", "rate_bits_per_symbol", "truncated_mass"]);
    for (l, r) in lambdas.iter().zip(&results) {
        writeln!(csv, "{l},{},{},{}", s.layer, r.rate_bits_per_symbol, r.truncated_mass).unwrap();
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "symbols": symbols, "layout": to_json(&layout), "tail_epsilon": eps }),
        summary: serde_json::json!({ "points": results.len() }),
    })
}

/// Budget for [`select_layers`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerSelectSettings {
    pub symbols: usize,
    pub background_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSelection {
    pub selected: usize,
    /// `R*_Σ(L)` for `L = 1, 2, ...` as far as it was evaluated.
    pub sum_rates: Vec<RateResult>,
}

/// Equal-delay, equal-rate configuration with uniform priors.
pub fn symmetric_layers(layers: usize, symbols: usize, lambda: f64, background: f64) -> Result<ChannelConfig> {
    Layout::Named(LayoutName::Equal).config(symbols, vec![lambda; layers], background, 0.5)
}

/// `R*_Σ(L)` of the symmetric setup. Every `L` uses its own fixed stream of
/// the seed, so sweeps over `lambda` share randomness.
pub fn symmetric_sum_rate(layers: usize, lambda: f64, settings: &LayerSelectSettings) -> Result<RateResult> {
    let cfg = symmetric_layers(layers, settings.symbols, lambda, settings.background_rate)?;
    sum_rate_mc(&cfg, &RateQuery::all_layers(&cfg, settings.mc_samples, point_seed(settings.seed, layers as u64)))
}

/// Greedy count from a rate curve: the largest `L` such that every step up
/// to it gains at least `sigma`.
pub fn selection_from_rates(rates: &[f64], sigma: f64) -> usize {
    let mut l = 1;
    while l < rates.len() && rates[l] - rates[l - 1] >= sigma {
        l += 1;
    }
    l.min(rates.len().max(1))
}

/// Layer count for a common per-layer rate `lambda`: add layers while each
/// addition gains at least `sigma` bit per symbol, up to `max_layers`.
pub fn select_layers(
    lambda: f64,
    sigma: f64,
    max_layers: usize,
    settings: &LayerSelectSettings,
) -> Result<LayerSelection> {
    if !(sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    positive("max_layers", max_layers)?;
    let mut sum_rates = vec![symmetric_sum_rate(1, lambda, settings)?];
    let mut selected = 1;
    while selected < max_layers {
        let next = symmetric_sum_rate(selected + 1, lambda, settings)?;
        let gain = next.rate_bits_per_symbol - sum_rates[selected - 1].rate_bits_per_symbol;
        sum_rates.push(next);
        if gain < sigma {
            break;
        }
        selected += 1;
    }
    Ok(LayerSelection { selected, sum_rates })
}

/// Smallest swept `lambda` whose selection reaches each `L = 2..=max`, if any.
pub fn selection_thresholds(lambdas: &[f64], selected: &[usize], max_layers: usize) -> Vec<Option<f64>> {
    (2..=max_layers)
        .map(|l| lambdas.iter().zip(selected).find(|(_, &s)| s >= l).map(|(&x, _)| x))
        .collect()
}

fn layer_select(s: &LayerSelectSpec, seed: u64, scale: Scale) -> Result<ExperimentOutput> {
    if !(s.sigma > 0.0) {
        return Err(Error::config("sigma", "must be positive"));
    }
    positive("max_layers", s.max_layers)?;
    let lambdas = s.lambda.values("lambda")?;
    let settings = LayerSelectSettings {
        symbols: s.symbols.unwrap_or(scale.pick(500, 10_000)),
        background_rate: s.background_rate,
        mc_samples: positive("mc_samples", s.mc_samples.unwrap_or(scale.pick(200, 200)))?,
        seed,
    };
    let grid: Vec<(f64, usize)> = lambdas
        .iter()
        .flat_map(|&l| (1..=s.max_layers).map(move |k| (l, k)))
        .collect();
    let results: Vec<RateResult> = grid
        .iter()
        .map(|&(l, k)| symmetric_sum_rate(k, l, &settings))
        .collect::<Result<_>>()?;
    let mut selected = Vec::with_capacity(lambdas.len());
    let mut csv = header(&["lambda", "layers", "sum_rate", "std_error", "selected_layers"]);
    for (i, &l) in lambdas.iter().enumerate() {
        let row = &results[i * s.max_layers..(i + 1) * s.max_layers];
        let curve: Vec<f64> = row.iter().map(|r| r.rate_bits_per_symbol).collect();
        let sel = selection_from_rates(&curve, s.sigma);
        selected.push(sel);
        for (k, r) in row.iter().enumerate() {
            writeln!(csv, "{l},{},{},{},{sel}", k + 1, r.rate_bits_per_symbol, r.std_error).unwrap();
        }
    }
    let thresholds = selection_thresholds(&lambdas, &selected, s.max_layers);
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "settings": to_json(&settings) }),
        summary: serde_json::json!({ "thresholds": thresholds }),
    })
}

fn power_alloc(s: &PowerAllocSpec, seed: u64, scale: Scale) -> Result<ExperimentOutput> {
    let totals = s.lambda_s.values("lambda_s")?;
    let symbols = s.symbols.unwrap_or(scale.pick(100, 10_000));
    let grid = s.grid.unwrap_or(crate::rates::DEFAULT_GRID_POINTS);
    let samples = positive("mc_samples", s.mc_samples.unwrap_or(scale.pick(200, 2000)))?;
    let template = Layout::Delays(vec![s.rho, 1.0 - s.rho]).config(symbols, vec![1.0, 1.0], s.background_rate, 0.5)?;
    let floors = match &s.r2_floor {
        Some(f) => f.values("r2_floor")?,
        None => Vec::new(),
    };
    let mut csv = header(&[
        "case", "lambda_s", "r2_floor", "lambda1", "lambda2", "r1", "r2", "r_sum", "r_sum_std_error", "status",
    ]);
    let mut feasible = 0;
    for (i, &ls) in totals.iter().enumerate() {
        let pa = power_alloc_sum(ls, &template, grid, samples, point_seed(seed, i as u64), DEFAULT_TAIL_EPSILON)?;
        let b = pa.best;
        writeln!(
            csv,
            "sum,{ls},,{},{},{},{},{},{},ok",
            b.lambda1, b.lambda2, b.r1, b.r2, b.r_sum, b.r_sum_std_error
        )
        .unwrap();
        let rows: Vec<String> = floors
            .par_iter()
            .map(|&f| match power_alloc_constrained(ls, f, &template, grid, DEFAULT_TAIL_EPSILON) {
                Ok(p) => Ok(format!("constrained,{ls},{f},{},{},{},{},{},0,ok", p.lambda1, p.lambda2, p.r1, p.r2, p.r_sum)),
                Err(Error::Infeasible { max_achievable, .. }) => {
                    Ok(format!("constrained,{ls},{f},,,,{max_achievable},,,infeasible"))
                }
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        for r in rows {
            feasible += usize::from(r.ends_with(",ok"));
            csv.push_str(&r);
            csv.push('\n');
        }
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "symbols": symbols, "grid": grid, "mc_samples": samples }),
        summary: serde_json::json!({ "feasible_constrained_points": feasible }),
    })
}

fn estimate(s: &EstimateSpec, seed: u64) -> Result<ExperimentOutput> {
    let layers = s.layer_rates.len();
    let layout = s.layout.clone().unwrap_or(Layout::Named(LayoutName::Equal));
    let cfg = layout.config(s.symbols, s.layer_rates.clone(), s.background_rate, 0.5)?;
    let pilot = match &s.pilot {
        Some(text) => parse_pilot_bits(text)?,
        None => default_pilot(),
    };
    if let Some(&lp) = s.pilot_layers.iter().find(|&&lp| lp > layers) {
        return Err(Error::config("pilot_layers", format!("{lp} exceeds {layers} layers")));
    }
    positive("trials", s.trials)?;
    let runs: Vec<(usize, usize)> = s
        .pilot_layers
        .iter()
        .flat_map(|&lp| (0..s.trials).map(move |t| (lp, t)))
        .collect();
    let truth = RateTable::from_config(&cfg);
    let results: Vec<_> = runs
        .par_iter()
        .map(|&(lp, trial)| {
            let pilots = PilotConfig::tiled(&pilot, lp, s.symbols)?;
            // Matched trials: the same symbols and counts stream for every L_p.
            let trial_seed = point_seed(seed, trial as u64);
            let mut z = cfg.sample_symbols(trial_seed);
            for (i, row) in pilots.pilot_bits.iter().enumerate() {
                z.set_row(i, row);
            }
            let obs = cfg.sample_observations(&z, trial_seed)?;
            let init = default_init(&cfg, &pilots, &obs)?;
            em_estimate(&cfg, &pilots, &obs, &init, s.max_iters, s.tol)
        })
        .collect::<Result<_>>()?;
    let mut csv = header(&["pilot_layers", "trial", "iteration", "state", "lambda_hat", "true_rate", "log_likelihood"]);
    let mut summary = Vec::new();
    for (&(lp, trial), res) in runs.iter().zip(&results) {
        for (it, (rates, ll)) in res.trajectory.iter().zip(&res.log_likelihood).enumerate() {
            for (state, r) in rates.iter().enumerate() {
                writeln!(csv, "{lp},{trial},{it},{state},{r},{},{ll}", truth.as_slice()[state]).unwrap();
            }
        }
        summary.push(serde_json::json!({
            "pilot_layers": lp, "trial": trial,
            "iterations": res.iterations_run, "converged": res.converged,
        }));
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "layout": to_json(&layout), "pilot_bits": pilot.len() }),
        summary: serde_json::Value::Array(summary),
    })
}

/// Error counts accumulated over simulated frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorCount {
    pub errors: usize,
    pub total: usize,
}

impl ErrorCount {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.errors as f64 / self.total as f64
        }
    }

    fn add(self, other: ErrorCount) -> ErrorCount {
        ErrorCount {
            errors: self.errors + other.errors,
            total: self.total + other.total,
        }
    }
}

/// Uncoded symbol errors of `algo` over `frames` random frames; frame `f`
/// draws symbols and counts from stream `f` of `seed`.
pub fn symbol_error_count(config: &ChannelConfig, algo: Algo, frames: usize, seed: u64) -> Result<ErrorCount> {
    let rates = RateTable::from_config(config);
    let counts: Vec<ErrorCount> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut rng = seeded_rng(seed, f as u64);
            let z = config.sample_symbols_with(&mut rng);
            let obs = config.sample_observations_with(&z, &mut rng)?;
            let out = match algo {
                Algo::Viterbi => viterbi_detect(config, &rates, &obs)?,
                Algo::Bcjr => bcjr_posteriors(config, &rates, &obs)?,
            };
            Ok(ErrorCount {
                errors: out.hard_bits.hamming(&z),
                total: z.as_slice().len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(counts.into_iter().fold(ErrorCount::default(), ErrorCount::add))
}

/// Uncoded BCJR symbol errors and coded information-bit errors on the same
/// frames, one codeword per layer per frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BerPoint {
    pub uncoded: ErrorCount,
    pub coded: ErrorCount,
    pub frames: usize,
}

pub fn ber_point(
    config: &ChannelConfig,
    code: &LdpcCode,
    options: &TurboOptions,
    frames: usize,
    seed: u64,
) -> Result<BerPoint> {
    let layers = config.layers();
    let rates = RateTable::from_config(config);
    let codes = vec![code.clone(); layers];
    let per_frame: Vec<(ErrorCount, ErrorCount)> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut rng = seeded_rng(seed, f as u64);
            let info: Vec<Vec<u8>> = (0..layers)
                .map(|_| (0..code.k()).map(|_| rng.random_range(0..2u8)).collect())
                .collect();
            let rows: Vec<Vec<u8>> = info.iter().map(|i| code.encode(i)).collect::<Result<_>>()?;
            let z = LayerSymbols::from_rows(&rows)?;
            let obs = config.sample_observations_with(&z, &mut rng)?;
            let detected = bcjr_posteriors(config, &rates, &obs)?;
            let decoded = joint_decode(config, &rates, &obs, &codes, options)?;
            let bit_errors = decoded
                .info_bits
                .iter()
                .zip(&info)
                .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count())
                .sum();
            Ok((
                ErrorCount {
                    errors: detected.hard_bits.hamming(&z),
                    total: layers * code.n(),
                },
                ErrorCount {
                    errors: bit_errors,
                    total: layers * code.k(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().fold(
        BerPoint {
            frames,
            ..Default::default()
        },
        |acc, (u, c)| BerPoint {
            uncoded: acc.uncoded.add(u),
            coded: acc.coded.add(c),
            frames,
        },
    ))
}

fn default_code(scale: Scale) -> Result<LdpcCode> {
    LdpcCode::quasi_cyclic(scale.pick(QcShape::DESK, QcShape::PAPER), DEFAULT_CODE_SEED)
}

fn sweep_configs(
    layers: usize,
    lambdas: &[f64],
    layouts: &[Layout],
    symbols: usize,
    background: f64,
) -> Result<Vec<(Layout, f64, ChannelConfig)>> {
    let mut out = Vec::new();
    for layout in layouts {
        for &l in lambdas {
            out.push((layout.clone(), l, layout.config(symbols, vec![l; layers], background, 0.5)?));
        }
    }
    Ok(out)
}

fn default_layouts(layers: usize) -> Vec<Layout> {
    if layers == 2 {
        Layout::default_two_layer()
    } else {
        vec![Layout::Named(LayoutName::Equal), Layout::Named(LayoutName::Aligned)]
    }
}

fn detect(s: &DetectSpec, seed: u64, scale: Scale) -> Result<ExperimentOutput> {
    let lambdas = s.lambda_ave.values("lambda_ave")?;
    let layouts = s.layouts.clone().unwrap_or_else(|| default_layouts(s.layers));
    let symbols = positive("symbols", s.symbols.unwrap_or(scale.pick(1024, 12_620)))?;
    let frames = positive("frames", s.frames.unwrap_or(scale.pick(50, 1000)))?;
    if s.algos.is_empty() {
        return Err(Error::config("algos", "sweep is empty"));
    }
    let points = sweep_configs(s.layers, &lambdas, &layouts, symbols, s.background_rate)?;
    let mut csv = header(&["algo", "layout", "lambda_ave", "symbol_errors", "symbols", "ser"]);
    let mut index = 0u64;
    for &algo in &s.algos {
        for (layout, l, cfg) in &points {
            let c = symbol_error_count(cfg, algo, frames, point_seed(seed, index))?;
            index += 1;
            writeln!(csv, "{algo},{layout},{l},{},{},{}", c.errors, c.total, c.rate()).unwrap();
        }
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({ "symbols": symbols, "frames": frames, "layouts": to_json(&layouts) }),
        summary: serde_json::json!({ "points": index }),
    })
}

fn ber_sim(s: &BerSimSpec, seed: u64, scale: Scale) -> Result<ExperimentOutput> {
    let lambdas = s.lambda_ave.values("lambda_ave")?;
    let layouts = s.layouts.clone().unwrap_or_else(|| default_layouts(s.layers));
    let code = match &s.code {
        Some(path) => LdpcCode::load_alist(path)?,
        None => default_code(scale)?,
    };
    let frames = positive("frames", s.frames.unwrap_or(scale.pick(50, 1000)))?;
    let options = TurboOptions {
        mode: match s.mode {
            ModeName::Ml => DecodeMode::Ml,
            ModeName::Map => DecodeMode::Map,
        },
        global_iters: positive("global_iters", s.global_iters)?,
        ldpc_iters: positive("ldpc_iters", s.ldpc_iters)?,
        llr_posterior: match s.llr_posterior {
            PosteriorName::PriorScaled => LlrPosterior::PriorScaled,
            PosteriorName::PriorOffset => LlrPosterior::PriorOffset,
        },
        extrinsic: s.extrinsic,
        ..TurboOptions::default()
    };
    let points = sweep_configs(s.layers, &lambdas, &layouts, code.n(), s.background_rate)?;
    let mut csv = header(&[
        "layout", "lambda_ave", "uncoded_ser", "coded_ber", "frames", "bits", "symbol_errors", "bit_errors",
    ]);
    for (i, (layout, l, cfg)) in points.iter().enumerate() {
        let p = ber_point(cfg, &code, &options, frames, point_seed(seed, i as u64))?;
        writeln!(
            csv,
            "{layout},{l},{},{},{frames},{},{},{}",
            p.uncoded.rate(),
            p.coded.rate(),
            p.coded.total,
            p.uncoded.errors,
            p.coded.errors
        )
        .unwrap();
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({
            "code_n": code.n(), "code_k": code.k(), "frames": frames,
            "layouts": to_json(&layouts),
        }),
        summary: serde_json::json!({ "points": points.len() }),
    })
}

fn ook_ppm(s: &OokVsPpmSpec) -> Result<ExperimentOutput> {
    let lambdas = s.lambda1.values("lambda1")?;
    let results: Vec<_> = lambdas
        .par_iter()
        .map(|&l| ook_vs_ppm(l, s.background_rate, s.q_grid, s.tau_grid, DEFAULT_TAIL_EPSILON))
        .collect::<Result<_>>()?;
    let mut csv = header(&["lambda1", "ook_bits", "ook_q", "ppm_bits", "ppm_q", "ppm_tau"]);
    for (l, r) in lambdas.iter().zip(&results) {
        writeln!(csv, "{l},{},{},{},{},{}", r.ook_bits, r.ook_q, r.ppm_bits, r.ppm_q, r.ppm_tau).unwrap();
    }
    Ok(ExperimentOutput {
        csv,
        resolved: serde_json::json!({}),
        summary: serde_json::json!({ "points": results.len() }),
    })
}
