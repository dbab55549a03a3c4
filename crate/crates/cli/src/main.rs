//! `superpos`: simulate, detect, estimate and run numerical studies for
//! superimposed transmission over a Poisson photon-counting channel.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};
use superpos::detection::{bcjr_posteriors, viterbi_detect};
use superpos::estimation::{default_init, em_estimate, PilotConfig};
use superpos::experiment::{
    self, BerSimSpec, Experiment, ExperimentSpec, Layout, LayoutName, ModeName, PosteriorName,
    Scale, Sweep,
};
use superpos::hmm::HmmView;
use superpos::ldpc::{LdpcCode, QcShape, DEFAULT_CODE_SEED};
use superpos::pilot::{default_pilot, parse_pilot_bits};
use superpos::{ChannelConfig, ObservationSequence, RateTable, StateVector};

#[derive(Parser, Debug)]
#[command(name = "superpos", version, about)]
struct Cli {
    /// Experiment spec for `run`, channel config for the other commands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Base seed; overrides the seed in an experiment spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Budget preset; overrides the scale in an experiment spec.
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment spec, writing `<kind>.csv` and `<kind>.manifest.json`.
    Run,
    /// Draw symbols and counts from a channel config.
    Simulate {
        /// Layers, from layer 0, whose symbols carry the default pilot.
        #[arg(long, default_value_t = 0)]
        pilot_layers: usize,
        /// Pilot bits file (`0`/`1` text or `0x` hex) instead of the m-sequence.
        #[arg(long)]
        pilot: Option<PathBuf>,
    },
    /// Detect symbols from a counts file.
    Detect {
        #[arg(long, value_enum, default_value = "bcjr")]
        algo: AlgoArg,
        /// One count per line.
        #[arg(long)]
        obs: PathBuf,
        /// Also write per-chip state posteriors to `trellis.csv` (BCJR only).
        #[arg(long)]
        trellis: bool,
    },
    /// EM estimate of the state rates from a counts file.
    Estimate {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long, default_value_t = 0)]
        pilot_layers: usize,
        #[arg(long)]
        pilot: Option<PathBuf>,
        #[arg(long, default_value_t = superpos::estimation::DEFAULT_MAX_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = superpos::estimation::DEFAULT_TOLERANCE)]
        tol: f64,
    },
    /// Coded bit error rate of turbo detection and decoding.
    BerSim {
        #[arg(long, value_enum, default_value = "map")]
        mode: ModeArg,
        /// alist parity-check matrix; the built-in code of the scale if absent.
        #[arg(long)]
        code: Option<PathBuf>,
        /// `a,b,c` or `start:step:stop`.
        #[arg(long)]
        lambda_ave: String,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        /// `aligned`, `equal` or comma-separated delays; repeatable.
        #[arg(long)]
        layout: Vec<String>,
        #[arg(long, default_value_t = 0.01)]
        background_rate: f64,
        #[arg(long, default_value_t = 5)]
        global_iters: usize,
        #[arg(long, default_value_t = 25)]
        ldpc_iters: usize,
        #[arg(long, value_enum, default_value = "prior-scaled")]
        llr_posterior: PosteriorArg,
        /// Feed back extrinsic rather than full posterior information.
        #[arg(long)]
        extrinsic: bool,
    },
    /// Build a quasi-cyclic LDPC code and write it as an alist file.
    GenCode {
        /// Output file name inside `--out`.
        #[arg(long, default_value = "code.alist")]
        name: String,
        #[arg(long, default_value_t = DEFAULT_CODE_SEED)]
        code_seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScaleArg {
    Desk,
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AlgoArg {
    Viterbi,
    Bcjr,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Map,
    Ml,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PosteriorArg {
    PriorScaled,
    PriorOffset,
}

/// Failure split by exit code.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<superpos::Error> for Failure {
    fn from(e: superpos::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(anyhow::anyhow!(msg.into()))
}

/// Input files that cannot be read or parsed are the caller's fault.
fn input<T>(what: &str, path: &Path, r: superpos::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Invalid(anyhow::Error::new(e).context(format!("{what} {}", path.display()))))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run => {
            let path = cli.config.as_deref().ok_or_else(|| invalid("run needs --config"))?;
            let mut spec = input("experiment spec", path, ExperimentSpec::load(path))?;
            apply_overrides(&mut spec, cli);
            let files = experiment::run(&spec, &cli.out, cli.workers)?;
            println!("{}", files.csv.display());
            Ok(())
        }
        Command::Simulate { pilot_layers, pilot } => {
            let cfg = channel(cli)?;
            let seed = cli.seed.unwrap_or(0);
            let pilots = pilots(&cfg, *pilot_layers, pilot.as_deref())?;
            let mut z = cfg.sample_symbols(seed);
            for (i, row) in pilots.pilot_bits.iter().enumerate() {
                z.set_row(i, row);
            }
            let obs = cfg.sample_observations(&z, seed)?;
            fs::create_dir_all(&cli.out)?;
            let mut csv = String::from("layer,symbol,bit\n");
            for i in 0..cfg.layers() {
                for m in 0..cfg.symbols() {
                    writeln!(csv, "{i},{m},{}", z.get(i, m)).unwrap();
                }
            }
            fs::write(cli.out.join("symbols.csv"), csv)?;
            obs.write_to(BufWriter::new(File::create(cli.out.join("counts.txt"))?))?;
            Ok(())
        }
        Command::Detect { algo, obs, trellis } => {
            let cfg = channel(cli)?;
            let counts = observations(obs)?;
            let rates = RateTable::from_config(&cfg);
            let out = match algo {
                AlgoArg::Viterbi => viterbi_detect(&cfg, &rates, &counts)?,
                AlgoArg::Bcjr => bcjr_posteriors(&cfg, &rates, &counts)?,
            };
            fs::create_dir_all(&cli.out)?;
            let mut csv = String::from("layer,symbol,bit,posterior\n");
            for i in 0..cfg.layers() {
                for m in 0..cfg.symbols() {
                    let p = out
                        .posteriors
                        .as_ref()
                        .map(|p| p[i * cfg.symbols() + m].to_string())
                        .unwrap_or_default();
                    writeln!(csv, "{i},{m},{},{p}", out.hard_bits.get(i, m)).unwrap();
                }
            }
            fs::write(cli.out.join("detect.csv"), csv)?;
            if *trellis {
                let post = HmmView::with_rates(&cfg, rates)?.forward_backward(&counts)?;
                let mut csv = String::from("chip,state,posterior\n");
                for c in 0..post.chips() {
                    for s in 0..post.states() {
                        writeln!(csv, "{c},{s},{}", post.posterior(c, StateVector(s))).unwrap();
                    }
                }
                fs::write(cli.out.join("trellis.csv"), csv)?;
            }
            Ok(())
        }
        Command::Estimate { obs, pilot_layers, pilot, max_iters, tol } => {
            let cfg = channel(cli)?;
            let counts = observations(obs)?;
            let pilots = pilots(&cfg, *pilot_layers, pilot.as_deref())?;
            let init = default_init(&cfg, &pilots, &counts)?;
            let res = em_estimate(&cfg, &pilots, &counts, &init, *max_iters, *tol)?;
            fs::create_dir_all(&cli.out)?;
            let mut csv = String::from("iteration,state,lambda_hat,log_likelihood\n");
            for (it, (rates, ll)) in res.trajectory.iter().zip(&res.log_likelihood).enumerate() {
                for (s, r) in rates.iter().enumerate() {
                    writeln!(csv, "{it},{s},{r},{ll}").unwrap();
                }
            }
            fs::write(cli.out.join("estimate.csv"), csv)?;
            eprintln!("iterations {} converged {}", res.iterations_run, res.converged);
            Ok(())
        }
        Command::BerSim {
            mode,
            code,
            lambda_ave,
            frames,
            layers,
            layout,
            background_rate,
            global_iters,
            ldpc_iters,
            llr_posterior,
            extrinsic,
        } => {
            let layouts = if layout.is_empty() {
                None
            } else {
                Some(layout.iter().map(|l| parse_layout(l)).collect::<Result<_, _>>()?)
            };
            let spec = ExperimentSpec {
                seed: cli.seed.unwrap_or(0),
                scale: cli.scale.map(Scale::from).unwrap_or_default(),
                experiment: Experiment::BerSim(BerSimSpec {
                    layers: *layers,
                    lambda_ave: parse_sweep(lambda_ave)?,
                    layouts,
                    background_rate: *background_rate,
                    mode: match mode {
                        ModeArg::Map => ModeName::Map,
                        ModeArg::Ml => ModeName::Ml,
                    },
                    code: code.clone(),
                    frames: *frames,
                    global_iters: *global_iters,
                    ldpc_iters: *ldpc_iters,
                    llr_posterior: match llr_posterior {
                        PosteriorArg::PriorScaled => PosteriorName::PriorScaled,
                        PosteriorArg::PriorOffset => PosteriorName::PriorOffset,
                    },
                    extrinsic: *extrinsic,
                }),
            };
            if let Some(path) = code {
                input("code", path, LdpcCode::load_alist(path))?;
            }
            let files = experiment::run(&spec, &cli.out, cli.workers)?;
            println!("{}", files.csv.display());
            Ok(())
        }
        Command::GenCode { name, code_seed } => {
            let shape = match cli.scale.unwrap_or(ScaleArg::Desk) {
                ScaleArg::Desk => QcShape::DESK,
                ScaleArg::Paper => QcShape::PAPER,
            };
            let code = LdpcCode::quasi_cyclic(shape, *code_seed)?;
            fs::create_dir_all(&cli.out)?;
            let path = cli.out.join(name);
            code.write_alist(BufWriter::new(File::create(&path)?))?;
            println!("{} ({}, {})", path.display(), code.n(), code.k());
            Ok(())
        }
    }
}

fn apply_overrides(spec: &mut ExperimentSpec, cli: &Cli) {
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if let Some(scale) = cli.scale {
        spec.scale = scale.into();
    }
}

fn channel(cli: &Cli) -> Result<ChannelConfig, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| invalid("a channel --config is required"))?;
    input("channel config", path, ChannelConfig::load(path))
}

fn observations(path: &Path) -> Result<ObservationSequence, Failure> {
    let file = File::open(path)
        .with_context(|| format!("observations {}", path.display()))
        .map_err(Failure::Invalid)?;
    input("observations", path, ObservationSequence::read_from(BufReader::new(file)))
}

fn pilots(cfg: &ChannelConfig, layers: usize, file: Option<&Path>) -> Result<PilotConfig, Failure> {
    if layers > cfg.layers() {
        return Err(invalid(format!("--pilot-layers {layers} exceeds {} layers", cfg.layers())));
    }
    let seq = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("pilot {}", path.display()))
                .map_err(Failure::Invalid)?;
            input("pilot", path, parse_pilot_bits(&text))?
        }
        None => default_pilot(),
    };
    Ok(PilotConfig::tiled(&seq, layers, cfg.symbols())?)
}

fn parse_sweep(text: &str) -> Result<Sweep, Failure> {
    let bad = || invalid(format!("bad sweep `{text}`: use a,b,c or start:step:stop"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        [start, step, stop] => Ok(Sweep::Range {
            start: num(start)?,
            stop: num(stop)?,
            step: num(step)?,
        }),
        [list] => Ok(Sweep::List(list.split(',').map(num).collect::<Result<_, _>>()?)),
        _ => Err(bad()),
    }
}

fn parse_layout(text: &str) -> Result<Layout, Failure> {
    match text {
        "aligned" => Ok(Layout::Named(LayoutName::Aligned)),
        "equal" => Ok(Layout::Named(LayoutName::Equal)),
        _ => text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Layout::Delays)
            .map_err(|_| invalid(format!("bad layout `{text}`"))),
    }
}
