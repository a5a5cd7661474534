//! Command-line front end: `corrupt`, `restore`, `evaluate` and `pipeline`.
//!
//! Every subcommand stages its outputs in a temporary directory next to the
//! destination and moves them into place only after all of them were
//! written, so a failing command leaves no partial results behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorKind, Result};
use crate::gmrf::{GridGraph, IcarHyper};
use crate::imaging::{
    center_crop, corrupt_poisson, intensity_apply, intensity_forward, intensity_inverse, read_counts_csv,
    read_field_csv, read_pgm_file, write_counts_csv, write_field_csv, write_pgm, ContrastParams, CorruptionMeta,
    PixelImage, PRNG_NAME,
};
use crate::inla::{Inla, InlaConfig, PosteriorMarginals, Strategy};
use crate::likelihood::CountField;
use crate::mcmc::{run_chain, write_histograms_csv, ChainConfig, ThetaMode};
use crate::metrics::{evaluate_pair, MetricReport};

/// Version of the `report.json` layout; see `schema/report.schema.json`.
pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";

pub const COUNTS_FILE: &str = "counts.csv";
pub const VIEW_FILE: &str = "view.pgm";
pub const META_FILE: &str = "meta.json";
pub const RESTORED_FILE: &str = "restored.pgm";
pub const EAP_FILE: &str = "eap.csv";
pub const REPORT_FILE: &str = "report.json";
pub const MARGINALS_FILE: &str = "marginals.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Inla,
    Mcmc,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Inla => "inla",
            Engine::Mcmc => "mcmc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThetaHandling {
    /// Held at the INLA hyperparameter mode.
    #[default]
    Fixed,
    /// Random-walk Metropolis updates under the INLA hyperprior.
    Sample,
}

/// Sampler settings as exposed on the command line and in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSettings {
    pub steps: usize,
    pub burn_in: usize,
    pub step_size: f64,
    pub seed: u64,
    pub theta: ThetaHandling,
    pub theta_every: usize,
    pub hist_bins: usize,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            steps: c.steps,
            burn_in: c.burn_in,
            step_size: c.step_size,
            seed: c.seed,
            theta: ThetaHandling::Fixed,
            theta_every: 10,
            hist_bins: c.hist_bins,
        }
    }
}

impl McmcSettings {
    fn chain_config(&self, theta: IcarHyper, inla: &InlaConfig) -> ChainConfig {
        ChainConfig {
            steps: self.steps,
            burn_in: self.burn_in,
            step_size: self.step_size,
            seed: self.seed,
            theta_mode: match self.theta {
                ThetaHandling::Fixed => ThetaMode::Fixed { theta },
                ThetaHandling::Sample => ThetaMode::Sample {
                    init: theta,
                    prior: inla.prior,
                    every: self.theta_every,
                },
            },
            hist_bins: self.hist_bins,
            ..ChainConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        self.chain_config(IcarHyper::new(1.0, 1.0)?, &InlaConfig::default())
            .validate()
    }
}

/// Engine choice plus the settings of both engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub engine: Engine,
    pub inla: InlaConfig,
    pub mcmc: McmcSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    pub sigma2: f64,
    pub d: f64,
    pub log_posterior: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcReport {
    pub sampler: String,
    pub steps: usize,
    pub burn_in: usize,
    pub retained: usize,
    pub seed: u64,
    pub initial_step_size: f64,
    pub final_step_size: f64,
    pub acceptance_rate: f64,
    pub burn_in_acceptance_rate: f64,
    pub theta: ThetaHandling,
    pub theta_acceptance_rate: Option<f64>,
    pub theta_log_mean: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Timings {
    pub total_s: f64,
    pub mode_search_s: f64,
    pub exploration_s: f64,
    pub integration_s: f64,
    pub sampling_s: f64,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub schema_version: String,
    pub library_version: String,
    pub engine: Engine,
    pub strategy: Option<Strategy>,
    pub rows: usize,
    pub cols: usize,
    pub hyper_mode: HyperSummary,
    /// Number of hyperparameter integration points `H`.
    pub points: usize,
    pub corruption_seed: u64,
    pub prng: String,
    pub contrast: ContrastParams,
    pub mcmc: Option<McmcReport>,
    pub metrics: Option<MetricReport>,
    pub metric_space: Option<String>,
    pub config: EngineSettings,
    pub timings: Timings,
}

/// Output of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub space: String,
}

/// One row of the pipeline's combined table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub engine: Engine,
    pub strategy: Option<Strategy>,
    pub status: String,
    pub points: Option<usize>,
    pub sigma2: Option<f64>,
    pub d: Option<f64>,
    pub mse: Option<f64>,
    #[serde(with = "opt_psnr")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub time_s: f64,
}

mod opt_psnr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if *x == f64::INFINITY => s.serialize_some("inf"),
            Some(x) => s.serialize_some(x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => None,
            Some(Repr::Number(v)) => Some(v),
            Some(Repr::Text(t)) if t == "inf" => Some(f64::INFINITY),
            Some(Repr::Text(t)) => return Err(serde::de::Error::custom(format!("invalid psnr {t:?}"))),
        })
    }
}

/// Composite configuration for `pipeline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub contrast: ContrastParams,
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    #[serde(default)]
    pub marginal_pixels: Vec<usize>,
    #[serde(default)]
    pub inla: InlaConfig,
    #[serde(default)]
    pub mcmc: McmcSettings,
    pub runs: Vec<RunSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub engine: Engine,
    #[serde(default)]
    pub strategy: Option<Strategy>,
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config file: {e}")))?;
        if cfg.input.is_relative() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.contrast.validate()?;
        self.inla.validate()?;
        self.mcmc.validate()?;
        if self.runs.is_empty() {
            return Err(Error::InvalidConfig("no runs configured".into()));
        }
        require_file(&self.input)?;
        require_parent(&self.output)
    }
}

#[derive(Parser, Debug)]
#[command(name = "poisson-inla", version, about = "Bayesian restoration of Poisson-corrupted images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Map an image to photon rates and draw Poisson counts.
    Corrupt(CorruptArgs),
    /// Restore an image from counts with INLA or MCMC.
    Restore(RestoreArgs),
    /// Compare two images with MSE, PSNR and SSIM.
    Evaluate(EvaluateArgs),
    /// Run corrupt, restore and evaluate for several engines.
    Pipeline(PipelineArgs),
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 2], String> {
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    match parts.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|_| format!("bad value {a:?}"))?,
            b.trim().parse().map_err(|_| format!("bad value {b:?}"))?,
        ]),
        _ => Err(format!("expected two comma-separated values, got {s:?}")),
    }
}

fn parse_theta(s: &str) -> std::result::Result<[f64; 2], String> {
    parse_pair(s)
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_pair(s)
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub lmin: f64,
    #[arg(long, default_value_t = 25.0)]
    pub lmax: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Centre crop `ROWS,COLS` applied before the transform.
    #[arg(long, value_parser = parse_dims)]
    pub crop: Option<[usize; 2]>,
}

#[derive(Args, Debug, Clone)]
pub struct InlaArgs {
    #[arg(long, value_enum, default_value = "ccd")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    pub delta_z: f64,
    #[arg(long, default_value_t = 2.5)]
    pub delta_pi: f64,
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    pub f0: f64,
    /// Starting `SIGMA2,D` for the mode search.
    #[arg(long, value_parser = parse_theta, default_value = "1,1")]
    pub theta_init: [f64; 2],
    #[arg(long, default_value_t = 1e-5)]
    pub grad_tol: f64,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Grid,
    Ccd,
    /// Single point at the mode (debugging only).
    Mode,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Grid => Strategy::Grid,
            StrategyArg::Ccd => Strategy::Ccd,
            StrategyArg::Mode => Strategy::Mode,
        }
    }
}

impl InlaArgs {
    fn config(&self) -> InlaConfig {
        InlaConfig {
            strategy: self.strategy.into(),
            delta_z: self.delta_z,
            delta_pi: self.delta_pi,
            f0: self.f0,
            theta_init: self.theta_init,
            grad_tol: self.grad_tol,
            workers: self.workers,
            ..InlaConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct McmcArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long = "burnin", default_value_t = 1000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 0.5)]
    pub step_size: f64,
    #[arg(long, default_value_t = 0)]
    pub chain_seed: u64,
    #[arg(long, value_enum, default_value = "fixed")]
    pub theta: ThetaHandling,
    #[arg(long, default_value_t = 10)]
    pub theta_every: usize,
    #[arg(long, default_value_t = 40)]
    pub hist_bins: usize,
}

impl McmcArgs {
    fn settings(&self) -> McmcSettings {
        McmcSettings {
            steps: self.steps,
            burn_in: self.burn_in,
            step_size: self.step_size,
            seed: self.chain_seed,
            theta: self.theta,
            theta_every: self.theta_every,
            hist_bins: self.hist_bins,
        }
    }
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    /// Directory holding `counts.csv` and `meta.json`.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "inla")]
    pub engine: Engine,
    #[command(flatten)]
    pub inla: InlaArgs,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    /// Pixel indices whose marginals are written to `marginals.csv`.
    #[arg(long, value_delimiter = ',')]
    pub marginals: Vec<usize>,
    /// Ground-truth image; adds metrics to the report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub original: PathBuf,
    /// Restored image: PGM (pixel units) or CSV (latent intensities).
    #[arg(long)]
    pub restored: PathBuf,
    /// Corruption sidecar; enables latent-intensity metrics.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Compare in pixel units even when a sidecar is given.
    #[arg(long)]
    pub pixel_space: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PipelineArgs {
    /// TOML file mirroring the run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2.0)]
    pub lmin: f64,
    #[arg(long, default_value_t = 25.0)]
    pub lmax: f64,
    #[arg(long, value_parser = parse_dims)]
    pub crop: Option<[usize; 2]>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "inla")]
    pub engines: Vec<Engine>,
    #[command(flatten)]
    pub inla: InlaArgs,
    #[command(flatten)]
    pub mcmc: McmcArgs,
    #[arg(long, value_delimiter = ',')]
    pub marginals: Vec<usize>,
}

impl PipelineArgs {
    fn run_config(&self) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            return RunConfig::from_toml(&text, base);
        }
        let missing = |what: &str| Error::InvalidConfig(format!("--{what} is required without --config"));
        let inla = self.inla.config();
        Ok(RunConfig {
            input: self.input.clone().ok_or_else(|| missing("in"))?,
            output: self.out.clone().ok_or_else(|| missing("out"))?,
            seed: self.seed.ok_or_else(|| missing("seed"))?,
            contrast: ContrastParams {
                lambda_min: self.lmin,
                lambda_max: self.lmax,
            },
            crop: self.crop,
            marginal_pixels: self.marginals.clone(),
            inla,
            mcmc: self.mcmc.settings(),
            runs: self
                .engines
                .iter()
                .map(|&engine| RunSpec {
                    engine,
                    strategy: (engine == Engine::Inla).then_some(inla.strategy),
                })
                .collect(),
        })
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            format!("input {}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

fn require_parent(out: &Path) -> Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            format!("output parent {}", parent.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

/// Temporary output directory committed into `target` on success.
struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    fn new(target: &Path) -> Result<Self> {
        require_parent(target)?;
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let dir = tempfile::Builder::new()
            .prefix(".poisson-inla-stage")
            .tempdir_in(parent)
            .map_err(|e| Error::io("creating staging directory", e))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn commit(self) -> Result<()> {
        if !self.target.exists() {
            let staged = self.dir.keep();
            return fs::rename(&staged, &self.target)
                .map_err(|e| Error::io(format!("moving outputs to {}", self.target.display()), e));
        }
        move_contents(self.dir.path(), &self.target)
    }
}

fn move_contents(from: &Path, to: &Path) -> Result<()> {
    let ctx = |p: &Path| format!("moving outputs to {}", p.display());
    for entry in fs::read_dir(from).map_err(|e| Error::io(ctx(to), e))? {
        let entry = entry.map_err(|e| Error::io(ctx(to), e))?;
        let dest = to.join(entry.file_name());
        if entry.path().is_dir() && dest.is_dir() {
            move_contents(&entry.path(), &dest)?;
        } else {
            if dest.is_dir() {
                fs::remove_dir_all(&dest).map_err(|e| Error::io(ctx(&dest), e))?;
            }
            fs::rename(entry.path(), &dest).map_err(|e| Error::io(ctx(&dest), e))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    s.push(b'\n');
    Ok(s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_image(path: &Path, crop: Option<[usize; 2]>) -> Result<PixelImage> {
    let img = read_pgm_file(path)?;
    match crop {
        Some([r, c]) => center_crop(&img, r, c),
        None => Ok(img),
    }
}

/// Writes `counts.csv`, `view.pgm` and `meta.json` into `dir`.
fn corrupt_into(
    dir: &Path,
    img: &PixelImage,
    contrast: &ContrastParams,
    seed: u64,
) -> Result<(CountField, Vec<f64>, CorruptionMeta)> {
    let (x, range) = intensity_forward(img, contrast)?;
    let counts = corrupt_poisson(&x, img.rows(), img.cols(), seed)?;
    let meta = CorruptionMeta {
        seed,
        lambda_min: contrast.lambda_min,
        lambda_max: contrast.lambda_max,
        i_min: range.i_min,
        i_max: range.i_max,
    };
    let mut csv = Vec::new();
    write_counts_csv(&mut csv, &counts)?;
    write_file(&dir.join(COUNTS_FILE), &csv)?;
    let view = PixelImage::new(img.rows(), img.cols(), counts.as_f64(), 255)?;
    write_file(&dir.join(VIEW_FILE), &write_pgm(&view))?;
    write_file(&dir.join(META_FILE), &to_json(&meta)?)?;
    Ok((counts, x, meta))
}

pub fn cmd_corrupt(args: &CorruptArgs) -> Result<CorruptionMeta> {
    let contrast = ContrastParams::new(args.lmin, args.lmax)?;
    require_file(&args.input)?;
    let img = load_image(&args.input, args.crop)?;
    let stage = Staging::new(&args.out)?;
    let (_, _, meta) = corrupt_into(stage.path(), &img, &contrast, args.seed)?;
    stage.commit()?;
    Ok(meta)
}

/// Density abscissae for one pixel: 201 points over ±6 posterior sd.
fn marginal_abscissae(m: &PosteriorMarginals, i: usize) -> Vec<f64> {
    let sd = m.variance[i].sqrt();
    let lo = m.eap[i] - 6.0 * sd;
    let step = 12.0 * sd / 200.0;
    (0..=200).map(|k| lo + k as f64 * step).collect()
}

fn write_inla_marginals(path: &Path, m: &PosteriorMarginals, pixels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["pixel", "abscissa", "density"]).map_err(fmt)?;
    for &p in pixels {
        let xs = marginal_abscissae(m, p);
        for (x, dens) in xs.iter().zip(m.density(p, &xs)) {
            w.write_record([p.to_string(), format!("{x:?}"), format!("{dens:?}")])
                .map_err(fmt)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &bytes)
}

fn check_pixels(pixels: &[usize], n: usize) -> Result<()> {
    match pixels.iter().find(|&&p| p >= n) {
        Some(p) => Err(Error::InvalidConfig(format!("marginal pixel {p} out of range for {n} pixels"))),
        None => Ok(()),
    }
}

/// Runs one engine and writes `restored.pgm`, `eap.csv`, `report.json` and,
/// when pixels are requested, `marginals.csv` into `dir`.
fn restore_into(
    dir: &Path,
    counts: &CountField,
    meta: &CorruptionMeta,
    settings: &EngineSettings,
    pixels: &[usize],
    truth_latent: Option<&[f64]>,
) -> Result<RestorationReport> {
    let start = Instant::now();
    let (rows, cols) = (counts.rows(), counts.cols());
    check_pixels(pixels, rows * cols)?;
    let g = GridGraph::new(rows, cols)?;
    let inla = Inla::new(g, counts, settings.inla)?;
    let mut timings = Timings::default();

    let (eap, mode, points, strategy, mcmc) = match settings.engine {
        Engine::Inla => {
            let fit = inla.run()?;
            timings.mode_search_s = fit.timings.mode_search_s;
            timings.exploration_s = fit.timings.exploration_s;
            timings.integration_s = fit.timings.integration_s;
            if !pixels.is_empty() {
                write_inla_marginals(&dir.join(MARGINALS_FILE), &fit.marginals, pixels)?;
            }
            (fit.marginals.eap, fit.mode, fit.points.len(), Some(fit.strategy), None)
        }
        Engine::Mcmc => {
            let t0 = Instant::now();
            let init = IcarHyper::new(settings.inla.theta_init[0], settings.inla.theta_init[1])?;
            let mode = inla.find_mode(&init)?;
            timings.mode_search_s = t0.elapsed().as_secs_f64();
            let cfg = settings.mcmc.chain_config(mode.theta, &settings.inla);
            let t1 = Instant::now();
            let chain = run_chain(&g, counts, &cfg, None)?;
            timings.sampling_s = t1.elapsed().as_secs_f64();
            if !pixels.is_empty() {
                let mut buf = Vec::new();
                write_histograms_csv(&mut buf, &chain, pixels)?;
                write_file(&dir.join(MARGINALS_FILE), &buf)?;
            }
            let report = McmcReport {
                sampler: chain.sampler.clone(),
                steps: cfg.steps,
                burn_in: cfg.burn_in,
                retained: chain.retained,
                seed: cfg.seed,
                initial_step_size: cfg.step_size,
                final_step_size: chain.final_step_size,
                acceptance_rate: chain.acceptance_rate,
                burn_in_acceptance_rate: chain.burn_in_acceptance_rate,
                theta: settings.mcmc.theta,
                theta_acceptance_rate: chain.theta_acceptance_rate,
                theta_log_mean: chain.theta_log_mean,
            };
            (chain.mean, mode, 1, None, Some(report))
        }
    };

    let contrast = meta.contrast()?;
    let restored = intensity_inverse(&eap, &meta.range(), &contrast);
    write_file(
        &dir.join(RESTORED_FILE),
        &write_pgm(&PixelImage::new(rows, cols, restored, 255)?),
    )?;
    let mut csv = Vec::new();
    write_field_csv(&mut csv, &eap, rows, cols)?;
    write_file(&dir.join(EAP_FILE), &csv)?;

    let metrics = truth_latent.map(|t| evaluate_pair(t, &eap)).transpose()?;
    timings.total_s = start.elapsed().as_secs_f64();
    let report = RestorationReport {
        schema_version: REPORT_SCHEMA_VERSION.to_string(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        engine: settings.engine,
        strategy,
        rows,
        cols,
        hyper_mode: HyperSummary {
            sigma2: mode.theta.sigma2(),
            d: mode.theta.d(),
            log_posterior: mode.log_post,
            iterations: mode.iterations,
            gradient_norm: mode.gradient[0].hypot(mode.gradient[1]),
        },
        points,
        corruption_seed: meta.seed,
        prng: PRNG_NAME.to_string(),
        contrast,
        mcmc,
        metric_space: metrics.map(|_| "latent".to_string()),
        metrics,
        config: *settings,
        timings,
    };
    write_file(&dir.join(REPORT_FILE), &to_json(&report)?)?;
    Ok(report)
}

fn latent_truth(path: &Path, meta: &CorruptionMeta, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let img = read_pgm_file(path)?;
    if (img.rows(), img.cols()) != (rows, cols) {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            found: img.len(),
        });
    }
    Ok(intensity_apply(img.values(), &meta.range(), &meta.contrast()?))
}

pub fn cmd_restore(args: &RestoreArgs) -> Result<RestorationReport> {
    let settings = EngineSettings {
        engine: args.engine,
        inla: args.inla.config(),
        mcmc: args.mcmc.settings(),
    };
    settings.inla.validate()?;
    if settings.engine == Engine::Mcmc {
        settings.mcmc.validate()?;
    }
    let counts_path = args.input.join(COUNTS_FILE);
    let meta_path = args.input.join(META_FILE);
    require_file(&counts_path)?;
    require_file(&meta_path)?;
    if let Some(t) = &args.truth {
        require_file(t)?;
    }
    require_parent(&args.out)?;

    let file = fs::File::open(&counts_path).map_err(|e| Error::io(format!("reading {}", counts_path.display()), e))?;
    let counts = read_counts_csv(file)?;
    let meta: CorruptionMeta = read_json(&meta_path)?;
    meta.contrast()?;
    let truth = args
        .truth
        .as_deref()
        .map(|t| latent_truth(t, &meta, counts.rows(), counts.cols()))
        .transpose()?;

    let stage = Staging::new(&args.out)?;
    let report = restore_into(stage.path(), &counts, &meta, &settings, &args.marginals, truth.as_deref())?;
    stage.commit()?;
    Ok(report)
}

/// Loads the restored field in pixel units (`pixel == true`) or latent
/// intensities.
fn load_restored(path: &Path, meta: Option<&CorruptionMeta>, pixel: bool) -> Result<(usize, usize, Vec<f64>)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let (r, c, v) = read_field_csv::<_, f64>(file)?;
        if !pixel {
            return Ok((r, c, v));
        }
        let meta = meta.ok_or_else(|| {
            Error::InvalidConfig("a CSV of latent intensities needs --meta to be compared in pixel units".into())
        })?;
        return Ok((r, c, intensity_inverse(&v, &meta.range(), &meta.contrast()?)));
    }
    let img = read_pgm_file(path)?;
    let (r, c) = (img.rows(), img.cols());
    let v = match (pixel, meta) {
        (false, Some(m)) => intensity_apply(img.values(), &m.range(), &m.contrast()?),
        _ => img.into_values(),
    };
    Ok((r, c, v))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvaluationReport> {
    require_file(&args.original)?;
    require_file(&args.restored)?;
    if let Some(m) = &args.meta {
        require_file(m)?;
    }
    if let Some(out) = &args.out {
        require_parent(out)?;
    }
    let meta: Option<CorruptionMeta> = args.meta.as_deref().map(read_json).transpose()?;
    let pixel = args.pixel_space || meta.is_none();
    let original = read_pgm_file(&args.original)?;
    let (r, c, restored) = load_restored(&args.restored, meta.as_ref(), pixel)?;
    if (r, c) != (original.rows(), original.cols()) {
        return Err(Error::DimensionMismatch {
            expected: original.len(),
            found: r * c,
        });
    }
    let reference = match (&meta, pixel) {
        (Some(m), false) => intensity_apply(original.values(), &m.range(), &m.contrast()?),
        _ => original.values().to_vec(),
    };
    let report = EvaluationReport {
        metrics: evaluate_pair(&reference, &restored)?,
        space: if pixel { "pixel" } else { "latent" }.to_string(),
    };
    if let Some(out) = &args.out {
        let stage = Staging::new(out)?;
        let name = out.file_name().ok_or_else(|| Error::InvalidConfig("--out needs a file name".into()))?;
        write_file(&stage.path().join(name), &to_json(&report)?)?;
        let staged = stage.path().join(name);
        fs::rename(&staged, out).map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
    }
    Ok(report)
}

fn run_label(run: &RunSpec) -> String {
    match (run.engine, run.strategy) {
        (Engine::Inla, Some(s)) => format!("inla-{s}"),
        (Engine::Inla, None) => "inla".to_string(),
        (Engine::Mcmc, _) => "mcmc".to_string(),
    }
}

fn write_table(dir: &Path, rows: &[TableRow]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["engine", "strategy", "status", "points", "sigma2", "d", "mse", "psnr", "ssim", "time_s"])
        .map_err(fmt)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.engine.to_string(),
            r.strategy.map(|s| s.to_string()).unwrap_or_default(),
            r.status.clone(),
            r.points.map(|p| p.to_string()).unwrap_or_default(),
            opt(r.sigma2),
            opt(r.d),
            opt(r.mse),
            r.psnr
                .map(|p| if p == f64::INFINITY { "inf".to_string() } else { format!("{p:?}") })
                .unwrap_or_default(),
            opt(r.ssim),
            format!("{:?}", r.time_s),
        ])
        .map_err(fmt)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("table.csv"), &bytes)?;
    write_file(&dir.join("table.json"), &to_json(&rows)?)
}

/// Corrupts once, then restores and evaluates for every configured run.
/// A failing run is recorded in the table and does not stop the others.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<Vec<TableRow>> {
    cfg.validate()?;
    let img = load_image(&cfg.input, cfg.crop)?;
    check_pixels(&cfg.marginal_pixels, img.len())?;
    let stage = Staging::new(&cfg.output)?;
    let corrupt_dir = stage.path().join("corrupt");
    fs::create_dir(&corrupt_dir).map_err(|e| Error::io("creating corrupt directory", e))?;
    let (counts, truth, meta) = corrupt_into(&corrupt_dir, &img, &cfg.contrast, cfg.seed)?;

    let mut rows = Vec::new();
    for run in &cfg.runs {
        let start = Instant::now();
        let mut inla = cfg.inla;
        if let Some(s) = run.strategy {
            inla.strategy = s;
        }
        let settings = EngineSettings {
            engine: run.engine,
            inla,
            mcmc: cfg.mcmc,
        };
        let dir = stage.path().join(run_label(run));
        let result = fs::create_dir_all(&dir)
            .map_err(|e| Error::io("creating run directory", e))
            .and_then(|_| restore_into(&dir, &counts, &meta, &settings, &cfg.marginal_pixels, Some(&truth)));
        let time_s = start.elapsed().as_secs_f64();
        let strategy = (run.engine == Engine::Inla).then_some(inla.strategy);
        rows.push(match result {
            Ok(rep) => TableRow {
                engine: run.engine,
                strategy,
                status: "ok".to_string(),
                points: Some(rep.points),
                sigma2: Some(rep.hyper_mode.sigma2),
                d: Some(rep.hyper_mode.d),
                mse: rep.metrics.map(|m| m.mse),
                psnr: rep.metrics.map(|m| m.psnr),
                ssim: rep.metrics.map(|m| m.ssim),
                time_s,
            },
            Err(e) => TableRow {
                engine: run.engine,
                strategy,
                status: format!("error: {e}"),
                points: None,
                sigma2: None,
                d: None,
                mse: None,
                psnr: None,
                ssim: None,
                time_s,
            },
        });
    }
    write_table(stage.path(), &rows)?;
    stage.commit()?;
    Ok(rows)
}

/// Process exit code for an error: 2 validation, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Corrupt(a) => {
            let meta = cmd_corrupt(a)?;
            println!("{}", serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Restore(a) => {
            let r = cmd_restore(a)?;
            eprintln!(
                "{} restoration: sigma2={:.6} d={:.6} points={} total {:.2} s",
                r.engine, r.hyper_mode.sigma2, r.hyper_mode.d, r.points, r.timings.total_s
            );
        }
        Command::Evaluate(a) => {
            let r = cmd_evaluate(a)?;
            println!("{}", serde_json::to_string(&r).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::Pipeline(a) => {
            let rows = cmd_pipeline(&a.run_config()?)?;
            for r in &rows {
                let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string());
                eprintln!(
                    "{:<5} {:<5} {:<8} psnr={} ssim={} {:.2} s",
                    r.engine,
                    r.strategy.map(|s| s.to_string()).unwrap_or_default(),
                    r.status,
                    show(r.psnr),
                    show(r.ssim),
                    r.time_s
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the selected subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
