//! Command-line front end: dataset generation, training, single episodes and
//! the three-way controller comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use riskmpc::covpred::{load_checkpoint, save_checkpoint, train, CovError, LossHistory, NetSpec, TrainConfig};
use riskmpc::simcore::{metrics, run_episode, write_log, write_summary, Mode, SimError, Summary};
use riskmpc::viosim::{default_maps, gen_dataset, read_dataset, write_dataset, VioError};
use riskmpc::{EpisodeLog, GenConfig, Model, Scenario};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const LOSS_SCHEMA: &str = "# riskmpc-loss-history v1";
pub const COMPARE_SCHEMA: &str = "# riskmpc-compare v1";
pub const EPISODES_SCHEMA: &str = "# riskmpc-compare-episodes v1";
pub const TRAJECTORY_SCHEMA: &str = "# riskmpc-trajectories v1";

#[derive(Debug, Parser)]
#[command(name = "riskmpc", version, about = "Risk-averse MPC planning with learned estimation uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the estimator over random landmark maps and write a training dataset.
    GenData(Common),
    /// Train the covariance predictor on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file [default: <out>/dataset.csv]
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run one closed-loop episode.
    Run {
        #[command(flatten)]
        common: Common,
        /// baseline, naive or risk-averse [default: from config]
        #[arg(long)]
        mode: Option<Mode>,
        /// Checkpoint, required in risk-averse mode.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run all three controllers over a range of seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Checkpoint used by the risk-averse runs.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Number of consecutive seeds per mode [default: 20]
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for this command's random stream (dataset, training, episode, or first compared seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub recurrent: Vec<usize>,
    pub dense: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        let spec = NetSpec::default();
        Self {
            recurrent: spec.recurrent,
            dense: spec.dense,
        }
    }
}

impl NetConfig {
    pub fn spec(&self) -> NetSpec {
        NetSpec {
            recurrent: self.recurrent.clone(),
            dense: self.dense.clone(),
            ..NetSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub seeds: usize,
    pub first_seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { seeds: 20, first_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub out: PathBuf,
    pub data: GenConfig,
    pub net: NetConfig,
    pub training: TrainConfig,
    pub scenario: Scenario,
    pub compare: CompareConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            data: GenConfig::default(),
            net: NetConfig::default(),
            training: TrainConfig::default(),
            scenario: Scenario::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(anyhow!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(anyhow!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Usage and configuration problems exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0:#}")]
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.into())
    }
}

/// Writes a file through a temporary sibling and a rename.
pub fn write_atomic<F>(path: &Path, fill: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> anyhow::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder
        .tempfile_in(dir)
        .with_context(|| format!("cannot write in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn resolve(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Creates the output directory and writes the resolved configuration into it.
fn prepare(cfg: &Config, command: &str) -> Result<String, CliError> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    let text = cfg.to_toml();
    write_atomic(&cfg.out.join(format!("{command}.config.toml")), |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })?;
    Ok(sha256_hex(text.as_bytes()))
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let f = File::open(path).map_err(|e| CliError::Usage(anyhow!("cannot open model {}: {e}", path.display())))?;
    load_checkpoint(BufReader::new(f)).map_err(|e| CliError::Failed(anyhow!("model {}: {e}", path.display())))
}

pub fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.data.seed = seed;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train { common, data } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.training.seed = seed;
            }
            let data = data.unwrap_or_else(|| cfg.out.join("dataset.csv"));
            cmd_train(&cfg, &data)
        }
        Command::Run { common, mode, model } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.scenario.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.scenario.mode = mode;
            }
            cmd_run(&cfg, model.as_deref())
        }
        Command::Compare { common, model, seeds } => {
            let mut cfg = resolve(&common)?;
            if let Some(seed) = common.seed {
                cfg.compare.first_seed = seed;
            }
            if let Some(n) = seeds {
                cfg.compare.seeds = n;
            }
            let model = model.ok_or_else(|| CliError::Usage(anyhow!("compare needs --model")))?;
            cmd_compare(&cfg, &model)
        }
    }
}

pub fn cmd_gen_data(cfg: &Config) -> Result<u8, CliError> {
    let digest = prepare(cfg, "gen-data")?;
    let maps = default_maps(cfg.data.seed, cfg.data.arena);
    let ds = gen_dataset(&maps, &cfg.data).map_err(|e| match e {
        VioError::BadParams(_) | VioError::EmptyDataset | VioError::NoMaps => CliError::Usage(e.into()),
        e => CliError::Failed(e.into()),
    })?;
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).map_err(anyhow::Error::from)?;
    let path = cfg.out.join("dataset.csv");
    write_atomic(&path, |w| Ok(w.write_all(&bytes)?))?;
    println!(
        "wrote {} records in {} episodes to {}",
        ds.len(),
        ds.episodes.len(),
        path.display()
    );
    println!("config sha256 {digest}");
    println!("dataset sha256 {}", sha256_hex(&bytes));
    Ok(0)
}

pub fn write_loss_history<W: Write>(h: &LossHistory, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOSS_SCHEMA}")?;
    writeln!(w, "# initial train={} validation={}", h.initial.train, h.initial.validation)?;
    writeln!(w, "epoch,train,validation")?;
    for e in &h.epochs {
        writeln!(w, "{},{},{}", e.epoch, e.train, e.validation)?;
    }
    Ok(())
}

pub fn cmd_train(cfg: &Config, data: &Path) -> Result<u8, CliError> {
    prepare(cfg, "train")?;
    let f = File::open(data).map_err(|e| CliError::Usage(anyhow!("cannot open dataset {}: {e}", data.display())))?;
    let ds = read_dataset::<f64, _>(BufReader::new(f))
        .map_err(|e| CliError::Failed(anyhow!("dataset {}: {e}", data.display())))?;
    let (model, history) = match train(&ds.training_sequences(), &cfg.net.spec(), &cfg.training) {
        Ok(r) => r,
        Err(e @ CovError::Shape(_)) => return Err(CliError::Usage(e.into())),
        Err(e) => return Err(CliError::Failed(e.into())),
    };
    let ckpt = cfg.out.join("model.ckpt");
    write_atomic(&ckpt, |w| Ok(save_checkpoint(&model, w)?))?;
    let loss = cfg.out.join("loss.csv");
    write_atomic(&loss, |w| Ok(write_loss_history(&history, w)?))?;
    println!(
        "initial loss train {:.4} validation {:.4}",
        history.initial.train, history.initial.validation
    );
    if let Some(b) = history.best() {
        println!("best epoch {} train {:.4} validation {:.4}", b.epoch, b.train, b.validation);
    }
    println!("wrote {} and {}", ckpt.display(), loss.display());
    Ok(0)
}

fn episode(cfg: &Config, mode: Mode, seed: u64, model: Option<&Model>) -> Result<(EpisodeLog, Summary), CliError> {
    let scenario = Scenario {
        mode,
        seed,
        ..cfg.scenario.clone()
    };
    let log = run_episode(&scenario, model).map_err(|e| match e {
        SimError::Scenario(_) | SimError::MissingModel => CliError::Usage(e.into()),
        e => CliError::Failed(e.into()),
    })?;
    let summary = metrics(&log).map_err(anyhow::Error::from)?;
    Ok((log, summary))
}

pub fn cmd_run(cfg: &Config, model: Option<&Path>) -> Result<u8, CliError> {
    let mode = cfg.scenario.mode;
    if mode == Mode::RiskAverse && model.is_none() {
        return Err(CliError::Usage(anyhow!("risk-averse mode needs --model")));
    }
    prepare(cfg, "run")?;
    let model = model.map(load_model).transpose()?;
    let seed = cfg.scenario.seed;
    let (log, summary) = episode(cfg, mode, seed, model.as_ref())?;
    let stem = format!("{}-{seed}", mode.name());
    let log_path = cfg.out.join(format!("episode-{stem}.csv"));
    let summary_path = cfg.out.join(format!("summary-{stem}.txt"));
    write_atomic(&log_path, |w| Ok(write_log(&log, w)?))?;
    write_atomic(&summary_path, |w| Ok(write_summary(&summary, w)?))?;
    let mut text = Vec::new();
    write_summary(&summary, &mut text).map_err(anyhow::Error::from)?;
    print!("{}", String::from_utf8_lossy(&text).lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    Ok(if summary.outcome == riskmpc::simcore::Outcome::Reached { 0 } else { 1 })
}

/// Per-mode aggregate over a seed set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeStats {
    pub mode: Mode,
    pub episodes: usize,
    pub reached: usize,
    pub collisions: usize,
    pub collision_rate: f64,
    pub mean_path_length: f64,
    /// Over episodes that reached the goal; NaN when none did.
    pub mean_time_to_goal: f64,
    pub min_clearance: f64,
}

pub fn aggregate(mode: Mode, rows: &[&Summary]) -> ModeStats {
    let n = rows.len();
    let collisions = rows.iter().filter(|r| r.collided).count();
    let times: Vec<f64> = rows.iter().filter_map(|r| r.time_to_goal).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    ModeStats {
        mode,
        episodes: n,
        reached: times.len(),
        collisions,
        collision_rate: if n == 0 { f64::NAN } else { collisions as f64 / n as f64 },
        mean_path_length: mean(&rows.iter().map(|r| r.path_length).collect::<Vec<_>>()),
        mean_time_to_goal: mean(&times),
        min_clearance: rows.iter().map(|r| r.min_clearance).fold(f64::INFINITY, f64::min),
    }
}

/// Runs every mode over `seeds` consecutive seeds in parallel. Results come
/// back in mode-then-seed order regardless of scheduling.
pub fn compare(cfg: &Config, model: &Model) -> Result<Vec<(Mode, u64, EpisodeLog, Summary)>, CliError> {
    let jobs: Vec<(Mode, u64)> = Mode::ALL
        .iter()
        .flat_map(|&m| (0..cfg.compare.seeds as u64).map(move |i| (m, cfg.compare.first_seed + i)))
        .collect();
    jobs.par_iter()
        .map(|&(mode, seed)| episode(cfg, mode, seed, Some(model)).map(|(l, s)| (mode, seed, l, s)))
        .collect()
}

pub fn cmd_compare(cfg: &Config, model_path: &Path) -> Result<u8, CliError> {
    if cfg.compare.seeds == 0 {
        return Err(CliError::Usage(anyhow!("seeds must be at least 1")));
    }
    prepare(cfg, "compare")?;
    let model = load_model(model_path)?;
    let results = compare(cfg, &model)?;
    let mut by_mode: BTreeMap<usize, Vec<&Summary>> = BTreeMap::new();
    for (mode, _, _, s) in &results {
        by_mode.entry(Mode::ALL.iter().position(|m| m == mode).unwrap()).or_default().push(s);
    }
    let stats: Vec<ModeStats> = by_mode.iter().map(|(&i, rows)| aggregate(Mode::ALL[i], rows)).collect();

    write_atomic(&cfg.out.join("compare.csv"), |w| {
        writeln!(w, "{COMPARE_SCHEMA}")?;
        writeln!(w, "mode,episodes,reached,collision_rate,mean_path_length,mean_time_to_goal,min_clearance")?;
        for s in &stats {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.mode.name(),
                s.episodes,
                s.reached,
                s.collision_rate,
                s.mean_path_length,
                s.mean_time_to_goal,
                s.min_clearance
            )?;
        }
        Ok(())
    })?;
    write_atomic(&cfg.out.join("compare-episodes.csv"), |w| {
        writeln!(w, "{EPISODES_SCHEMA}")?;
        writeln!(w, "mode,seed,outcome,path_length,time_to_goal,min_clearance")?;
        for (mode, seed, _, s) in &results {
            let t = s.time_to_goal.map_or("nan".to_string(), |t| t.to_string());
            writeln!(
                w,
                "{},{seed},{},{},{t},{}",
                mode.name(),
                s.outcome.name(),
                s.path_length,
                s.min_clearance
            )?;
        }
        Ok(())
    })?;
    write_atomic(&cfg.out.join("trajectories.csv"), |w| {
        writeln!(w, "{TRAJECTORY_SCHEMA}")?;
        writeln!(w, "mode,seed,t,x,y,psi")?;
        for (mode, seed, log, _) in &results {
            for r in &log.records {
                writeln!(w, "{},{seed},{},{},{},{}", mode.name(), r.t, r.truth.x, r.truth.y, r.truth.psi)?;
            }
        }
        Ok(())
    })?;

    println!(
        "{:<12} {:>8} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "mode", "episodes", "reached", "collided", "path [m]", "time [s]", "clearance"
    );
    for s in &stats {
        println!(
            "{:<12} {:>8} {:>8} {:>10.2} {:>10.3} {:>10.3} {:>10.3}",
            s.mode.name(),
            s.episodes,
            s.reached,
            s.collision_rate,
            s.mean_path_length,
            s.mean_time_to_goal,
            s.min_clearance
        );
    }
    Ok(0)
}
