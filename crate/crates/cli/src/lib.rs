//! Command-line front end of the SASV pipeline.

pub mod plots;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use sasv_core::config::ExperimentConfig;
use sasv_core::harness::{self, Layout, Selection};
use sasv_core::training::{OptimisationMode, TrainingCondition};
use sasv_core::Real;

#[derive(Debug, Parser)]
#[command(name = "sasv", version, about = "Desk-scale SASV experiments: fixed vs joint optimisation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpora and the dev/eval trial lists.
    GenerateData(Common),
    /// Pre-train the ASV and CM sub-systems.
    Pretrain(Common),
    /// Train SASV systems for the selected modes, conditions and seeds.
    Train(Grid),
    /// Score the evaluation trials with trained systems.
    Evaluate(Grid),
    /// Average evaluated runs over seeds into the summary table.
    Report(Grid),
    /// Run every stage over the full grid.
    ReproduceAll(Common),
    /// Render score histograms and FAR/FRR curves from score files.
    Plot {
        /// Score files to plot.
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        /// Output directory for the images.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration file (defaults to the built-in desk config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `experiment.output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seed list (overrides `experiment.seeds`).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct Grid {
    #[command(flatten)]
    pub common: Common,
    /// Restrict to one optimisation mode.
    #[arg(long)]
    pub mode: Option<OptimisationMode>,
    /// Restrict to one training condition.
    #[arg(long)]
    pub condition: Option<TrainingCondition>,
}

impl Common {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.set_seeds(seeds.clone())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Grid {
    fn selection(&self, cfg: &ExperimentConfig) -> Selection {
        let mut sel = Selection::all(cfg);
        if let Some(m) = self.mode {
            sel.modes = vec![m];
        }
        if let Some(c) = self.condition {
            sel.conditions = vec![c];
        }
        sel
    }
}

/// Plots of every evaluated run of `sel` into `<run>/plots/`.
fn plot_runs(cfg: &ExperimentConfig, sel: &Selection) -> Result<()> {
    let layout = Layout::new(cfg);
    for key in sel.runs() {
        let scores = layout.eval_scores(key);
        plots::emit_plots(&[scores], &layout.run(key).join("plots"))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.load()?;
            let layout = harness::generate_data(&cfg)?;
            log::info!("corpora written to {}", layout.data().display());
        }
        Command::Pretrain(c) => {
            harness::pretrain::<Real>(&c.load()?)?;
        }
        Command::Train(g) => {
            let cfg = g.common.load()?;
            harness::train::<Real>(&cfg, &g.selection(&cfg))?;
        }
        Command::Evaluate(g) => {
            let cfg = g.common.load()?;
            let sel = g.selection(&cfg);
            harness::evaluate_runs::<Real>(&cfg, &sel)?;
            plot_runs(&cfg, &sel)?;
        }
        Command::Report(g) => {
            let cfg = g.common.load()?;
            harness::report::<Real>(&cfg, &g.selection(&cfg))?;
            print!("{}", std::fs::read_to_string(Layout::new(&cfg).summary_table())?);
        }
        Command::ReproduceAll(c) => {
            let cfg = c.load()?;
            harness::reproduce_all::<Real>(&cfg)?;
            plot_runs(&cfg, &Selection::all(&cfg))?;
            print!("{}", std::fs::read_to_string(Layout::new(&cfg).summary_table())?);
        }
        Command::Plot { scores, out } => {
            let written = plots::emit_plots(&scores, &out)?;
            if written.is_empty() {
                bail!("no images written");
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
/// Failures print one `error:` line to stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
