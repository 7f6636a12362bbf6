//! Command-line front end: corpus → train → attribute → edit → sweep →
//! compare, driven by one TOML config with flag overrides. Every artifact
//! carries the hash of the config sections that produced it, and commands
//! refuse upstream artifacts whose hash does not match the current config.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use golden_layer::attribution::Method;
use golden_layer::editors::EditorKind;
use golden_layer::eval::SelectionMetric;
use golden_layer::par::Exec;

pub use commands::{Context, LayerChoice};
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "golden-layer", version, about = "Toy-transformer knowledge-editing lab")]
pub struct Cli {
    /// TOML run configuration (defaults apply to anything omitted).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker-thread cap (1 runs sequentially).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_parser = parse_editor)]
    pub editor: Option<EditorKind>,
    #[arg(long, global = true, value_parser = parse_metric)]
    pub metric: Option<SelectionMetric>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the fact world, vocabulary and edit set.
    Gen,
    /// Train the model to memorize the world.
    Train,
    /// Score layers on the proxy split.
    Attr {
        #[arg(value_enum)]
        method: Option<AttrMethod>,
    },
    /// Edit samples at one layer and write a new checkpoint.
    Edit {
        /// A layer index, or `lga` / `cma` to use a saved score table.
        #[arg(long, default_value = "lga")]
        layer: LayerChoice,
        /// Comma-separated edit ids (default: the first edit).
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
    },
    /// Brute-force layer sweep over every edit.
    Sweep,
    /// LGA vs CMA comparison table and runtime benchmark.
    Compare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttrMethod {
    Lga,
    Cma,
}

fn parse_editor(s: &str) -> std::result::Result<EditorKind, String> {
    s.parse().map_err(|e: golden_layer::Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<SelectionMetric, String> {
    s.parse().map_err(|e: golden_layer::Error| e.to_string())
}

impl Cli {
    /// The config file with flag overrides applied.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(k) = self.editor {
            if k != c.editor.kind {
                // prefix count follows the editor unless the config pins it
                c.editor.kind = k;
                if k == EditorKind::Rome {
                    c.editor.context_prefixes = None;
                }
            }
        }
        if let Some(m) = self.metric {
            c.eval.metric = m;
        }
        Ok(c)
    }

    fn exec(&self) -> Result<Exec> {
        match self.threads {
            Some(0) => Err(CliError::InvalidConfig("--threads must be at least 1".into())),
            Some(1) => Ok(Exec::Sequential),
            Some(_n) => {
                #[cfg(feature = "parallel")]
                {
                    // a pool that is already initialised keeps its size
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(_n).build_global();
                }
                Ok(Exec::Parallel)
            }
            None => Ok(Exec::Parallel),
        }
    }

    pub fn execute(&self) -> Result<String> {
        let ctx = Context::new(self.resolve_config()?, self.exec()?)?;
        match &self.command {
            Command::Gen => commands::cmd_gen(&ctx),
            Command::Train => commands::cmd_train(&ctx),
            Command::Attr { method } => commands::cmd_attr(
                &ctx,
                method.map(|m| match m {
                    AttrMethod::Lga => Method::Lga,
                    AttrMethod::Cma => Method::Cma,
                }),
            ),
            Command::Edit { layer, samples } => commands::cmd_edit(&ctx, *layer, samples),
            Command::Sweep => commands::cmd_sweep(&ctx),
            Command::Compare => commands::cmd_compare(&ctx),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::InvalidConfig(first_line(&e.to_string())))?;
    cli.execute()
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim_start_matches("error: ").to_string()
}
