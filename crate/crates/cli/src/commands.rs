//! Command-line definition and dispatch.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use songdemand_core::envelope::{fit_changepoints, fit_partite};
use songdemand_core::estimation::{conditional_demand_chart, fit_count_regression, CountFamily};
use songdemand_core::optimizer::{BudgetPolicy, Scheme};

use crate::config::AppConfig;
use crate::error::{AppError, AppResult};
use crate::ingest::{export_csv, ColumnMapping};
use crate::ops::{self, AdsrMethod, Operation};
use crate::render::{self, OutputFormat};
use crate::report;
use crate::scenario::{records_to_csv, Scenario};
use crate::server;
use crate::store::ProjectStore;

#[derive(Debug, Parser)]
#[command(name = "songdemand", version, about = "Simulate, fit and plan streaming-song demand")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Project store directory.
    #[arg(long, global = true, env = "SONGDEMAND_STORE", default_value = "songdemand-store")]
    pub store: PathBuf,
    /// JSON settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub output_format: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emit synthetic weekly records from a scenario file.
    Simulate {
        /// Scenario JSON; a built-in four-song scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read a CSV export into the store.
    Ingest {
        file: PathBuf,
        /// Column mapping JSON; headers are inferred when omitted.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Overwrite songs already in the store.
        #[arg(long)]
        replace: bool,
    },
    /// Fit the Bayesian null model to one or more songs.
    FitNull {
        #[arg(long = "song", required = true)]
        songs: Vec<String>,
    },
    /// Fit the four-phase envelope to a song's aggregate curve.
    FitAdsr {
        #[arg(long)]
        song: String,
        #[arg(long, value_enum, default_value_t = MethodArg::TwoStep)]
        method: MethodArg,
        /// Fixed change points `a,s,d,r` instead of searching.
        #[arg(long, value_delimiter = ',', num_args = 4)]
        changepoints: Option<Vec<usize>>,
    },
    /// Cluster stored songs' aggregate curves.
    Classify {
        /// Songs to cluster; all stored songs when omitted.
        #[arg(long = "song")]
        songs: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Plan budget allocation from a stored fit.
    Optimize {
        #[arg(long)]
        fit: String,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        /// Total budget spread evenly over the horizon.
        #[arg(long, conflicts_with = "weekly")]
        budget: Option<f64>,
        /// Explicit weekly budgets.
        #[arg(long, value_delimiter = ',')]
        weekly: Option<Vec<f64>>,
        /// Weeks to plan; the fit's horizon by default.
        #[arg(long)]
        horizon: Option<usize>,
        /// JSON file holding the ambient path `z[t][d]`.
        #[arg(long)]
        ambient: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "SONGDEMAND_PORT", default_value_t = 8080)]
        port: u16,
    },
    /// Write control-chart and envelope SVGs for a song.
    Report {
        #[arg(long)]
        song: String,
        /// Envelope fit to draw; a fresh two-step fit when omitted.
        #[arg(long)]
        fit: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a stored song back out as CSV.
    Export {
        #[arg(long)]
        song: String,
    },
    /// Rebuild this store by replaying another store's run log.
    Replay {
        #[arg(long)]
        from: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    TwoStep,
    Bayes,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Null,
    Forced,
}


fn read(path: &Path, what: &str) -> AppResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| AppError::Validation(format!("cannot read {what} {}: {e}", path.display())))
}

/// Runs a parsed command and returns what should be printed.
pub fn run(cli: Cli) -> AppResult<String> {
    let mut config = AppConfig::load(cli.config.as_deref())?;
    config.mcmc.seed = cli.seed;
    let format = cli.output_format;
    match cli.command {
        Command::Simulate { scenario, out } => {
            let scenario = match scenario {
                Some(p) => Scenario::from_json(&read(&p, "scenario")?)?,
                None => Scenario::builtin(),
            };
            let records = scenario.simulate(cli.seed)?;
            let text = match format {
                OutputFormat::Csv => records_to_csv(&records)?,
                OutputFormat::Json => render::json(&records)?,
            };
            match out {
                Some(path) => {
                    std::fs::write(&path, text)?;
                    render::json(&json!({ "records": records.len(), "out": path }))
                }
                None => Ok(text),
            }
        }
        Command::Ingest { file, mapping, replace } => {
            let mapping: Option<ColumnMapping> = mapping
                .map(|p| serde_json::from_slice(&read(&p, "mapping")?).map_err(AppError::from))
                .transpose()?;
            let bytes = read(&file, "input")?;
            let store = ProjectStore::open(&cli.store)?;
            let input = store.put_input(&bytes)?;
            let outcome = ops::execute(&store, Operation::Ingest { input, mapping, replace })?;
            render::outcome(&outcome, format)
        }
        Command::FitNull { songs } => {
            let store = ProjectStore::open(&cli.store)?;
            let outcome = ops::execute(&store, Operation::FitNull { songs, mcmc: config.mcmc })?;
            render::outcome(&outcome, format)
        }
        Command::FitAdsr { song, method, changepoints } => {
            let store = ProjectStore::open(&cli.store)?;
            let method = match method {
                MethodArg::TwoStep => AdsrMethod::TwoStep,
                MethodArg::Bayes => AdsrMethod::Bayes,
            };
            let op = Operation::FitAdsr {
                song,
                method,
                changepoints: changepoints.map(|v| [v[0], v[1], v[2], v[3]]),
                search: config.changepoints,
                partite: config.partite,
                mcmc: config.mcmc,
            };
            render::outcome(&ops::execute(&store, op)?, format)
        }
        Command::Classify { songs, k } => {
            let store = ProjectStore::open(&cli.store)?;
            let op = Operation::Classify {
                songs,
                k: k.unwrap_or(config.clusters),
                seed: cli.seed,
                kmeans: config.kmeans.clone(),
            };
            render::outcome(&ops::execute(&store, op)?, format)
        }
        Command::Optimize { fit, scheme, budget, weekly, horizon, ambient } => {
            let store = ProjectStore::open(&cli.store)?;
            let doc = store.fit(&fit)?;
            let horizon = horizon.unwrap_or(doc.horizon);
            let policy = match (budget, weekly) {
                (_, Some(w)) => BudgetPolicy::new(w, config.social_cap)?,
                (Some(b), None) => BudgetPolicy::uniform(b, horizon, config.social_cap)?,
                (None, None) => return Err(AppError::Validation("give --budget or --weekly".into())),
            };
            let z: Option<Vec<Vec<f64>>> = ambient
                .map(|p| serde_json::from_slice(&read(&p, "ambient path")?).map_err(AppError::from))
                .transpose()?;
            let scheme = match scheme {
                SchemeArg::Null => Scheme::Null,
                SchemeArg::Forced => Scheme::Forced,
            };
            let outcome = ops::execute(&store, Operation::Optimize { fit, scheme, policy, z })?;
            render::outcome(&outcome, format)
        }
        Command::Serve { port } => {
            let store = ProjectStore::open(&cli.store)?;
            let state = server::AppState::new(store, config);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(server::serve(state, port))?;
            Ok(String::new())
        }
        Command::Report { song, fit, out } => {
            let store = ProjectStore::open(&cli.store)?;
            write_report(&store, &config, &song, fit.as_deref(), &out)
        }
        Command::Export { song } => {
            let store = ProjectStore::open(&cli.store)?;
            export_csv(&store.song(&song)?.series)
        }
        Command::Replay { from } => {
            let source = ProjectStore::open(&from)?;
            let target = ProjectStore::open(&cli.store)?;
            let applied = ops::replay(&source, &target)?;
            render::json(&json!({ "replayed": applied }))
        }
    }
}

fn write_report(
    store: &ProjectStore,
    config: &AppConfig,
    song: &str,
    fit: Option<&str>,
    out: &Path,
) -> AppResult<String> {
    let doc = store.song(song)?.series;
    let observed = doc.aggregate.as_f64();
    let cov = &doc.aggregate_covariates;
    let regression = fit_count_regression(&doc.aggregate, cov, CountFamily::Negbin)
        .or_else(|_| fit_count_regression(&doc.aggregate, cov, CountFamily::Poisson))?;
    let chart = conditional_demand_chart(&regression, cov, config.band_level)?;
    let envelope = match fit {
        Some(id) => store
            .fit(id)?
            .envelope
            .ok_or_else(|| AppError::Validation(format!("fit {id} has no envelope")))?,
        None => {
            let cp = fit_changepoints(&doc.aggregate, &config.changepoints)?;
            fit_partite(&doc.aggregate, &cp, None, &config.partite)?
        }
    };
    std::fs::create_dir_all(out)?;
    let control = out.join(format!("{song}-control.svg"));
    let env_path = out.join(format!("{song}-envelope.svg"));
    std::fs::write(&control, report::control_chart_svg(&format!("{song}: conditional demand"), &observed, &chart))?;
    std::fs::write(&env_path, report::envelope_svg(&format!("{song}: envelope"), &observed, &envelope))?;
    render::json(&json!({ "control_chart": control, "envelope": env_path }))
}
