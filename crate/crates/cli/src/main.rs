//! `carnot-gibbs`: runs the estimators on preset or inline models.
//!
//! Exit status: 0 on completion, 2 on validation errors, 3 on numerical failures.

mod commands;
mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carnot_gibbs::estimators::{write_csv, RunContext};
use carnot_gibbs::par;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::Output;
use crate::config::{resolve_model, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(
    name = "carnot-gibbs",
    version,
    about = "Estimators for lattice spin systems over the Heisenberg group"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// cc-poly, kaplan or euclidean.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Must equal the model's q.
    #[arg(long, global = true)]
    q: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Quadrature nodes per axis.
    #[arg(long, global = true)]
    nodes: Option<usize>,
    /// Chain length of the window.
    #[arg(long, global = true)]
    sites: Option<usize>,
    /// Directory for reports.json and sweep.csv; JSON goes to stdout otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 or unset: all cores).
    #[arg(long, global = true, env = "CARNOT_GIBBS_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Group and norm invariants, or norms of one point.
    Norms {
        #[arg(long)]
        self_test: bool,
        /// x1,x2,x3
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        point: Option<Vec<f64>>,
    },
    /// q-spectral-gap constant of the window measure.
    Sgi,
    /// U-bound constant under box enlargement.
    Ubound,
    /// Interaction gradient bound.
    C2,
    /// Dobrushin coefficients, optionally over a beta sweep.
    Dobrushin {
        /// start:stop:count
        #[arg(long)]
        beta_sweep: Option<String>,
    },
    /// Sweep contraction rate, boundary sensitivity and sweeping-out check.
    Dynamics {
        #[arg(long)]
        m_max: Option<usize>,
    },
    /// Compatibility of nested conditional expectations.
    Dlr {
        /// Also compare MCMC chain means with quadrature.
        #[arg(long)]
        mcmc: bool,
    },
}

fn merged_config(c: &Common, command: &Command) -> carnot_gibbs::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if c.preset.is_some() {
        cfg.preset = c.preset.clone();
        cfg.model = None;
    }
    cfg.beta = c.beta.or(cfg.beta);
    cfg.q = c.q.or(cfg.q);
    cfg.seed = c.seed.or(cfg.seed);
    cfg.out = c.out.clone().or(cfg.out);
    cfg.threads = c.threads.or(cfg.threads);
    if let Some(n) = c.nodes {
        let mut g = cfg
            .grid
            .take()
            .unwrap_or_else(|| carnot_gibbs::quadrature::GridSpec::new(n));
        g.nodes_per_axis = n;
        cfg.grid = Some(g);
    }
    if let Some(s) = c.sites {
        let mut w = cfg.window.take().unwrap_or_default();
        w.extent = vec![s];
        cfg.window = Some(w);
    }
    match command {
        Command::Dobrushin {
            beta_sweep: Some(s),
        } => cfg.beta_sweep = Some(s.clone()),
        Command::Dynamics { m_max: Some(m) } => cfg.m_max = Some(*m),
        _ => {}
    }
    Ok(cfg)
}

fn write_outputs(
    dir: &Path,
    json: &[Value],
    csv: Option<(&Output, &RunContext)>,
) -> carnot_gibbs::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("reports.json"),
        serde_json::to_string_pretty(json)? + "\n",
    )?;
    if let Some((out, ctx)) = csv {
        let mut f = fs::File::create(dir.join("sweep.csv"))?;
        write_csv(&mut f, &out.reports, ctx)?;
        f.flush()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> carnot_gibbs::Result<bool> {
    let cfg = merged_config(&cli.common, &cli.command)?;
    let out_dir = cfg.out.clone();
    if let Command::Norms { self_test, point } = &cli.command {
        let (json, ok) = commands::norms(*self_test, point.as_deref(), cfg.seed())?;
        emit(out_dir.as_deref(), &json, None)?;
        return Ok(ok);
    }
    let model = resolve_model(&cfg)?;
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }
    let out = match &cli.command {
        Command::Norms { .. } => unreachable!("handled above"),
        Command::Sgi => commands::sgi(&cfg, &model)?,
        Command::Ubound => commands::ubound(&cfg, &model)?,
        Command::C2 => commands::c2(&model)?,
        Command::Dobrushin { .. } => commands::dobrushin(&cfg, &model)?,
        Command::Dynamics { .. } => commands::dynamics(&cfg, &model)?,
        Command::Dlr { mcmc } => commands::dlr(&cfg, &model, *mcmc, out_dir.as_deref())?,
    };
    let ctx = RunContext::new(cfg.seed(), out.grid.clone(), model.name.clone());
    let json: Vec<Value> = out
        .json
        .iter()
        .map(|v| match v {
            Value::Object(o) if o.contains_key("constant") => {
                let mut o = o.clone();
                o.insert("seed".into(), json!(ctx.seed));
                o.insert("grid".into(), json!(ctx.grid));
                o.insert("preset".into(), json!(ctx.preset));
                o.insert("version".into(), json!(ctx.version));
                if !model.tags().is_empty() {
                    o.insert("expected".into(), json!(model.tags()));
                }
                Value::Object(o)
            }
            other => other.clone(),
        })
        .collect();
    emit(out_dir.as_deref(), &json, Some((&out, &ctx)))?;
    Ok(true)
}

fn emit(
    dir: Option<&Path>,
    json: &[Value],
    csv: Option<(&Output, &RunContext)>,
) -> carnot_gibbs::Result<()> {
    match dir {
        Some(d) => write_outputs(d, json, csv),
        None => {
            println!("{}", serde_json::to_string_pretty(json)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = cli.common.threads.unwrap_or(0);
    let result = par::with_threads(threads, || run(&cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("carnot-gibbs: self-test failed");
            ExitCode::from(3)
        }
        Err(e) => {
            let (kind, code) = if e.is_validation() {
                ("validation", 2)
            } else {
                ("numerical", 3)
            };
            eprintln!("carnot-gibbs: {kind} error: {e}");
            let record = [json!({"error": e.to_string(), "kind": kind, "exit_code": code})];
            if let Some(dir) = cli.common.out.as_deref() {
                if let Err(w) = write_outputs(dir, &record, None) {
                    eprintln!("carnot-gibbs: could not write the error record: {w}");
                }
            }
            ExitCode::from(code)
        }
    }
}
