//! `visifilter` command-line tool.
//!
//! Exit codes: 0 success, 1 failed checks or I/O errors, 2 invalid input,
//! 3 infeasible initial state, 4 port unavailable.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use visifilter::checks::{run_suite, Suite};
use visifilter::scenario::Scenario;
use visifilter::sim::{SimError, Simulation};
use visifilter::trace::{read_csv, trace_csv, Metrics};
use visifilter_teleop::{bind, SessionConfig, TeleopError};

const SEED_VAR: &str = "VISIFILTER_SEED";

#[derive(Parser)]
#[command(name = "visifilter", version, about = "Visibility-maintaining safety filter for camera robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trace.csv, metrics.json and resolved_scenario.json.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a scenario field, e.g. `--set filter.w_min=5.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a self-check suite: invariance, qp-oracle, equivalence, propagation or all.
    Check { suite: String },
    /// Serve a scenario with an external reference for live teleoperation.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8700)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Recompute metrics from a trace.csv and print them as JSON.
    Metrics { trace: PathBuf },
}

enum Failure {
    Failed(String),
    Invalid(String),
    Infeasible(String),
    PortBusy(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        let (code, msg) = match self {
            Failure::Failed(m) => (1, m),
            Failure::Invalid(m) => (2, m),
            Failure::Infeasible(m) => (3, m),
            Failure::PortBusy(m) => (4, m),
        };
        eprintln!("error: {msg}");
        ExitCode::from(code)
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure::Invalid(format!("{SEED_VAR}={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let pairs = overrides
        .iter()
        .map(|o| {
            o.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::Invalid(format!("override `{o}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut scenario =
        Scenario::from_json_with_overrides(&text, &pairs).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        scenario.override_seeds(seed);
    }
    Ok(scenario)
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::InfeasibleStart(_) => Failure::Infeasible(e.to_string()),
        SimError::Scenario(_) | SimError::Landmarks(_) => Failure::Invalid(e.to_string()),
        SimError::Filter(_) => Failure::Failed(e.to_string()),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Failed(format!("{}: {e}", path.display())))
}

fn cmd_run(path: &Path, out: &Path, overrides: &[String]) -> Result<(), Failure> {
    let scenario = load_scenario(path, overrides)?;
    let mut sim = Simulation::new(scenario.clone()).map_err(sim_failure)?;
    let trace = sim.run_to_end().map_err(sim_failure)?;
    let metrics = Metrics::from_trace(&trace).map_err(|e| Failure::Failed(e.to_string()))?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Failed(format!("{}: {e}", out.display())))?;
    write(&out.join("trace.csv"), &trace_csv(&trace).map_err(|e| Failure::Failed(e.to_string()))?)?;
    write(&out.join("metrics.json"), &metrics.to_json())?;
    write(&out.join("resolved_scenario.json"), &scenario.to_json())?;
    println!(
        "{}: {} ticks, min w {}, min w_hat {:.6}, total deviation {:.6}, breaches {}, events {}, fallbacks {} -> {}",
        if scenario.name.is_empty() { path.display().to_string() } else { scenario.name.clone() },
        metrics.ticks,
        metrics.min_w,
        metrics.min_w_hat,
        metrics.total_deviation,
        metrics.breaches,
        metrics.events,
        metrics.fallbacks,
        out.display()
    );
    Ok(())
}

fn cmd_check(name: &str) -> Result<(), Failure> {
    let suite: Suite = name.parse().map_err(Failure::Invalid)?;
    let outcomes = run_suite(suite);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed == 0 {
        println!("{} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(Failure::Failed(format!("{failed} of {} checks failed", outcomes.len())))
    }
}

fn cmd_serve(path: &Path, host: &str, port: u16) -> Result<(), Failure> {
    let scenario = load_scenario(path, &[])?;
    let addr: SocketAddr =
        format!("{host}:{port}").parse().map_err(|e| Failure::Invalid(format!("address {host}:{port}: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Failed(e.to_string()))?;
    rt.block_on(async {
        let server = bind(scenario, addr, SessionConfig::default()).await.map_err(|e| match e {
            TeleopError::NotExternal => Failure::Invalid(e.to_string()),
            TeleopError::Sim(s) => sim_failure(s),
            TeleopError::Bind { .. } => Failure::PortBusy(e.to_string()),
            TeleopError::Io(_) => Failure::Failed(e.to_string()),
        })?;
        let local = server.local_addr().map_err(|e| Failure::Failed(e.to_string()))?;
        println!("serving on http://{local} (GET /scenario, WebSocket /ws)");
        server.serve().await.map_err(|e| Failure::Failed(e.to_string()))
    })
}

fn cmd_metrics(path: &Path) -> Result<(), Failure> {
    let file = std::fs::File::open(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let rows = read_csv(file).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let metrics = Metrics::from_rows(&rows).map_err(|e| Failure::Invalid(e.to_string()))?;
    println!("{}", metrics.to_json());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, out, overrides } => cmd_run(scenario, out, overrides),
        Command::Check { suite } => cmd_check(suite),
        Command::Serve { scenario, port, host } => cmd_serve(scenario, host, *port),
        Command::Metrics { trace } => cmd_metrics(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
