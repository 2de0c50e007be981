use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use qnet_core::control::ControlConfig;
use qnet_core::physics::profiles::Profile;
use qnet_core::sim::{run_scenario, LoadedScenario, ScenarioReport};
use qnet_core::topology::{load_topology, Topology};
use qnet_service::{Service, ServiceConfig, TokenFileError, TokenTable};

/// Exit statuses, following the BSD sysexits convention for data and I/O.
const EXIT_RUNTIME: u8 = 1;
const EXIT_DATA: u8 = 65;
const EXIT_IO: u8 = 74;

#[derive(Debug, Parser)]
#[command(
    name = "qnet",
    version,
    about = "Quantum network control plane and simulator"
)]
struct Cli {
    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a topology file and print line-anchored diagnostics.
    Validate { topology: PathBuf },
    /// Run a scenario and write its report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for report.json (and series.csv, sweep.csv). Without it
        /// the chosen format goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RunFormat::Report)]
        format: RunFormat,
    },
    /// Serve the HTTP API over a topology.
    Serve {
        topology: PathBuf,
        /// Listen address.
        #[arg(long, env = "QNET_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Token table (TOML).
        #[arg(long)]
        tokens: PathBuf,
        /// Directory for the journal and audit log; in-memory when unset.
        #[arg(long, env = "QNET_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Physics profile: a built-in name or a profile file.
        #[arg(long, default_value = "qlan2_coexist")]
        profile: String,
        /// Simulated seconds per wall-clock second; 0 runs unthrottled.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a summary or table from a saved report.json.
    Report {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Summary)]
        format: ReportFormat,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RunFormat {
    /// The full JSON report.
    Report,
    /// The report plus time series and sweep tables as CSV.
    Series,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Summary,
    Series,
    Sweep,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::new(EXIT_RUNTIME, error)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Validate { topology } => validate(&topology),
        Command::Run {
            scenario,
            seed,
            out,
            format,
        } => run(&scenario, seed, out.as_deref(), format),
        Command::Serve {
            topology,
            addr,
            tokens,
            data_dir,
            profile,
            time_scale,
            seed,
        } => serve(
            &topology, addr, &tokens, data_dir, &profile, time_scale, seed,
        ),
        Command::Report { report, format } => show_report(&report, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// The error chain joined with `: `, leaving out causes whose text the
/// previous message already includes.
fn describe(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    let mut last = out.clone();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out += ": ";
            out += &text;
        }
        last = text;
    }
    out
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::new(
            EXIT_IO,
            anyhow!(e).context(format!("reading {}", path.display())),
        )
    })
}

fn load_topology_file(path: &Path) -> Result<Topology, Failure> {
    let text = read(path)?;
    load_topology(&text).map_err(|e| {
        for d in &e.diagnostics {
            eprintln!("{}: {d}", path.display());
        }
        Failure::new(
            EXIT_DATA,
            anyhow!(
                "{} is invalid ({} problem(s))",
                path.display(),
                e.diagnostics.len()
            ),
        )
    })
}

fn validate(path: &Path) -> CliResult {
    let t = load_topology_file(path)?;
    println!(
        "{}: ok ({} nodes, {} links)",
        path.display(),
        t.node_count(),
        t.link_count()
    );
    Ok(())
}

fn run(path: &Path, seed: Option<u64>, out: Option<&Path>, format: RunFormat) -> CliResult {
    let loaded = LoadedScenario::load(path).map_err(|e| {
        let code = if e.is_io() { EXIT_IO } else { EXIT_DATA };
        Failure::new(code, e)
    })?;
    let seed = seed.unwrap_or(loaded.scenario.seed);
    let report = run_scenario(&loaded, seed).context("scenario run aborted")?;
    match out {
        Some(dir) => {
            let io = |e: std::io::Error| {
                Failure::new(
                    EXIT_IO,
                    anyhow!(e).context(format!("writing to {}", dir.display())),
                )
            };
            fs::create_dir_all(dir).map_err(io)?;
            fs::write(dir.join("report.json"), report.to_json()).map_err(io)?;
            if format == RunFormat::Series {
                write_table(&dir.join("series.csv"), |f| report.write_series(f))?;
                if !report.sweep.is_empty() {
                    write_table(&dir.join("sweep.csv"), |f| report.write_sweep(f))?;
                }
            }
            print!("{}", summary(&report));
        }
        None => {
            let stdout = std::io::stdout().lock();
            match format {
                RunFormat::Report => {
                    let mut stdout = stdout;
                    stdout
                        .write_all(report.to_json().as_bytes())
                        .map_err(|e| Failure::new(EXIT_IO, e))?;
                }
                RunFormat::Series => report
                    .write_series(stdout)
                    .map_err(|e| Failure::new(EXIT_IO, e))?,
            }
            eprint!("{}", summary(&report));
        }
    }
    Ok(())
}

fn write_table(
    path: &Path,
    write: impl FnOnce(fs::File) -> Result<(), qnet_core::sim::EngineError>,
) -> CliResult {
    let file = fs::File::create(path).map_err(|e| {
        Failure::new(
            EXIT_IO,
            anyhow!(e).context(format!("creating {}", path.display())),
        )
    })?;
    write(file).map_err(|e| {
        Failure::new(
            EXIT_IO,
            anyhow!(e).context(format!("writing {}", path.display())),
        )
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn summary(r: &ScenarioReport) -> String {
    let s = &r.summary;
    let mut out = format!(
        "scenario {} (seed {}, {} s)\n",
        r.scenario, r.seed, r.duration_s
    );
    out += &format!(
        "requests: {} submitted, {} completed, {} failed, {} rejected\n",
        s.requests, s.completed, s.failed, s.rejected
    );
    for q in &r.requests {
        out += &format!(
            "  #{} {} -> {}: {}, {} records, CAR {:.2}, visibility {:.4}, fidelity {:.4}\n",
            q.id,
            q.qnode_a,
            q.qnode_b,
            q.state,
            q.records,
            q.physics.car,
            q.physics.mean_visibility,
            q.physics.mean_fidelity
        );
    }
    for (reason, n) in &s.failures {
        out += &format!("  failed ({reason}): {n}\n");
    }
    out += &format!("min CAR: {:.2}\n", s.min_car);
    out += &format!("mean fidelity: {}\n", fmt_opt(s.mean_fidelity));
    out += &format!("mean visibility: {}\n", fmt_opt(s.mean_visibility));
    out
}

fn show_report(path: &Path, format: ReportFormat) -> CliResult {
    let text = read(path)?;
    let report: ScenarioReport = serde_json::from_str(&text).map_err(|e| {
        Failure::new(
            EXIT_DATA,
            anyhow!(e).context(format!("{} is not a scenario report", path.display())),
        )
    })?;
    let stdout = std::io::stdout().lock();
    match format {
        ReportFormat::Summary => {
            let mut stdout = stdout;
            stdout
                .write_all(summary(&report).as_bytes())
                .map_err(|e| Failure::new(EXIT_IO, e))?;
        }
        ReportFormat::Series => report
            .write_series(stdout)
            .map_err(|e| Failure::new(EXIT_IO, e))?,
        ReportFormat::Sweep => report
            .write_sweep(stdout)
            .map_err(|e| Failure::new(EXIT_IO, e))?,
    }
    Ok(())
}

fn load_profile(spec: &str) -> Result<Profile, Failure> {
    if spec.ends_with(".toml") {
        let text = read(Path::new(spec))?;
        Profile::parse(spec, &text).map_err(|e| Failure::new(EXIT_DATA, e))
    } else {
        Profile::builtin(spec).map_err(|e| Failure::new(EXIT_DATA, e))
    }
}

fn serve(
    topology: &Path,
    addr: SocketAddr,
    tokens: &Path,
    data_dir: Option<PathBuf>,
    profile: &str,
    time_scale: f64,
    seed: u64,
) -> CliResult {
    let topology = load_topology_file(topology)?;
    let tokens = TokenTable::load(tokens).map_err(|e| {
        let code = if matches!(e, TokenFileError::Io { .. }) {
            EXIT_IO
        } else {
            EXIT_DATA
        };
        Failure::new(code, e)
    })?;
    let profile = load_profile(profile)?;
    if !(time_scale >= 0.0 && time_scale.is_finite()) {
        return Err(Failure::new(
            EXIT_DATA,
            anyhow!("--time-scale must be a non-negative number"),
        ));
    }
    let runtime = tokio::runtime::Runtime::new().context("starting async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        let bound = listener.local_addr().context("reading bound address")?;
        let service = Service::start(ServiceConfig {
            topology,
            profile,
            control: ControlConfig {
                seed,
                ..ControlConfig::default()
            },
            tokens,
            data_dir,
            time_scale: (time_scale > 0.0).then_some(time_scale),
            seed,
        })
        .map_err(|e| {
            let code = if matches!(e, qnet_service::ServiceError::DataDir { .. }) {
                EXIT_IO
            } else {
                EXIT_RUNTIME
            };
            Failure::new(code, e)
        })?;
        eprintln!("listening on http://{bound}");
        let service = std::sync::Arc::new(service);
        let closer = service.clone();
        let served = axum::serve(listener, service.router())
            .with_graceful_shutdown(async move {
                shutdown_signal().await;
                eprintln!("shutting down");
                closer.close_streams();
            })
            .await;
        let stopper = service.clone();
        tokio::task::spawn_blocking(move || stopper.shutdown())
            .await
            .context("stopping the control plane")?;
        served.context("serving HTTP")?;
        Ok(())
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            tracing::error!("cannot listen for ctrl-c: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
