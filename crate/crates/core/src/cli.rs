//! Operator tool behind the `lostfound` binary.
//!
//! Exit codes: 0 success, 1 scenario or command failure, 2 configuration,
//! 3 bind failure, 4 service unreachable.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::api;
use crate::config::ApiConfig;
use crate::matching::{Pipeline, Submission, SubmissionOutcome};
use crate::notification::{self, JsonlOutbox, SmtpRelay};
use crate::registry::Side;
use crate::scenario::{self, CaseName, DriverError, HttpDriver};
use crate::verification::{CaseId, FixtureAuthority};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BIND: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;

const DEFAULT_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(name = "lostfound", version, about = "Missing-person registry service and operator tool")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validate citizen and police-station fixtures and report counts.
    Seed {
        #[arg(long)]
        citizens: PathBuf,
        #[arg(long)]
        stations: PathBuf,
        /// Machine-readable output.
        #[arg(long)]
        json: bool,
    },
    /// Submit an entry read from a JSON file to a running service.
    Submit {
        #[arg(long)]
        side: Side,
        /// Submission body (uploader, subject_name, photo); `side` is taken from --side.
        #[arg(long = "json", value_name = "PATH")]
        path: PathBuf,
        /// Print the raw JSON outcome.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value = DEFAULT_URL)]
        url: String,
    },
    /// Approve or deny a pending verification case.
    Decide {
        #[arg(long = "case")]
        case_id: CaseId,
        #[command(flatten)]
        verdict: Verdict,
        #[arg(long)]
        json: bool,
        #[arg(long, default_value = DEFAULT_URL)]
        url: String,
    },
    /// Replay one of the four reference cases against a fresh system.
    Scenario {
        case: CaseName,
        /// Leave submissions PENDING and approve them through the police queue.
        #[arg(long)]
        manual_verify: bool,
        /// Drive an already running service instead of an embedded one.
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Verdict {
    #[arg(long)]
    approve: bool,
    #[arg(long)]
    deny: bool,
}

/// Runs a parsed command, writing to `out` and `err`. Returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match cli.command {
        Command::Serve { config } => serve(&config, out, err),
        Command::Seed { citizens, stations, json } => seed(&citizens, &stations, json, out, err),
        Command::Submit { side, path, raw, url } => submit(side, &path, raw, &url, out, err),
        Command::Decide {
            case_id,
            verdict,
            json,
            url,
        } => decide(case_id, verdict.approve, json, &url, out, err),
        Command::Scenario {
            case,
            manual_verify,
            url,
            json,
        } => run_scenario(case, manual_verify, url.as_deref(), json, out, err),
    }
}

fn driver_exit(e: &DriverError) -> i32 {
    match e {
        DriverError::Unreachable(_) => EXIT_UNREACHABLE,
        _ => EXIT_FAILED,
    }
}

fn print_outcome(o: &SubmissionOutcome, raw: bool, out: &mut dyn Write) {
    if raw {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(o).unwrap_or_default());
        return;
    }
    let id = o.entry_id.map_or("-".to_string(), |i| i.to_string());
    let _ = writeln!(out, "entry {id}: {}", o.disposition.as_str());
    let _ = writeln!(out, "{}", o.message);
    if let Some(case) = o.case_id {
        let _ = writeln!(out, "verification case: {case}");
    }
    if let Some(c) = &o.other_side_contact {
        let _ = writeln!(out, "contact: {} / {} / {}", c.name, c.phone, c.email);
    }
}

pub fn seed(citizens: &Path, stations: &Path, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let authority = match FixtureAuthority::load(citizens, stations) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let (c, s) = (authority.citizen_count(), authority.station_count());
    if c == 0 {
        let _ = writeln!(err, "warning: {} holds no citizens", citizens.display());
    }
    if s == 0 {
        let _ = writeln!(err, "warning: {} holds no police stations", stations.display());
    }
    if json {
        let _ = writeln!(out, "{}", serde_json::json!({ "citizens": c, "stations": s }));
    } else {
        let _ = writeln!(out, "citizens: {c}, stations: {s}");
    }
    EXIT_OK
}

pub fn submit(side: Side, path: &Path, raw: bool, url: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let parsed = std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).map_err(|e| e.to_string()))
        .and_then(|mut v| {
            let obj = v.as_object_mut().ok_or("submission must be a JSON object")?;
            obj.insert("side".into(), serde_json::to_value(side).map_err(|e| e.to_string())?);
            serde_json::from_value::<Submission>(v).map_err(|e| e.to_string())
        });
    let submission = match parsed {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            return EXIT_FAILED;
        }
    };
    let result = HttpDriver::new(url).and_then(|d| scenario::Driver::submit(&d, &submission));
    match result {
        Ok(o) => {
            print_outcome(&o, raw, out);
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            driver_exit(&e)
        }
    }
}

pub fn decide(case_id: CaseId, approve: bool, json: bool, url: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = HttpDriver::new(url).and_then(|d| scenario::Driver::decide(&d, case_id, approve));
    match result {
        Ok(o) => {
            print_outcome(&o, json, out);
            EXIT_OK
        }
        Err(DriverError::Http { status: 409, .. }) => {
            let _ = writeln!(err, "error: case {case_id} has already been decided");
            EXIT_FAILED
        }
        Err(DriverError::Http { status: 404, .. }) => {
            let _ = writeln!(err, "error: unknown case {case_id}");
            EXIT_FAILED
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            driver_exit(&e)
        }
    }
}

pub fn run_scenario(
    case: CaseName,
    manual_verify: bool,
    url: Option<&str>,
    json: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let report = match url {
        Some(url) => HttpDriver::new(url).and_then(|d| scenario::run_scenario(case, &d, manual_verify)),
        None => scenario::run_embedded(case, manual_verify),
    };
    match report {
        Ok(r) => {
            if json {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&r).unwrap_or_default());
            } else {
                let _ = write!(out, "{r}");
            }
            if r.passed {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            driver_exit(&e)
        }
    }
}

pub fn serve(config_path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let config = match ApiConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let authority = match FixtureAuthority::load(&config.citizens_path, &config.stations_path) {
        Ok(a) => Arc::new(a),
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let provider = match config.provider() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: embedding provider: {e}");
            return EXIT_CONFIG;
        }
    };
    let pipeline = match Pipeline::open(&config.data_dir, config.pipeline_config(), provider, authority) {
        Ok(p) => Arc::new(p),
        Err(e) => {
            let _ = writeln!(err, "error: data directory {}: {e}", config.data_dir.display());
            return EXIT_CONFIG;
        }
    };
    let listener = match std::net::TcpListener::bind(&config.bind_address) {
        Ok(l) => l,
        Err(e) => {
            let _ = writeln!(err, "error: cannot bind {}: {e}", config.bind_address);
            return EXIT_BIND;
        }
    };
    let relay = match &config.smtp {
        Some(smtp) => {
            let creds = smtp.username.clone().zip(smtp.password.clone());
            match SmtpRelay::new(&smtp.host, smtp.port, &smtp.from, creds) {
                Ok(r) => Some((r, Duration::from_secs(smtp.interval_secs.max(1)))),
                Err(e) => {
                    let _ = writeln!(err, "error: smtp: {e}");
                    return EXIT_CONFIG;
                }
            }
        }
        None => None,
    };
    let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_default();
    let _ = writeln!(out, "lostfound listening on http://{addr}");
    let _ = out.flush();

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_FAILED;
        }
    };
    let app = api::app(pipeline, config.static_dir.as_deref());
    let data_dir = config.data_dir.clone();
    let result = runtime.block_on(async move {
        if let Some((relay, every)) = relay {
            let relay = Arc::new(relay);
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(every);
                loop {
                    tick.tick().await;
                    let (relay, dir) = (relay.clone(), data_dir.clone());
                    let drained = tokio::task::spawn_blocking(move || {
                        let outbox = JsonlOutbox::open(&dir)?;
                        notification::drain_outbox(&outbox, relay.as_ref(), &dir)
                    })
                    .await;
                    match drained {
                        Ok(Ok(r)) if r.delivered + r.failed > 0 => {
                            tracing::info!(delivered = r.delivered, failed = r.failed, "outbox drained")
                        }
                        Ok(Err(e)) => tracing::warn!(error = %e, "outbox drain failed"),
                        _ => {}
                    }
                }
            });
        }
        listener.set_nonblocking(true)?;
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAILED
        }
    }
}
