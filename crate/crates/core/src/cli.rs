//! Command-line entry point. `run` is separate from `main` so tests can
//! drive it in-process.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::econometrics::{annual_income, days_to_recoup, IncomeScenario, Recoup};
use crate::kernel::{CommissionBps, Money};
use crate::persistence::{self, PersistenceError};
use crate::platform::{Config, State};
use crate::scenario::{run_scenario, Scenario, ScenarioError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ENV: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "burst-market", version, about = "Burst Market platform service and tools")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the HTTP and channel gateway.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run scenario scripts.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCmd,
    },
    /// Seller income calculators.
    Calc {
        #[command(subcommand)]
        command: CalcCmd,
    },
    /// Replay an event log and check it.
    #[command(alias = "replay")]
    Audit {
        log: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    Run {
        path: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the event log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Args)]
struct Income {
    #[arg(long, default_value_t = 100)]
    rate_cents: u64,
    #[arg(long)]
    minutes_per_day: u64,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u32).range(0..=10_000))]
    commission_bps: u32,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum CalcCmd {
    /// Net yearly income from selling at a per-minute rate.
    AnnualIncome {
        #[command(flatten)]
        income: Income,
        #[arg(long, default_value_t = 365)]
        days: u64,
    },
    /// Days of selling needed to pay back a loan.
    Recoup {
        #[arg(long)]
        loan_cents: u64,
        #[command(flatten)]
        income: Income,
    },
}

fn table(out: &mut dyn Write, rows: &[(&str, String)]) -> std::io::Result<()> {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        writeln!(out, "{k:<width$}  {v}")?;
    }
    Ok(())
}

fn print_json(out: &mut dyn Write, v: &serde_json::Value) -> std::io::Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json"))
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Cmd::Serve { config, json } => serve(&config, json, out, err),
        Cmd::Scenario {
            command:
                ScenarioCmd::Run {
                    path,
                    report,
                    log,
                    json,
                },
        } => scenario(&path, report.as_deref(), log.as_deref(), json, out, err),
        Cmd::Calc { command } => calc(command, out),
        Cmd::Audit { log, json } => audit(&log, json, out, err),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "i/o error: {e}");
        EXIT_ENV
    })
}

fn scenario_of(i: &Income, days: u64) -> IncomeScenario {
    IncomeScenario {
        per_minute: Money::cents(i.rate_cents),
        minutes_per_day: i.minutes_per_day,
        days,
        commission_bps: CommissionBps::new(i.commission_bps).expect("range-checked by clap"),
    }
}

fn calc(cmd: CalcCmd, out: &mut dyn Write) -> std::io::Result<i32> {
    match cmd {
        CalcCmd::AnnualIncome { income, days } => {
            let s = scenario_of(&income, days);
            let net = annual_income(&s);
            if income.json {
                print_json(
                    out,
                    &json!({
                        "inputs": {
                            "rate_per_minute": s.per_minute,
                            "minutes_per_day": s.minutes_per_day,
                            "days": s.days,
                            "commission_bps": s.commission_bps,
                        },
                        "annual_income": net,
                        "display": net.display_dollars(),
                    }),
                )?;
            } else {
                table(
                    out,
                    &[
                        ("rate per minute", s.per_minute.display_dollars()),
                        ("minutes per day", s.minutes_per_day.to_string()),
                        ("days", s.days.to_string()),
                        ("commission (bps)", s.commission_bps.get().to_string()),
                        ("annual income", net.display_dollars()),
                    ],
                )?;
            }
        }
        CalcCmd::Recoup { loan_cents, income } => {
            let s = scenario_of(&income, 1);
            let loan = Money::cents(loan_cents);
            let r = days_to_recoup(loan, &s);
            let shown = match r {
                Recoup::Days(d) => format!("{d} days"),
                Recoup::Never => "never".to_owned(),
            };
            if income.json {
                print_json(
                    out,
                    &json!({
                        "inputs": {
                            "loan": loan,
                            "rate_per_minute": s.per_minute,
                            "minutes_per_day": s.minutes_per_day,
                            "commission_bps": s.commission_bps,
                        },
                        "days_to_recoup": match r { Recoup::Days(d) => json!(d), Recoup::Never => json!("never") },
                    }),
                )?;
            } else {
                table(
                    out,
                    &[
                        ("loan", loan.display_dollars()),
                        ("rate per minute", s.per_minute.display_dollars()),
                        ("minutes per day", s.minutes_per_day.to_string()),
                        ("commission (bps)", s.commission_bps.get().to_string()),
                        ("days to recoup", shown),
                    ],
                )?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn scenario(
    path: &Path,
    report_path: Option<&Path>,
    log: Option<&Path>,
    json: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> std::io::Result<i32> {
    let outcome = Scenario::load(path).and_then(|sc| run_scenario(&sc, log));
    let report = match outcome {
        Ok((report, _)) => report,
        Err(e @ (ScenarioError::Parse(_) | ScenarioError::Unreadable { .. })) => {
            writeln!(err, "{e}")?;
            return Ok(EXIT_USAGE);
        }
        Err(e) => {
            writeln!(err, "{e}")?;
            return Ok(EXIT_ENV);
        }
    };
    let doc = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(p) = report_path {
        std::fs::write(p, format!("{doc}\n"))?;
    }
    if json {
        writeln!(out, "{doc}")?;
    } else {
        writeln!(
            out,
            "{}: {} passed, {} failed",
            report.scenario, report.steps_passed, report.steps_failed
        )?;
        for f in &report.failures {
            writeln!(out, "  step {} ({}): {}", f.step, f.action, f.reason)?;
        }
        writeln!(out, "final state digest: {}", report.final_state_digest)?;
    }
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILED })
}

fn audit(log: &Path, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> std::io::Result<i32> {
    let replayed = persistence::read_log(log).and_then(|records| {
        let state: State = persistence::replay(&records)?;
        Ok((records.len(), state))
    });
    let (events, state) = match replayed {
        Ok(r) => r,
        Err(e @ PersistenceError::CorruptLog { .. }) => {
            writeln!(err, "{e}")?;
            return Ok(EXIT_FAILED);
        }
        Err(e) => {
            writeln!(err, "{e}")?;
            return Ok(EXIT_ENV);
        }
    };
    let conservation = state.check_conservation();
    let census = state.census();
    if json {
        print_json(
            out,
            &json!({
                "events": events,
                "digest": state.digest(),
                "conservation": match &conservation { Ok(()) => "OK".to_owned(), Err(e) => e.clone() },
                "census": census,
            }),
        )?;
    } else {
        writeln!(out, "events: {events}")?;
        writeln!(out, "digest: {}", state.digest())?;
        match &conservation {
            Ok(()) => writeln!(out, "conservation: OK")?,
            Err(e) => writeln!(out, "conservation: VIOLATED ({e})")?,
        }
        writeln!(out, "sessions:")?;
        for (name, n) in &census {
            writeln!(out, "  {name}: {n}")?;
        }
    }
    Ok(if conservation.is_ok() { EXIT_OK } else { EXIT_FAILED })
}

fn serve(path: &Path, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> std::io::Result<i32> {
    let config = match Config::load(path) {
        Ok(c) => c,
        Err(e) => {
            writeln!(err, "ConfigInvalid: {e}")?;
            return Ok(EXIT_USAGE);
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let result = rt.block_on(crate::gateway::serve(config, |addr| {
        let line = if json {
            json!({ "listening": addr.to_string() }).to_string()
        } else {
            format!("listening on {addr}")
        };
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
    }));
    match result {
        Ok(()) => Ok(EXIT_OK),
        Err(e) => {
            let name = match e {
                crate::gateway::ServeError::AddrInUse(_) => "AddrInUse",
                _ => "ServeFailed",
            };
            writeln!(err, "{name}: {e}")?;
            Ok(e.exit_code())
        }
    }
}
