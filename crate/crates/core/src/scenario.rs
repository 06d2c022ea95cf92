//! Deterministic scenario scripts: timed steps run against a simulated clock,
//! each optionally asserting an error code or result fields.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::command::{execute, Command};
use crate::kernel::{AccountId, SessionId, SimClock, Timestamp};
use crate::platform::{Config, Platform, PlatformError};
use crate::session::{Party, SessionState};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario could not start: {0}")]
    Platform(#[from] PlatformError),
}

/// Argument keys holding a time, given in scripts as seconds after the start.
const TIME_KEYS: &[&str] = &["start", "end", "slot_start", "from", "to"];
/// Argument keys holding an id, which may be given as an alias.
const REF_KEYS: &[&str] = &["listing", "session", "account", "seller"];
/// Actions that need no acting account.
const ANONYMOUS: &[&str] = &[
    "tick",
    "search",
    "listing_detail",
    "seller_summary",
    "transaction_costs",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// The error code the step must fail with.
    #[serde(default)]
    pub error: Option<String>,
    /// Dotted paths into the result and the values found there. A string
    /// value `$name` stands for the id bound to alias `name`.
    #[serde(default)]
    pub fields: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub at: u64,
    #[serde(default)]
    pub actor: Option<String>,
    pub action: String,
    #[serde(default)]
    pub args: Map<String, Value>,
    #[serde(default)]
    pub expect: Option<Expect>,
    #[serde(default, rename = "as")]
    pub alias: Option<String>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Overrides on top of the default configuration.
    #[serde(default)]
    pub config: Map<String, Value>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConverseArgs {
    session: String,
    seconds: u64,
    /// This party stops sending heartbeats after `quiet_after` seconds.
    #[serde(default)]
    quiet: Option<Party>,
    #[serde(default)]
    quiet_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub action: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub steps_passed: usize,
    pub steps_failed: usize,
    pub failures: Vec<Failure>,
    pub final_state_digest: String,
    pub events: u64,
    pub conservation: String,
    pub census: BTreeMap<String, usize>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.steps_failed == 0
    }
}

fn offset(secs: u64) -> Timestamp {
    Timestamp::SIM_EPOCH + secs
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parses and checks the whole script before anything runs: offsets
    /// never go backwards, actors are registered before they act, and every
    /// step's arguments decode.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.config()?;
        let mut declared: BTreeSet<&str> = BTreeSet::new();
        let mut busy_until = 0u64;
        for (i, step) in sc.steps.iter().enumerate() {
            let n = i + 1;
            let err = |m: String| Err(ScenarioError::Parse(format!("step {n}: {m}")));
            if step.at < busy_until {
                return err(format!(
                    "at {} is before the previous step finished ({busy_until})",
                    step.at
                ));
            }
            busy_until = step.at;
            match step.actor.as_deref() {
                Some(a) if step.action == "register_account" => {
                    if !declared.insert(a) {
                        return err(format!("actor {a} registered twice"));
                    }
                }
                Some(a) if !declared.contains(a) => {
                    return err(format!("actor {a} used before it is registered"));
                }
                None if !ANONYMOUS.contains(&step.action.as_str()) => {
                    return err(format!("{} needs an actor", step.action));
                }
                _ => {}
            }
            if step.action == "converse" {
                let args: ConverseArgs = serde_json::from_value(Value::Object(step.args.clone()))
                    .map_err(|e| ScenarioError::Parse(format!("step {n}: {e}")))?;
                busy_until = step.at + args.seconds;
            } else if Command::is_action(&step.action) {
                build_command(step, &|_| Some("placeholder".into()))
                    .map_err(|e| ScenarioError::Parse(format!("step {n}: {e}")))?;
            } else {
                return err(format!("unknown action {}", step.action));
            }
            if let Some(alias) = &step.alias {
                declared.insert(alias);
            }
        }
        Ok(sc)
    }

    pub fn config(&self) -> Result<Config, ScenarioError> {
        let mut doc = serde_json::to_value(Config::default()).expect("config serializes");
        let obj = doc.as_object_mut().expect("object");
        for (k, v) in &self.config {
            obj.insert(k.clone(), v.clone());
        }
        obj.insert("log_path".into(), Value::Null);
        obj.insert("seed".into(), Value::from(self.seed));
        let cfg: Config = serde_json::from_value(doc).map_err(|e| ScenarioError::Parse(format!("config: {e}")))?;
        cfg.validate().map_err(|e| ScenarioError::Parse(e.to_string()))?;
        Ok(cfg)
    }
}

/// Rewrites time offsets and aliases, then decodes the step as a command.
fn build_command(step: &Step, resolve: &dyn Fn(&str) -> Option<String>) -> Result<Command, String> {
    fn walk(v: &mut Value, key: Option<&str>, resolve: &dyn Fn(&str) -> Option<String>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m.iter_mut() {
                    walk(child, Some(k), resolve);
                }
            }
            Value::Array(items) => items.iter_mut().for_each(|c| walk(c, key, resolve)),
            Value::Number(n) if key.is_some_and(|k| TIME_KEYS.contains(&k)) => {
                if let Some(secs) = n.as_u64() {
                    *v = Value::String(offset(secs).to_rfc3339());
                }
            }
            Value::String(s) if key.is_some_and(|k| REF_KEYS.contains(&k)) => {
                if let Some(id) = resolve(s) {
                    *s = id;
                }
            }
            _ => {}
        }
    }
    let mut args = Value::Object(step.args.clone());
    walk(&mut args, None, resolve);
    let obj = args.as_object_mut().expect("object");
    obj.insert("action".into(), Value::String(step.action.clone()));
    serde_json::from_value(args).map_err(|e| e.to_string())
}

/// The value at a dotted path; numeric segments index arrays.
pub fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(v);
    }
    path.split('.').try_fold(v, |cur, seg| match cur {
        Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(m) => m.get(seg),
        _ => None,
    })
}

/// The id a result introduces, for binding to an `as` alias.
fn bound_id(v: &Value) -> Option<String> {
    [
        "session_id",
        "session.session_id",
        "listing_id",
        "account.account_id",
        "account_id",
    ]
    .iter()
    .find_map(|p| lookup(v, p).and_then(Value::as_str).map(str::to_owned))
}

/// Runs a scenario against a fresh in-process platform on a simulated
/// clock. With `log_path`, the event log is also written there.
pub struct Runner {
    clock: SimClock,
    platform: Platform,
    aliases: BTreeMap<String, String>,
}

impl Runner {
    pub fn new(sc: &Scenario, log_path: Option<&Path>) -> Result<Self, ScenarioError> {
        let clock = SimClock::new(Timestamp::SIM_EPOCH);
        let mut cfg = sc.config()?;
        let platform = match log_path {
            Some(path) => {
                if path.exists() {
                    std::fs::remove_file(path).map_err(|e| ScenarioError::Unreadable {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                }
                cfg.log_path = Some(path.to_owned());
                Platform::open(cfg, Arc::new(clock.clone()))?
            }
            None => Platform::in_memory(cfg, Arc::new(clock.clone())),
        };
        Ok(Runner {
            clock,
            platform,
            aliases: BTreeMap::new(),
        })
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn into_platform(self) -> Platform {
        self.platform
    }

    fn resolve(&self, name: &str) -> Option<String> {
        self.aliases.get(name).cloned()
    }

    fn actor(&self, step: &Step) -> Option<AccountId> {
        step.actor.as_ref().and_then(|a| self.resolve(a)).map(AccountId::new)
    }

    fn converse(&mut self, step: &Step) -> Result<Value, PlatformError> {
        let args: ConverseArgs = serde_json::from_value(Value::Object(step.args.clone())).expect("checked at parse");
        let sid = SessionId::new(self.resolve(&args.session).unwrap_or(args.session.clone()));
        let session = self.platform.session(&sid)?.clone();
        for i in 1..=args.seconds {
            self.clock.advance(1);
            self.platform.tick()?;
            if self.platform.session(&sid)?.state != SessionState::Live {
                // cut off by a timeout; the clock still runs to the end
                self.clock.advance(args.seconds - i);
                break;
            }
            for party in [Party::Buyer, Party::Seller] {
                if args.quiet != Some(party) || i <= args.quiet_after {
                    self.platform.heartbeat(session.account_of(party), &sid)?;
                }
            }
        }
        self.platform.tick()?;
        Ok(serde_json::to_value(self.platform.session(&sid)?).expect("serializes"))
    }

    fn check(&self, step: &Step, outcome: &Result<Value, PlatformError>) -> Result<(), String> {
        let expect = step.expect.clone().unwrap_or_default();
        match (outcome, &expect.error) {
            (Err(e), Some(code)) if e.code() == code => Ok(()),
            (Err(e), Some(code)) => Err(format!("expected {code}, got {}", e.code())),
            (Err(e), None) => Err(format!("unexpected {}: {e}", e.code())),
            (Ok(_), Some(code)) => Err(format!("expected {code}, but the step succeeded")),
            (Ok(v), None) => {
                for (path, want) in &expect.fields {
                    let want = match want.as_str().and_then(|s| s.strip_prefix('$')) {
                        Some(alias) => Value::String(self.resolve(alias).unwrap_or_default()),
                        None => want.clone(),
                    };
                    match lookup(v, path) {
                        Some(got) if *got == want => {}
                        Some(got) => return Err(format!("{path}: expected {want}, got {got}")),
                        None => return Err(format!("{path}: missing from result")),
                    }
                }
                Ok(())
            }
        }
    }

    /// Runs one step at its offset; `Err` holds the failure reason.
    pub fn step(&mut self, step: &Step) -> Result<Value, String> {
        self.clock.advance_to(offset(step.at));
        let actor = self.actor(step);
        let outcome = if step.action == "converse" {
            self.converse(step)
        } else {
            let cmd = build_command(step, &|s| self.resolve(s)).map_err(|e| e.to_string())?;
            execute(&mut self.platform, actor.as_ref(), &cmd)
        };
        self.check(step, &outcome)?;
        if let Ok(v) = &outcome {
            if step.action == "register_account" {
                if let (Some(name), Some(id)) = (&step.actor, bound_id(v)) {
                    self.aliases.insert(name.clone(), id);
                }
            }
            if let (Some(alias), Some(id)) = (&step.alias, bound_id(v)) {
                self.aliases.insert(alias.clone(), id);
            }
        }
        Ok(outcome.unwrap_or(Value::Null))
    }

    pub fn run(mut self, sc: &Scenario) -> (Report, Platform) {
        let mut failures = Vec::new();
        for (i, step) in sc.steps.iter().enumerate() {
            if let Err(reason) = self.step(step) {
                failures.push(Failure {
                    step: i + 1,
                    action: step.action.clone(),
                    reason,
                });
            }
        }
        let _ = self.platform.flush();
        let state = self.platform.state();
        let report = Report {
            scenario: sc.name.clone(),
            seed: sc.seed,
            steps_passed: sc.steps.len() - failures.len(),
            steps_failed: failures.len(),
            failures,
            final_state_digest: state.digest(),
            events: self.platform.log().last_seq(),
            conservation: match state.check_conservation() {
                Ok(()) => "OK".into(),
                Err(e) => format!("VIOLATED: {e}"),
            },
            census: state.census().into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
        };
        (report, self.platform)
    }
}

/// Parses and runs a scenario in one go.
pub fn run_scenario(sc: &Scenario, log_path: Option<&Path>) -> Result<(Report, Platform), ScenarioError> {
    Ok(Runner::new(sc, log_path)?.run(sc))
}
