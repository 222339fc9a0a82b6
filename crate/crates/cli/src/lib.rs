//! Command implementations behind the `flowprox` binary.
//!
//! Every command reads one JSON config, writes its artifacts into the output
//! directory and always finishes by writing `summary.json` there.

pub mod commands;
pub mod config;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub const SUMMARY_FILE: &str = "summary.json";

/// Name of the environment variable capping worker threads.
pub const THREADS_ENV: &str = "FLOWPROX_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Spectrum,
    Lyapunov,
    ProxCheck,
    Converge,
    Sample,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Spectrum => "spectrum",
            Command::Lyapunov => "lyapunov",
            Command::ProxCheck => "prox-check",
            Command::Converge => "converge",
            Command::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Overrides the seed in the config.
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config; nothing was computed.
    Usage(String),
    Run(flowprox::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<flowprox::Error> for CliError {
    fn from(e: flowprox::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub ok: bool,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub error: Option<String>,
    #[serde(skip)]
    pub usage_error: bool,
}

impl Summary {
    fn new(cmd: Command) -> Self {
        Self {
            command: cmd.name().to_string(),
            ok: false,
            checks: Vec::new(),
            warnings: Vec::new(),
            outputs: Vec::new(),
            results: serde_json::Value::Null,
            error: None,
            usage_error: false,
        }
    }

    pub fn check(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            ok,
            detail: detail.into(),
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let message = message.into();
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    pub fn find(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// 0 when every check passed, 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.ok {
            0
        } else if self.usage_error {
            2
        } else {
            1
        }
    }
}

/// Output directory plus the list of files written into it.
pub struct Outputs<'a> {
    dir: &'a Path,
    summary: &'a mut Summary,
}

impl Outputs<'_> {
    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> flowprox::Result<()>) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.summary.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn summary(&mut self) -> &mut Summary {
        self.summary
    }
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::Usage(format!("{} is empty", path.display())));
    }
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Caps the global rayon pool from [`THREADS_ENV`] if it is set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool that already exists (tests running in one process) is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one command and writes `summary.json`. Never panics on bad input;
/// failures end up in the summary.
pub fn run(cmd: Command, args: &RunArgs) -> Summary {
    let mut summary = Summary::new(cmd);
    let result = fs::create_dir_all(&args.out).map_err(CliError::from).and_then(|_| {
        let mut out = Outputs {
            dir: &args.out,
            summary: &mut summary,
        };
        dispatch(cmd, args, &mut out)
    });
    match result {
        Ok(()) => summary.ok = summary.checks.iter().all(|c| c.ok),
        Err(e) => {
            summary.usage_error = matches!(e, CliError::Usage(_));
            summary.error = Some(e.to_string());
            summary.ok = false;
        }
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    if let Err(e) = fs::create_dir_all(&args.out).and_then(|_| fs::write(args.out.join(SUMMARY_FILE), text + "\n")) {
        eprintln!("error: cannot write {SUMMARY_FILE}: {e}");
        summary.ok = false;
    }
    summary
}

fn dispatch(cmd: Command, args: &RunArgs, out: &mut Outputs) -> Result<(), CliError> {
    init_threads()?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    match cmd {
        Command::Train => commands::train(read_config(&args.config)?, args.seed, out),
        Command::Spectrum => commands::spectrum(read_config(&args.config)?, &base, args.seed, out),
        Command::Lyapunov => commands::lyapunov(read_config(&args.config)?, &base, out),
        Command::ProxCheck => commands::prox_check(read_config(&args.config)?, &base, args.seed, out),
        Command::Converge => commands::converge(read_config(&args.config)?, &base, args.seed, out),
        Command::Sample => commands::sample(read_config(&args.config)?, &base, args.seed, out),
    }
}
