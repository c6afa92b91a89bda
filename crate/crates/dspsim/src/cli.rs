//! `dspsim` command line.
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 invalid configuration
//! or arguments, 3 the report could not be written.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use dspsim_core::cost::{DEFAULT_ALPHA, DEFAULT_BETA};
use dspsim_core::model::{ConfigError, ModelConfig};
use dspsim_core::schedules::{explain, ScheduleKind};

use crate::report::{Report, Settings};
use crate::run::{evaluate, EvalOptions, Evaluation, RunError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_OUTPUT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Dsp,
    Ulysses,
    Megatron,
    All,
}

impl ScheduleArg {
    fn kinds(self) -> Vec<ScheduleKind> {
        match self {
            ScheduleArg::Dsp => vec![ScheduleKind::Dsp],
            ScheduleArg::Ulysses => vec![ScheduleKind::Ulysses],
            ScheduleArg::Megatron => vec![ScheduleKind::MegatronSp],
            ScheduleArg::All => ScheduleKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "dspsim", version, about = "Simulate and cross-check sequence-parallel schedules")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file whose keys are long flag names; flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every (schedule, N) combination and check oracle error and ledger.
    Verify(RunArgs),
    /// Sweep (N, T, S) and write a report.
    Bench(BenchArgs),
    /// Print the planned collective sequence of a schedule.
    Explain(ExplainArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub schedule: ScheduleArg,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "1,2,4")]
    pub ranks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "8")]
    pub temporal: Vec<usize>,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "16")]
    pub spatial: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 4)]
    pub mlp_ratio: usize,
    #[arg(long, env = "DSPSIM_SEED", default_value_t = 7)]
    pub seed: u64,
    #[arg(long = "bytes-per-elem", default_value_t = 8)]
    pub bytes_per_elem: usize,
    /// Per-collective launch cost in seconds (latency estimate only).
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Per-rank bandwidth in bytes/second (latency estimate only).
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Count the output gather in whole-model volume totals.
    #[arg(long)]
    pub include_epilogue: bool,
    /// Add one element to the first ledger entry with this tag before
    /// reconciling.
    #[arg(long, hide = true, value_name = "TAG")]
    pub tamper_ledger: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Multiply each temporal length by N, keeping per-rank sequence fixed.
    #[arg(long)]
    pub scale_temporal: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
}

impl RunArgs {
    fn settings(&self) -> Settings {
        Settings {
            bytes_per_element: self.bytes_per_elem,
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            mlp_ratio: self.mlp_ratio,
            include_epilogue: self.include_epilogue,
        }
    }

    fn options(&self) -> EvalOptions {
        EvalOptions {
            bytes_per_element: self.bytes_per_elem,
            alpha: self.alpha,
            beta: self.beta,
            tamper_tag: self.tamper_ledger.clone(),
        }
    }

    fn model(&self, temporal: usize, spatial: usize) -> ModelConfig {
        ModelConfig {
            batch: self.batch,
            temporal,
            spatial,
            hidden: self.hidden,
            heads: self.heads,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            seed: self.seed,
            ..ModelConfig::default()
        }
    }

    /// Every (schedule, N, T, S) combination, validated before anything runs.
    fn grid(&self, scale_temporal: bool) -> Result<Vec<(ScheduleKind, usize, ModelConfig)>, String> {
        if self.bytes_per_elem == 0 {
            return Err("bytes-per-elem must be at least 1".into());
        }
        if self.alpha.is_nan() || self.alpha < 0.0 || self.beta.is_nan() || self.beta <= 0.0 {
            return Err("alpha must be >= 0 and beta > 0".into());
        }
        let mut grid = Vec::new();
        for &n in &self.ranks {
            for &t in &self.temporal {
                for &s in &self.spatial {
                    let cfg = self.model(if scale_temporal { t * n } else { t }, s);
                    for kind in self.schedule.kinds() {
                        kind.check(&cfg, n).map_err(|e| diagnose(kind, n, &cfg, &e))?;
                        grid.push((kind, n, cfg.clone()));
                    }
                }
            }
        }
        Ok(grid)
    }
}

fn diagnose(kind: ScheduleKind, n: usize, cfg: &ModelConfig, e: &ConfigError) -> String {
    format!(
        "invalid configuration for {kind} with N={n} (T={}, S={}, D={}, H={}, depth={}): {e}",
        cfg.temporal, cfg.spatial, cfg.hidden, cfg.heads, cfg.depth
    )
}

fn run_grid(grid: &[(ScheduleKind, usize, ModelConfig)], opts: &EvalOptions) -> Result<Vec<Evaluation>, RunError> {
    grid.iter().map(|(kind, n, cfg)| evaluate(*kind, cfg, *n, opts)).collect()
}

fn write_report(report: &Report, format: Format, path: &Path) -> Result<(), String> {
    let body = match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv().map_err(|e| e.to_string())?,
    };
    fs::write(path, body).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn execute(args: &RunArgs, scale_temporal: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let grid = match args.grid(scale_temporal) {
        Ok(g) => g,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let evals = match run_grid(&grid, &args.options()) {
        Ok(e) => e,
        Err(RunError::Config(e)) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_CONFIG;
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_FAIL;
        }
    };
    let report = Report::build(args.settings(), &evals);
    let _ = write!(out, "{}", report.summary());
    if let Some(path) = &args.out {
        if let Err(msg) = write_report(&report, args.format, path) {
            let _ = writeln!(err, "error: {msg}");
            return EXIT_OUTPUT;
        }
    }
    if report.all_pass {
        EXIT_OK
    } else {
        EXIT_FAIL
    }
}

pub fn cmd_verify(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    execute(args, false, out, err)
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    execute(&args.run, args.scale_temporal, out, err)
}

pub fn cmd_explain(args: &ExplainArgs, out: &mut dyn Write) -> i32 {
    for kind in args.schedule.kinds() {
        let _ = write!(out, "{}", explain(kind, args.depth));
    }
    EXIT_OK
}

/// Reads a flat `key = value` file into `--key value` arguments. Blank lines
/// and lines starting with `#` are ignored; boolean keys take `true`/`false`.
pub fn config_file_args(text: &str) -> Result<Vec<OsString>, String> {
    let mut args = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got '{line}'", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Splices config-file arguments right after the subcommand so explicit
/// flags, which come later, override them.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let pos = argv.iter().position(|a| a == "--config");
    let inline = argv.iter().position(|a| a.to_string_lossy().starts_with("--config="));
    let (path, drop): (PathBuf, Vec<usize>) = match (pos, inline) {
        (Some(i), _) if i + 1 < argv.len() => (PathBuf::from(&argv[i + 1]), vec![i, i + 1]),
        (_, Some(i)) => {
            let s = argv[i].to_string_lossy().into_owned();
            (PathBuf::from(&s["--config=".len()..]), vec![i])
        }
        _ => return Ok(argv),
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let extra = config_file_args(&text)?;
    let rest: Vec<OsString> =
        argv.into_iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, a)| a).collect();
    let sub = rest
        .iter()
        .position(|a| matches!(a.to_str(), Some("verify" | "bench" | "explain")))
        .ok_or("--config needs a subcommand")?;
    let mut out = rest[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&rest[sub + 1..]);
    Ok(out)
}

/// Parses `argv` and runs the selected command.
pub fn main_with(argv: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return EXIT_CONFIG;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_CONFIG;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match &cli.command {
        Command::Verify(a) => cmd_verify(a, out, err),
        Command::Bench(a) => cmd_bench(a, out, err),
        Command::Explain(a) => cmd_explain(a, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let argv = std::iter::once("dspsim").chain(args.iter().copied()).map(OsString::from).collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn config_file_parsing() {
        let args = config_file_args("# c\ntemporal = 4\n\ninclude-epilogue=true\nx=false\n").unwrap();
        assert_eq!(args, ["--temporal", "4", "--include-epilogue"].map(OsString::from));
        assert!(config_file_args("nonsense").is_err());
    }

    #[test]
    fn non_divisible_ranks_exit_two() {
        let (code, _, err) = run(&["verify", "--ranks", "3", "--temporal", "8"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("temporal = 8 is not divisible by ranks = 3"), "{err}");
    }

    #[test]
    fn explain_prints_trace() {
        let (code, out, _) = run(&["explain", "--schedule", "dsp", "--depth", "2"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().filter(|l| l.contains("switch")).count(), 2);
    }

    #[test]
    fn bad_flag_is_usage_error() {
        let (code, _, err) = run(&["verify", "--schedule", "ring"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("ring"));
    }
}
