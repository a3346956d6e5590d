//! `grng train|verify|bench|theorem1`.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime
//! divergence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use super::bench::{format_table, run_bench, run_id, run_to_dir, summarize};
use super::config::{load_config_file, OptimizerKind, RunConfig, CONFIG_KEYS};
use super::metrics::Split;
use super::train::RunStatus;
use super::verify::run_verify_suite;
use super::{io_err, HarnessError};
use crate::oracle::{run_theorem1_experiment, ConvergenceDiagnostic, FisherKind, Theorem1Config, Theorem1Outcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help("key = value config file; flags override its keys"),
    );
    CONFIG_KEYS.iter().fold(cmd, |cmd, &key| {
        cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(format!("override config key `{key}`")))
    })
}

fn out_arg(default: &'static str) -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("DIR")
        .default_value(default)
        .help("output directory")
}

pub fn command() -> Command {
    Command::new("grng")
        .about("Gradient-regularized natural gradient optimizers")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("train")
                .about("Run one configured training run")
                .arg(out_arg("runs/latest")),
        ))
        .subcommand(
            Command::new("verify")
                .about("Check the fast paths against brute-force oracles")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0"),
                ),
        )
        .subcommand(config_args(
            Command::new("bench")
                .about("Compare optimizers over several seeds")
                .arg(out_arg("bench"))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .default_value("5")
                        .help("seeds per optimizer, starting at --seed"),
                )
                .arg(
                    Arg::new("optimizers")
                        .long("optimizers")
                        .value_delimiter(',')
                        .action(ArgAction::Append)
                        .help("comma-separated subset (default: all)"),
                ),
        ))
        .subcommand(
            Command::new("theorem1")
                .about("Output-space natural gradient convergence experiment")
                .arg(out_arg("theorem1"))
                .arg(Arg::new("seed").long("seed").value_parser(clap::value_parser!(u64)).default_value("0"))
                .arg(Arg::new("width").long("width").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("samples").long("samples").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("iters").long("iters").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("rho").long("rho").value_parser(clap::value_parser!(f64))),
        )
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = match matches.subcommand() {
        Some(("train", m)) => cmd_train(m, out),
        Some(("verify", m)) => cmd_verify(m, out),
        Some(("bench", m)) => cmd_bench(m, out),
        Some(("theorem1", m)) => cmd_theorem1(m, out),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_DIVERGED
            }
        }
    }
}

fn resolve_config(m: &ArgMatches, skip: &[&str]) -> Result<RunConfig, HarnessError> {
    let file = match m.get_one::<String>("config") {
        Some(p) => load_config_file(Path::new(p))?,
        None => Vec::new(),
    };
    let file: Vec<_> = file.into_iter().filter(|(_, k, _)| !skip.contains(&k.as_str())).collect();
    let overrides: Vec<(String, String)> = CONFIG_KEYS
        .iter()
        .filter(|k| !skip.contains(k))
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(&file, &overrides)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), HarnessError> {
    out.write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn cmd_train(m: &ArgMatches, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let cfg = resolve_config(m, &[])?;
    let dir = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let outcome = run_to_dir(&cfg, &dir)?;
    let mut text = format!("run {} ({} iterations)\n", run_id(&cfg), outcome.iterations);
    for split in [Split::Train, Split::Validation] {
        if let Some(r) = outcome.last_eval(split) {
            let metric = r.metric.map_or("-".to_string(), |v| format!("{v:.4}"));
            text += &format!("{:<5} loss {:.6} metric {metric}\n", split.name(), r.loss);
        }
    }
    text += &format!("wrote {}\n", dir.display());
    write_out(out, &text)?;
    match outcome.status {
        RunStatus::Completed => Ok(EXIT_OK),
        RunStatus::Diverged { iteration } => {
            write_out(out, &format!("diverged: non-finite loss at iteration {iteration}\n"))?;
            Ok(EXIT_DIVERGED)
        }
    }
}

fn cmd_verify(m: &ArgMatches, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let seed = *m.get_one::<u64>("seed").expect("default");
    let results = run_verify_suite(seed);
    let mut text = String::new();
    for r in &results {
        text += &format!(
            "[{}] {}. {:<38} {:>8.2?}  {}\n",
            if r.passed { "pass" } else { "FAIL" },
            r.id,
            r.name,
            r.duration,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    text += &format!("{} of {} checks passed\n", results.len() - failed, results.len());
    write_out(out, &text)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn cmd_bench(m: &ArgMatches, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let kinds: Vec<OptimizerKind> = match m.get_many::<String>("optimizers") {
        Some(names) => names
            .map(|n| OptimizerKind::from_name(n).ok_or_else(|| HarnessError::Config(format!("unknown optimizer `{n}`"))))
            .collect::<Result<_, _>>()?,
        None => OptimizerKind::ALL.to_vec(),
    };
    let seeds = *m.get_one::<u64>("seeds").expect("default");
    let base = resolve_config(m, &["optimizer"])?;
    let mut configs = Vec::new();
    for kind in &kinds {
        for s in 0..seeds {
            let mut file = Vec::new();
            if let Some(p) = m.get_one::<String>("config") {
                file = load_config_file(Path::new(p))?;
                file.retain(|(_, k, _)| k != "optimizer" && k != "batch_size");
            }
            let mut overrides: Vec<(String, String)> = CONFIG_KEYS
                .iter()
                .filter(|&&k| k != "optimizer" && k != "seed" && k != "batch_size")
                .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
                .collect();
            overrides.push(("optimizer".into(), kind.name().into()));
            overrides.push(("seed".into(), (base.seed + s).to_string()));
            if let (OptimizerKind::Frequentist(_), Some(b)) = (kind, m.get_one::<String>("batch_size")) {
                overrides.push(("batch_size".into(), b.clone()));
            }
            configs.push(RunConfig::resolve(&file, &overrides)?);
        }
    }
    let dir = PathBuf::from(m.get_one::<String>("out").expect("default"));
    let cells = run_bench(&configs, Some(&dir))?;
    let table = format_table(&summarize(&cells));
    let path = dir.join("summary.txt");
    fs::write(&path, &table).map_err(|e| io_err(&path, e))?;
    write_out(out, &format!("dataset {}, {} seeds\n{table}wrote {}\n", base.dataset, seeds, path.display()))?;
    Ok(EXIT_OK)
}

pub fn format_diagnostic(kind: FisherKind, d: &ConvergenceDiagnostic) -> String {
    let ratio = d.ratio.map_or("-".to_string(), |r| format!("{r:?}"));
    format!(
        "fisher:{} iter:{} residual:{:?} ratio:{ratio} kappa:{:?} drift:{:?} c:{:?} m_k:{:?} bound:{:?}",
        match kind {
            FisherKind::Exact => "exact",
            FisherKind::Factored => "factored",
        },
        d.iteration,
        d.residual,
        d.kappa,
        d.drift,
        d.c_est,
        d.m_k,
        d.bound_factor
    )
}

fn summary_line(kind: FisherKind, o: &Theorem1Outcome) -> String {
    let max_ratio = o.records.iter().filter_map(|r| r.ratio).fold(0.0, f64::max);
    format!(
        "{kind:?}: {} records, final residual {:.3e}, max ratio {max_ratio:.4}, lambda_min(G0) {:.3e}, max C {:.3}, stable ball {}\n",
        o.records.len(),
        o.final_residual(),
        o.lambda_min0,
        o.max_c,
        o.within_stable_ball
    )
}

fn cmd_theorem1(m: &ArgMatches, out: &mut dyn Write) -> Result<i32, HarnessError> {
    let mut cfg = Theorem1Config {
        seed: *m.get_one::<u64>("seed").expect("default"),
        ..Theorem1Config::default()
    };
    if let Some(&w) = m.get_one::<usize>("width") {
        cfg.width = w;
    }
    if let Some(&n) = m.get_one::<usize>("samples") {
        cfg.samples = n;
    }
    if let Some(&k) = m.get_one::<usize>("iters") {
        cfg.iters = k;
    }
    if let Some(&r) = m.get_one::<f64>("rho") {
        cfg.rho = r;
    }
    let dir = PathBuf::from(m.get_one::<String>("out").expect("default"));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut text = String::new();
    for kind in [FisherKind::Exact, FisherKind::Factored] {
        let outcome = run_theorem1_experiment(&Theorem1Config { fisher: kind, ..cfg })?;
        let name = if kind == FisherKind::Exact { "exact" } else { "factored" };
        let path = dir.join(format!("diagnostics-{name}.txt"));
        let lines: String = outcome.records.iter().map(|d| format_diagnostic(kind, d) + "\n").collect();
        fs::write(&path, lines).map_err(|e| io_err(&path, e))?;
        text += &summary_line(kind, &outcome);
    }
    text += &format!("wrote {}\n", dir.display());
    write_out(out, &text)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = run_cli(std::iter::once("grng").chain(args.iter().copied()), &mut o, &mut e);
        (code, String::from_utf8(o).unwrap(), String::from_utf8(e).unwrap())
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(&["--help"]).0, EXIT_OK);
        assert_eq!(run(&["train", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(run(&[]).0, EXIT_USAGE);
        assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
    }

    #[test]
    fn missing_config_is_reported() {
        let (code, _, err) = run(&["train", "--config", "/nonexistent/missing.cfg"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("file not found"), "{err}");
    }

    #[test]
    fn every_config_key_is_a_flag() {
        let cmd = command();
        let train = cmd.find_subcommand("train").unwrap();
        for key in CONFIG_KEYS {
            assert!(train.get_arguments().any(|a| a.get_long() == Some(key)), "{key}");
        }
    }

    #[test]
    fn bad_override_value_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let (code, _, err) = run(&["train", "--learning_rate", "fast", "--out", out]);
        assert_eq!(code, EXIT_USAGE, "{err}");
    }

    #[test]
    fn train_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let (code, stdout, err) = run(&[
            "train", "--optimizer", "rkalman", "--samples", "30", "--epochs", "1", "--hidden", "4", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{err}");
        assert!(stdout.contains("rkalman-s0"));
        for f in ["config.cfg", "metrics.txt", "model.net", "posterior.ckpt"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let text = fs::read_to_string(out.join("config.cfg")).unwrap();
        let triples = super::super::config::parse_config_text(&text).unwrap();
        let again = RunConfig::resolve(&triples, &[]).unwrap();
        assert_eq!(again.to_text(), text);
    }

    #[test]
    fn divergence_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let (code, stdout, _) = run(&[
            "train", "--optimizer", "sgd", "--dataset", "gaussian-regression", "--samples", "100", "--learning_rate",
            "1000", "--epochs", "50", "--out", dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DIVERGED);
        assert!(stdout.contains("diverged"));
    }
}
