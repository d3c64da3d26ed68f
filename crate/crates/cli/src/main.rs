//! `corrflow` command-line front end.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{ConfigError, RunConfig, Scope};

pub enum Failure {
    Usage(String),
    Run(corrflow::Error),
    Verify(Vec<String>),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<corrflow::Error> for Failure {
    fn from(e: corrflow::Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    fn report(&self) -> ExitCode {
        match self {
            Failure::Usage(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
            Failure::Run(e @ corrflow::Error::NonFiniteLoss { .. }) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
            Failure::Run(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
            Failure::Verify(names) => {
                eprintln!("verification failed: {}", names.join(", "));
                ExitCode::from(3)
            }
        }
    }
}

type Handler = fn(&RunConfig) -> Result<(), Failure>;

const COMMANDS: &[(&str, &str, Scope, Handler)] = &[
    ("synth", "Generate a synthetic dataset of textured moving patches", Scope::Synth, commands::synth),
    ("train", "Train the encoder by recursive colour reconstruction", Scope::Train, commands::train),
    ("propagate", "Propagate a first-frame mask or keypoints through a video", Scope::Propagate, commands::propagate),
    ("evaluate", "Score predicted masks (J, F) or keypoints (PCK)", Scope::Evaluate, commands::evaluate),
    ("verify", "Run the built-in numerical self-checks", Scope::Verify, commands::verify),
];

fn cli() -> Command {
    let mut cmd = Command::new("corrflow")
        .about("Self-supervised correspondence flow: training, label propagation and evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help("Set CORRFLOW_THREADS to cap worker threads.");
    for &(name, about, scope, _) in COMMANDS {
        cmd = cmd.subcommand(
            Command::new(name)
                .about(about)
                .arg(
                    Arg::new("config")
                        .long("config")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("key=value config file"),
                )
                .arg(
                    Arg::new("print-config")
                        .long("print-config")
                        .action(ArgAction::SetTrue)
                        .help("Print the resolved config and exit"),
                )
                .arg(
                    Arg::new("overrides")
                        .value_name("--KEY VALUE")
                        .num_args(0..)
                        .trailing_var_arg(true)
                        .allow_hyphen_values(true)
                        .help("Config overrides"),
                )
                .after_help(config::key_help(scope)),
        );
    }
    cmd
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CORRFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("CORRFLOW_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), Failure> {
    let mut file = m.get_one::<PathBuf>("config").cloned();
    let mut print = m.get_flag("print-config");
    // options that follow a config override land among the overrides
    let mut overrides = Vec::new();
    let mut rest = m.get_many::<String>("overrides").into_iter().flatten().cloned();
    while let Some(arg) = rest.next() {
        match arg.as_str() {
            "--print-config" => print = true,
            "--config" => file = Some(rest.next().ok_or_else(|| Failure::Usage("--config needs a file".into()))?.into()),
            _ => match arg.strip_prefix("--config=") {
                Some(f) => file = Some(f.into()),
                None => overrides.push(arg),
            },
        }
    }
    let cfg = RunConfig::load(file.as_deref(), &overrides)?;
    if print {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    init_threads()?;
    let &(_, _, _, handler) = COMMANDS.iter().find(|c| c.0 == name).expect("registered subcommand");
    handler(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
