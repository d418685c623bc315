//! Command-line front end: `gen`, `train`, `explain`, `cluster`,
//! `lead-importance` and `compare`.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, Command};

use config::{flag_name, keys_for, RunConfig, OUT_DIR_ENV};

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] apfcn_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Csv(_) => EXIT_VALIDATION,
            CliError::Core(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Core(_) | CliError::Io(_) => EXIT_RUNTIME,
        }
    }
}

const COMMANDS: [(&str, &str); 6] = [
    ("gen", "Generate a synthetic labelled dataset"),
    ("train", "Train a network and evaluate it on the test split"),
    ("explain", "Write saliency maps for test samples"),
    ("cluster", "Cluster each class's signals with DTW k-medoids"),
    ("lead-importance", "Per-class and per-ventricle lead importance from an image2d model"),
    ("compare", "Compare two methods' accuracy with a one-sided Fisher test"),
];

pub fn cli() -> Command {
    let mut cmd = Command::new("apfcn")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Accessory-pathway localization from 12-lead ECG with fully convolutional networks")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("key=value file; command-line flags take precedence"),
        );
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about);
        for key in keys_for(name) {
            let mut arg = Arg::new(key.name)
                .long(flag_name(key.name))
                .help(key.help)
                .action(ArgAction::Set);
            if key.flag {
                arg = arg
                    .num_args(0..=1)
                    .default_missing_value("true")
                    .value_name("BOOL");
            } else {
                arg = arg.value_name("VALUE");
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let overrides: Vec<(String, String)> = keys_for(name)
        .iter()
        .filter(|k| sub.value_source(k.name) == Some(ValueSource::CommandLine))
        .filter_map(|k| sub.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let result = RunConfig::resolve(name, file.as_deref(), &overrides, std::env::var(OUT_DIR_ENV).ok())
        .and_then(|cfg| commands::dispatch(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
