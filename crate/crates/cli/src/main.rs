//! `lflow`: command-line driver.
//!
//! Every subcommand reads a flat `key = value` schema (see `--help` of each
//! subcommand); flags override the `--config` file. Exit codes: 0 success,
//! 2 config error, 3 input or format error, 4 numerical failure. Errors
//! end with a machine-readable `error_code=N` line on standard error.

mod commands;
mod config;
mod error;
mod manifest;
mod plot;
mod summary;

use std::path::Path;

use clap::{Arg, Command};

use crate::config::Config;
use crate::error::CliError;

const ABOUT: &[(&str, &str)] = &[
    ("hmc", "Plain HMC chains with the Wilson action"),
    ("train", "Train a flow by reverse-KL minimisation"),
    ("fthmc", "HMC in the latent space of a trained flow"),
    ("transfer", "Move checkpoint weights to another lattice size"),
    ("exact", "Print the exact average plaquette"),
    ("analyze", "Summarise observable CSVs as JSON (and an optional SVG)"),
];

fn cli() -> Command {
    let mut cmd = Command::new("lflow")
        .version(env!("CARGO_PKG_VERSION"))
        .about("2D U(1) lattice gauge theory with HMC and normalizing flows")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in ABOUT {
        let schema = commands::schema(name).expect("schema for every command");
        cmd = cmd.subcommand(config::command_with_keys(Command::new(*name).about(*about), schema));
    }
    cmd.subcommand(
        Command::new("replay")
            .about("Re-run the command recorded in a run manifest")
            .arg(Arg::new("manifest").required(true).value_name("MANIFEST")),
    )
}

fn run() -> Result<(), CliError> {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            return Err(CliError::Config(e.render().to_string().trim_end().to_string()));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if name == "replay" {
        let path = sub.get_one::<String>("manifest").expect("required");
        return commands::replay(Path::new(path));
    }
    let schema = commands::schema(name).expect("known subcommand");
    commands::run(name, Config::resolve(sub, schema)?)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run() {
        let code = e.exit_code();
        eprintln!("error: {e}");
        eprintln!("error_code={code}");
        std::process::exit(code);
    }
}
