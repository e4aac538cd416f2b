//! `eluq`: generate, train, infer, analyze, selftest.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 file I/O,
//! 4 training divergence, 5 selftest failure.

mod commands;
mod error;
mod keys;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::error::CliError;

fn cli() -> Command {
    Command::new("eluq")
        .version(eluq_core::CODE_VERSION)
        .about("Event-level uncertainty-aware regression of DIS kinematics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(keys::command("generate", "Generate a synthetic dataset", keys::GENERATE))
        .subcommand(keys::command("train", "Train the Bayesian model or the deterministic baseline", keys::TRAIN))
        .subcommand(keys::command("infer", "Sample the posterior predictive per event", keys::INFER))
        .subcommand(keys::command("analyze", "Resolution, closure and cut reports from prediction records", keys::ANALYZE))
        .subcommand(
            Command::new("selftest")
                .about("Gradient, flow, KL, weighted-average and reconstruction checks")
                .arg(
                    Arg::new("reco-events")
                        .long("reco-events")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("10000")
                        .help("events in the noiseless reconstruction round trip"),
                )
                .arg(
                    Arg::new("corrupt-selu")
                        .long("corrupt-selu")
                        .action(ArgAction::SetTrue)
                        .hide(true),
                ),
        )
}

fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    match m.subcommand() {
        Some(("generate", sub)) => commands::generate(&keys::resolve(sub, keys::GENERATE)?),
        Some(("train", sub)) => commands::train(&keys::resolve(sub, keys::TRAIN)?),
        Some(("infer", sub)) => commands::infer(&keys::resolve(sub, keys::INFER)?),
        Some(("analyze", sub)) => commands::analyze_cmd(&keys::resolve(sub, keys::ANALYZE)?),
        Some(("selftest", sub)) => commands::selftest_cmd(
            sub.get_flag("corrupt-selu"),
            *sub.get_one::<u64>("reco-events").expect("has default"),
        ),
        _ => unreachable!("subcommand required"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class.code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_tree_is_consistent() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("gen.cfg");
        std::fs::write(&cfg, "events = 10\nseed = 3\n").unwrap();
        let m = cli()
            .try_get_matches_from(["eluq", "generate", "--config", cfg.to_str().unwrap(), "--seed", "9"])
            .unwrap();
        let kv = keys::resolve(m.subcommand_matches("generate").unwrap(), keys::GENERATE).unwrap();
        assert_eq!(kv.raw("events"), Some("10"));
        assert_eq!(kv.raw("seed"), Some("9"));
    }

    #[test]
    fn unknown_file_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("gen.cfg");
        std::fs::write(&cfg, "evnets = 10\n").unwrap();
        let m = cli()
            .try_get_matches_from(["eluq", "generate", "--config", cfg.to_str().unwrap()])
            .unwrap();
        let err = keys::resolve(m.subcommand_matches("generate").unwrap(), keys::GENERATE).unwrap_err();
        assert_eq!(err.class.code(), 2);
        assert!(err.message.contains("evnets"));
    }

    #[test]
    fn aliases_reach_config_keys() {
        let m = cli()
            .try_get_matches_from(["eluq", "train", "--alpha", "0", "--lr", "1e-3", "--train.beta", "0.5"])
            .unwrap();
        let kv = keys::resolve(m.subcommand_matches("train").unwrap(), keys::TRAIN).unwrap();
        assert_eq!(kv.raw("train.alpha"), Some("0"));
        assert_eq!(kv.raw("train.lr"), Some("1e-3"));
        assert_eq!(kv.raw("train.beta"), Some("0.5"));
    }
}
