//! Config keys per subcommand. Every key is accepted in a `--config` file
//! and as a `--key value` flag; flags win.

use clap::{Arg, ArgMatches, Command};
use eluq_core::config::KeyValues;

use crate::error::CliError;

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    /// Extra flag spellings.
    pub aliases: &'static [&'static str],
}

const fn key(name: &'static str, help: &'static str) -> Key {
    Key { name, help, aliases: &[] }
}

const fn aka(name: &'static str, aliases: &'static [&'static str], help: &'static str) -> Key {
    Key { name, help, aliases }
}

pub const GENERATE: &[Key] = &[
    key("out", "dataset file to write (a `.cfg` echo is written beside it)"),
    key("events", "number of events [default: 100000]"),
    key("seed", "generator seed [default: 1]"),
    key("beam.e0", "electron beam energy, GeV [default: 27.6]"),
    key("beam.ep", "proton beam energy, GeV [default: 920]"),
    key("gen.x_min", "lower x bound [default: 2e-4]"),
    key("gen.x_max", "upper x bound [default: 1]"),
    key("gen.y_min", "lower y bound [default: 0.01]"),
    key("gen.y_max", "upper y bound [default: 0.8]"),
    key("gen.q2_min", "lower Q2 bound, GeV^2 [default: 200]"),
    key("gen.q2_max", "upper Q2 bound, GeV^2 [default: 5e4]"),
    key("gen.law", "`log_x_q2` or `log_x_y` [default: log_x_q2]"),
    key("smear.e_stoch", "electron energy stochastic term [default: 0.1]"),
    key("smear.e_const", "electron energy constant term [default: 0.01]"),
    key("smear.e_angle", "electron angular resolution, rad [default: 0.002]"),
    key("smear.h_stoch", "hadronic energy stochastic term [default: 0.5]"),
    key("smear.h_const", "hadronic energy constant term [default: 0.05]"),
    key("smear.h_angle", "hadronic angular resolution, rad [default: 0.02]"),
    key("rad.p_isr", "probability of initial-state radiation [default: 0.1]"),
    key("rad.frac_min", "smallest radiated energy fraction [default: 0.01]"),
    key("rad.frac_max", "largest radiated energy fraction [default: 0.5]"),
    key("rad.collinear_frac", "share of radiative events whose photon joins the electron cluster [default: 0.3]"),
    key("rad.cluster_mean", "Poisson mean of extra clusters [default: 0.7]"),
    key("rad.eta_min", "lower photon pseudorapidity [default: -7]"),
    key("rad.eta_max", "upper photon pseudorapidity [default: -4]"),
];

pub const TRAIN: &[Key] = &[
    key("data", "dataset file"),
    key("out", "checkpoint file to write"),
    key("log", "per-epoch CSV log [default: <out>.log.csv]"),
    key("model", "`eluq` (Bayesian) or `dnn` (deterministic baseline) [default: eluq]"),
    aka("model.topology", &["topology"], "widths in:trunk:head:out [default: 15:128,128,128:64:3]"),
    aka("model.compact", &["compact"], "use the 15:64,64,64:32:3 widths when true [default: false]"),
    aka("model.logvar_head", &["logvar-head"], "give the `dnn` baseline a log-variance head [default: false]"),
    aka("mnf.flow_steps", &["flow-steps"], "coupling steps of the auxiliary flow [default: 2]"),
    aka("mnf.flow_hidden", &["flow-hidden"], "hidden width of each coupling step [default: 50]"),
    aka("mnf.init_log_var", &["init-log-var"], "initial weight log-variance [default: -9]"),
    aka("mnf.degenerate", &["degenerate"], "pin the auxiliary variable to 1 [default: false]"),
    aka("train.max_epochs", &["max-epochs", "epochs"], "epoch limit [default: 100]"),
    aka("train.batch_size", &["batch-size", "batch"], "minibatch size [default: 1024]"),
    aka("train.lr", &["lr"], "initial Adam learning rate [default: 5e-4]"),
    aka("train.decay_step", &["decay-step"], "epochs between learning-rate decays [default: 50]"),
    aka("train.decay_factor", &["decay-factor", "gamma"], "learning-rate decay factor [default: 0.1]"),
    aka("train.alpha", &["alpha"], "physics-loss weight [default: 1]"),
    aka("train.beta", &["beta"], "KL weight; forced to 0 for `dnn` [default: 0.01]"),
    aka("train.patience", &["patience"], "epochs without improvement before stopping [default: 10]"),
    aka("train.min_delta", &["min-delta"], "smallest validation improvement that counts [default: 1e-5]"),
    aka("train.split_train", &["split-train"], "training fraction [default: 0.7]"),
    aka("train.split_val", &["split-val"], "validation fraction [default: 0.15]"),
    aka("train.split_test", &["split-test"], "test fraction [default: 0.15]"),
    aka("train.seed", &["seed"], "seed of the split, init, shuffle and noise streams [default: 0]"),
];

pub const INFER: &[Key] = &[
    key("checkpoint", "trained checkpoint"),
    key("data", "dataset file"),
    key("out", "prediction record file to write"),
    aka("infer.samples", &["samples"], "posterior samples per event [default: 10000]"),
    aka("infer.batch", &["batch"], "events per forward pass [default: 100]"),
    aka("infer.seed", &["seed"], "seed of the sampling stream [default: 0]"),
    aka(
        "infer.subset",
        &["subset"],
        "`test` (the checkpoint's test split) or `all` usable events [default: test]",
    ),
    aka("infer.limit", &["limit"], "keep only the first N events of the subset, 0 = all [default: 0]"),
];

pub const ANALYZE: &[Key] = &[
    key("records", "prediction records of the Bayesian model"),
    key("baseline", "prediction records of the deterministic baseline (enables the aleatoric closure)"),
    key("small", "records of a model trained on less data, same events (enables the epistemic comparison)"),
    key("out", "directory for the CSV reports"),
    aka(
        "analysis.y_edges",
        &["y-edges"],
        "ascending y bin edges [default: 0.01,0.05,0.1,0.2,0.5,0.8]",
    ),
    aka(
        "analysis.thresholds",
        &["thresholds"],
        "relative-uncertainty cut ladder, loose to tight [default: 0.5,0.2,0.1,0.05]",
    ),
];

pub fn command(name: &'static str, about: &'static str, keys: &'static [Key]) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("`key = value` file; flags override its entries"),
    );
    for k in keys {
        cmd = cmd.arg(
            Arg::new(k.name)
                .long(k.name)
                .visible_aliases(k.aliases.iter().copied())
                .value_name("VALUE")
                .help(k.help),
        );
    }
    cmd
}

/// Config file entries overlaid with flags; unknown file keys are rejected.
pub fn resolve(m: &ArgMatches, keys: &[Key]) -> Result<KeyValues, CliError> {
    let mut kv = match m.get_one::<String>("config") {
        Some(p) => KeyValues::load(std::path::Path::new(p))?,
        None => KeyValues::new(),
    };
    kv.check_known(|k| keys.iter().any(|s| s.name == k))?;
    for k in keys {
        if let Some(v) = m.get_one::<String>(k.name) {
            kv.set(k.name, v);
        }
    }
    Ok(kv)
}
