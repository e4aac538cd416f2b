use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use eluq_core::analysis::{analyze, emit_report, parse_thresholds, AnalysisConfig, YBins};
use eluq_core::checkpoint::{peek_kind, Checkpoint, ModelKind};
use eluq_core::config::KeyValues;
use eluq_core::dataset::{generate_dataset, read_dataset, Dataset};
use eluq_core::generator::GeneratorConfig;
use eluq_core::inference::{predict_dataset, read_records, write_records, InferenceConfig, Sampleable};
use eluq_core::mnf::{DenseLayer, MnfConfig, MnfDenseLayer};
use eluq_core::model::{DnnBaseline, EluqNetwork, Layer, Topology};
use eluq_core::rng::stream;
use eluq_core::selftest::{self, SelftestOptions};
use eluq_core::trainer::{fit, fit_baseline, FitOutput, TrainConfig, TrainError, TrainFailure, TrainLog, TrainingData};
use eluq_core::CODE_VERSION;

use crate::error::{Class, CliError};

fn get<T: FromStr>(kv: &KeyValues, key: &str, default: T) -> Result<T, CliError> {
    Ok(kv.get(key)?.unwrap_or(default))
}

fn path_of(kv: &KeyValues, key: &str) -> Result<PathBuf, CliError> {
    kv.raw(key)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::usage(format!("missing required key `{key}`")))
}

/// Output locations are left out of echoes so that artifacts do not depend
/// on where they were written.
fn echo(kv: &KeyValues) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| !matches!(*k, "out" | "log" | "config")) {
        out.set(k, v);
    }
    out
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn comment_block(kv: &KeyValues) -> String {
    kv.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

pub fn generate(kv: &KeyValues) -> Result<(), CliError> {
    let out = path_of(kv, "out")?;
    let events: u64 = get(kv, "events", 100_000)?;
    if events == 0 {
        return Err(CliError::usage("`events` must be positive"));
    }
    let cfg = GeneratorConfig::from_kv(kv)?;
    let t0 = Instant::now();
    generate_dataset(&cfg, events, &out)?;
    let mut side = cfg.to_kv();
    side.set("events", events);
    side.set("code_version", CODE_VERSION);
    write_text(&with_suffix(&out, ".cfg"), &side.to_string())?;
    println!(
        "wrote {events} events to {} in {:.1} s",
        out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::io(format!("{}: no such dataset", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn topology_of(kv: &KeyValues) -> Result<Topology, CliError> {
    let compact: bool = get(kv, "model.compact", false)?;
    let fallback = if compact { Topology::compact() } else { Topology::default() };
    match kv.raw("model.topology") {
        Some(t) => Topology::from_str(t).map_err(CliError::usage),
        None => Ok(fallback),
    }
}

fn mnf_of(kv: &KeyValues) -> Result<MnfConfig, CliError> {
    let mut m = MnfConfig::default();
    kv.read_into("mnf.flow_steps", &mut m.flow_steps)?;
    kv.read_into("mnf.flow_hidden", &mut m.flow_hidden)?;
    kv.read_into("mnf.init_log_var", &mut m.init_log_var)?;
    kv.read_into("mnf.degenerate", &mut m.degenerate)?;
    Ok(m)
}

fn write_log(path: &Path, header: &KeyValues, log: &TrainLog) -> Result<(), CliError> {
    write_text(path, &format!("{}{}", comment_block(header), log.to_csv()))
}

fn finish<L: Layer<f64>>(
    result: Result<FitOutput<f64, L>, TrainFailure<f64, L>>,
    run: &KeyValues,
    out: &Path,
    log_path: &Path,
) -> Result<(), CliError> {
    let attach = |ck: &mut Checkpoint<f64, L>| {
        ck.provenance.extend(run);
    };
    match result {
        Ok(FitOutput { mut checkpoint, log }) => {
            attach(&mut checkpoint);
            checkpoint.save(out)?;
            write_log(log_path, run, &log)?;
            println!(
                "best epoch {} of {} (val loss {}), checkpoint {}",
                checkpoint.meta.epoch,
                log.records.len(),
                checkpoint.meta.val_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
                out.display()
            );
            Ok(())
        }
        Err(TrainFailure { error, last_good, log }) => {
            write_log(log_path, run, &log)?;
            let class = match error {
                TrainError::Config(_) => Class::Usage,
                TrainError::Diverged { .. } => Class::Diverged,
                _ => Class::Other,
            };
            let mut msg = error.to_string();
            if let (Class::Diverged, Some(mut ck)) = (class, last_good) {
                attach(&mut ck);
                ck.save(out)?;
                msg.push_str(&format!(
                    "; last good state (epoch {}) kept in {}",
                    ck.meta.epoch,
                    out.display()
                ));
            }
            Err(CliError::new(class, msg))
        }
    }
}

pub fn train(kv: &KeyValues) -> Result<(), CliError> {
    let data_path = path_of(kv, "data")?;
    let out = path_of(kv, "out")?;
    let log_path = kv.raw("log").map_or_else(|| with_suffix(&out, ".log.csv"), PathBuf::from);
    let model: String = get(kv, "model", "eluq".to_string())?;
    let cfg = TrainConfig::from_kv(kv)?;
    let topology = topology_of(kv)?;
    let mnf = mnf_of(kv)?;

    let mut run = echo(kv);
    run.extend(&cfg.to_kv());
    run.set("model", &model);
    run.set("model.topology", &topology);
    let logvar_head: bool = get(kv, "model.logvar_head", false)?;
    if model == "dnn" {
        run.set("model.logvar_head", logvar_head);
    }
    if model == "eluq" {
        run.set("mnf.flow_steps", mnf.flow_steps);
        run.set("mnf.flow_hidden", mnf.flow_hidden);
        run.set("mnf.init_log_var", mnf.init_log_var);
        run.set("mnf.degenerate", mnf.degenerate);
    }
    run.set("code_version", CODE_VERSION);
    for k in ["train.lr", "train.batch_size", "train.decay_factor", "train.decay_step", "train.alpha", "train.beta"] {
        println!("{k} = {}", run.raw(k).unwrap_or("?"));
    }

    let ds = load_dataset(&data_path)?;
    let data = TrainingData::from_dataset(&ds).map_err(CliError::other)?;
    let mut init = stream(cfg.seed, "init", 0);
    let t0 = Instant::now();
    let outcome = match model.as_str() {
        "eluq" => {
            let mut net = EluqNetwork::<f64>::eluq(topology, mnf, &mut init).map_err(|e| CliError::usage(e.to_string()))?;
            net.set_degenerate(mnf.degenerate);
            finish(fit(net, &data, &cfg), &run, &out, &log_path)
        }
        "dnn" => {
            let net = DnnBaseline::<f64>::dnn(topology, logvar_head, &mut init).map_err(|e| CliError::usage(e.to_string()))?;
            finish(fit_baseline(net, &data, &cfg), &run, &out, &log_path)
        }
        other => Err(CliError::usage(format!("`model` must be eluq or dnn, got `{other}`"))),
    };
    println!("training took {:.1} s", t0.elapsed().as_secs_f64());
    outcome
}

fn run_inference<L: Sampleable<f64> + Layer<f64>>(
    ckpt_path: &Path,
    ds: &Dataset,
    kv: &KeyValues,
    cfg: &InferenceConfig,
) -> Result<(), CliError> {
    let ck = Checkpoint::<f64, L>::load(ckpt_path)?;
    let usable: Vec<usize> = (0..ds.events.len()).filter(|&i| ds.events[i].usable()).collect();
    let subset: String = get(kv, "infer.subset", "test".to_string())?;
    let mut indices = match subset.as_str() {
        "all" => usable,
        "test" => {
            let gen = ds.config.to_kv();
            if gen.iter().any(|(k, v)| ck.provenance.raw(k) != Some(v)) || ck.split.test.iter().any(|&i| i >= usable.len()) {
                return Err(CliError::usage(
                    "dataset is not the one the checkpoint was trained on; use `infer.subset = all`",
                ));
            }
            ck.split.test.iter().map(|&i| usable[i]).collect()
        }
        other => return Err(CliError::usage(format!("`infer.subset` must be test or all, got `{other}`"))),
    };
    let limit: usize = get(kv, "infer.limit", 0)?;
    if limit > 0 {
        indices.truncate(limit);
    }
    if indices.is_empty() {
        return Err(CliError::usage("no events selected"));
    }

    let t0 = Instant::now();
    let records = predict_dataset(&ck, ds, &indices, cfg)?;
    let secs = t0.elapsed().as_secs_f64().max(1e-9);

    let mut meta = ck.provenance.clone();
    meta.extend(&ck.train_config.to_kv());
    meta.extend(&echo(kv));
    meta.set("model", ModelKind::of::<f64, L>().tag());
    meta.set("infer.samples", cfg.n_samples);
    meta.set("infer.batch", cfg.batch_size);
    meta.set("infer.seed", cfg.seed);
    meta.set("infer.subset", &subset);
    meta.set("checkpoint.epoch", ck.meta.epoch);
    meta.set("code_version", CODE_VERSION);
    let out = path_of(kv, "out")?;
    write_records(&out, &meta, &records)?;
    let passes = if L::BAYESIAN { cfg.n_samples } else { 1 };
    let n = records.len() as f64;
    println!(
        "{} events in {secs:.2} s: {:.1} events/s, {:.0} samples/s, {:.0} samples/event/s at batch {}",
        records.len(),
        n / secs,
        n * passes as f64 / secs,
        (passes * records.len().div_ceil(cfg.batch_size)) as f64 / secs,
        cfg.batch_size,
    );
    println!("records written to {}", out.display());
    Ok(())
}

pub fn infer(kv: &KeyValues) -> Result<(), CliError> {
    let ckpt = path_of(kv, "checkpoint")?;
    let data_path = path_of(kv, "data")?;
    path_of(kv, "out")?;
    let cfg = InferenceConfig {
        n_samples: get(kv, "infer.samples", 10_000)?,
        batch_size: get(kv, "infer.batch", 100)?,
        seed: get(kv, "infer.seed", 0)?,
    };
    cfg.validate()?;
    let kind = peek_kind(&ckpt)?;
    let ds = load_dataset(&data_path)?;
    match kind {
        ModelKind::Eluq => run_inference::<MnfDenseLayer<f64>>(&ckpt, &ds, kv, &cfg),
        ModelKind::Dnn => run_inference::<DenseLayer<f64>>(&ckpt, &ds, kv, &cfg),
    }
}

fn parse_edges(text: &str) -> Result<YBins, CliError> {
    let edges = text
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("y edge `{}` is not a number", t.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    YBins::new(edges).map_err(|e| CliError::usage(e.to_string()))
}

pub fn analyze_cmd(kv: &KeyValues) -> Result<(), CliError> {
    let mut cfg = AnalysisConfig::default();
    if let Some(t) = kv.raw("analysis.thresholds") {
        cfg.ladder = parse_thresholds(t).map_err(|e| CliError::usage(e.to_string()))?;
    }
    if let Some(t) = kv.raw("analysis.y_edges") {
        cfg.bins = parse_edges(t)?;
    }
    let out = path_of(kv, "out")?;
    let (head, records) = read_records(&path_of(kv, "records")?)?;
    let load = |key: &str| -> Result<Option<Vec<_>>, CliError> {
        match kv.raw(key) {
            Some(p) => Ok(Some(read_records(Path::new(p))?.1)),
            None => Ok(None),
        }
    };
    let baseline = load("baseline")?;
    let small = load("small")?;

    let mut prov = head.meta;
    prov.extend(&echo(kv));
    prov.extend(&cfg.to_kv());
    let report = analyze(&records, baseline.as_deref(), small.as_deref(), &cfg, prov)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let files = emit_report(&report, &out)?;
    for n in &report.notices {
        println!("notice: {n}");
    }
    println!("{} records analysed, {} files in {}", report.n_records, files.len(), out.display());
    Ok(())
}

pub fn selftest_cmd(corrupt_selu: bool, reco_events: u64) -> Result<(), CliError> {
    let report = selftest::run(&SelftestOptions {
        corrupt_selu,
        reco_events,
    });
    for c in &report.checks {
        println!("{c}");
    }
    let failed = report.failures();
    println!(
        "{} checks, {} failed, {:.1} s",
        report.checks.len(),
        failed.len(),
        report.seconds
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
        Err(CliError::new(Class::Selftest, format!("failed checks: {}", names.join(", "))))
    }
}
