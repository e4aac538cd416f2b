use std::path::Path;
use std::process::{Command, Output};

fn eluq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eluq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header_of(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    let end = bytes.windows(10).position(|w| w == b"end_header").expect("header end");
    String::from_utf8(bytes[..end].to_vec()).unwrap()
}

fn generate(dir: &Path, out: &str, events: &str, seed: &str) {
    let o = eluq(dir, &["generate", "--events", events, "--seed", seed, "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn generate_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "a.bin", "3000", "7");
    generate(d.path(), "b.bin", "3000", "7");
    generate(d.path(), "c.bin", "3000", "8");
    let read = |n: &str| std::fs::read(d.path().join(n)).unwrap();
    assert_eq!(read("a.bin"), read("b.bin"));
    assert_ne!(read("a.bin"), read("c.bin"));
    assert_eq!(read("a.bin.cfg"), read("b.bin.cfg"));
}

#[test]
fn zero_events_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["generate", "--events", "0", "--out", "z.bin"]);
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("z.bin").exists());
}

#[test]
fn unknown_flag_and_bad_value_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&eluq(d.path(), &["generate", "--evnts", "5", "--out", "z.bin"])), 2);
    let o = eluq(d.path(), &["generate", "--events", "5", "--rad.p_isr", "lots", "--out", "z.bin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("rad.p_isr"), "{}", stderr(&o));
    std::fs::write(d.path().join("g.cfg"), "events = 5\nsmear.e_stok = 0.1\n").unwrap();
    let o = eluq(d.path(), &["generate", "--config", "g.cfg", "--out", "z.bin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("smear.e_stok"));
}

#[test]
fn header_lists_canonical_columns_and_provenance() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "h.bin", "10", "1");
    let head = header_of(&d.path().join("h.bin"));
    let cols = head.lines().find_map(|l| l.strip_prefix("columns = ")).unwrap();
    let names: Vec<&str> = cols.split(',').collect();
    assert_eq!(names.len(), 18);
    assert_eq!(
        &names[..15],
        eluq_core::kinematics::FEATURE_NAMES.as_slice(),
    );
    assert!(head.contains("code_version = "));
    assert!(head.contains("seed = 1"));
}

#[test]
fn missing_dataset_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["train", "--data", "nope.bin", "--out", "c.ck"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_echoes_defaults() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["train", "--data", "nope.bin", "--out", "c.ck"]);
    let s = stdout(&o);
    for line in [
        "train.lr = 0.0005",
        "train.batch_size = 1024",
        "train.decay_factor = 0.1",
        "train.decay_step = 50",
    ] {
        assert!(s.contains(line), "missing `{line}` in\n{s}");
    }
}

#[test]
fn divergence_exits_4_and_keeps_last_good() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "d.bin", "3000", "2");
    let o = eluq(
        d.path(),
        &["train", "--data", "d.bin", "--out", "c.ck", "--topology", "15:8:4:3", "--batch-size", "128", "--lr", "1e30"],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(d.path().join("c.ck").exists());
    assert!(d.path().join("c.ck.log.csv").exists());
    // the kept state still loads and predicts
    let o = eluq(
        d.path(),
        &["infer", "--checkpoint", "c.ck", "--data", "d.bin", "--out", "r.rec", "--samples", "2"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

/// generate -> train (both models) -> infer -> analyze on a tiny problem.
#[test]
fn pipeline_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    generate(p, "d.bin", "4000", "3");
    let small = ["--topology", "15:16,16:8:3", "--epochs", "2", "--batch-size", "256", "--seed", "5"];
    for (model, out) in [("eluq", "e.ck"), ("dnn", "n.ck")] {
        let mut args = vec!["train", "--data", "d.bin", "--out", out, "--model", model];
        args.extend(small);
        let o = eluq(p, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let log = std::fs::read_to_string(p.join(format!("{out}.log.csv"))).unwrap();
        assert!(log.contains(&format!("# model = {model}")));
        assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    let infer = |ck: &str, out: &str, extra: &[&str]| {
        let mut args = vec!["infer", "--checkpoint", ck, "--data", "d.bin", "--out", out, "--seed", "11"];
        args.extend(extra);
        let o = eluq(p, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("events/s"));
        assert!(stdout(&o).contains("samples/s"));
    };
    infer("e.ck", "e.rec", &["--samples", "2"]);
    infer("e.ck", "e2.rec", &["--samples", "2"]);
    infer("e.ck", "e3.rec", &["--samples", "20", "--batch", "50"]);
    infer("n.ck", "n.rec", &[]);
    assert_eq!(std::fs::read(p.join("e.rec")).unwrap(), std::fs::read(p.join("e2.rec")).unwrap());
    let head = header_of(&p.join("e3.rec"));
    for k in ["infer.samples = 20", "infer.batch = 50", "model = eluq", "gen.law = ", "train.lr = ", "code_version = "] {
        assert!(head.contains(k), "{k} missing from\n{head}");
    }

    let o = eluq(
        p,
        &["analyze", "--records", "e3.rec", "--baseline", "n.rec", "--out", "rep", "--thresholds", "0.5,0.2,0.1,0.05"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("no second record set"));
    let notices = std::fs::read_to_string(p.join("rep/notices.txt")).unwrap();
    assert!(notices.contains("nested-training epistemic closure skipped"));
    let cuts = std::fs::read_to_string(p.join("rep/cuts.csv")).unwrap();
    for t in ["0.5", "0.2", "0.1", "0.05"] {
        assert!(cuts.lines().any(|l| l.starts_with(t) || l.contains(&format!(",{t},"))), "{t} missing in cuts");
    }
    let closure = std::fs::read_to_string(p.join("rep/closure_aleatoric.csv")).unwrap();
    assert!(closure.contains("# infer.samples = 20"));

    let o = eluq(p, &["analyze", "--records", "e3.rec", "--out", "rep2", "--small", "e.rec"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = eluq(p, &["analyze", "--records", "e3.rec", "--out", "rep3", "--small", "e.rec"]);
    assert_eq!(code(&again), 0);
    for f in ["resolution.csv", "cuts.csv", "epistemic_summary.csv"] {
        assert_eq!(
            std::fs::read(p.join("rep2").join(f)).unwrap(),
            std::fs::read(p.join("rep3").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_thresholds_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    for t in ["0.5,zero", "0.5,-0.1", ""] {
        let o = eluq(d.path(), &["analyze", "--records", "r.rec", "--out", "o", "--thresholds", t]);
        assert_eq!(code(&o), 2, "`{t}`: {}", stderr(&o));
    }
}

#[test]
fn missing_records_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["analyze", "--records", "r.rec", "--out", "o"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn infer_rejects_non_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "d.bin", "10", "1");
    let o = eluq(d.path(), &["infer", "--checkpoint", "d.bin", "--data", "d.bin", "--out", "r.rec"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn selftest_passes_and_reports_each_check() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["selftest", "--reco-events", "500"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let s = stdout(&o);
    let checks: Vec<&str> = s.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(checks.len() > 30);
    assert!(checks.iter().all(|l| l.contains("error") && l.contains("tol")));
}

#[test]
fn corrupted_selu_fails_selftest() {
    let d = tempfile::tempdir().unwrap();
    let o = eluq(d.path(), &["selftest", "--reco-events", "100", "--corrupt-selu"]);
    assert_eq!(code(&o), 5);
    let s = stdout(&o);
    assert!(s.lines().any(|l| l.starts_with("FAIL") && l.contains("selu")), "{s}");
}
