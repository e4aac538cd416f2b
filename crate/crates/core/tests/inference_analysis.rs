use std::sync::OnceLock;

use eluq_core::analysis::{binned_rms, median, uncertainty_cut, weighted_average, Source, YBins};
use eluq_core::checkpoint::Checkpoint;
use eluq_core::dataset::Dataset;
use eluq_core::generator::{generate, GeneratorConfig};
use eluq_core::inference::{predict_dataset, sample_posterior, InferenceConfig, PredictionRecord};
use eluq_core::kinematics::Method;
use eluq_core::mnf::{MnfConfig, MnfDenseLayer};
use eluq_core::model::{EluqNetwork, Topology};
use eluq_core::rng::stream;
use eluq_core::trainer::{fit, untrained, TrainConfig, TrainingData};
use proptest::prelude::*;

type Model = Checkpoint<f64, MnfDenseLayer<f64>>;

struct Fixture {
    ds: Dataset,
    usable: Vec<usize>,
    trained: Model,
    fresh: Model,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let config = GeneratorConfig {
            seed: 31,
            ..GeneratorConfig::default()
        };
        let events = generate(&config, 20_000).unwrap();
        let ds = Dataset { config, events };
        let usable: Vec<usize> = (0..ds.events.len()).filter(|&i| ds.events[i].usable()).collect();
        let data = TrainingData::from_dataset(&ds).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 256,
            initial_lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let net = || EluqNetwork::eluq(Topology::compact(), MnfConfig::default(), &mut stream(2, "init", 0)).unwrap();
        let trained = fit(net(), &data, &cfg).unwrap().checkpoint;
        let fresh = untrained(net(), &data, &cfg);
        Fixture {
            ds,
            usable,
            trained,
            fresh,
        }
    })
}

/// Test-split events of the fixture, as dataset indices.
fn test_events(n: usize) -> Vec<usize> {
    let f = fixture();
    f.trained.split.test.iter().take(n).map(|&k| f.usable[k]).collect()
}

fn records(model: &Model, idx: &[usize], n_samples: usize, seed: u64) -> Vec<PredictionRecord> {
    let cfg = InferenceConfig {
        n_samples,
        batch_size: 100,
        seed,
    };
    predict_dataset(model, &fixture().ds, idx, &cfg).unwrap()
}

#[test]
fn total_width_adds_in_quadrature() {
    let recs = records(&fixture().trained, &test_events(300), 50, 1);
    for r in &recs {
        for j in 0..3 {
            let want = r.sigma_ale[j].powi(2) + r.sigma_epi[j].powi(2);
            assert!((r.sigma_tot[j].powi(2) - want).abs() <= 1e-12 * want, "{r:?}");
            assert!(r.sigma_ale[j] > 0.0 && r.sigma_epi[j] > 0.0);
        }
    }
}

#[test]
fn epistemic_width_converges_in_sample_count() {
    let idx = test_events(400);
    let n = 200;
    let a = records(&fixture().trained, &idx, n, 3);
    let b = records(&fixture().trained, &idx, 2 * n, 4);
    for j in 0..3 {
        let col = |r: &[PredictionRecord]| median(&r.iter().map(|r| r.sigma_epi[j] / r.pred[j]).collect::<Vec<_>>()).unwrap();
        let (ma, mb) = (col(&a), col(&b));
        assert!((ma - mb).abs() < 5.0 * ma / (n as f64).sqrt(), "{j}: {ma} vs {mb}");
    }
}

#[test]
fn few_samples_agree_with_many_within_their_error() {
    let f = fixture();
    let event = test_events(1);
    let features = f.ds.events[event[0]].features.to_array();
    let run = |n, seed| {
        let cfg = InferenceConfig {
            n_samples: n,
            batch_size: 1,
            seed,
        };
        sample_posterior(&f.trained, &features, &cfg).unwrap()[0]
    };
    let many = run(10_000, 5);
    for seed in 0..5 {
        let few = run(10, 100 + seed);
        for j in 0..3 {
            let tol = 4.0 * many.sigma_epi[j] / 10f64.sqrt();
            assert!((few.pred[j] - many.pred[j]).abs() < tol, "{j}: {} vs {}", few.pred[j], many.pred[j]);
        }
    }
}

#[test]
fn training_reduces_epistemic_width() {
    let f = fixture();
    let idx = test_events(500);
    let trained = records(&f.trained, &idx, 30, 7);
    let fresh = records(&f.fresh, &idx, 30, 7);
    for j in 0..3 {
        let med = |r: &[PredictionRecord]| median(&r.iter().map(|r| r.sigma_epi[j] / r.pred[j].abs()).collect::<Vec<_>>()).unwrap();
        assert!(med(&fresh) > med(&trained), "{j}: {} vs {}", med(&fresh), med(&trained));
    }
}

#[test]
fn electron_x_resolution_degrades_at_low_y() {
    let f = fixture();
    let recs = records(&f.trained, &f.usable[..5000], 2, 0);
    let [x, _, _] = binned_rms(&recs, &YBins::default(), Source::Method(Method::Electron)).unwrap();
    let first = x.rows.first().unwrap().rms.unwrap();
    let last = x.rows.last().unwrap().rms.unwrap();
    assert!(first > last, "{first} vs {last}");
}

fn synthetic(seed: u64, n: usize) -> Vec<PredictionRecord> {
    let mut rng = stream(seed, "records", 0);
    (0..n)
        .map(|i| {
            use rand::Rng;
            let truth = [rng.gen_range(1e-4..0.5), rng.gen_range(1.0..1e4), rng.gen_range(0.01..0.8)];
            let pred = truth.map(|t| t * rng.gen_range(0.7..1.3));
            let sigma_tot = pred.map(|p| p * rng.gen_range(0.001..1.0));
            PredictionRecord {
                event: i as u64,
                truth,
                pred,
                sigma_ale: sigma_tot,
                sigma_epi: [0.0; 3],
                sigma_tot,
                methods: [pred; 3],
                flags: 0,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn equal_weights_give_the_plain_mean(vals in prop::collection::vec(-1e3f64..1e3, 1..200), s in 1e-3f64..1e3) {
        let w = weighted_average(&vals, &vec![s; vals.len()]).unwrap();
        let plain = vals.iter().sum::<f64>() / vals.len() as f64;
        let scale = vals.iter().map(|v| v.abs()).fold(1.0, f64::max);
        prop_assert!((w.mean - plain).abs() <= 1e-12 * scale);
        prop_assert!((w.event_level() / s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_matches_naive_sum(pairs in prop::collection::vec((-10.0f64..10.0, 0.01f64..5.0), 1..300)) {
        let (vals, sig): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let w = weighted_average(&vals, &sig).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (v, s) in vals.iter().zip(&sig) {
            num += v / (s * s);
            den += 1.0 / (s * s);
        }
        prop_assert!((w.mean - num / den).abs() <= 1e-10 * (1.0 + (num / den).abs()));
        prop_assert!((w.sigma - den.sqrt().recip()).abs() <= 1e-12 * w.sigma);
    }

    /// Rejected fractions per bin never grow as the threshold loosens.
    #[test]
    fn cuts_are_monotone(seed in any::<u64>()) {
        let recs = synthetic(seed, 400);
        let bins = YBins::default();
        let ladder: Vec<f64> = (0..10).map(|k| 1e-3 * 2f64.powi(k)).collect();
        let mut prev: Option<Vec<usize>> = None;
        for t in ladder {
            let out = uncertainty_cut(&recs, [t; 3], &bins).unwrap();
            let rejected: Vec<usize> = out.bins.iter().map(|b| b.rejected).collect();
            if let Some(p) = &prev {
                prop_assert!(rejected.iter().zip(p).all(|(a, b)| a <= b));
            }
            prev = Some(rejected);
        }
        let open = uncertainty_cut(&recs, [f64::INFINITY; 3], &bins).unwrap();
        prop_assert!(open.bins.iter().all(|b| b.total == 0 || b.fraction() == Some(0.0)));
        let shut = uncertainty_cut(&recs, [f64::MIN_POSITIVE; 3], &bins).unwrap();
        prop_assert!(shut.bins.iter().all(|b| b.total == 0 || b.fraction() == Some(1.0)));
    }
}
