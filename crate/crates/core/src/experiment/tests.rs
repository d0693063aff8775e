use std::fs;

use proptest::prelude::*;

use super::artifacts::{validate_results, without_timestamp, Cell, ColumnKind, Table};
use super::chaos::{decade_correlations, pearson, STATUS_OK, STATUS_OVERFLOW};
use super::*;
use crate::revbuf::Ratio;

fn small(id: ExperimentId) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(id);
    c.dataset.source = DataSource::Synthetic;
    c.dataset.train = c.dataset.train.min(200);
    c.dataset.valid = 100;
    c.dataset.side = 4;
    c.dataset.classes = 4;
    c.training.iterations = 12;
    c.training.batch_size = if c.training.batch_size == 0 { 0 } else { 50 };
    c.model.hidden.truncate(1);
    c.meta.iterations = 3;
    c.meta.seeds = 2;
    c.meta.eval_seeds = 2;
    c.chaos.points = 12;
    c.memory.steps = 300;
    c.memory.elements = 8;
    c
}

fn config_err(text: &str) -> (String, String) {
    match ExperimentConfig::from_toml_str(text) {
        Err(Error::Config { path, message }) => (path, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn presets_validate_and_round_trip() {
    for id in ExperimentId::ALL {
        let c = ExperimentConfig::preset(id);
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.canonical()).unwrap();
        assert_eq!(back, c, "{id}");
        assert_eq!(back.hash(), c.hash());
        assert_eq!(id.as_str().parse::<ExperimentId>().unwrap(), id);
    }
}

#[test]
fn overrides_merge_onto_preset() {
    let c = ExperimentConfig::from_toml_str(
        "experiment = \"tied_reg\"\n[training]\niterations = 7\n[meta.adam]\nstep = 0.01\n",
    )
    .unwrap();
    let mut want = ExperimentConfig::preset(ExperimentId::TiedReg);
    want.training.iterations = 7;
    want.meta.adam.step = 0.01;
    assert_eq!(c, want);
    assert_ne!(c.hash(), ExperimentConfig::preset(ExperimentId::TiedReg).hash());
}

#[test]
fn config_errors_name_the_field() {
    assert_eq!(config_err("").0, "experiment");
    assert_eq!(config_err("experiment = \"nope\"").0, "experiment");
    assert_eq!(config_err("experiment = \"lr_schedule\"\n[training]\niterations = \"ten\"").0, "training.iterations");
    let (path, msg) = config_err("experiment = \"lr_schedule\"\n[training]\nalpah = 1.0");
    assert_eq!(path, "training.alpah");
    assert!(msg.contains("alpah"), "{msg}");
    assert_eq!(config_err("experiment = \"lr_schedule\"\n[training]\ngamma = 1.0").0, "training.gamma");
    assert_eq!(config_err("experiment = \"lr_schedule\"\n[meta]\noptimize = [\"alpha\", \"pixels\"]").0, "meta.optimize[1]");
    assert_eq!(config_err("experiment = \"memory_bench\"\n[memory]\ngammas = [\"3/2\"]").0, "memory.gammas[0]");
    assert_eq!(config_err("experiment = \"lr_schedule\"\n[chaos]\npoints = 1").0, "chaos.points");
}

#[test]
fn table_schema_rejects_bad_rows() {
    let mut t = Table::new("x.csv", vec![("a", ColumnKind::Int), ("b", ColumnKind::OptNum)]);
    t.push(vec![Cell::Int(1), Cell::Empty]);
    t.push(vec![Cell::Int(2), Cell::Num(0.5)]);
    assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\n1,\n2,0.5\n");
    let mut bad = t.clone();
    bad.push(vec![Cell::Int(3), Cell::Num(f64::NAN)]);
    assert!(matches!(bad.to_csv(), Err(Error::Schema { .. })));
    let mut short = t.clone();
    short.push(vec![Cell::Int(3)]);
    assert!(short.validate().is_err());
    let mut typed = t;
    typed.push(vec![Cell::Text("3".into()), Cell::Empty]);
    assert!(typed.validate().is_err());
}

#[test]
fn results_schema_catches_missing_and_mismatched_fields() {
    let c = small(ExperimentId::MemoryBench);
    let (results, _) = execute(&c).unwrap();
    let doc = serde_json::to_value(&results).unwrap();
    validate_results(&doc).unwrap();
    let mut missing = doc.clone();
    missing.as_object_mut().unwrap().remove("timestamp");
    assert!(validate_results(&missing).is_err());
    let mut kind = doc.clone();
    kind["analysis"]["kind"] = "lr_schedule".into();
    assert!(validate_results(&kind).is_err());
    let mut hash = doc;
    hash["config_hash"] = "xyz".into();
    assert!(validate_results(&hash).is_err());
}

#[test]
fn timestamp_is_the_only_stripped_line() {
    let text = "{\n  \"a\": 1,\n  \"timestamp\": 123,\n  \"b\": 2\n}";
    assert_eq!(without_timestamp(text), "{\n  \"a\": 1,\n  \"b\": 2\n}");
}

#[test]
fn memory_bench_rates() {
    let half = bench_memory(Ratio::new(1, 2).unwrap(), 500, 10, 3, 32).unwrap();
    assert!((half.measured_bits - 1.0).abs() < 0.02, "{}", half.measured_bits);
    assert!(half.reversed_exactly);
    let unit = bench_memory(Ratio::ONE, 200, 10, 3, 32).unwrap();
    assert_eq!(unit.measured_bits, 0.0);
    assert_eq!(unit.ratio_vs_32bit, None);
    assert!(unit.reversed_exactly);
    assert!(bench_memory(Ratio::ONE, 0, 10, 3, 32).is_err());
}

#[test]
fn pearson_matches_hand_values() {
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    // Centred x = (-1, 0, 1), y = (1, -2, 1): zero covariance.
    assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, -2.0, 1.0]).unwrap(), 0.0);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), None);
}

fn chaos_model() -> Classifier {
    let data = synthetic_classification(0, 60, 6, 3, 3.0).unwrap();
    Classifier::new(vec![6, 8, 3], InputSource::Fixed(data), Objective::Training).unwrap()
}

#[test]
fn chaos_small_alpha_limit_and_gradient() {
    let model = chaos_model();
    let spec = RunSpec { batch_size: 20, frac_bits: 40 };
    let tiny = chaos_sweep(&model, 10, 0.9, ((1e-12f64).ln(), (1e-10f64).ln()), 3, 0, spec).unwrap();
    let theta = model.default_theta();
    let w1 = crate::models::init_weights(model.init_scales(&theta), model.param_layout(), 0).unwrap();
    let initial = model.meta_objective(&w1, &theta).unwrap().value;
    for r in &tiny {
        assert!((r.final_loss.unwrap() - initial).abs() < 1e-8);
    }
    let rows = chaos_sweep(&model, 10, 0.9, ((1e-4f64).ln(), (1e-1f64).ln()), 31, 0, spec).unwrap();
    assert!(rows.iter().all(|r| r.status == STATUS_OK));
    // Away from chaos the reported slope tracks the loss curve.
    let (bottom, _) = decade_correlations(&rows);
    assert!(bottom.unwrap() > 0.99, "{bottom:?}");
    for w in rows.windows(2) {
        assert!(w[1].final_loss.unwrap() < w[0].final_loss.unwrap());
    }
}

#[test]
fn chaos_overflow_becomes_sentinel_rows() {
    let model = chaos_model();
    // 56 fractional bits leave a range of +-128.
    let spec = RunSpec { batch_size: 20, frac_bits: 56 };
    let rows = chaos_sweep(&model, 10, 0.9, (0.0, (1e9f64).ln()), 6, 0, spec).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].status, STATUS_OK);
    let last = rows.last().unwrap();
    assert_eq!(last.status, STATUS_OVERFLOW);
    assert_eq!((last.final_loss, last.dloss_dalpha), (None, None));
}

#[test]
fn schedule_shape_windows() {
    let alphas: Vec<Vec<f64>> = (0..20).map(|t| vec![t as f64, t as f64]).collect();
    let (last, middle) = schedule_shape(&alphas);
    assert_eq!(last, 18.5);
    assert_eq!(middle, 9.5);
}

#[test]
fn every_experiment_writes_valid_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for id in ExperimentId::ALL {
        let c = small(id);
        let out = dir.path().join(id.as_str());
        let report = run_in(&c, &out).unwrap();
        assert_eq!(report.results.experiment, id);
        let text = fs::read_to_string(out.join(RESULTS_FILE)).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        validate_results(&doc).unwrap();
        let names: Vec<String> =
            report.files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        let expected: &[&str] = match id {
            ExperimentId::MemoryBench => &["results.json", "memory.csv"],
            ExperimentId::ChaosSweep => &["results.json", "chaos.csv"],
            ExperimentId::PerParamReg => &["results.json", "schedules.csv", "meta_curve.csv", "penalties.csv"],
            ExperimentId::LearnData => &["results.json", "schedules.csv", "meta_curve.csv", "pixels.csv"],
            _ => &["results.json", "schedules.csv", "meta_curve.csv"],
        };
        assert_eq!(names, expected, "{id}");
        if let Some(meta) = &report.results.meta {
            assert_eq!(meta.curve.len(), c.meta.iterations);
        }
    }
}

#[test]
fn penalty_grid_matches_weight_layout() {
    let c = small(ExperimentId::PerParamReg);
    let (results, tables) = execute(&c).unwrap();
    let grid = tables.iter().find(|t| t.file == "penalties.csv").unwrap();
    let side = c.dataset.side;
    assert_eq!(grid.rows.len(), c.dataset.classes * side * side);
    let penalties = &results.hypers[PENALTIES];
    // Row for class 1, pixel (row 2, col 3).
    let pixel = 2 * side + 3;
    let row = grid.rows.iter().find(|r| r[0] == Cell::Int(1) && r[1] == Cell::Int(2) && r[2] == Cell::Int(3)).unwrap();
    assert_eq!(row[3], Cell::Num(penalties[pixel * c.dataset.classes + 1]));
}

#[test]
fn learned_data_beats_blank_images() {
    let mut c = small(ExperimentId::LearnData);
    c.dataset.classes = 10;
    c.dataset.side = 5;
    c.training.iterations = 30;
    c.meta.iterations = 15;
    let (results, tables) = execute(&c).unwrap();
    match results.analysis {
        Analysis::LearnData { blank_valid_loss, learned_valid_loss } => {
            assert!(learned_valid_loss < blank_valid_loss, "{learned_valid_loss} vs {blank_valid_loss}");
        }
        other => panic!("{other:?}"),
    }
    let pixels = tables.iter().find(|t| t.file == "pixels.csv").unwrap();
    assert_eq!(pixels.rows.len(), 10 * 25);
    assert!(pixels.rows.iter().any(|r| matches!(r[4], Cell::Num(x) if x < 0.0)));
}

#[test]
fn reruns_are_identical_apart_from_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    for id in [ExperimentId::LrSchedule, ExperimentId::TiedReg, ExperimentId::ChaosSweep] {
        let c = small(id);
        let read = || {
            run_in(&c, dir.path()).unwrap();
            without_timestamp(&fs::read_to_string(dir.path().join(RESULTS_FILE)).unwrap())
        };
        assert_eq!(read(), read(), "{id}");
    }
}

#[test]
fn explicit_mnist_without_files_is_a_config_error() {
    // REVLEARN_DATA_DIR is not set for the test process unless the user
    // points it at real data; skip in that case.
    if crate::data::mnist_paths().is_some() {
        return;
    }
    let mut c = small(ExperimentId::LrSchedule);
    c.dataset.source = DataSource::Mnist;
    match load_data(&c) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "dataset.source"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn canonical_form_round_trips(
        which in 0usize..7,
        iterations in 1usize..500,
        alpha in 1e-4f64..10.0,
        gamma in 0.01f64..0.99,
        seed in 0u64..(1u64 << 62),
        hidden in proptest::collection::vec(1usize..64, 0..4),
    ) {
        let mut c = ExperimentConfig::preset(ExperimentId::ALL[which]);
        c.training.iterations = iterations;
        c.training.alpha = alpha;
        c.training.gamma = gamma;
        c.dataset.seed = seed;
        c.model.hidden = hidden;
        let text = c.canonical();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.canonical(), text);
    }
}
