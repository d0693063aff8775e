//! Desk-scale experiments driven by a config file, writing JSON and CSV
//! artifacts.

pub mod artifacts;
pub mod chaos;
pub mod config;
pub mod memory;
pub mod verify;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub use artifacts::{Analysis, Results, RESULTS_FILE};
pub use chaos::chaos_sweep;
pub use config::{DataSource, ExperimentConfig, ExperimentId, ObjectiveKind, Target};
pub use memory::bench_memory;

use artifacts::{
    Cell, ColumnKind, CurvePoint, DatasetSummary, InitScaleRow, MetaSummary, ScheduleSummary, Table,
};
use crate::data::{load_idx, mnist_paths, synthetic_classification, Dataset};
use crate::error::{Error, Result};
use crate::meta::{meta_optimize, MetaConfig, MetaOutcome, PhiLayout, PhiMask, RunSpec};
use crate::models::{
    Classifier, InputSource, Model, MultiTask, Objective, Regularizer, INIT_SCALES, PENALTIES, PIXELS, TYING,
};

/// Evaluation seeds start here, well clear of training seeds.
pub const EVAL_SEED_BASE: u64 = 1_000_000;

/// Datasets an experiment trains and validates on.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// One entry per task; single-task experiments use `train[0]`.
    pub train: Vec<Dataset>,
    pub valid: Vec<Dataset>,
    /// Images are `side x side`.
    pub side: usize,
    pub summary: DatasetSummary,
}

/// Loads MNIST from `REVLEARN_DATA_DIR` or generates synthetic clusters.
pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let spec = &config.dataset;
    let tasks = if config.experiment == ExperimentId::TiedReg { spec.tasks } else { 1 };
    let (use_mnist, fallback) = match spec.source {
        DataSource::Synthetic => (false, false),
        DataSource::Mnist => {
            if mnist_paths().is_none() {
                return Err(Error::config(
                    "dataset.source",
                    "MNIST requested but the IDX files are not in REVLEARN_DATA_DIR",
                ));
            }
            (true, false)
        }
        DataSource::Auto => {
            let found = mnist_paths().is_some();
            (found, !found)
        }
    };
    let (train, valid, side) = if use_mnist {
        let (images, labels) = mnist_paths().expect("checked above");
        let all = load_idx(&images, &labels)?;
        if all.classes() != spec.classes {
            return Err(Error::config(
                "dataset.classes",
                format!("MNIST has {} classes, config says {}", all.classes(), spec.classes),
            ));
        }
        let need = tasks * (spec.train + spec.valid);
        if need > all.len() {
            return Err(Error::config("dataset.train", format!("need {need} examples, MNIST file has {}", all.len())));
        }
        let mut rest = all;
        let (mut train, mut valid) = (Vec::new(), Vec::new());
        for _ in 0..tasks {
            let (tr, r) = rest.split(spec.train);
            let (va, r) = r.split(spec.valid);
            train.push(tr);
            valid.push(va);
            rest = r;
        }
        (train, valid, (rest.features() as f64).sqrt() as usize)
    } else {
        let features = spec.side * spec.side;
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for task in 0..tasks as u64 {
            let seed = spec.seed.wrapping_add(2 * task);
            train.push(synthetic_classification(seed, spec.train.max(spec.classes), features, spec.classes, spec.separation)?);
            valid.push(synthetic_classification(seed + 1, spec.valid.max(spec.classes), features, spec.classes, spec.separation)?);
        }
        (train, valid, spec.side)
    };
    let summary = DatasetSummary {
        source: if use_mnist { "mnist" } else { "synthetic" }.to_string(),
        fallback,
        features: train[0].features(),
        classes: spec.classes,
        train: train[0].len(),
        valid: valid[0].len(),
        tasks,
    };
    Ok(ExperimentData { train, valid, side, summary })
}

/// The summary and files of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub results: Results,
    pub files: Vec<PathBuf>,
}

/// Runs `config` and writes artifacts to its `output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    run_in(config, &config.output_dir)
}

/// Runs `config` and writes artifacts to `dir`.
pub fn run_in(config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let (mut results, tables) = execute(config)?;
    results.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let files = artifacts::write_all(dir, &results, &tables)?;
    Ok(RunReport { results, files })
}

fn blank_results(config: &ExperimentConfig, analysis: Analysis) -> Results {
    Results {
        experiment: config.experiment,
        config_hash: config.hash_hex(),
        timestamp: 0,
        config: config.clone(),
        dataset: None,
        meta: None,
        schedules: None,
        hypers: BTreeMap::new(),
        analysis,
    }
}

fn meta_config(config: &ExperimentConfig) -> MetaConfig {
    let m = &config.meta;
    let eval_start = EVAL_SEED_BASE + m.base_seed;
    MetaConfig {
        iterations: m.iterations,
        seeds_per_iteration: m.seeds,
        base_seed: m.base_seed,
        eval_seeds: (eval_start..eval_start + m.eval_seeds as u64).collect(),
        spec: run_spec(config),
        adam: m.adam,
        early_stop_factor: m.early_stop_factor,
    }
}

fn run_spec(config: &ExperimentConfig) -> RunSpec {
    let bs = config.training.batch_size;
    RunSpec { batch_size: if bs == 0 { usize::MAX } else { bs }, frac_bits: config.training.frac_bits }
}

fn mask_for<M: Model + ?Sized>(model: &M, layout: &PhiLayout, targets: &[Target]) -> Result<PhiMask> {
    let mut mask = PhiMask::none(layout);
    let theta0 = layout.theta_range().start;
    for target in targets {
        let block_name = match target {
            Target::Alpha => {
                mask = mask.enable(layout.alpha_range());
                continue;
            }
            Target::Gamma => {
                mask = mask.enable(layout.gamma_range());
                continue;
            }
            Target::InitScales => INIT_SCALES,
            Target::Penalties => PENALTIES,
            Target::Pixels => PIXELS,
            Target::Tying => TYING,
        };
        let block = model
            .hyper_layout()
            .block(block_name)
            .ok_or_else(|| Error::config("meta.optimize", format!("model has no `{block_name}` block")))?;
        mask = mask.enable(theta0 + block.offset..theta0 + block.offset + block.len);
    }
    Ok(mask)
}

struct MetaRun {
    layout: PhiLayout,
    outcome: MetaOutcome,
}

fn optimize<M: Model + ?Sized>(config: &ExperimentConfig, model: &M) -> Result<MetaRun> {
    let layout = PhiLayout::for_model(model, config.training.iterations);
    let phi0 = layout.initial(config.training.alpha, config.training.gamma, &model.default_theta())?;
    let mask = mask_for(model, &layout, &config.meta.optimize)?;
    let outcome = meta_optimize(model, &layout, phi0, &mask, &meta_config(config))?;
    Ok(MetaRun { layout, outcome })
}

/// Fills the shared result sections and the schedule and curve tables.
fn record_meta<M: Model + ?Sized>(results: &mut Results, tables: &mut Vec<Table>, model: &M, run: &MetaRun) {
    let out = &run.outcome;
    results.meta = Some(MetaSummary {
        initial_meta_loss: out.initial_meta_loss,
        final_meta_loss: out.final_meta_loss,
        stop: out.stop.clone(),
        curve: out
            .curve
            .iter()
            .map(|r| CurvePoint {
                meta_iter: r.meta_iter,
                elementary_final_loss: r.elementary_final_loss,
                hypergrad_norm: r.hypergrad_norm,
            })
            .collect(),
    });
    let groups: Vec<String> = model.param_layout().groups().iter().map(|g| g.name.clone()).collect();
    results.schedules = Some(ScheduleSummary {
        groups: groups.clone(),
        alphas: out.schedules.alphas.clone(),
        gammas: out.schedules.gammas.clone(),
    });
    for block in model.hyper_layout().blocks() {
        results.hypers.insert(block.name.clone(), out.schedules.theta[block.offset..block.offset + block.len].to_vec());
    }

    let mut sched = Table::new(
        "schedules.csv",
        vec![
            ("t", ColumnKind::Int),
            ("group", ColumnKind::Text),
            ("alpha", ColumnKind::Num),
            ("gamma", ColumnKind::Num),
            ("gamma_ratio", ColumnKind::Text),
        ],
    );
    for (t, (alphas, gammas)) in out.schedules.alphas.iter().zip(&out.schedules.gammas).enumerate() {
        for ((name, &a), g) in groups.iter().zip(alphas).zip(gammas) {
            sched.push(vec![
                Cell::Int(t as i64),
                Cell::Text(name.clone()),
                Cell::Num(a),
                Cell::Num(g.to_f64()),
                Cell::Text(g.to_string()),
            ]);
        }
    }
    let mut curve = Table::new(
        "meta_curve.csv",
        vec![
            ("meta_iter", ColumnKind::Int),
            ("elementary_final_loss", ColumnKind::Num),
            ("hypergrad_norm", ColumnKind::Num),
        ],
    );
    for r in &out.curve {
        curve.push(vec![Cell::Int(r.meta_iter as i64), Cell::Num(r.elementary_final_loss), Cell::Num(r.hypergrad_norm)]);
    }
    tables.push(sched);
    tables.push(curve);
}

fn sizes(config: &ExperimentConfig, features: usize) -> Vec<usize> {
    let mut s = vec![features];
    s.extend(&config.model.hidden);
    s.push(config.dataset.classes);
    s
}

fn objective(config: &ExperimentConfig, data: &ExperimentData) -> Objective {
    match config.training.objective {
        ObjectiveKind::Training => Objective::Training,
        ObjectiveKind::Validation => Objective::Validation(data.valid[0].clone()),
    }
}

/// Mean of `alphas[t][*]` over `t` in `range`.
fn mean_alpha(alphas: &[Vec<f64>], range: std::ops::Range<usize>) -> f64 {
    let rows = &alphas[range];
    let n: usize = rows.iter().map(Vec::len).sum();
    rows.iter().flatten().sum::<f64>() / n.max(1) as f64
}

/// `(mean alpha over the last 10% of t, mean over the middle 50%)`.
pub fn schedule_shape(alphas: &[Vec<f64>]) -> (f64, f64) {
    let t = alphas.len();
    let last_start = (t * 9 / 10).min(t.saturating_sub(1));
    (mean_alpha(alphas, last_start..t), mean_alpha(alphas, t / 4..(3 * t / 4).max(t / 4 + 1)))
}

fn execute(config: &ExperimentConfig) -> Result<(Results, Vec<Table>)> {
    let mut tables = Vec::new();
    if config.experiment == ExperimentId::MemoryBench {
        let m = &config.memory;
        let rows = m
            .gammas
            .iter()
            .map(|&g| bench_memory(g, m.steps, m.elements, m.seed, config.training.frac_bits))
            .collect::<Result<Vec<_>>>()?;
        let mut table = Table::new(
            "memory.csv",
            vec![
                ("gamma", ColumnKind::Text),
                ("steps", ColumnKind::Int),
                ("elements", ColumnKind::Int),
                ("theoretical_bits", ColumnKind::Num),
                ("measured_bits", ColumnKind::Num),
                ("ratio_vs_32bit", ColumnKind::OptNum),
                ("reversed_exactly", ColumnKind::Text),
            ],
        );
        for r in &rows {
            table.push(vec![
                Cell::Text(r.gamma.to_string()),
                Cell::Int(r.steps as i64),
                Cell::Int(r.elements as i64),
                Cell::Num(r.theoretical_bits),
                Cell::Num(r.measured_bits),
                r.ratio_vs_32bit.map_or(Cell::Empty, Cell::Num),
                Cell::Text(r.reversed_exactly.to_string()),
            ]);
        }
        tables.push(table);
        return Ok((blank_results(config, Analysis::MemoryBench { rows }), tables));
    }

    let data = load_data(config)?;
    let features = data.summary.features;
    let mut results = match config.experiment {
        ExperimentId::LrSchedule | ExperimentId::InitScales => {
            let model = Classifier::new(
                sizes(config, features),
                InputSource::Fixed(data.train[0].clone()),
                objective(config, &data),
            )?;
            let run = optimize(config, &model)?;
            let analysis = if config.experiment == ExperimentId::LrSchedule {
                let (last, middle) = schedule_shape(&run.outcome.schedules.alphas);
                Analysis::LrSchedule { mean_alpha_last_10pct: last, mean_alpha_middle_50pct: middle }
            } else {
                let learned = model.init_scales(&run.outcome.schedules.theta);
                let theta0 = model.default_theta();
                let heuristic = model.init_scales(&theta0);
                let scales = model
                    .param_layout()
                    .groups()
                    .iter()
                    .zip(learned.iter().zip(heuristic))
                    .map(|(g, (l, h))| InitScaleRow { group: g.name.clone(), learned: l.exp(), heuristic: h.exp() })
                    .collect();
                Analysis::InitScales { scales }
            };
            let mut results = blank_results(config, analysis);
            record_meta(&mut results, &mut tables, &model, &run);
            results
        }
        ExperimentId::PerParamReg => {
            let model = Classifier::new(
                sizes(config, features),
                InputSource::Fixed(data.train[0].clone()),
                objective(config, &data),
            )?
            .with_regularizer(Regularizer::PerParamL2)
            .with_default_log_l2(config.model.init_log_l2);
            let run = optimize(config, &model)?;
            let error_at = |phi: &[f64]| -> Result<f64> {
                let sched = crate::meta::transform(phi, &run.layout)?;
                let seed = EVAL_SEED_BASE + config.meta.base_seed;
                let w = trained_weights(&model, &sched, seed, run_spec(config))?;
                Ok(model.error_rate(&w, &data.valid[0]))
            };
            let phi0 = run.layout.initial(config.training.alpha, config.training.gamma, &model.default_theta())?;
            let analysis = Analysis::PerParamReg {
                initial_valid_error: error_at(&phi0)?,
                final_valid_error: error_at(&run.outcome.phi)?,
            };
            let mut results = blank_results(config, analysis);
            record_meta(&mut results, &mut tables, &model, &run);
            tables.push(penalty_grid(&model, &run.outcome.schedules.theta, data.side, config.dataset.classes));
            results
        }
        ExperimentId::LearnData => {
            let k = config.dataset.classes;
            let model = Classifier::new(
                sizes(config, features),
                InputSource::Learned { labels: (0..k).collect(), features },
                Objective::Validation(data.valid[0].clone()),
            )?;
            let run = optimize(config, &model)?;
            let analysis = Analysis::LearnData {
                blank_valid_loss: run.outcome.initial_meta_loss,
                learned_valid_loss: run.outcome.final_meta_loss,
            };
            let mut results = blank_results(config, analysis);
            record_meta(&mut results, &mut tables, &model, &run);
            tables.push(pixel_grid(&model, &run.outcome.schedules.theta, data.side, k));
            results
        }
        ExperimentId::TiedReg => {
            let model = MultiTask::new(sizes(config, features), data.train.clone(), data.valid.clone())?
                .with_default_log_tying(config.model.init_log_tying);
            let run = optimize(config, &model)?;
            let analysis = Analysis::TiedReg {
                initial_tying: model.tying_matrices(&model.default_theta()),
                final_tying: model.tying_matrices(&run.outcome.schedules.theta),
            };
            let mut results = blank_results(config, analysis);
            record_meta(&mut results, &mut tables, &model, &run);
            results
        }
        ExperimentId::ChaosSweep => {
            let model = Classifier::new(
                sizes(config, features),
                InputSource::Fixed(data.train[0].clone()),
                objective(config, &data),
            )?;
            let c = &config.chaos;
            let spec = run_spec(config);
            let rows = chaos_sweep(
                &model,
                config.training.iterations,
                config.training.gamma,
                (c.log_alpha_min, c.log_alpha_max),
                c.points,
                c.seed,
                spec,
            )?;
            let initial_loss = {
                let theta = model.default_theta();
                let w1 = crate::models::init_weights(model.init_scales(&theta), model.param_layout(), c.seed)?;
                model.meta_objective(&w1, &theta)?.value
            };
            let (bottom, top) = chaos::decade_correlations(&rows);
            let mut table = Table::new(
                "chaos.csv",
                vec![
                    ("log_alpha", ColumnKind::Num),
                    ("alpha", ColumnKind::Num),
                    ("final_loss", ColumnKind::OptNum),
                    ("dloss_dalpha", ColumnKind::OptNum),
                    ("status", ColumnKind::Text),
                ],
            );
            for r in &rows {
                table.push(vec![
                    Cell::Num(r.log_alpha),
                    Cell::Num(r.alpha),
                    r.final_loss.map_or(Cell::Empty, Cell::Num),
                    r.dloss_dalpha.map_or(Cell::Empty, Cell::Num),
                    Cell::Text(r.status.clone()),
                ]);
            }
            tables.push(table);
            blank_results(
                config,
                Analysis::ChaosSweep {
                    points: rows.len(),
                    sentinel_rows: rows.iter().filter(|r| r.final_loss.is_none()).count(),
                    initial_loss,
                    correlation_bottom_decade: bottom,
                    correlation_top_decade: top,
                },
            )
        }
        ExperimentId::MemoryBench => unreachable!("handled above"),
    };
    results.dataset = Some(data.summary);
    Ok((results, tables))
}

/// Final weights of one forward run.
fn trained_weights<M: Model + ?Sized>(
    model: &M,
    sched: &crate::train::Schedules,
    seed: u64,
    spec: RunSpec,
) -> Result<Vec<f64>> {
    let batches = spec.batches(seed, model.train_len(), sched.iterations())?;
    let w1 = crate::models::init_weights(model.init_scales(&sched.theta), model.param_layout(), seed)?;
    let mut state = crate::train::TrainState::new(&w1, spec.frac_bits)?;
    crate::train::sgd_forward(
        &mut state,
        sched,
        &crate::models::Batched { model, batches: &batches },
        model.param_layout(),
    )?;
    Ok(state.w.dequantize())
}

/// First-layer log penalties laid out as images, one per class.
fn penalty_grid(model: &Classifier, theta: &[f64], side: usize, classes: usize) -> Table {
    let block = model.hyper_layout().block(PENALTIES).expect("per-parameter model");
    let first = block.offset + model.first_weight_offset();
    let mut table = Table::new(
        "penalties.csv",
        vec![("class", ColumnKind::Int), ("row", ColumnKind::Int), ("col", ColumnKind::Int), ("log_penalty", ColumnKind::Num)],
    );
    for class in 0..classes {
        for pixel in 0..side * side {
            table.push(vec![
                Cell::Int(class as i64),
                Cell::Int((pixel / side) as i64),
                Cell::Int((pixel % side) as i64),
                Cell::Num(theta[first + pixel * classes + class]),
            ]);
        }
    }
    table
}

fn pixel_grid(model: &Classifier, theta: &[f64], side: usize, examples: usize) -> Table {
    let block = model.hyper_layout().block(PIXELS).expect("learned-input model");
    let mut table = Table::new(
        "pixels.csv",
        vec![
            ("example", ColumnKind::Int),
            ("label", ColumnKind::Int),
            ("row", ColumnKind::Int),
            ("col", ColumnKind::Int),
            ("value", ColumnKind::Num),
        ],
    );
    for ex in 0..examples {
        for pixel in 0..side * side {
            table.push(vec![
                Cell::Int(ex as i64),
                Cell::Int(ex as i64),
                Cell::Int((pixel / side) as i64),
                Cell::Int((pixel % side) as i64),
                Cell::Num(theta[block.offset + ex * side * side + pixel]),
            ]);
        }
    }
    table
}


#[cfg(test)]
mod tests;
