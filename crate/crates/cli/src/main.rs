mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use focusicl::attention::{AttentionConfig, CombineMode};
use focusicl::bench::report::Report;
use focusicl::bench::{
    cost_model, counta_corpus, dispersion_sweep, evaluate, evaluate_early_stop, gen_counta,
    measure_cost, padding_experiment, pca_probe, CountATask, EvalOptions, Harness,
};
use focusicl::hypersearch::{build_ppl_table, select_hyperparameters, ModelPpl, PplTable, SearchOptions};
use focusicl::model::{train_toy, write_atomic, ModelConfig, ModelWeights, Optimizer, TrainOptions};
use focusicl::numkernel::SeededRng;

use args::{
    AttentionArgs, Cli, Combine, Command, CostArgs, DispersionArgs, EvalArgs, Format, OptimizerArg,
    OutputArgs, PadArgs, PcaArgs, Probe, SearchArgs, TrainArgs, Variant, WeightsArgs,
};

enum Failure {
    /// Bad or inconsistent arguments.
    Usage(String),
    Runtime(focusicl::Error),
}

impl From<focusicl::Error> for Failure {
    fn from(e: focusicl::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let jobs = cli.jobs.max(1);
    let result = match &cli.command {
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed, jobs),
        Command::Search(a) => search(a, seed, jobs),
        Command::Probe(Probe::Dispersion(a)) => dispersion(a, seed),
        Command::Probe(Probe::Pad(a)) => pad(a, seed, jobs),
        Command::Probe(Probe::Pca(a)) => pca(a, seed),
        Command::Probe(Probe::Cost(a)) => cost(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn attention_config(a: &AttentionArgs) -> Result<AttentionConfig, Failure> {
    let mut cfg = match a.variant {
        Variant::Icl | Variant::Linear => {
            if a.p.is_some() || a.batch_size.is_some() {
                return usage("--p and --batch-size only apply to --variant filtering or focusicl");
            }
            if a.variant == Variant::Icl {
                AttentionConfig::standard()
            } else {
                AttentionConfig::linear()
            }
        }
        Variant::Filtering => {
            if a.batch_size.is_some() {
                return usage("--batch-size only applies to --variant focusicl");
            }
            let Some(p) = a.p else {
                return usage("--variant filtering needs --p");
            };
            AttentionConfig::filtering(p)
        }
        Variant::Focusicl => {
            let (Some(p), Some(b)) = (a.p, a.batch_size) else {
                return usage("--variant focusicl needs --p and --batch-size");
            };
            AttentionConfig::hierarchical(p, b)
        }
    };
    if a.combine == Combine::Demo && a.variant != Variant::Focusicl {
        return usage("--combine only applies to --variant focusicl");
    }
    cfg.combine = match a.combine {
        Combine::All => CombineMode::AllScores,
        Combine::Demo => CombineMode::DemoOnly,
    };
    cfg.scale_scores = a.scale_scores;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_weights(path: &Path, config: Option<&Path>) -> Result<ModelWeights, Failure> {
    if !path.is_file() {
        return usage(format!("weights file {} does not exist", path.display()));
    }
    let expected = match config {
        Some(c) => Some(load_config(c)?),
        None => None,
    };
    Ok(ModelWeights::load(path, expected.as_ref())?)
}

fn load_config(path: &Path) -> Result<ModelConfig, Failure> {
    if !path.is_file() {
        return usage(format!("model config {} does not exist", path.display()));
    }
    Ok(ModelConfig::load(path)?)
}

fn weights(a: &WeightsArgs) -> Result<ModelWeights, Failure> {
    load_weights(&a.weights, a.model_config.as_deref())
}

fn emit<C: Serialize, D: Serialize, R: Serialize>(
    out: &OutputArgs,
    report: &Report<C, D>,
    rows: &[R],
) -> Outcome {
    let text = match out.format {
        Format::Json => report.to_json()?,
        Format::Csv => report.to_csv(rows)?,
    };
    match &out.out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn positive(name: &str, value: usize) -> Outcome {
    if value == 0 {
        return usage(format!("--{name} must be at least 1"));
    }
    Ok(())
}

/// Evaluation tasks and a disjoint demonstration pool.
fn tasks_and_pool(seed: u64, prefix: &str, tasks: usize, pool: usize) -> Result<(Vec<CountATask>, Vec<CountATask>), Failure> {
    let lengths = focusicl::bench::DEFAULT_LENGTHS;
    let t = gen_counta(&mut SeededRng::derive(seed, &format!("{prefix}/tasks")), tasks, lengths.clone())?;
    let p = gen_counta(&mut SeededRng::derive(seed, &format!("{prefix}/pool")), pool, lengths)?;
    let p = p.into_iter().filter(|x| !t.contains(x)).collect();
    Ok((t, p))
}

#[derive(Serialize)]
struct TrainSummary {
    parameters: usize,
    steps: usize,
    first_loss: Option<f64>,
    last_loss: Option<f64>,
    first_smoothed: Option<f64>,
    last_smoothed: Option<f64>,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
    smoothed: f64,
}

const LOSS_WINDOW: usize = 20;

fn train(a: &TrainArgs, seed: u64) -> Outcome {
    positive("batch", a.batch)?;
    positive("prompts", a.prompts)?;
    if a.min_len == 0 || a.min_len > a.max_len {
        return usage("candidate lengths need 1 <= --min-len <= --max-len");
    }
    if !(a.lr > 0.0) || !(a.clip > 0.0) {
        return usage("--lr and --clip must be positive");
    }
    let config = match &a.model_config {
        Some(path) => ModelConfig {
            seed,
            ..load_config(path)?
        },
        None => ModelConfig {
            seed,
            ..ModelConfig::default()
        },
    };
    let init = ModelWeights::init(&config)?;
    let h = Harness::new(&init);
    let corpus = counta_corpus(
        &h,
        &mut SeededRng::derive(seed, "train/corpus"),
        a.prompts,
        a.max_demos,
        a.min_len..=a.max_len,
        a.max_offset,
    )?;
    let options = TrainOptions {
        steps: a.steps,
        learning_rate: a.lr,
        batch: a.batch,
        clip_norm: a.clip,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        },
    };
    let (trained, report) = train_toy(&init, &corpus, options, &mut SeededRng::derive(seed, "train/order"))?;
    trained.save(&a.out)?;
    let smoothed = report.smoothed(LOSS_WINDOW);
    if let Some(path) = &a.loss_out {
        let rows: Vec<LossRow> = report
            .losses
            .iter()
            .zip(&smoothed)
            .enumerate()
            .map(|(step, (&loss, &smoothed))| LossRow { step, loss, smoothed })
            .collect();
        Report::new("train", seed, a, ()).write_csv(path, &rows)?;
    }
    let summary = TrainSummary {
        parameters: trained.param_count(),
        steps: a.steps,
        first_loss: report.losses.first().copied(),
        last_loss: report.losses.last().copied(),
        first_smoothed: smoothed.first().copied(),
        last_smoothed: smoothed.last().copied(),
    };
    match (summary.first_loss, summary.last_smoothed) {
        (Some(first), Some(last)) => println!(
            "trained {} parameters for {} steps: loss {first:.4} -> {last:.4} (moving average over {LOSS_WINDOW})",
            summary.parameters, summary.steps
        ),
        _ => println!("wrote initial weights ({} parameters)", summary.parameters),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    method: &'a str,
    n: usize,
    run: usize,
    correct: usize,
    total: usize,
    accuracy: f64,
    mean_query_mass: f64,
}

fn eval(a: &EvalArgs, seed: u64, jobs: usize) -> Outcome {
    let cfg = attention_config(&a.attention)?;
    positive("runs", a.runs)?;
    positive("tasks", a.tasks)?;
    if !(a.temperature >= 0.0) {
        return usage("--temperature must be >= 0");
    }
    if a.early_stop.is_some() && a.attention.variant != Variant::Icl {
        return usage("--early-stop sweeps plain ICL; drop --variant");
    }
    let w = weights(&a.model)?;
    let h = Harness::new(&w);
    let (tasks, pool) = tasks_and_pool(seed, "eval", a.tasks, a.pool)?;
    let opts = EvalOptions {
        n: a.n,
        runs: a.runs,
        seed,
        temperature: a.temperature,
        max_new: 4,
        jobs,
    };
    let rows_of = |r: &focusicl::bench::EvalReport| -> Vec<(String, usize, focusicl::bench::RunResult)> {
        r.runs.iter().map(|x| (r.method.clone(), r.n, x.clone())).collect()
    };
    let (rows, text_report): (Vec<_>, Report<&EvalArgs, serde_json::Value>) = match &a.early_stop {
        Some(counts) => {
            let validation = gen_counta(
                &mut SeededRng::derive(seed, "eval/validation"),
                a.validation,
                focusicl::bench::DEFAULT_LENGTHS,
            )?;
            let validation: Vec<_> = validation.into_iter().filter(|v| !pool.contains(v)).collect();
            let r = evaluate_early_stop(&h, counts, &validation, &tasks, &pool, opts)?;
            (rows_of(&r.test), Report::new("eval", seed, a, serde_json::to_value(&r).map_err(focusicl::Error::from)?))
        }
        None => {
            let r = evaluate(&h, cfg, &tasks, &pool, opts)?;
            (rows_of(&r), Report::new("eval", seed, a, serde_json::to_value(&r).map_err(focusicl::Error::from)?))
        }
    };
    let csv_rows: Vec<EvalRow> = rows
        .iter()
        .map(|(method, n, r)| EvalRow {
            method,
            n: *n,
            run: r.run,
            correct: r.correct,
            total: r.total,
            accuracy: r.accuracy,
            mean_query_mass: r.mean_query_mass,
        })
        .collect();
    emit(&a.output, &text_report, &csv_rows)
}

#[derive(Serialize)]
struct SearchRow {
    p: f64,
    i: usize,
    raw: f64,
    smoothed: f64,
    trend: Option<f64>,
}

fn search(a: &SearchArgs, seed: u64, jobs: usize) -> Outcome {
    let table = match (&a.mock_table, &a.weights) {
        (Some(path), _) => {
            if !path.is_file() {
                return usage(format!("table file {} does not exist", path.display()));
            }
            let text = std::fs::read_to_string(path).map_err(focusicl::Error::from)?;
            let t: PplTable = serde_json::from_str(&text).map_err(focusicl::Error::from)?;
            PplTable::new(t.candidates, t.values, t.runs)?
        }
        (None, Some(path)) => {
            positive("runs", a.runs)?;
            if a.candidates.iter().any(|p| !(0.0..1.0).contains(p)) {
                return usage("--candidates must lie in [0, 1)");
            }
            let w = load_weights(path, a.model_config.as_deref())?;
            let h = Harness::new(&w);
            let source = ModelPpl {
                weights: &w,
                template: &h.template,
                vocab: &h.vocab,
            };
            let demos: Vec<_> = gen_counta(
                &mut SeededRng::derive(seed, "search/pool"),
                a.pool,
                focusicl::bench::DEFAULT_LENGTHS,
            )?
            .iter()
            .map(CountATask::demo)
            .collect();
            let opts = SearchOptions {
                n: a.n,
                runs: a.runs,
                seed,
                jobs,
            };
            build_ppl_table(&a.candidates, &source, &demos, opts)?
        }
        (None, None) => return usage("search needs --weights or --mock-table"),
    };
    let result = select_hyperparameters(&table)?;
    let mut rows = Vec::new();
    for (c, &p) in result.candidates.iter().enumerate() {
        for i in 0..result.raw[c].len() {
            rows.push(SearchRow {
                p,
                i,
                raw: result.raw[c][i],
                smoothed: result.smoothed[c][i],
                trend: result.trend[c][i],
            });
        }
    }
    emit(&a.output, &Report::new("search", seed, a, &result), &rows)
}

#[derive(Serialize)]
struct DispersionRow {
    n: usize,
    lambda: f64,
    query_mass: f64,
}

fn probe_inputs(seed: u64, pool: usize) -> Result<(CountATask, Vec<CountATask>), Failure> {
    let (tasks, pool) = tasks_and_pool(seed, "probe", 1, pool)?;
    Ok((tasks[0].clone(), pool))
}

fn dispersion(a: &DispersionArgs, seed: u64) -> Outcome {
    let cfg = attention_config(&a.attention)?;
    if a.n.windows(2).any(|w| w[0] > w[1]) {
        return usage("--n must be ascending");
    }
    let w = weights(&a.model)?;
    let h = Harness::new(&w);
    let max = a.n.last().copied().unwrap_or(0);
    let (task, pool) = probe_inputs(seed, max.max(1))?;
    let reports = dispersion_sweep(&h, &task, &pool, &a.n, cfg)?;
    let rows: Vec<DispersionRow> = reports
        .iter()
        .map(|r| DispersionRow {
            n: r.n,
            lambda: r.mean_lambda,
            query_mass: r.mean_query_mass,
        })
        .collect();
    emit(&a.output, &Report::new("probe dispersion", seed, a, &reports), &rows)
}

fn pad(a: &PadArgs, seed: u64, jobs: usize) -> Outcome {
    let cfg = attention_config(&a.attention)?;
    if !a.spaces.contains(&0) {
        return usage("--spaces must include 0");
    }
    positive("runs", a.runs)?;
    positive("tasks", a.tasks)?;
    let w = weights(&a.model)?;
    let h = Harness::new(&w);
    let (tasks, pool) = tasks_and_pool(seed, "pad", a.tasks, a.pool)?;
    let opts = EvalOptions {
        n: a.n,
        runs: a.runs,
        seed,
        jobs,
        ..EvalOptions::default()
    };
    let report = padding_experiment(&h, cfg, &tasks, &pool, &a.spaces, opts)?;
    if !report.monotone {
        eprintln!("warning: query attention mass is not strictly decreasing in the number of spaces");
    }
    emit(&a.output, &Report::new("probe pad", seed, a, &report), &report.rows)
}

#[derive(Serialize)]
struct PcaRow {
    n: usize,
    pc1: f64,
    pc2: f64,
}

fn pca(a: &PcaArgs, seed: u64) -> Outcome {
    let cfg = attention_config(&a.attention)?;
    if a.n.len() < 3 {
        return usage("--n needs at least three demonstration counts");
    }
    if a.n.windows(2).any(|w| w[0] > w[1]) {
        return usage("--n must be ascending");
    }
    let w = weights(&a.model)?;
    let h = Harness::new(&w);
    let max = a.n.last().copied().unwrap_or(0);
    let (task, pool) = probe_inputs(seed, max.max(1))?;
    let report = pca_probe(&h, &task, &pool, &a.n, cfg)?;
    let rows: Vec<PcaRow> = report
        .n_values
        .iter()
        .zip(&report.coordinates)
        .map(|(&n, c)| PcaRow { n, pc1: c[0], pc2: c[1] })
        .collect();
    emit(&a.output, &Report::new("probe pca", seed, a, &report), &rows)
}

#[derive(Serialize)]
struct CostRow {
    n: usize,
    b: usize,
    l: f64,
    icl: f64,
    focusicl: f64,
    ratio: f64,
    measured_icl: Option<u64>,
    measured_focusicl: Option<u64>,
    measured_ratio: Option<f64>,
}

#[derive(Serialize)]
struct CostData {
    estimate: focusicl::bench::CostEstimate,
    measured: Option<focusicl::bench::MeasuredCost>,
}

/// Demonstrations whose token counts are all equal: fixed-length candidates and a
/// single-digit answer.
fn equal_length_demos(seed: u64, n: usize) -> Result<Vec<focusicl::layout::Demo>, Failure> {
    let mut rng = SeededRng::derive(seed, "cost/demos");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let task = gen_counta(&mut rng, 1, 5..=5)?.remove(0);
        if task.answer < 10 {
            out.push(task.demo());
        }
    }
    Ok(out)
}

fn cost(a: &CostArgs, seed: u64) -> Outcome {
    let estimate = cost_model(a.n, a.b, a.l).map_err(|e| Failure::Usage(e.to_string()))?;
    let measured = match &a.weights {
        Some(path) => {
            let w = load_weights(path, None)?;
            let h = Harness::new(&w);
            Some(measure_cost(&h, &equal_length_demos(seed, a.n)?, a.b)?)
        }
        None => None,
    };
    let row = CostRow {
        n: a.n,
        b: a.b,
        l: a.l,
        icl: estimate.icl,
        focusicl: estimate.focusicl,
        ratio: estimate.ratio,
        measured_icl: measured.as_ref().map(|m| m.icl.demo_demo_macs),
        measured_focusicl: measured.as_ref().map(|m| m.focusicl.demo_demo_macs),
        measured_ratio: measured.as_ref().map(|m| m.ratio),
    };
    let data = CostData { estimate, measured };
    emit(&a.output, &Report::new("probe cost", seed, a, &data), &[row])
}
