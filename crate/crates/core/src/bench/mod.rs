//! CountA evaluation harness and the attention probes run on top of it.

mod cost;
mod counta;
mod probes;
pub mod report;


use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::layout::{assemble_icl, partition, BatchPartition, Demo, PromptLayout, PromptTemplate, Vocab};
use crate::model::{generate_with, Decoder, ForwardTrace, GenerateOptions, ModelWeights, TraceSpec};
use crate::numkernel::SeededRng;
use crate::parallel::par_map;

pub use cost::{cost_model, measure_cost, CostEstimate, MeasuredCost};
pub use counta::{count_a, gen_counta, CountATask, CANDIDATES, DEFAULT_LENGTHS};
pub use probes::{
    dispersion_sweep, padding_experiment, pca_probe, DispersionReport, PaddingReport, PaddingRow,
    PcaReport,
};

/// A model together with the prompt conventions it is evaluated under.
#[derive(Clone)]
pub struct Harness<'w> {
    pub weights: &'w ModelWeights,
    pub template: PromptTemplate,
    pub vocab: Vocab,
}

/// Attention shares at one attending token, indexed `[layer][head]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    /// Weight on demonstration rows.
    pub lambda: Vec<Vec<f64>>,
    /// Weight on final-query rows.
    pub query_mass: Vec<Vec<f64>>,
}

impl StepAttention {
    pub fn from_trace(trace: &ForwardTrace, layout: &PromptLayout, token: usize) -> Self {
        let mut out = Self::default();
        let labels = layout.labels();
        let query = layout.final_query();
        for rec in trace.attention.iter().filter(|r| r.position == token) {
            if out.lambda.len() <= rec.layer {
                out.lambda.resize(rec.layer + 1, Vec::new());
                out.query_mass.resize(rec.layer + 1, Vec::new());
            }
            let o = &rec.outcome;
            // Folding from +0.0 keeps an empty selection from reporting -0.0.
            let mass = |keep: &dyn Fn(usize) -> bool| -> f64 {
                o.rows
                    .iter()
                    .zip(&o.weights)
                    .filter(|(&r, _)| keep(r))
                    .fold(0.0, |acc, (_, w)| acc + w)
            };
            out.lambda[rec.layer].push(mass(&|r| labels[r].is_demo()));
            out.query_mass[rec.layer].push(mass(&|r| query.contains(&r)));
        }
        out
    }

    pub fn per_layer_lambda(&self) -> Vec<f64> {
        self.lambda.iter().map(|h| mean(h)).collect()
    }

    pub fn per_layer_query_mass(&self) -> Vec<f64> {
        self.query_mass.iter().map(|h| mean(h)).collect()
    }

    pub fn mean_lambda(&self) -> f64 {
        mean(&self.lambda.concat())
    }

    pub fn mean_query_mass(&self) -> f64 {
        mean(&self.query_mass.concat())
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// A decoder that has consumed every demonstration token of a prompt, ready to be forked
/// for each final query.
#[derive(Clone)]
pub struct EncodedDemos<'w> {
    cfg: AttentionConfig,
    decoder: Decoder<'w>,
}

impl<'w> Harness<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            template: PromptTemplate::default(),
            vocab: Vocab::default(),
        }
    }

    pub fn layout(&self, demos: &[Demo], query: &str) -> Result<PromptLayout> {
        assemble_icl(demos, query, &self.template, &self.vocab)
    }

    /// The attention actually run for a layout: hierarchical attention over zero
    /// demonstrations reduces to filtering at the same threshold.
    pub fn plan(
        &self,
        cfg: AttentionConfig,
        layout: &PromptLayout,
    ) -> Result<(AttentionConfig, Option<BatchPartition>)> {
        match cfg.batch_size() {
            Some(_) if layout.demo_count() == 0 => {
                Ok((AttentionConfig { variant: crate::attention::AttentionVariant::Filtering { p: cfg.threshold() }, ..cfg }, None))
            }
            Some(b) => Ok((cfg, Some(partition(layout, b)?))),
            None => Ok((cfg, None)),
        }
    }

    /// Encodes the demonstration part of `layout`.
    pub fn encode_demos(&self, cfg: AttentionConfig, layout: &PromptLayout) -> Result<EncodedDemos<'w>> {
        let (eff, part) = self.plan(cfg, layout)?;
        let spec = TraceSpec {
            logits_from: usize::MAX,
            ..TraceSpec::default()
        };
        let mut decoder = Decoder::new(self.weights, eff, spec)?;
        decoder.extend_to(layout, part.as_ref(), layout.query_start())?;
        Ok(EncodedDemos { cfg, decoder })
    }

    /// Continues `prefix` with `layout`, recording attention at the last prompt token, then
    /// generates an answer.
    pub fn answer(
        &self,
        prefix: &EncodedDemos<'w>,
        layout: &PromptLayout,
        options: GenerateOptions,
        rng: &mut SeededRng,
    ) -> Result<(String, StepAttention)> {
        let (_, part) = self.plan(prefix.cfg, layout)?;
        let last = layout.len() - 1;
        let mut dec = prefix.decoder.clone();
        dec.set_trace_spec(TraceSpec {
            attention_at: vec![last],
            logits_from: last,
            ..TraceSpec::default()
        });
        dec.extend(layout, part.as_ref())?;
        let attention = StepAttention::from_trace(dec.trace(), layout, last);
        let tokens = generate_with(dec, layout, part.as_ref(), options, rng)?;
        Ok((self.vocab.detokenize(&tokens), attention))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Demonstrations per prompt.
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub temperature: f64,
    pub max_new: usize,
    pub jobs: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 8,
            runs: 5,
            seed: 0,
            temperature: 0.0,
            max_new: 4,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub prediction: String,
    pub answer: usize,
    pub correct: bool,
    pub query_mass: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub demo_indices: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub mean_query_mass: f64,
    pub tasks: Vec<TaskOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub attention: AttentionConfig,
    pub n: usize,
    pub runs: Vec<RunResult>,
    pub mean_accuracy: f64,
}

/// Exact match after trimming surrounding whitespace.
pub fn is_correct(prediction: &str, answer: usize) -> bool {
    prediction.trim() == answer.to_string()
}

/// Expected accuracy of guessing every answer uniformly among the counts the candidates
/// allow.
pub fn uniform_answer_baseline(tasks: &[CountATask]) -> f64 {
    mean(&tasks
        .iter()
        .map(|t| 1.0 / (t.max_answer() + 1) as f64)
        .collect::<Vec<_>>())
}

fn check_inputs(tasks: &[CountATask], pool: &[CountATask]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no evaluation tasks".into()));
    }
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty demonstration pool".into()));
    }
    let seen: std::collections::HashSet<&CountATask> = pool.iter().collect();
    if tasks.iter().any(|t| seen.contains(t)) {
        return Err(Error::InvalidArgument(
            "demonstration pool overlaps the evaluation tasks".into(),
        ));
    }
    Ok(())
}

/// Demonstration indices for run `run`.
pub fn select_demos(seed: u64, run: usize, pool_len: usize, n: usize) -> Result<Vec<usize>> {
    if n > pool_len {
        return Err(Error::InsufficientDemos {
            needed: n,
            available: pool_len,
        });
    }
    Ok(SeededRng::derive(seed, &format!("eval/run{run}")).sample_indices(pool_len, n))
}

/// Runs every task under `cfg` for each of `opts.runs` seeded demonstration selections.
pub fn evaluate(
    h: &Harness<'_>,
    cfg: AttentionConfig,
    tasks: &[CountATask],
    pool: &[CountATask],
    opts: EvalOptions,
) -> Result<EvalReport> {
    evaluate_with(h, cfg, tasks, pool, opts, |d| d.to_vec())
}

/// [`evaluate`] with the selected demonstrations rewritten by `transform` before rendering.
pub fn evaluate_with(
    h: &Harness<'_>,
    cfg: AttentionConfig,
    tasks: &[CountATask],
    pool: &[CountATask],
    opts: EvalOptions,
    transform: impl Fn(&[Demo]) -> Vec<Demo> + Sync,
) -> Result<EvalReport> {
    check_inputs(tasks, pool)?;
    cfg.validate()?;
    if opts.runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let picks = (0..opts.runs)
        .map(|r| select_demos(opts.seed, r, pool.len(), opts.n))
        .collect::<Result<Vec<_>>>()?;
    let demos: Vec<Vec<Demo>> = picks
        .iter()
        .map(|idx| transform(&idx.iter().map(|&i| pool[i].demo()).collect::<Vec<_>>()))
        .collect();
    let prefixes = par_map(&demos, opts.jobs, |d| {
        let layout = h.layout(d, "")?;
        h.encode_demos(cfg, &layout)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let stop = h.vocab.token_of('\n')?;
    let cells: Vec<(usize, usize)> = (0..opts.runs)
        .flat_map(|r| (0..tasks.len()).map(move |t| (r, t)))
        .collect();
    let outcomes = par_map(&cells, opts.jobs, |&(r, t)| -> Result<TaskOutcome> {
        let task = &tasks[t];
        let layout = h.layout(&demos[r], &task.query())?;
        let mut rng = SeededRng::derive(opts.seed, &format!("eval/run{r}/task{t}"));
        let gen = GenerateOptions {
            temperature: opts.temperature,
            max_new: opts.max_new,
            stop: Some(stop),
        };
        let (prediction, attention) = h.answer(&prefixes[r], &layout, gen, &mut rng)?;
        Ok(TaskOutcome {
            correct: is_correct(&prediction, task.answer),
            prediction,
            answer: task.answer,
            query_mass: attention.mean_query_mass(),
            lambda: attention.mean_lambda(),
        })
    });
    let mut runs: Vec<RunResult> = picks
        .into_iter()
        .enumerate()
        .map(|(run, demo_indices)| RunResult {
            run,
            demo_indices,
            correct: 0,
            total: 0,
            accuracy: 0.0,
            mean_query_mass: 0.0,
            tasks: Vec::with_capacity(tasks.len()),
        })
        .collect();
    for (&(r, _), outcome) in cells.iter().zip(outcomes) {
        runs[r].tasks.push(outcome?);
    }
    for run in &mut runs {
        run.total = run.tasks.len();
        run.correct = run.tasks.iter().filter(|t| t.correct).count();
        run.accuracy = run.correct as f64 / run.total as f64;
        run.mean_query_mass = mean(&run.tasks.iter().map(|t| t.query_mass).collect::<Vec<_>>());
    }
    let mean_accuracy = mean(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(EvalReport {
        method: cfg.to_string(),
        attention: cfg,
        n: opts.n,
        runs,
        mean_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopReport {
    pub method: String,
    /// `(N, validation accuracy)` for every candidate count.
    pub validation: Vec<(usize, f64)>,
    pub chosen_n: usize,
    pub test: EvalReport,
}

/// Picks the demonstration count with the best validation accuracy under plain ICL (ties
/// toward fewer demonstrations) and reports test accuracy at that count.
pub fn evaluate_early_stop(
    h: &Harness<'_>,
    counts: &[usize],
    validation: &[CountATask],
    tasks: &[CountATask],
    pool: &[CountATask],
    opts: EvalOptions,
) -> Result<EarlyStopReport> {
    if counts.is_empty() {
        return Err(Error::InvalidArgument("no demonstration counts to sweep".into()));
    }
    check_inputs(validation, pool)?;
    let mut sweep = Vec::with_capacity(counts.len());
    for &n in counts {
        let report = evaluate(h, AttentionConfig::standard(), validation, pool, EvalOptions { n, ..opts })?;
        sweep.push((n, report.mean_accuracy));
    }
    let (chosen_n, _) = sweep
        .iter()
        .copied()
        .fold(sweep[0], |best, (n, acc)| {
            if acc > best.1 || (acc == best.1 && n < best.0) {
                (n, acc)
            } else {
                best
            }
        });
    let mut test = evaluate(h, AttentionConfig::standard(), tasks, pool, EvalOptions { n: chosen_n, ..opts })?;
    test.method = "EarlyStop".into();
    Ok(EarlyStopReport {
        method: "EarlyStop".into(),
        validation: sweep,
        chosen_n,
        test,
    })
}

/// Training prompts: each holds up to `max_demos` demonstrations and a final query whose
/// answer is appended as the response, followed by a newline. Each prompt starts at a
/// random position in `0..=max_offset` so that position embeddings beyond the prompt
/// length are trained too.
pub fn counta_corpus(
    h: &Harness<'_>,
    rng: &mut SeededRng,
    prompts: usize,
    max_demos: usize,
    lengths: std::ops::RangeInclusive<usize>,
    max_offset: usize,
) -> Result<Vec<PromptLayout>> {
    (0..prompts)
        .map(|_| {
            let k = rng.range_inclusive(0, max_demos);
            let tasks = gen_counta(rng, k + 1, lengths.clone())?;
            let demos: Vec<Demo> = tasks[..k].iter().map(CountATask::demo).collect();
            let last = &tasks[k];
            let layout = h.layout(&demos, &last.query())?;
            let response = h.vocab.tokenize(&format!(" {}\n", last.answer))?;
            let layout = layout.with_response(&response);
            let room = h.weights.config.max_positions.saturating_sub(layout.len());
            Ok(layout.shifted(rng.range_inclusive(0, max_offset.min(room))))
        })
        .collect()
}
