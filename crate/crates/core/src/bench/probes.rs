use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::layout::{pad_with_spaces, Demo, PromptLayout};
use crate::model::{Decoder, ForwardTrace, TraceSpec};
use crate::numkernel::pca_top2;

use super::{evaluate_with, mean, CountATask, EvalOptions, Harness, StepAttention};

/// Attention at the first generation step for one demonstration count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub n: usize,
    pub per_layer_lambda: Vec<f64>,
    pub per_layer_query_mass: Vec<f64>,
    pub mean_lambda: f64,
    pub mean_query_mass: f64,
    /// Per layer and head.
    pub step: StepAttention,
}

/// Runs the final query after each prefix `demos[..n]` for `n` in `n_values`, sharing the
/// encoded demonstrations between counts, and hands each trace to `visit`.
fn nested_sweep(
    h: &Harness<'_>,
    demos: &[Demo],
    query: &str,
    n_values: &[usize],
    cfg: AttentionConfig,
    spec_for: impl Fn(&PromptLayout) -> TraceSpec,
    mut visit: impl FnMut(usize, &PromptLayout, &ForwardTrace) -> Result<()>,
) -> Result<()> {
    if n_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("demonstration counts must be ascending".into()));
    }
    if let Some(&max) = n_values.last() {
        if max > demos.len() {
            return Err(Error::InsufficientDemos {
                needed: max,
                available: demos.len(),
            });
        }
    }
    let quiet = TraceSpec {
        logits_from: usize::MAX,
        ..TraceSpec::default()
    };
    let mut shared: Option<Decoder<'_>> = None;
    for &n in n_values {
        let layout = h.layout(&demos[..n], query)?;
        let (eff, part) = h.plan(cfg, &layout)?;
        let dec = if n == 0 {
            Decoder::new(h.weights, eff, quiet.clone())?
        } else {
            let dec = match shared.as_mut() {
                Some(d) => d,
                None => shared.insert(Decoder::new(h.weights, eff, quiet.clone())?),
            };
            dec.extend_to(&layout, part.as_ref(), layout.query_start())?;
            dec.clone()
        };
        let mut dec = dec;
        dec.set_trace_spec(spec_for(&layout));
        dec.extend(&layout, part.as_ref())?;
        visit(n, &layout, dec.trace())?;
    }
    Ok(())
}

/// Attention on demonstrations and on the final query at the first generation step, for
/// prefix-nested demonstration counts.
pub fn dispersion_sweep(
    h: &Harness<'_>,
    task: &CountATask,
    pool: &[CountATask],
    n_values: &[usize],
    cfg: AttentionConfig,
) -> Result<Vec<DispersionReport>> {
    let demos: Vec<Demo> = pool.iter().map(CountATask::demo).collect();
    let mut out = Vec::with_capacity(n_values.len());
    nested_sweep(
        h,
        &demos,
        &task.query(),
        n_values,
        cfg,
        |l| TraceSpec {
            attention_at: vec![l.len() - 1],
            logits_from: usize::MAX,
            ..TraceSpec::default()
        },
        |n, layout, trace| {
            let step = StepAttention::from_trace(trace, layout, layout.len() - 1);
            out.push(DispersionReport {
                n,
                per_layer_lambda: step.per_layer_lambda(),
                per_layer_query_mass: step.per_layer_query_mass(),
                mean_lambda: step.mean_lambda(),
                mean_query_mass: step.mean_query_mass(),
                step,
            });
            Ok(())
        },
    )?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddingRow {
    pub spaces: usize,
    pub accuracy: f64,
    pub query_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddingReport {
    pub n: usize,
    pub rows: Vec<PaddingRow>,
    /// Query mass strictly decreases as spaces are added.
    pub monotone: bool,
}

/// Evaluates with `k` spaces appended to every demonstration for each `k`, keeping the
/// demonstration selection fixed across `k`.
pub fn padding_experiment(
    h: &Harness<'_>,
    cfg: AttentionConfig,
    tasks: &[CountATask],
    pool: &[CountATask],
    space_counts: &[usize],
    opts: EvalOptions,
) -> Result<PaddingReport> {
    if !space_counts.contains(&0) {
        return Err(Error::InvalidArgument("space counts must include 0".into()));
    }
    let mut rows = Vec::with_capacity(space_counts.len());
    for &k in space_counts {
        let report = evaluate_with(h, cfg, tasks, pool, opts, |d| pad_with_spaces(d, k))?;
        let mass: Vec<f64> = report.runs.iter().map(|r| r.mean_query_mass).collect();
        rows.push(PaddingRow {
            spaces: k,
            accuracy: report.mean_accuracy,
            query_mass: mean(&mass),
        });
    }
    let mut sorted = rows.clone();
    sorted.sort_by_key(|r| r.spaces);
    let monotone = sorted.windows(2).all(|w| w[1].query_mass < w[0].query_mass);
    Ok(PaddingReport {
        n: opts.n,
        rows,
        monotone,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaReport {
    pub layer: usize,
    pub n_values: Vec<usize>,
    pub coordinates: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
}

/// Penultimate-layer hidden state of the last prompt token for each demonstration count,
/// projected on the top two principal components of all of them.
pub fn pca_probe(
    h: &Harness<'_>,
    task: &CountATask,
    pool: &[CountATask],
    n_values: &[usize],
    cfg: AttentionConfig,
) -> Result<PcaReport> {
    if n_values.len() < 3 {
        return Err(Error::InvalidArgument("the PCA probe needs at least 3 demonstration counts".into()));
    }
    let layers = h.weights.config.n_layers;
    if layers < 2 {
        return Err(Error::InvalidArgument("the PCA probe needs at least two layers".into()));
    }
    let layer = layers - 2;
    let demos: Vec<Demo> = pool.iter().map(CountATask::demo).collect();
    let mut states = Vec::with_capacity(n_values.len());
    nested_sweep(
        h,
        &demos,
        &task.query(),
        n_values,
        cfg,
        |l| TraceSpec {
            hidden_at: vec![(layer, l.len() - 1)],
            logits_from: usize::MAX,
            ..TraceSpec::default()
        },
        |_, layout, trace| {
            let state = trace
                .hidden_for(layer, layout.len() - 1)
                .ok_or_else(|| Error::InvalidArgument("hidden state was not recorded".into()))?;
            states.push(state.to_vec());
            Ok(())
        },
    )?;
    if states.windows(2).all(|w| w[0] == w[1]) {
        // Every prompt produced the same state: all projections coincide at the origin.
        return Ok(PcaReport {
            layer,
            n_values: n_values.to_vec(),
            coordinates: vec![[0.0; 2]; states.len()],
            eigenvalues: [0.0; 2],
        });
    }
    let pca = pca_top2(&states)?;
    Ok(PcaReport {
        layer,
        n_values: n_values.to_vec(),
        coordinates: pca.coordinates,
        eigenvalues: pca.eigenvalues,
    })
}
