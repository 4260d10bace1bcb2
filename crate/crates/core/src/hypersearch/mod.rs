//! Perplexity-driven search for the filtering threshold `p` and batch size `B`.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::layout::{assemble_icl, Demo, PromptTemplate, Vocab};
use crate::model::{response_perplexities, ModelWeights};
use crate::numkernel::SeededRng;
use crate::parallel::par_map;


pub const DEFAULT_CANDIDATES: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const DEFAULT_RUNS: usize = 5;

/// Source of response perplexities for an ordered demonstration list.
///
/// Entry `j` of the result is the perplexity of `demos[j].response` with `demos[..j]` as
/// context, under triviality filtering at threshold `p`.
pub trait PplSource: Sync {
    fn response_ppls(&self, demos: &[Demo], p: f64) -> Result<Vec<f64>>;
}

/// The toy model scored through a flat filtering-only prompt.
pub struct ModelPpl<'a> {
    pub weights: &'a ModelWeights,
    pub template: &'a PromptTemplate,
    pub vocab: &'a Vocab,
}

impl PplSource for ModelPpl<'_> {
    fn response_ppls(&self, demos: &[Demo], p: f64) -> Result<Vec<f64>> {
        // The final query is empty; later tokens never influence earlier perplexities.
        let layout = assemble_icl(demos, "", self.template, self.vocab)?;
        response_perplexities(self.weights, &layout, AttentionConfig::filtering(p))
    }
}

/// `values[c][i]`: perplexity accumulated over runs for candidate `c` at `i` preceding
/// demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplTable {
    pub candidates: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub runs: usize,
}

impl PplTable {
    pub fn new(candidates: Vec<f64>, values: Vec<Vec<f64>>, runs: usize) -> Result<Self> {
        if candidates.is_empty() || candidates.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} candidates but {} table rows",
                candidates.len(),
                values.len()
            )));
        }
        let n = values[0].len();
        if values.iter().any(|row| row.len() != n) {
            return Err(Error::Shape("table rows differ in length".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "perplexity table entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            candidates,
            values,
            runs,
        })
    }

    pub fn demo_count(&self) -> usize {
        self.values[0].len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SearchOptions {
    pub n: usize,
    pub runs: usize,
    pub seed: u64,
    pub jobs: usize,
}

/// Fills the perplexity table: for every candidate and run, a fresh random selection of
/// `n` demonstrations is scored once and each response's perplexity is added at its index.
pub fn build_ppl_table(
    candidates: &[f64],
    source: &dyn PplSource,
    demo_set: &[Demo],
    opts: SearchOptions,
) -> Result<PplTable> {
    if opts.runs == 0 || opts.n == 0 {
        return Err(Error::InvalidArgument("runs and N must be at least 1".into()));
    }
    if demo_set.len() < opts.n {
        return Err(Error::InsufficientDemos {
            needed: opts.n,
            available: demo_set.len(),
        });
    }
    let cells: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..opts.runs).map(move |r| (c, r)))
        .collect();
    let rows = par_map(&cells, opts.jobs, |&(c, r)| -> Result<Vec<f64>> {
        let mut rng = SeededRng::derive(opts.seed, &format!("hypersearch/{c}/{r}"));
        let picked: Vec<Demo> = rng
            .sample_indices(demo_set.len(), opts.n)
            .into_iter()
            .map(|i| demo_set[i].clone())
            .collect();
        let ppls = source.response_ppls(&picked, candidates[c])?;
        if ppls.len() != opts.n {
            return Err(Error::Shape(format!(
                "perplexity source returned {} values for {} demonstrations",
                ppls.len(),
                opts.n
            )));
        }
        Ok(ppls)
    });
    let mut values = vec![vec![0.0; opts.n]; candidates.len()];
    for (&(c, _), row) in cells.iter().zip(rows) {
        for (acc, v) in values[c].iter_mut().zip(row?) {
            *acc += v;
        }
    }
    PplTable::new(candidates.to_vec(), values, opts.runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperSearchResult {
    pub candidates: Vec<f64>,
    pub runs: usize,
    pub raw: Vec<Vec<f64>>,
    pub smoothed: Vec<Vec<f64>>,
    /// `trend[c][i]`, defined for `i` in `2..=N-2`.
    pub trend: Vec<Vec<Option<f64>>>,
    pub totals: Vec<f64>,
    pub chosen_p: f64,
    pub chosen_b: usize,
    /// No increasing trend was found, so `chosen_b` fell back to `N`.
    pub fallback: bool,
}

/// Window sums of neighbouring entries, last entry left as is.
pub fn smooth(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    for i in 0..row.len().saturating_sub(1) {
        out[i] = row[i] + row[i + 1];
    }
    out
}

/// `smoothed[i] - smoothed[i - 2]` for `i` in `2..=N-2`.
pub fn trend(smoothed: &[f64]) -> Vec<Option<f64>> {
    let n = smoothed.len();
    (0..n)
        .map(|i| (i >= 2 && i + 2 <= n).then(|| smoothed[i] - smoothed[i - 2]))
        .collect()
}

pub fn select_hyperparameters(table: &PplTable) -> Result<HyperSearchResult> {
    let n = table.demo_count();
    if n < 4 {
        return Err(Error::InvalidArgument(format!(
            "hyperparameter selection needs N >= 4, got {n}"
        )));
    }
    let smoothed: Vec<Vec<f64>> = table.values.iter().map(|r| smooth(r)).collect();
    let trends: Vec<Vec<Option<f64>>> = smoothed.iter().map(|r| trend(r)).collect();
    let totals: Vec<f64> = smoothed.iter().map(|r| r.iter().sum()).collect();
    let mut best = 0;
    for (c, &t) in totals.iter().enumerate() {
        if t < totals[best] {
            best = c;
        }
    }
    let first_rise = trends[best].iter().position(|d| d.is_some_and(|d| d > 0.0));
    Ok(HyperSearchResult {
        candidates: table.candidates.clone(),
        runs: table.runs,
        raw: table.values.clone(),
        smoothed,
        trend: trends,
        totals,
        chosen_p: table.candidates[best],
        chosen_b: first_rise.unwrap_or(n),
        fallback: first_rise.is_none(),
    })
}
