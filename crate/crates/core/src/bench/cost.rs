use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::layout::Demo;
use crate::model::CostCounters;

use super::Harness;

/// Demonstration-encoding attention cost in units of one token-pair interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub n: usize,
    pub b: usize,
    pub l: f64,
    pub icl: f64,
    pub focusicl: f64,
    /// `focusicl / icl`, equal to `b / n`.
    pub ratio: f64,
}

pub fn cost_model(n: usize, b: usize, l: f64) -> Result<CostEstimate> {
    if n == 0 || b == 0 || !(l >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cost model needs N, B, L >= 1, got N={n}, B={b}, L={l}"
        )));
    }
    if b > n {
        return Err(Error::InvalidArgument(format!("batch size {b} exceeds N={n}")));
    }
    let (nf, bf) = (n as f64, b as f64);
    let icl = nf * nf * l * l;
    let focusicl = nf * bf * l * l;
    Ok(CostEstimate {
        n,
        b,
        l,
        icl,
        focusicl,
        ratio: bf / nf,
    })
}

/// Multiply-accumulate counts from encoding the same demonstrations flat and in batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredCost {
    pub n: usize,
    pub b: usize,
    pub tokens_per_demo: f64,
    pub icl: CostCounters,
    pub focusicl: CostCounters,
    /// Ratio of demonstration-to-demonstration score MACs.
    pub ratio: f64,
    pub estimate: CostEstimate,
}

pub fn measure_cost(h: &Harness<'_>, demos: &[Demo], b: usize) -> Result<MeasuredCost> {
    let layout = h.layout(demos, "")?;
    let tokens_per_demo = layout.query_start() as f64 / demos.len().max(1) as f64;
    let estimate = cost_model(demos.len(), b, tokens_per_demo)?;
    let counters = |cfg: AttentionConfig| -> Result<CostCounters> {
        Ok(h.encode_demos(cfg, &layout)?.decoder.trace().counters)
    };
    let icl = counters(AttentionConfig::standard())?;
    let focusicl = counters(AttentionConfig::hierarchical(0.0, b))?;
    Ok(MeasuredCost {
        n: demos.len(),
        b,
        tokens_per_demo,
        ratio: focusicl.demo_demo_macs as f64 / icl.demo_demo_macs as f64,
        icl,
        focusicl,
        estimate,
    })
}
