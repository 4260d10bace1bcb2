use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{
    filtering_attention, hierarchical_attention, linear_attention, standard_attention,
    AttentionConfig, AttentionInput, AttentionOutcome, AttentionVariant, RowRole,
};
use crate::error::{Error, Result};
use crate::layout::{BatchPartition, PromptLayout, SegmentLabel, Token};
use crate::model::ops::{gelu, layer_norm};
use crate::model::weights::ModelWeights;
use crate::numkernel::{log_softmax, softmax, Matrix, SeededRng};

/// What a forward pass should record besides the final hidden states.
#[derive(Clone, Debug, Default)]
pub struct TraceSpec {
    /// Token indices whose per-layer, per-head attention outcomes are kept.
    pub attention_at: Vec<usize>,
    /// `(layer, token)` pairs whose residual stream after that layer is kept.
    pub hidden_at: Vec<(usize, usize)>,
    /// Logits are computed for every token index `>= logits_from`.
    pub logits_from: usize,
}

impl TraceSpec {
    /// Logits everywhere, nothing else.
    pub fn logits() -> Self {
        Self::default()
    }

    /// Only the logits of the last token.
    pub fn last_only(len: usize) -> Self {
        Self {
            logits_from: len.saturating_sub(1),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub outcome: AttentionOutcome<f64>,
    /// Inter-batch weights when the token was computed hierarchically.
    pub batch_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HiddenRecord {
    pub layer: usize,
    pub position: usize,
    pub state: Vec<f64>,
}

/// Multiply-accumulate counters for attention score computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    /// Score MACs where both the attending token and the attended row are demonstration
    /// tokens.
    pub demo_demo_macs: u64,
    pub score_macs: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub attention: Vec<AttentionRecord>,
    pub hidden: Vec<HiddenRecord>,
    /// Logits keyed by token index.
    pub logits: BTreeMap<usize, Vec<f64>>,
    pub counters: CostCounters,
}

impl ForwardTrace {
    /// `log p(token[t] | tokens[..t])`, available when the logits at `t - 1` were kept.
    pub fn token_logprob(&self, layout: &PromptLayout, t: usize) -> Option<f64> {
        let logits = self.logits.get(&t.checked_sub(1)?)?;
        let lp = log_softmax(logits).ok()?;
        Some(lp[layout.tokens()[t].index()])
    }

    /// Log-probabilities of every response-labeled token with available logits.
    pub fn response_logprobs(&self, layout: &PromptLayout) -> BTreeMap<usize, f64> {
        layout
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| {
                matches!(l, SegmentLabel::DemoResponse(_) | SegmentLabel::GeneratedResponse)
            })
            .filter_map(|(t, _)| self.token_logprob(layout, t).map(|lp| (t, lp)))
            .collect()
    }

    pub fn attention_for(&self, layer: usize, head: usize, position: usize) -> Option<&AttentionRecord> {
        self.attention
            .iter()
            .find(|r| r.layer == layer && r.head == head && r.position == position)
    }

    pub fn hidden_for(&self, layer: usize, position: usize) -> Option<&[f64]> {
        self.hidden
            .iter()
            .find(|r| r.layer == layer && r.position == position)
            .map(|r| r.state.as_slice())
    }
}

/// Incremental decoder: key/value rows of processed tokens are cached per layer and head,
/// so appending tokens costs one pass over the new rows only. Cloning a decoder forks the
/// cache, which lets many prompts share one encoded prefix.
#[derive(Clone)]
pub struct Decoder<'w> {
    weights: &'w ModelWeights,
    cfg: AttentionConfig,
    keys: Vec<Vec<Matrix<f64>>>,
    values: Vec<Vec<Matrix<f64>>>,
    len: usize,
    tokens: Vec<Token>,
    spec: TraceSpec,
    attention_at: HashSet<usize>,
    trace: ForwardTrace,
}

enum Context {
    Single { visible: Vec<bool> },
    Batched { views: Vec<Vec<bool>> },
}

impl<'w> Decoder<'w> {
    pub fn new(weights: &'w ModelWeights, cfg: AttentionConfig, spec: TraceSpec) -> Result<Self> {
        cfg.validate()?;
        let c = &weights.config;
        let empty = || vec![Matrix::zeros(0, c.d_head()); c.n_heads];
        Ok(Self {
            weights,
            cfg,
            keys: (0..c.n_layers).map(|_| empty()).collect(),
            values: (0..c.n_layers).map(|_| empty()).collect(),
            len: 0,
            tokens: Vec::new(),
            attention_at: spec.attention_at.iter().copied().collect(),
            spec,
            trace: ForwardTrace::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn trace(&self) -> &ForwardTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ForwardTrace {
        self.trace
    }

    /// Replaces what gets recorded for tokens processed from now on.
    pub fn set_trace_spec(&mut self, spec: TraceSpec) {
        self.attention_at = spec.attention_at.iter().copied().collect();
        self.spec = spec;
    }

    /// Logits of the most recently processed token, if they were kept.
    pub fn last_logits(&self) -> Option<&[f64]> {
        self.trace
            .logits
            .get(&self.len.checked_sub(1)?)
            .map(Vec::as_slice)
    }

    fn position(&self, layout: &PromptLayout, partition: Option<&BatchPartition>, t: usize) -> Result<usize> {
        let p = match partition {
            Some(part) => part.position(t),
            None => layout.positions()[t],
        };
        let max = self.weights.config.max_positions;
        if p >= max {
            return Err(Error::PositionOverflow { position: p, max });
        }
        Ok(p)
    }

    fn roles(&self, labels: &[SegmentLabel], t: usize, n: usize) -> Vec<RowRole> {
        let role = |is_demo: bool| if is_demo { RowRole::Demo } else { RowRole::QueryOrSelf };
        match labels[t].demo() {
            // Earlier demonstrations act as demonstrations of demonstration `k`.
            Some(k) => labels[..n]
                .iter()
                .map(|l| role(l.demo().is_some_and(|i| i < k)))
                .collect(),
            None => labels[..n].iter().map(|l| role(l.is_demo())).collect(),
        }
    }

    fn context(&self, partition: Option<&BatchPartition>, t: usize, n: usize) -> Context {
        match partition {
            None => Context::Single {
                visible: (0..n).map(|j| j <= t).collect(),
            },
            Some(part) => match part.batch_of(t) {
                Some(b) => Context::Single {
                    visible: (0..n)
                        .map(|j| j <= t && part.batch_of(j) == Some(b))
                        .collect(),
                },
                None => Context::Batched {
                    views: (0..part.batch_count())
                        .map(|b| {
                            (0..n)
                                .map(|j| j <= t && part.batch_of(j).is_none_or(|x| x == b))
                                .collect()
                        })
                        .collect(),
                },
            },
        }
    }

    /// Processes every token of `layout` not seen yet.
    pub fn extend(&mut self, layout: &PromptLayout, partition: Option<&BatchPartition>) -> Result<()> {
        self.extend_to(layout, partition, layout.len())
    }

    /// Processes the tokens of `layout` up to index `end`. Tokens already processed must
    /// match the layout's prefix.
    pub fn extend_to(
        &mut self,
        layout: &PromptLayout,
        partition: Option<&BatchPartition>,
        end: usize,
    ) -> Result<()> {
        if end > layout.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot extend to {end} in a layout of {}",
                layout.len()
            )));
        }
        if layout.tokens()[..self.len.min(end)] != self.tokens[..self.len.min(end)] {
            return Err(Error::InvalidArgument(
                "layout does not continue the decoded prefix".into(),
            ));
        }
        if self.cfg.is_hierarchical() != partition.is_some() {
            return Err(Error::InvalidArgument(
                "a batch partition is required exactly when attention is hierarchical".into(),
            ));
        }
        if let Some(part) = partition {
            if part.query_start() != layout.query_start() {
                return Err(Error::InvalidArgument(
                    "partition was built for a different layout".into(),
                ));
            }
        }
        let n = end;
        if n <= self.len {
            return Ok(());
        }
        let w = self.weights;
        let c = &w.config;
        let (d, dh) = (c.d_model, c.d_head());
        let new: Range<usize> = self.len..n;
        let labels = layout.labels();
        for t in new.clone() {
            if layout.tokens()[t].index() >= c.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token {} outside vocabulary of {}",
                    layout.tokens()[t].index(),
                    c.vocab_size
                )));
            }
        }

        let mut hidden: Vec<Vec<f64>> = new
            .clone()
            .map(|t| {
                let pos = self.position(layout, partition, t)?;
                Ok(w.token_embed
                    .row(layout.tokens()[t].index())
                    .iter()
                    .zip(w.pos_embed.row(pos))
                    .map(|(a, b)| a + b)
                    .collect())
            })
            .collect::<Result<_>>()?;

        let last_layer = c.n_layers - 1;
        let needed_last: HashSet<usize> = new
            .clone()
            .filter(|&t| {
                t >= self.spec.logits_from
                    || self.attention_at.contains(&t)
                    || self.spec.hidden_at.contains(&(last_layer, t))
            })
            .collect();

        for (l, layer) in w.layers.iter().enumerate() {
            let mut queries = Vec::with_capacity(new.len());
            for h in &hidden {
                let (a, _, _) = layer_norm(h, &layer.ln1_gain, &layer.ln1_bias);
                let q = layer.w_q.vecmul(&a)?;
                let k = layer.w_k.vecmul(&a)?;
                let v = layer.w_v.vecmul(&a)?;
                for head in 0..c.n_heads {
                    let cols = head * dh..(head + 1) * dh;
                    self.keys[l][head].push_row(&k[cols.clone()])?;
                    self.values[l][head].push_row(&v[cols])?;
                }
                queries.push(q);
            }

            for (i, t) in new.clone().enumerate() {
                if l == last_layer && !needed_last.contains(&t) {
                    continue;
                }
                let roles = self.roles(labels, t, n);
                let ctx = self.context(partition, t, n);
                let p = match labels[t] {
                    SegmentLabel::DemoQuery(_) => 0.0,
                    _ => self.cfg.threshold(),
                };
                let mut attn_out = vec![0.0; d];
                for head in 0..c.n_heads {
                    let cols = head * dh..(head + 1) * dh;
                    let base = AttentionInput {
                        query: &queries[i][cols.clone()],
                        keys: &self.keys[l][head],
                        values: &self.values[l][head],
                        roles: &roles,
                        visible: None,
                        scale_scores: self.cfg.scale_scores,
                    };
                    let (out, record) = match (&ctx, self.cfg.variant) {
                        (Context::Single { visible }, AttentionVariant::Linear) => {
                            (linear_attention(&base.with_visibility(visible))?, None)
                        }
                        (Context::Single { visible }, AttentionVariant::Standard) => {
                            let o = standard_attention(&base.with_visibility(visible))?;
                            (o.output.clone(), Some((o, None)))
                        }
                        (Context::Single { visible }, _) => {
                            let o = filtering_attention(&base.with_visibility(visible), p)?;
                            (o.output.clone(), Some((o, None)))
                        }
                        (Context::Batched { views }, _) => {
                            let inputs: Vec<_> =
                                views.iter().map(|v| base.with_visibility(v)).collect();
                            let h = hierarchical_attention(&inputs, p, self.cfg.combine)?;
                            (h.combined.output.clone(), Some((h.combined, Some(h.batch_weights))))
                        }
                    };
                    self.count(labels, &ctx, t, dh);
                    attn_out[cols].copy_from_slice(&out);
                    if let (true, Some((outcome, batch_weights))) =
                        (self.attention_at.contains(&t), record)
                    {
                        self.trace.attention.push(AttentionRecord {
                            layer: l,
                            head,
                            position: t,
                            outcome,
                            batch_weights,
                        });
                    }
                }
                let proj = layer.w_o.vecmul(&attn_out)?;
                let h = &mut hidden[i];
                for (x, p) in h.iter_mut().zip(&proj) {
                    *x += p;
                }
                let (b, _, _) = layer_norm(h, &layer.ln2_gain, &layer.ln2_bias);
                let mut u = layer.ff_in.vecmul(&b)?;
                for (x, bias) in u.iter_mut().zip(&layer.ff_in_bias) {
                    *x = gelu(*x + bias);
                }
                let f = layer.ff_out.vecmul(&u)?;
                for ((x, y), bias) in h.iter_mut().zip(&f).zip(&layer.ff_out_bias) {
                    *x += y + bias;
                }
                if h.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("hidden state"));
                }
                if self.spec.hidden_at.contains(&(l, t)) {
                    self.trace.hidden.push(HiddenRecord {
                        layer: l,
                        position: t,
                        state: h.clone(),
                    });
                }
            }
        }

        for (i, t) in new.clone().enumerate() {
            if t < self.spec.logits_from {
                continue;
            }
            let (z, _, _) = layer_norm(&hidden[i], &w.final_gain, &w.final_bias);
            self.trace.logits.insert(t, w.unembed.vecmul(&z)?);
        }
        self.tokens.extend_from_slice(&layout.tokens()[self.len..n]);
        self.len = n;
        Ok(())
    }

    fn count(&mut self, labels: &[SegmentLabel], ctx: &Context, t: usize, dh: usize) {
        let visible_rows = |v: &Vec<bool>| v.iter().filter(|&&x| x).count() as u64;
        let total = match ctx {
            Context::Single { visible } => visible_rows(visible),
            Context::Batched { views } => views.iter().map(visible_rows).sum(),
        };
        self.trace.counters.score_macs += total * dh as u64;
        if labels[t].is_demo() {
            if let Context::Single { visible } = ctx {
                let demo_rows = visible
                    .iter()
                    .zip(labels)
                    .filter(|(&v, l)| v && l.is_demo())
                    .count() as u64;
                self.trace.counters.demo_demo_macs += demo_rows * dh as u64;
            }
        }
    }
}

/// Full forward pass over `layout`.
pub fn forward(
    weights: &ModelWeights,
    layout: &PromptLayout,
    partition: Option<&BatchPartition>,
    cfg: AttentionConfig,
    spec: TraceSpec,
) -> Result<ForwardTrace> {
    let mut dec = Decoder::new(weights, cfg, spec)?;
    dec.extend(layout, partition)?;
    Ok(dec.into_trace())
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    /// Zero means greedy decoding.
    pub temperature: f64,
    pub max_new: usize,
    /// Generation stops before emitting this token.
    pub stop: Option<Token>,
}

/// Samples up to `max_new` tokens after `layout`. The returned tokens exclude the stop
/// token.
pub fn generate(
    weights: &ModelWeights,
    layout: &PromptLayout,
    partition: Option<&BatchPartition>,
    cfg: AttentionConfig,
    options: GenerateOptions,
    rng: &mut SeededRng,
) -> Result<Vec<Token>> {
    if !(options.temperature >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be >= 0".into()));
    }
    let dec = Decoder::new(weights, cfg, TraceSpec::last_only(layout.len()))?;
    generate_with(dec, layout, partition, options, rng)
}

/// Generation continuing from a decoder that may already hold a prefix of `layout`.
pub fn generate_with(
    mut dec: Decoder<'_>,
    layout: &PromptLayout,
    partition: Option<&BatchPartition>,
    options: GenerateOptions,
    rng: &mut SeededRng,
) -> Result<Vec<Token>> {
    if !(options.temperature >= 0.0) {
        return Err(Error::InvalidArgument("temperature must be >= 0".into()));
    }
    let mut work = layout.clone();
    dec.set_trace_spec(TraceSpec::last_only(layout.len()));
    dec.extend(&work, partition)?;
    let mut out = Vec::new();
    for _ in 0..options.max_new {
        let logits = dec.last_logits().ok_or_else(|| {
            Error::InvalidArgument("decoder already consumed the prompt without its logits".into())
        })?;
        let next = sample(logits, options.temperature, rng)?;
        if Some(next) == options.stop {
            break;
        }
        out.push(next);
        work.push_generated(next);
        dec.extend(&work, partition)?;
    }
    Ok(out)
}

fn sample(logits: &[f64], temperature: f64, rng: &mut SeededRng) -> Result<Token> {
    if temperature == 0.0 {
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > logits[best] { i } else { best });
        return Ok(Token(best as u32));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let probs = softmax(&scaled)?;
    let u = rng.uniform(0.0, 1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(Token(i as u32));
        }
    }
    Ok(Token(
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1) as u32,
    ))
}

/// `exp(mean negative log-likelihood)` of `span` under teacher forcing.
pub fn perplexity(
    weights: &ModelWeights,
    layout: &PromptLayout,
    partition: Option<&BatchPartition>,
    cfg: AttentionConfig,
    span: Range<usize>,
) -> Result<f64> {
    if span.is_empty() || span.start == 0 || span.end > layout.len() {
        return Err(Error::InvalidArgument(format!(
            "perplexity span {span:?} must be non-empty, start after the first token and fit a layout of {}",
            layout.len()
        )));
    }
    let spec = TraceSpec {
        logits_from: span.start - 1,
        ..TraceSpec::default()
    };
    let trace = forward(weights, layout, partition, cfg, spec)?;
    span_perplexity(&trace, layout, span)
}

pub fn span_perplexity(trace: &ForwardTrace, layout: &PromptLayout, span: Range<usize>) -> Result<f64> {
    let len = span.len();
    let mut nll = 0.0;
    for t in span {
        let lp = trace
            .token_logprob(layout, t)
            .ok_or_else(|| Error::InvalidArgument(format!("no logits before token {t}")))?;
        nll -= lp;
    }
    Ok((nll / len as f64).exp())
}

/// Perplexity of every demonstration response in one flat pass, each response seeing the
/// demonstrations before it as context.
pub fn response_perplexities(
    weights: &ModelWeights,
    layout: &PromptLayout,
    cfg: AttentionConfig,
) -> Result<Vec<f64>> {
    let trace = forward(weights, layout, None, cfg, TraceSpec::logits())?;
    layout
        .demos()
        .iter()
        .map(|d| span_perplexity(&trace, layout, d.response_content.clone()))
        .collect()
}
