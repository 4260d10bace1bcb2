//! Attention kernels for a single query vector against a context of key/value rows.
//!
//! Every kernel consumes an [`AttentionInput`]: the query vector, the full key and value
//! matrices of the context, a role per row and an optional visibility mask. Rows are
//! addressed by their index in the key matrix, so several inputs that share the same
//! matrices but differ in visibility describe different views of one sequence.

mod config;
mod hierarchical;

use serde::Serialize;

pub use config::{AttentionConfig, AttentionVariant, CombineMode};
pub use hierarchical::{hierarchical_attention, HierarchicalOutcome};

use crate::error::{Error, Result};
use crate::numkernel::{dot, masked_softmax, Matrix};
use crate::scalar::Scalar;

/// Whether a context row belongs to a demonstration (maskable) or to the query side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RowRole {
    Demo,
    QueryOrSelf,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionInput<'a, T> {
    pub query: &'a [T],
    pub keys: &'a Matrix<T>,
    pub values: &'a Matrix<T>,
    pub roles: &'a [RowRole],
    /// `None` means every row is visible.
    pub visible: Option<&'a [bool]>,
    /// Multiply scores by `1/sqrt(d)`. Off everywhere unless explicitly requested.
    pub scale_scores: bool,
}

impl<'a, T: Scalar> AttentionInput<'a, T> {
    pub fn new(
        query: &'a [T],
        keys: &'a Matrix<T>,
        values: &'a Matrix<T>,
        roles: &'a [RowRole],
    ) -> Self {
        Self {
            query,
            keys,
            values,
            roles,
            visible: None,
            scale_scores: false,
        }
    }

    pub fn with_visibility(mut self, visible: &'a [bool]) -> Self {
        self.visible = Some(visible);
        self
    }

    fn validate(&self) -> Result<()> {
        let rows = self.keys.rows();
        if self.keys.cols() != self.query.len() {
            return Err(Error::Shape(format!(
                "query of width {} against keys of width {}",
                self.query.len(),
                self.keys.cols()
            )));
        }
        if self.values.rows() != rows || self.roles.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} key rows, {} value rows, {} roles",
                self.values.rows(),
                self.roles.len()
            )));
        }
        if self.visible.is_some_and(|v| v.len() != rows) {
            return Err(Error::Shape("visibility length differs from row count".into()));
        }
        Ok(())
    }

    /// Indices of visible rows, in ascending order.
    pub fn visible_rows(&self) -> Vec<usize> {
        match self.visible {
            None => (0..self.keys.rows()).collect(),
            Some(v) => v
                .iter()
                .enumerate()
                .filter_map(|(i, &vis)| vis.then_some(i))
                .collect(),
        }
    }

    /// Raw scores `query . key_j` over the visible rows.
    pub fn scores(&self, rows: &[usize]) -> Vec<T> {
        let scale = if self.scale_scores {
            T::one() / T::count(self.query.len()).sqrt()
        } else {
            T::one()
        };
        rows.iter()
            .map(|&r| {
                let s = dot(self.query, self.keys.row(r));
                if self.scale_scores {
                    s * scale
                } else {
                    s
                }
            })
            .collect()
    }
}

/// Result of one attention evaluation, reported over the visible rows.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionOutcome<T> {
    pub output: Vec<T>,
    /// Row indices of the visible context, ascending.
    pub rows: Vec<usize>,
    pub roles: Vec<RowRole>,
    /// Raw pre-softmax scores, parallel to `rows`.
    pub scores: Vec<T>,
    /// Post-softmax weights, parallel to `rows`. Masked rows are exactly zero.
    pub weights: Vec<T>,
    pub masked: Vec<bool>,
    /// Share of attention mass on demonstration rows.
    pub lambda: T,
    /// Largest unmasked score.
    pub score_max: T,
    /// `sum exp(s - score_max)` over unmasked rows.
    pub exp_sum: T,
    /// Same sum restricted to demonstration rows.
    pub demo_exp_sum: T,
    /// Filtering asked to mask every demonstration row and was held back by one.
    pub capped: bool,
}

impl<T: Scalar> AttentionOutcome<T> {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn demo_count(&self) -> usize {
        self.roles.iter().filter(|&&r| r == RowRole::Demo).count()
    }

    /// Attention mass on query-side rows.
    pub fn query_mass(&self) -> T {
        self.weights
            .iter()
            .zip(&self.roles)
            .filter(|(_, &r)| r == RowRole::QueryOrSelf)
            .map(|(&w, _)| w)
            .sum()
    }
}

fn attend<T: Scalar>(
    input: &AttentionInput<'_, T>,
    rows: Vec<usize>,
    scores: Vec<T>,
    masked: Vec<bool>,
    capped: bool,
) -> Result<AttentionOutcome<T>> {
    let weights = masked_softmax(&scores, &masked)?;
    let mut output = vec![T::zero(); input.values.cols()];
    for ((&r, &w), &m) in rows.iter().zip(&weights).zip(&masked) {
        if m {
            continue;
        }
        for (o, &v) in output.iter_mut().zip(input.values.row(r)) {
            *o = *o + w * v;
        }
    }
    let roles: Vec<RowRole> = rows.iter().map(|&r| input.roles[r]).collect();
    let lambda = weights
        .iter()
        .zip(&roles)
        .filter(|(_, &role)| role == RowRole::Demo)
        .map(|(&w, _)| w)
        .sum();
    let score_max = scores
        .iter()
        .zip(&masked)
        .filter(|(_, &m)| !m)
        .map(|(&s, _)| s)
        .fold(T::neg_infinity(), T::max);
    let mut exp_sum = T::zero();
    let mut demo_exp_sum = T::zero();
    for ((&s, &m), &role) in scores.iter().zip(&masked).zip(&roles) {
        if m {
            continue;
        }
        let e = (s - score_max).exp();
        exp_sum = exp_sum + e;
        if role == RowRole::Demo {
            demo_exp_sum = demo_exp_sum + e;
        }
    }
    Ok(AttentionOutcome {
        output,
        rows,
        roles,
        scores,
        weights,
        masked,
        lambda,
        score_max,
        exp_sum,
        demo_exp_sum,
        capped,
    })
}

/// Softmax attention over every visible row.
pub fn standard_attention<T: Scalar>(input: &AttentionInput<'_, T>) -> Result<AttentionOutcome<T>> {
    input.validate()?;
    let rows = input.visible_rows();
    if rows.is_empty() {
        return Err(Error::NoVisiblePositions);
    }
    let scores = input.scores(&rows);
    let masked = vec![false; rows.len()];
    attend(input, rows, scores, masked, false)
}

/// Linear attention: `sum_j (query . key_j) value_j` with no normalization.
pub fn linear_attention<T: Scalar>(input: &AttentionInput<'_, T>) -> Result<Vec<T>> {
    input.validate()?;
    let rows = input.visible_rows();
    let scores = input.scores(&rows);
    let mut output = vec![T::zero(); input.values.cols()];
    for (&r, &s) in rows.iter().zip(&scores) {
        for (o, &v) in output.iter_mut().zip(input.values.row(r)) {
            *o = *o + s * v;
        }
    }
    Ok(output)
}

/// Split of softmax attention into a query-only and a demonstration-only attention,
/// mixed by the demonstration share `lambda`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition<T> {
    pub lambda: T,
    /// Attention restricted to query-side rows; `None` when there are none.
    pub query_part: Option<Vec<T>>,
    /// Attention restricted to demonstration rows; `None` when there are none.
    pub demo_part: Option<Vec<T>>,
}

impl<T: Scalar> Decomposition<T> {
    /// `(1 - lambda) * query_part + lambda * demo_part`, absent parts contributing zero.
    pub fn recombine(&self) -> Vec<T> {
        let width = self
            .query_part
            .as_ref()
            .or(self.demo_part.as_ref())
            .map_or(0, Vec::len);
        let mut out = vec![T::zero(); width];
        if let Some(q) = &self.query_part {
            for (o, &x) in out.iter_mut().zip(q) {
                *o = *o + (T::one() - self.lambda) * x;
            }
        }
        if let Some(d) = &self.demo_part {
            for (o, &x) in out.iter_mut().zip(d) {
                *o = *o + self.lambda * x;
            }
        }
        out
    }
}

pub fn lambda_decompose<T: Scalar>(input: &AttentionInput<'_, T>) -> Result<Decomposition<T>> {
    input.validate()?;
    let rows = input.visible_rows();
    if rows.is_empty() {
        return Err(Error::NoVisiblePositions);
    }
    let scores = input.scores(&rows);
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let (mut demo_sum, mut query_sum) = (T::zero(), T::zero());
    for (&r, &s) in rows.iter().zip(&scores) {
        let e = (s - max).exp();
        match input.roles[r] {
            RowRole::Demo => demo_sum = demo_sum + e,
            RowRole::QueryOrSelf => query_sum = query_sum + e,
        }
    }
    let lambda = demo_sum / (demo_sum + query_sum);

    let block = |role: RowRole| -> Result<Option<Vec<T>>> {
        let visible: Vec<bool> = (0..input.keys.rows())
            .map(|r| input.roles[r] == role && input.visible.is_none_or(|v| v[r]))
            .collect();
        if !visible.contains(&true) {
            return Ok(None);
        }
        let sub = AttentionInput {
            visible: Some(&visible),
            ..*input
        };
        Ok(Some(standard_attention(&sub)?.output))
    };
    Ok(Decomposition {
        lambda,
        query_part: block(RowRole::QueryOrSelf)?,
        demo_part: block(RowRole::Demo)?,
    })
}

/// Positions masked by triviality filtering: of the `m` demonstration rows, the
/// `floor(p * m)` lowest-scoring ones, ties broken toward the lower row index. At least
/// one demonstration row always survives; the returned flag reports when that cap bit.
pub fn triviality_mask<T: Scalar>(scores: &[T], roles: &[RowRole], p: f64) -> (Vec<bool>, bool) {
    let mut demo: Vec<usize> = (0..scores.len())
        .filter(|&i| roles[i] == RowRole::Demo)
        .collect();
    let m = demo.len();
    let mut k = (p * m as f64).floor() as usize;
    let capped = m > 0 && k >= m;
    if capped {
        k = m - 1;
    }
    let mut mask = vec![false; scores.len()];
    if k == 0 {
        return (mask, capped);
    }
    demo.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    for &i in &demo[..k] {
        mask[i] = true;
    }
    (mask, capped)
}

/// Softmax attention after masking the lowest-scoring fraction `p` of demonstration rows.
pub fn filtering_attention<T: Scalar>(
    input: &AttentionInput<'_, T>,
    p: f64,
) -> Result<AttentionOutcome<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("threshold p={p} outside [0, 1)")));
    }
    input.validate()?;
    let rows = input.visible_rows();
    if rows.is_empty() {
        return Err(Error::NoVisiblePositions);
    }
    let scores = input.scores(&rows);
    let roles: Vec<RowRole> = rows.iter().map(|&r| input.roles[r]).collect();
    let (masked, capped) = triviality_mask(&scores, &roles, p);
    if capped {
        log_cap();
    }
    attend(input, rows, scores, masked, capped)
}

fn log_cap() {
    static WARNED: std::sync::Once = std::sync::Once::new();
    WARNED.call_once(|| {
        eprintln!("warning: filtering threshold would mask every demonstration row; kept one")
    });
}
