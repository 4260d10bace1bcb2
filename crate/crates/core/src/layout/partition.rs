use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::prompt::PromptLayout;

/// Split of the demonstrations into `T = ceil(N / B)` batches of consecutive
/// demonstrations.
///
/// Token order is untouched. Each batch gets positions starting at zero, and the query
/// side starts at the longest batch length so it is adjacent to every batch at once.
/// Tokens of different batches never see each other; query-side tokens see every batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPartition {
    batch_size: usize,
    spans: Vec<Range<usize>>,
    demo_ranges: Vec<Range<usize>>,
    batch_of: Vec<Option<usize>>,
    query_start: usize,
    query_offset: usize,
}

impl BatchPartition {
    pub fn batch_count(&self) -> usize {
        self.spans.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Token index range of each batch.
    pub fn batch_spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    /// 1-based demonstration ordinals held by each batch.
    pub fn batch_demos(&self) -> &[Range<usize>] {
        &self.demo_ranges
    }

    /// Batch of a token, `None` for query-side tokens.
    pub fn batch_of(&self, token: usize) -> Option<usize> {
        self.batch_of.get(token).copied().flatten()
    }

    pub fn query_start(&self) -> usize {
        self.query_start
    }

    /// First position index used by the query side.
    pub fn query_offset(&self) -> usize {
        self.query_offset
    }

    /// Remapped position of any token index, including tokens generated after
    /// partitioning.
    pub fn position(&self, token: usize) -> usize {
        match self.batch_of(token) {
            Some(b) => token - self.spans[b].start,
            None => self.query_offset + (token - self.query_start),
        }
    }

    pub fn positions(&self, len: usize) -> Vec<usize> {
        (0..len).map(|t| self.position(t)).collect()
    }

    /// Whether token `from` may attend to token `to`.
    pub fn visible(&self, from: usize, to: usize) -> bool {
        if to > from {
            return false;
        }
        match (self.batch_of(from), self.batch_of(to)) {
            (Some(a), Some(b)) => a == b,
            (None, _) => true,
            (Some(_), None) => false,
        }
    }

    /// Dense visibility matrix over the first `len` tokens.
    pub fn visibility(&self, len: usize) -> Vec<Vec<bool>> {
        (0..len)
            .map(|i| (0..len).map(|j| self.visible(i, j)).collect())
            .collect()
    }
}

pub fn partition(layout: &PromptLayout, batch_size: usize) -> Result<BatchPartition> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let n = layout.demo_count();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "partition needs at least one demonstration".into(),
        ));
    }
    let batch_size = batch_size.min(n);
    let demos = layout.demos();
    let mut spans = Vec::new();
    let mut demo_ranges = Vec::new();
    let mut batch_of = vec![None; layout.query_start()];
    for (b, chunk_start) in (0..n).step_by(batch_size).enumerate() {
        let chunk_end = (chunk_start + batch_size).min(n);
        let span = demos[chunk_start].tokens.start..demos[chunk_end - 1].tokens.end;
        for slot in &mut batch_of[span.clone()] {
            *slot = Some(b);
        }
        spans.push(span);
        demo_ranges.push(chunk_start + 1..chunk_end + 1);
    }
    let query_offset = spans.iter().map(|s| s.len()).max().unwrap_or(0);
    Ok(BatchPartition {
        batch_size,
        spans,
        demo_ranges,
        batch_of,
        query_start: layout.query_start(),
        query_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{assemble_icl, Demo, PromptTemplate, Vocab};

    fn layout(n: usize) -> PromptLayout {
        let demos: Vec<Demo> = (0..n)
            .map(|i| Demo::new("x".repeat(i % 3 + 1), i.to_string()))
            .collect();
        assemble_icl(&demos, "q", &PromptTemplate::default(), &Vocab::default()).unwrap()
    }

    #[test]
    fn even_split() {
        let p = partition(&layout(4), 2).unwrap();
        assert_eq!(p.batch_count(), 2);
        assert_eq!(p.batch_demos(), &[1..3, 3..5]);
    }

    #[test]
    fn short_last_batch() {
        let p = partition(&layout(5), 2).unwrap();
        let sizes: Vec<usize> = p.batch_demos().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert_eq!(p.batch_count(), 5usize.div_ceil(2));
    }

    #[test]
    fn single_batch_is_causal() {
        let l = layout(3);
        for b in [3, 7] {
            let p = partition(&l, b).unwrap();
            assert_eq!(p.batch_count(), 1);
            for i in 0..l.len() {
                for j in 0..l.len() {
                    assert_eq!(p.visible(i, j), j <= i);
                }
            }
            assert_eq!(p.positions(l.len()), l.positions());
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(partition(&layout(3), 0).is_err());
        assert!(partition(&layout(0), 1).is_err());
    }

    #[test]
    fn remapped_positions() {
        let l = layout(5);
        let p = partition(&l, 2).unwrap();
        for span in p.batch_spans() {
            let pos: Vec<usize> = span.clone().map(|t| p.position(t)).collect();
            assert_eq!(pos, (0..span.len()).collect::<Vec<_>>());
        }
        let longest = p.batch_spans().iter().map(|s| s.len()).max().unwrap();
        assert_eq!(p.position(l.query_start()), longest);
        assert_eq!(p.position(l.len() + 2), longest + l.final_query().len() + 2);
    }

    #[test]
    fn batches_mutually_invisible() {
        let l = layout(4);
        let p = partition(&l, 2).unwrap();
        let [a, b] = [p.batch_spans()[0].clone(), p.batch_spans()[1].clone()];
        for i in a.clone() {
            for j in b.clone() {
                assert!(!p.visible(i, j));
                assert!(!p.visible(j, i));
            }
        }
        let last = l.len() - 1;
        assert!((0..=last).all(|j| p.visible(last, j)));
    }
}
