//! The CountA task: count the character 'A' across five candidate strings.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::Demo;
use crate::numkernel::SeededRng;

pub const CANDIDATES: usize = 5;
pub const DEFAULT_LENGTHS: RangeInclusive<usize> = 3..=8;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountATask {
    pub candidates: Vec<String>,
    pub answer: usize,
}

pub fn count_a(text: &str) -> usize {
    text.chars().filter(|&c| c == 'A').count()
}

impl CountATask {
    pub fn new(candidates: Vec<String>) -> Result<Self> {
        if candidates.len() != CANDIDATES {
            return Err(Error::InvalidArgument(format!(
                "CountA needs {CANDIDATES} candidates, got {}",
                candidates.len()
            )));
        }
        if let Some(bad) = candidates
            .iter()
            .flat_map(|c| c.chars())
            .find(|c| !c.is_ascii_uppercase())
        {
            return Err(Error::InvalidArgument(format!(
                "candidate character {bad:?} outside A-Z"
            )));
        }
        let answer = candidates.iter().map(|c| count_a(c)).sum();
        Ok(Self { candidates, answer })
    }

    pub fn query(&self) -> String {
        format!("Candidates: {}", self.candidates.join(" "))
    }

    pub fn response(&self) -> String {
        self.answer.to_string()
    }

    pub fn demo(&self) -> Demo {
        Demo::new(self.query(), self.response())
    }

    /// Largest count the candidates could have produced.
    pub fn max_answer(&self) -> usize {
        self.candidates.iter().map(String::len).sum()
    }
}

/// `count` tasks with candidate lengths drawn uniformly from `lengths`.
pub fn gen_counta(
    rng: &mut SeededRng,
    count: usize,
    lengths: RangeInclusive<usize>,
) -> Result<Vec<CountATask>> {
    if count == 0 || *lengths.start() == 0 || lengths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need at least one task with non-empty candidates, got {count} tasks of lengths {lengths:?}"
        )));
    }
    (0..count)
        .map(|_| {
            let candidates = (0..CANDIDATES)
                .map(|_| {
                    let len = rng.range_inclusive(*lengths.start(), *lengths.end());
                    (0..len)
                        .map(|_| (b'A' + rng.range_inclusive(0, 25) as u8) as char)
                        .collect()
                })
                .collect();
            CountATask::new(candidates)
        })
        .collect()
}
