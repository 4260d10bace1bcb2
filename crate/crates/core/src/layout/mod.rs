//! Prompt construction: tokenization, the demonstration template, segment labels and
//! demonstration batching.

mod partition;
mod prompt;
mod vocab;

pub use partition::{partition, BatchPartition};
pub use prompt::{
    assemble_icl, pad_with_spaces, Demo, DemoSpan, PromptLayout, PromptTemplate, SegmentLabel,
    DEFAULT_TEMPLATE,
};
pub use vocab::{Token, Vocab};
