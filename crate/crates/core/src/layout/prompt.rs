use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::vocab::{Token, Vocab};

/// Role of a token inside an in-context-learning prompt. Demonstration ordinals are
/// 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentLabel {
    DemoQuery(usize),
    DemoResponse(usize),
    FinalQuery,
    GeneratedResponse,
}

impl SegmentLabel {
    pub fn demo(self) -> Option<usize> {
        match self {
            Self::DemoQuery(i) | Self::DemoResponse(i) => Some(i),
            _ => None,
        }
    }

    pub fn is_demo(self) -> bool {
        self.demo().is_some()
    }
}

/// One (query, response) demonstration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub query: String,
    pub response: String,
}

impl Demo {
    pub fn new(query: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            response: response.into(),
        }
    }
}

pub const DEFAULT_TEMPLATE: &str = "### Human: {q}\n\n### Assistant: {r}\n\n";

/// Demonstration template with literal `{q}` and `{r}` placeholders. The final-query form
/// is the demonstration form cut before `{r}` with trailing spaces removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    query_prefix: String,
    response_prefix: String,
    response_suffix: String,
    final_response_prefix: String,
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let q = text.find("{q}");
        let r = text.find("{r}");
        let (Some(q), Some(r)) = (q, r) else {
            return Err(Error::InvalidArgument(
                "template needs both {q} and {r} placeholders".into(),
            ));
        };
        if r < q + 3 || text.matches("{q}").count() != 1 || text.matches("{r}").count() != 1 {
            return Err(Error::InvalidArgument(
                "template needs exactly one {q} followed by exactly one {r}".into(),
            ));
        }
        let response_prefix = text[q + 3..r].to_string();
        Ok(Self {
            query_prefix: text[..q].to_string(),
            final_response_prefix: response_prefix.trim_end_matches(' ').to_string(),
            response_prefix,
            response_suffix: text[r + 3..].to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn render_demo(&self, demo: &Demo) -> String {
        format!(
            "{}{}{}{}{}",
            self.query_prefix, demo.query, self.response_prefix, demo.response, self.response_suffix
        )
    }

    pub fn render_final(&self, query: &str) -> String {
        format!("{}{}{}", self.query_prefix, query, self.final_response_prefix)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template parses")
    }
}

/// Token ranges of one demonstration inside a layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSpan {
    /// All tokens of the demonstration, scaffolding included.
    pub tokens: Range<usize>,
    pub query_content: Range<usize>,
    pub response_content: Range<usize>,
}

/// Tokenized prompt with parallel segment labels and position indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    tokens: Vec<Token>,
    labels: Vec<SegmentLabel>,
    positions: Vec<usize>,
    demos: Vec<DemoSpan>,
    final_query: Range<usize>,
}

impl PromptLayout {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn labels(&self) -> &[SegmentLabel] {
        &self.labels
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn demo_count(&self) -> usize {
        self.demos.len()
    }

    pub fn demos(&self) -> &[DemoSpan] {
        &self.demos
    }

    pub fn final_query(&self) -> Range<usize> {
        self.final_query.clone()
    }

    /// Tokens after the final query, i.e. generated or teacher-forced response tokens.
    pub fn generated(&self) -> Range<usize> {
        self.final_query.end..self.tokens.len()
    }

    /// Index of the first token after all demonstrations.
    pub fn query_start(&self) -> usize {
        self.final_query.start
    }

    pub fn push_generated(&mut self, token: Token) {
        let next = self.positions.last().map_or(0, |p| p + 1);
        self.tokens.push(token);
        self.labels.push(SegmentLabel::GeneratedResponse);
        self.positions.push(next);
    }

    /// Copy of this layout with `response` appended as generated tokens, for
    /// teacher-forced scoring.
    pub fn with_response(&self, response: &[Token]) -> Self {
        let mut out = self.clone();
        for &t in response {
            out.push_generated(t);
        }
        out
    }

    /// Copy of this layout with every position moved `offset` places later.
    pub fn shifted(&self, offset: usize) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p += offset;
        }
        out
    }

    /// Removes trailing generated tokens.
    pub fn truncate_generated(&mut self) {
        let keep = self.final_query.end;
        self.tokens.truncate(keep);
        self.labels.truncate(keep);
        self.positions.truncate(keep);
    }

    pub fn text(&self, vocab: &Vocab) -> String {
        vocab.detokenize(&self.tokens)
    }
}

/// Renders demonstrations and the final query through `template` and labels every token.
///
/// Scaffolding takes the label of the content it introduces: the text up to and including
/// the query belongs to the query segment, everything from there through the end of the
/// demonstration belongs to the response segment.
pub fn assemble_icl(
    demos: &[Demo],
    final_query: &str,
    template: &PromptTemplate,
    vocab: &Vocab,
) -> Result<PromptLayout> {
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut spans = Vec::with_capacity(demos.len());

    let mut push = |text: &str, label: SegmentLabel| -> Result<Range<usize>> {
        let start = tokens.len();
        let new = vocab.tokenize(text)?;
        labels.extend(std::iter::repeat_n(label, new.len()));
        tokens.extend(new);
        Ok(start..tokens.len())
    };

    for (i, demo) in demos.iter().enumerate() {
        let ordinal = i + 1;
        let q_label = SegmentLabel::DemoQuery(ordinal);
        let r_label = SegmentLabel::DemoResponse(ordinal);
        let start = push(&template.query_prefix, q_label)?.start;
        let query_content = push(&demo.query, q_label)?;
        push(&template.response_prefix, r_label)?;
        let response_content = push(&demo.response, r_label)?;
        let end = push(&template.response_suffix, r_label)?.end;
        spans.push(DemoSpan {
            tokens: start..end,
            query_content,
            response_content,
        });
    }
    let q_start = push(&template.query_prefix, SegmentLabel::FinalQuery)?.start;
    push(final_query, SegmentLabel::FinalQuery)?;
    let q_end = push(&template.final_response_prefix, SegmentLabel::FinalQuery)?.end;

    let positions = (0..tokens.len()).collect();
    Ok(PromptLayout {
        tokens,
        labels,
        positions,
        demos: spans,
        final_query: q_start..q_end,
    })
}

/// Appends `k` blank spaces to every demonstration response.
pub fn pad_with_spaces(demos: &[Demo], k: usize) -> Vec<Demo> {
    let pad = " ".repeat(k);
    demos
        .iter()
        .map(|d| Demo::new(d.query.clone(), format!("{}{pad}", d.response)))
        .collect()
}
