use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionVariant {
    Standard,
    Linear,
    Filtering { p: f64 },
    Hierarchical { p: f64, batch_size: usize },
}

/// Which unmasked scores enter a batch's weight in the inter-batch combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// Every unmasked score of the batch's intra attention, query rows included.
    #[default]
    AllScores,
    /// Only the batch's unmasked demonstration scores.
    DemoOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    #[serde(default)]
    pub scale_scores: bool,
    #[serde(default)]
    pub combine: CombineMode,
}

impl AttentionConfig {
    pub fn standard() -> Self {
        Self::from_variant(AttentionVariant::Standard)
    }

    pub fn linear() -> Self {
        Self::from_variant(AttentionVariant::Linear)
    }

    pub fn filtering(p: f64) -> Self {
        Self::from_variant(AttentionVariant::Filtering { p })
    }

    pub fn hierarchical(p: f64, batch_size: usize) -> Self {
        Self::from_variant(AttentionVariant::Hierarchical { p, batch_size })
    }

    fn from_variant(variant: AttentionVariant) -> Self {
        Self {
            variant,
            scale_scores: false,
            combine: CombineMode::AllScores,
        }
    }

    /// Filtering threshold in effect (zero for unfiltered variants).
    pub fn threshold(&self) -> f64 {
        match self.variant {
            AttentionVariant::Filtering { p } | AttentionVariant::Hierarchical { p, .. } => p,
            _ => 0.0,
        }
    }

    pub fn batch_size(&self) -> Option<usize> {
        match self.variant {
            AttentionVariant::Hierarchical { batch_size, .. } => Some(batch_size),
            _ => None,
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        matches!(self.variant, AttentionVariant::Hierarchical { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.threshold();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("threshold p={p} outside [0, 1)")));
        }
        if self.batch_size() == Some(0) {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for AttentionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            AttentionVariant::Standard => write!(f, "ICL"),
            AttentionVariant::Linear => write!(f, "Linear"),
            AttentionVariant::Filtering { p } => write!(f, "Triviality(p={p})"),
            AttentionVariant::Hierarchical { p, batch_size } => {
                write!(f, "FocusICL(p={p},B={batch_size})")
            }
        }
    }
}
