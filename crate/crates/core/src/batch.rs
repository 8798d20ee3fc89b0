use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Which input stream a sequence position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Hidden states for `K` tokens with per-token modality tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    /// `K×D` hidden states.
    pub hidden: Tensor,
    pub modality: Vec<Modality>,
    /// Position of each token within its sequence.
    pub positions: Vec<usize>,
}

impl TokenBatch {
    /// All-text batch with positions `0..K`.
    pub fn text(hidden: Tensor) -> Self {
        let k = hidden.shape().first().copied().unwrap_or(0);
        Self {
            hidden,
            modality: vec![Modality::Text; k],
            positions: (0..k).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }
}
