//! Synthetic tri-modal datasets: generation with known latent structure,
//! a checksummed on-disk format, batching, and the evaluation metrics.

mod io;
mod metrics;
mod synth;

pub use io::{generate, load_dataset, Dataset, Manifest, BLOB_MAGIC};
pub use metrics::{acc2, acc7, compute_all as compute_all_metrics, f1, mse, to_class7, Metrics};
pub use synth::{synthesize, ModalityShape, SyntheticData, SyntheticSpec};

use crate::numcore::{Scalar, Tensor};
use crate::{Error, Result};

/// Input channel role. Order is fixed: text, audio, video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Video => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

/// The unordered modality pairs, used by the pairwise MI estimators.
pub const MODALITY_PAIRS: [(Modality, Modality); 3] = [
    (Modality::Text, Modality::Audio),
    (Modality::Text, Modality::Video),
    (Modality::Audio, Modality::Video),
];

/// One batch of padded per-modality sequences with labels.
///
/// Invariants: the three feature blocks share the batch dimension, padded
/// positions (index >= length) are exactly zero, labels lie in the label
/// range declared by the dataset.
pub struct ModalityBatch<S: Scalar> {
    /// Per modality: [B x T_m x d_m], not gradient-tracked.
    pub feats: [Tensor<S>; 3],
    /// Per modality: valid length of each sample.
    pub lens: [Vec<usize>; 3],
    /// [B] labels.
    pub labels: Tensor<S>,
    /// Labels as plain f64 (bin lookups, metrics).
    pub label_values: Vec<f64>,
    /// Dataset-level sample indices in batch order.
    pub indices: Vec<usize>,
}

impl<S: Scalar> ModalityBatch<S> {
    pub fn batch_size(&self) -> usize {
        self.labels.numel()
    }
}

/// Dataset split names used by the manifest and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split: {other}"))),
        }
    }
}
