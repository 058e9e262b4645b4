//! Unsupervised domain adaptation for binary vessel segmentation.
//!
//! The crate trains a UNet segmenter on a labeled source domain and an
//! unlabeled target domain by combining two mechanisms:
//!
//! * **entropy-based adversarial training** — a small convolutional
//!   discriminator tells source entropy maps from target entropy maps while
//!   the segmenter learns to make target predictions look confidently
//!   source-like;
//! * **transfer normalization** — a batch-normalization variant that keeps
//!   separate statistics and affine parameters per domain and reweights each
//!   feature channel by how transferable its statistics are across domains.
//!
//! Everything runs on a from-scratch dense `f64` tensor library with
//! tape-based reverse-mode differentiation, verified by finite-difference
//! gradient checks. A synthetic two-domain retinal-vessel generator stands in
//! for real fundus data so the whole pipeline is testable at desk scale.

pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod norm;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod tensor_io;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// The two data distributions of an adaptation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!(
                "unknown domain `{other}` (expected source|target)"
            ))),
        }
    }
}
