//! Absolute-relative few-shot learning.
//!
//! Episodic relation networks supervised with binary and RBF soft relation
//! labels, auxiliary absolute heads predicting class and attribute concepts,
//! feedback wiring from the absolute/relative learners into the relation
//! pathway, and an unsupervised contrastive variant that annotates samples
//! with their augmentation keys.

pub mod arlnet;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod relabel;
pub mod tensor;
pub mod training;

pub use arlnet::{Descriptor, Mode, ParameterStore};
pub use data::{AttributeVector, Dataset, Episode, Split};
pub use error::{ArlError, Result};
pub use tensor::{Real, Tensor};
pub use training::{LossWeights, TrainConfig};
