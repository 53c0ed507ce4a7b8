//! Attribute similarity learning from temporal proximity of consumption.
//!
//! Listening histories are cut into weekly documents, a latent taste model is
//! fitted over them with collapsed Gibbs sampling, and the cosine similarity of
//! per-song taste distributions becomes the teaching signal for a shared-weight
//! temporal convolution network that operates on raw song attributes.
//!
//! Module map:
//!
//! * [`ingest`]: event logs, attribute records, song matching, feature tensors.
//! * [`corpus`]: weekly bag-of-songs documents and the song vocabulary.
//! * [`topics`]: LDA by collapsed Gibbs sampling and taste similarity.
//! * [`temporal`]: gap-time and n-skip analyses of listening streams.
//! * [`pairs`]: labelled song-pair datasets.
//! * [`simnet`]: the pairwise convolution network, its gradients and training.
//! * [`synth`]: synthetic worlds with planted ground truth.
//! * [`pipeline`]: configuration, staged end-to-end runs and run manifests.

pub mod corpus;
pub mod error;
pub mod ingest;
pub mod pairs;
pub mod pipeline;
pub mod simnet;
pub mod stats;
pub mod synth;
pub mod temporal;
pub mod topics;

pub use error::{Error, Result};
