//! Fine-grained propaganda detection.
//!
//! * [`corpus`]: articles, fragment labels, sentence labels, BIO encoding.
//! * [`features`]: lexicon, punctuation, concept, word-vector and logit features.
//! * [`slc`]: thresholded logistic-regression sentence classifier.
//! * [`flc`]: linear-chain CRF fragment tagger.
//! * [`eval`]: sentence-level F1 and the partial-overlap span metric.
//! * [`cli`]: the `propdetect` command-line pipelines.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod flc;
pub mod par;
pub mod slc;
pub mod synth;

pub use error::{Error, Result};
