//! Tri-modal contrastive alignment of a point-cloud encoder against frozen,
//! precomputed text and image embedding caches.
//!
//! The crate is organized bottom-up:
//!
//! - [`datamodel`]: manifests, embedding caches, triplet assembly, surface
//!   sampling and augmentation.
//! - [`encoder`]: the reference PointNet-style shape encoder, the text/image
//!   projection heads and the flat parameter layout.
//! - [`alignloss`]: the four-term contrastive objective with directional
//!   negative masking, and its gradients.
//! - [`mining`]: exact kNN tables, seeded batch construction and the
//!   false-negative filter.
//! - [`trainer`]: the two-round optimization loop and checkpoints.
//! - [`evalkit`]: prompt averaging, zero-shot classification and linear probes.
//! - [`retrieval`]: the cosine index, joint queries and the query service
//!   request handling.

pub mod alignloss;
mod bytes;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod mining;
pub mod retrieval;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
