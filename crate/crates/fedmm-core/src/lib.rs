//! Federated dual-codebook quantization of collaborative embeddings for
//! multi-market CTR prediction.
//!
//! Markets are isolated clients with disjoint user/item ID spaces. Each
//! market pretrains collaborative embeddings locally ([`cf`]), compresses
//! them with a two-level residual quantizer whose first-level codebook is
//! synchronized through a federation server and whose second-level codebook
//! never leaves the client ([`quantizer`], [`federation`]), and feeds the
//! resulting discrete token pairs into its local CTR model as extra
//! categorical features ([`ctr`]). The only thing that ever crosses the
//! market boundary is the Laplace-perturbed first-level codebook.
//!
//! [`pipeline`] wires the stages into reproducible, manifest-driven runs;
//! [`data`] handles ingestion, preprocessing, and synthetic multi-market
//! data; [`nn`] is the shared dense kernel underneath all of it.

pub mod cf;
pub mod ctr;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod quantizer;
pub mod seeding;

pub use error::{Error, Result};
