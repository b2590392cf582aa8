//! Decoupled hierarchical multimodal distillation (DHMD).
//!
//! The model splits each modality (language, visual, acoustic) into a
//! homogeneous part produced by a shared encoder and a heterogeneous part
//! produced by modality-private encoders, distils knowledge between
//! modalities in both spaces with learned directed graphs, aligns them
//! against shared learnable dictionaries, and fuses everything into a
//! single task head.
//!
//! Module map:
//! - [`datamodel`]: samples, batches, on-disk formats and the synthetic task generator.
//! - [`decoupler`]: shallow temporal convolutions, shared/private encoders and the decoupling losses.
//! - [`graph_distill`]: the graph distillation unit (logit heads, edge network, weighted discrepancy loss).
//! - [`crossmodal`]: pairwise cross-modal attention stacks producing reinforced heterogeneous features.
//! - [`dictionary`]: dictionary matching and the cross-modal triplet contrastive losses.
//! - [`pipeline`]: model assembly, objective, training, evaluation, exports and the CLI plumbing.

pub mod crossmodal;
pub mod datamodel;
pub mod decoupler;
pub mod dictionary;
pub mod error;
pub mod graph_distill;
pub mod nn;
pub mod pipeline;
pub mod triplet;

pub use error::{DhmdError, Result};
