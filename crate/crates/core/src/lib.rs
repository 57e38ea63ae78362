//! Test-time contrastive concepts for open-world open-vocabulary segmentation.
//!
//! The crate mines co-occurring concepts from caption corpora ([`corpus`],
//! [`cooc`], [`mining`]), filters them ([`filters`]), generates alternatives
//! with a completion service ([`llm`]), assembles per-query contrastive sets
//! ([`ccgen`]), segments precomputed dense features with a dummy
//! "not queried" label ([`segment`]) and scores predictions with IoU-single
//! and classic mIoU ([`metrics`]).

pub mod ccgen;
pub mod cooc;
pub mod corpus;
pub mod digest;
pub mod embed;
pub mod filters;
pub mod llm;
pub mod metrics;
pub mod mining;
pub mod segment;
