//! Retrieval, fusion, geometric verification and caption-context extraction
//! for event-enriched image captioning.
//!
//! The crate covers every non-neural stage of the pipeline. Neural encoders
//! and the caption model sit behind the traits in [`providers`].
//!
//! Data-parallel inner loops (top-k scans, descriptor matching, RANSAC
//! hypothesis scoring, per-row image filtering) run on rayon when the
//! `parallel` feature is enabled (the default) and sequentially otherwise.
//! Both paths produce bit-identical results.

pub mod embed_store;
pub mod fusion;
pub mod geom_verify;
pub mod keypoints;
pub mod metrics;
pub mod providers;
pub mod synth;
pub mod text_context;

mod par;

pub use embed_store::{EmbeddingRecord, EmbeddingStore, ScoredHit, StoreFormat, StoreManifest};
pub use fusion::{fuse, FusedCandidate, FusionConfig, ModelRanking};
pub use geom_verify::{verify_pair, VerificationReport, VerificationScores, VerifyParams};
pub use keypoints::GrayImage;
