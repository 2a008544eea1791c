//! Deterministic federated-distillation simulator with server-side knowledge
//! refinement.
//!
//! Heterogeneous clients exchange extracted features, logits, and labels with
//! a server instead of model weights. Before the server distills on the
//! uplinked logits it can refine them into a congruent family: KKR pins every
//! client's peak probability to a shared target T (closed form with a
//! rectification fallback), SKR pins Shannon entropy to a target E via
//! temperature bisection, and a generalized kernel search covers kernels with
//! no closed form. Everything is seeded and bitwise reproducible.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod knowledge;
pub mod linalg;
pub mod metrics;
pub mod neural;
pub mod refine;
pub mod runner;
pub mod seeding;

pub use error::{Error, Result};
pub use knowledge::{
    cross_entropy, kl_divergence, peak_probability, shannon_entropy, softmax, DistMeasure,
    Knowledge, ProbVector,
};
pub use refine::{
    bisection_root, generalized_kkr_refine, kkr_refine, knowledge_discrepancy, refine, skr_refine,
    BisectionConfig, KernelSpec, RefinementConfig, Strategy,
};
