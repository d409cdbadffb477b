//! Semantic-guided adaptive expert forest.
//!
//! Task adapters are grouped into conceptual clusters ([`clustering`]), each
//! cluster is folded into a balanced sign-max merge tree whose roots are joined
//! by a global expert ([`forest`]), and predictions come from an
//! entropy-guided search over the trees with confidence-weighted fusion
//! ([`inference`]). [`simulator`] provides a small synthetic class-incremental
//! pipeline that trains bottleneck adapters end to end.

pub mod bundle;
pub mod clustering;
pub mod config;
pub mod error;
pub mod forest;
pub mod inference;
pub mod numeric;
pub mod rng;
pub mod simulator;

pub use error::{Result, SaefError};
