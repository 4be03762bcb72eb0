//! Multi-view contrastive representation learning with partially shared latents.

pub mod algebra;
pub mod error;
pub mod eval;
pub mod harness;
pub mod index_set;
mod linalg;
pub mod latent_model;
pub mod mixing;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod selectors;
pub mod system;
pub mod training;

pub use error::{Error, Result};
pub use index_set::IndexSet;
