//! Variational Bayes fault diagnosis for multistation assemblies with
//! spatially correlated key control characteristics and an unknown number of
//! fault patterns shared across samples.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod vbem;

pub use error::{Error, Result};
