//! Joint document-level information extraction: mention detection, entity
//! typing, coreference, relation classification and entity disambiguation in
//! one forward pass per document.

pub mod bio;
pub mod clustering;
pub mod document;
pub mod encoder;
pub mod eval;
mod error;
pub mod linking;
pub mod mention;
pub mod model;
pub mod relation;
pub mod synthetic;
pub mod training;
pub mod typing;
pub mod vocab;

pub use error::{Error, Result};
