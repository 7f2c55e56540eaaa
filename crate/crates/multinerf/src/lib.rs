//! Adaptive multi-NeRF rendering pipeline.
//!
//! A scene is represented by a KD-tree of axis-aligned boxes, each node
//! carrying a small MLP distilled from a global teacher field. Rendering
//! traverses rays through the tree, fills an equal sample budget into every
//! intersected interval, groups samples by node for batched inference, and
//! composites with emission-absorption quadrature.

pub mod cli;
pub mod field;
pub mod geometry;
pub mod renderer;
pub mod sampling;
pub mod scheduler;
pub mod subdivision;
pub mod training;

pub(crate) mod seeding;

mod error;

pub use error::{Error, Result};
