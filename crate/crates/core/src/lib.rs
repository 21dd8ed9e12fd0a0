//! Few-shot plant-leaf-disease classification over a frozen (or lightly
//! adapted) MobileNet ensemble.
//!
//! The pipeline runs in stages: a [`corpus`] manifest is split into disjoint
//! meta-train / meta-test classes, [`backbones`] adapt and embed images,
//! [`fusion`] concatenates the three embeddings, [`heads`] train a fresh
//! classifier per episode and [`metrics`] aggregate episode accuracies into
//! mean ± 95% confidence tables. [`pipeline`] ties the stages together with
//! content-addressed caching.

pub mod backbones;
pub mod corpus;
pub mod footprint;
pub mod fusion;
pub mod heads;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod seeds;
pub mod synthetic;
