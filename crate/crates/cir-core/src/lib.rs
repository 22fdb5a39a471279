// Numeric kernels index several parallel arrays per loop; indexed form
// keeps the algebra readable.
#![allow(clippy::needless_range_loop)]

//! Composed-retrieval laboratory over embedding vectors.
//!
//! Two training regimes over the same synthetic gallery: a fused
//! query-former head trained with in-batch InfoNCE, and a separate text
//! tower trained with a pairwise preference (DPO) loss against flat-index
//! mined hard negatives. Retrieval is exact inner-product top-K over a
//! normalized gallery, evaluated with Recall@K.

pub mod checkpoint;
pub mod dataset;
pub mod encoders;
pub mod index;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use dataset::{Gallery, PlantedTruth, Split, SynthConfig, TokenSeq, TripletSet};
pub use encoders::{FusionModel, ModelConfig, TextTower, VisionStub};
pub use index::{FlatIpIndex, SearchResult};
pub use pipeline::{Dataset, Mode, RecallReport, TrainConfig, TrainHistory};
pub use tensor::{Matrix, SeededRng};
