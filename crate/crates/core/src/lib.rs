//! Sequential recommendation with segment compression: long interaction
//! histories are split into segments, each segment is summarized into a few
//! learnable expert tokens through a segmented attention mask, and
//! recommendations are served from the cached expert activations plus the
//! most recent segment.

pub mod costmodel;
pub mod datakit;
pub mod evalkit;
pub mod expertlens;
pub mod inference;
pub mod maskgen;
pub mod seqcore;
pub mod tinyformer;
pub mod trainer;
