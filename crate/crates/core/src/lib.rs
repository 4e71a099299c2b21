//! Temporal-spatial perception for audio-visual question answering.
//!
//! The pipeline picks the video segments a declarative prompt points at,
//! merges similar visual tokens inside those segments, lets the audio stream
//! attend over the merged tokens and finally fuses everything with the
//! question to classify an answer. Everything runs on a small tape-based
//! tensor engine in [`tensor`].

mod binio;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod features;
pub mod fusion;
pub mod inspect;
pub mod model;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Result, TspmError};
pub use tensor::{Tape, Tensor, Var};
