//! Softmax-free linear-complexity attention (L2 cross-normalization) and a
//! small vision transformer built on it.
//!
//! * [`tape`] and [`tensor`]: a dense tensor type with reverse-mode autodiff
//!   and exact FLOP / allocation [`counters`].
//! * [`attention`]: the linear XNorm attention, an unfused per-element
//!   reference, the quadratic softmax baseline and attention-map recovery.
//! * [`model`]: the full vision transformer with audits of parameter and FLOP counts.
//! * [`train`]: dataset loaders, AdamW, schedules, checkpoints and the trainer.
//! * [`bench`]: scaling sweeps, log-log fits and batch probing.
//! * [`verify`]: the property suites behind `ufo verify`.

pub mod attention;
pub mod bench;
pub mod counters;
pub mod error;
pub mod faults;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Element, Tensor};
