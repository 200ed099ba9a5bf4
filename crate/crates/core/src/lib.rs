//! Normalizer-free residual networks: scaled weight standardization,
//! nonlinearity gains, NF residual blocks, adaptive gradient clipping, the
//! optimizer recipe, architecture builders and a small training harness, all
//! on top of a self-contained reverse-mode tensor library.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agc;
pub mod arch;
pub mod error;
pub mod gains;
pub mod harness;
pub mod nfblock;
pub mod optim;
pub mod signalprop;
pub mod tensor;
pub mod wsconv;

pub use error::{Error, Result};
