//! Desk-scale attention engine.

pub mod account;
pub mod attention;
pub mod blocks;
pub mod cache;
pub mod check;
pub mod error;
pub mod io;
pub mod latent;
pub mod linalg;
pub mod multihead;
pub mod reference;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
pub use linalg::Matrix;
