//! Training attention models under an impermissible-token penalty, and the
//! diagnostics that show where the information actually flows.

pub mod attention;
pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
