//! Layer-wise transfer learning experiments on small convolutional networks.

pub mod analysis;
pub mod config;
pub mod datasplit;
pub mod experiment;
pub mod hierarchy;
pub mod nncore;
pub mod optim;
pub mod surgery;

mod io_util;

pub use io_util::{short_hash, write_atomic};
