//! Dense `f64` reverse-mode autodiff, feed-forward layers and Adam.
//!
//! Sized for small networks on a CPU: every op allocates its output, and the
//! backward pass is a single reverse sweep over the tape.

pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use error::{NnError, Result};
pub use layers::{Activation, LayerNorm, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
