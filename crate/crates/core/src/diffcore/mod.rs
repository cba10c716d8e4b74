// SPDX-License-Identifier: Apache-2.0

//! Dense tensors, a reverse-mode gradient tape, small MLP layers and the
//! gamma-family special functions used by the Dirichlet losses.

pub mod gradcheck;
pub mod layers;
pub mod special;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheck, FD_FLOOR, FD_REL_TOL, FD_STEP};
pub use layers::{affine, affine_var, Activation, BoundLinear, BoundMlp, Linear, Mlp};
pub use special::{digamma, ln_gamma, log_beta, trigamma, EULER_GAMMA};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{argmax, Tensor2};
