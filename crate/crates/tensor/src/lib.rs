//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Values live on a [`Tape`]; every primitive returns a [`Var`] handle and,
//! when any input participates in differentiation, records enough state to
//! run its adjoint during [`Tape::backward`]. The primitive set is exactly
//! what the recognizer needs: dense matmul, row-broadcast bias, layer norm,
//! softmax, fused multi-head attention, strided 2D convolution, embedding
//! lookup and the two training losses (cross-entropy and cosine distance).
//!
//! ```
//! use easyfirst_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
//! let s = tape.sum(x);
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
//! ```

mod element;
mod error;
pub mod gradcheck;
mod nn;
mod optim;
mod tape;
mod tensor;

pub use element::Element;
pub use error::TensorError;
pub use nn::AttnSegment;
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
