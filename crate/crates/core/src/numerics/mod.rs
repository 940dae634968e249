//! Dense tensors and reverse-mode differentiation.
//!
//! [`Tape`] records every operation of a forward pass together with the
//! values it produced; [`Tape::backward`] walks the record in reverse and
//! applies one explicit backward rule per operation. There is no graph
//! optimizer: the model zoo is small and fixed.

mod blob;
mod element;
mod gradcheck;
mod ops;
mod param;
mod tape;
mod tensor;

pub use blob::{read_blob, write_blob, BLOB_MAGIC, BLOB_VERSION};
pub use element::{DType, Element};
pub use gradcheck::{finite_diff_check, finite_diff_check_params};
pub use ops::{pixel_shuffle, pixel_shuffle_index, pixel_unshuffle, pixel_unshuffle_index, transpose_index};
pub use param::{Grads, Graph, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, TapeStats, Var};
pub use tensor::Tensor;
