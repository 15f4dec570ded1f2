//! Minimal tensor algebra with a reverse-mode tape.
//!
//! [`Tensor`] holds row-major values; [`Graph`] records ops on them and runs
//! reverse-mode accumulation. Everything is generic over [`Scalar`] so the same
//! model code trains in f32 and is verified in f64 by [`gradcheck`].

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_check_many, Coords, GradCheckReport};
pub use graph::{Graph, Var, L2_EPS, LN_EPS};
pub use scalar::{DType, Scalar};
pub use tensor::{broadcast_shape, Tensor, DUMP_MAGIC, DUMP_VERSION};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

/// Bilinear resize (align-corners false) of a c×h×w tensor outside any graph.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.bilinear_resize(v, oh, ow)?;
    Ok(g.value(out).clone())
}
