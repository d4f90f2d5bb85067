pub mod autodiff;
pub mod data;
pub mod experiment;
pub mod explain;
pub mod feedback;
pub mod gradcheck;
pub mod linalg;
pub mod models;
pub mod session;
pub mod spray;
pub mod tensor;

pub use tensor::{Tensor, TensorError};

// The book's snippets run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/feedback.md")]
    mod feedback {}
    #[doc = include_str!("../../../book/src/loop.md")]
    mod session_loop {}
    #[doc = include_str!("../../../book/src/spray.md")]
    mod spray {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
