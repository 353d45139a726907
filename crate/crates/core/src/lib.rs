pub mod augment;
pub mod data;
pub mod diagnostics;
pub mod ema;
pub mod error;
pub mod harness;
pub mod nn;
pub mod noise;
pub mod schedule;
pub mod semi;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// Book chapters double as doc-tests so their listings cannot rot.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/semi.md")]
    mod semi {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
