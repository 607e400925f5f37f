pub mod attention;
pub mod backend;
pub mod config;
pub mod dump;
pub mod error;
pub mod eval;
pub mod freq;
pub mod injection;
pub mod inversion;
pub mod io;
pub mod pipeline;
pub mod tensor;
pub mod textmask;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
