pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod network;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod plane;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod upsample;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use error::{Error, Result, Violation};
pub use network::{ArchConfig, ModelMeta, StyleModel};
pub use params::StrokeParams;
pub use plane::ImagePlane;
pub use tensor::{FeatureTensor, Tensor};

/// Guide chapters, compiled so their snippets stay in step with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/controls.md")]
    mod controls {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/editing.md")]
    mod editing {}
    #[doc = include_str!("../../../book/src/export.md")]
    mod export {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
