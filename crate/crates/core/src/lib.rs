pub mod ckmap;
pub mod data;
pub mod domain;
pub mod dpk;
pub mod error;
pub mod featoracle;
pub mod fingerprint;
pub mod gram;
pub mod krr;
pub mod presets;
pub mod suites;
pub mod theory;

pub use error::{Error, Result};
pub use ckmap::{kernel_eval, ArchSpec, Evaluator, LayerSpec};
pub use data::Dataset;
pub use domain::{Boundary, Grid, PatchShape, PoolingFilter, Signal};
pub use dpk::DotProductKernel;
pub use gram::{CrossGram, GramMatrix};
pub use krr::KrrModel;
