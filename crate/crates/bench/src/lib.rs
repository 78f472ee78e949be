//! Fixtures shared by the benchmarks.

use ckn_core::data::gen_white_noise;
use ckn_core::{ArchSpec, DotProductKernel, Grid, LayerSpec, PatchShape, PoolingFilter, Signal};

/// Two-layer exponential architecture on `side x side` RGB images.
pub fn image_arch(side: usize) -> ArchSpec {
    let k = DotProductKernel::Exponential { sigma: 0.6 };
    ArchSpec::new(
        Grid::plane(side, side),
        3,
        vec![
            LayerSpec::new(PatchShape::centered(2, 3).unwrap(), k.clone(), PoolingFilter::gaussian(2, 2).unwrap()),
            LayerSpec::new(PatchShape::centered(2, 3).unwrap(), k, PoolingFilter::gaussian(2, 2).unwrap()),
        ],
    )
    .unwrap()
}

pub fn images(arch: &ArchSpec, n: usize, seed: u64) -> Vec<Signal> {
    gen_white_noise(arch.input_grid(), arch.channels(), n, 1.0, seed).unwrap().signals().to_vec()
}
