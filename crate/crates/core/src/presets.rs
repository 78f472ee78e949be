//! Named CIFAR-10 architectures.
//!
//! A 32x32 image cannot be pooled by 2 and then 5 with integral extents,
//! so the two-layer presets run on the central 30x30 crop (30 -> 15 -> 3).

use crate::ckmap::{ArchSpec, LayerSpec};
use crate::domain::{Boundary, Grid, PatchShape, PoolingFilter};
use crate::dpk::DotProductKernel;
use crate::error::{Error, Result};

pub const EXP_SIGMA: f64 = 0.6;
pub const CROP_SIDE: usize = 30;

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    /// Image side after cropping.
    pub side: usize,
    pub arch: ArchSpec,
}

pub const NAMES: &[&str] = &[
    "exp-exp-2layer",
    "exp-poly2-2layer",
    "exp-poly3-2layer",
    "exp-poly4-2layer",
    "exp-exp-3x3",
    "strided-3x3",
];

fn exp() -> DotProductKernel {
    DotProductKernel::Exponential { sigma: EXP_SIGMA }
}

/// Two-layer image architecture on a zero-padded `side x side` grid with
/// Gaussian pooling (or Dirac pooling at the same strides when `strided`).
pub fn two_layer(
    side: usize,
    patches: [usize; 2],
    kernels: [DotProductKernel; 2],
    pools: [usize; 2],
    strided: bool,
) -> Result<ArchSpec> {
    let grid = Grid::plane(side, side).with_boundary(Boundary::ZeroPad);
    let mut layers = Vec::with_capacity(2);
    for ((p, k), s) in patches.into_iter().zip(kernels).zip(pools) {
        let pool = if strided { PoolingFilter::dirac(2, s)? } else { PoolingFilter::gaussian(s, 2)? };
        layers.push(LayerSpec::new(PatchShape::centered(2, p)?, k, pool));
    }
    ArchSpec::new(grid, 3, layers)
}

pub fn preset(name: &str) -> Result<Preset> {
    let poly = |degree| DotProductKernel::Polynomial { degree };
    let arch = match name {
        "exp-exp-2layer" => two_layer(CROP_SIDE, [3, 5], [exp(), exp()], [2, 5], false)?,
        "exp-poly2-2layer" => two_layer(CROP_SIDE, [3, 5], [exp(), poly(2)], [2, 5], false)?,
        "exp-poly3-2layer" => two_layer(CROP_SIDE, [3, 5], [exp(), poly(3)], [2, 5], false)?,
        "exp-poly4-2layer" => two_layer(CROP_SIDE, [3, 5], [exp(), poly(4)], [2, 5], false)?,
        "exp-exp-3x3" => two_layer(CROP_SIDE, [3, 3], [exp(), exp()], [2, 5], false)?,
        "strided-3x3" => two_layer(CROP_SIDE, [3, 3], [exp(), exp()], [2, 5], true)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name}; known: {}",
                NAMES.join(", ")
            )))
        }
    };
    let name = NAMES.iter().find(|n| **n == name).copied().unwrap();
    Ok(Preset { name, side: CROP_SIDE, arch })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_build() {
        for n in NAMES {
            let p = preset(n).unwrap();
            assert_eq!(p.arch.grids().last().unwrap().extents(), &[3, 3]);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn uncropped_cifar_rejected() {
        assert!(matches!(
            two_layer(32, [3, 5], [exp(), exp()], [2, 5], false),
            Err(Error::NonDivisibleStride { stride: 5, extent: 16 })
        ));
    }
}
