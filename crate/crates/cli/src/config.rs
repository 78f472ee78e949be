//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ckn_core::domain::{Boundary, Grid, PatchShape, PoolingFilter};
use ckn_core::dpk::DotProductKernel;
use ckn_core::presets;
use ckn_core::{ArchSpec, LayerSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub arch: ArchConfig,
    pub data: DataConfig,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<usize>,
}

fn default_lambda() -> f64 {
    1e-8
}

/// Either a named preset or an explicit layer list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Input extents, one entry per axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryConfig {
    Periodic,
    ZeroPad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Centered window size per axis.
    pub patch: usize,
    pub kernel: KernelConfig,
    pub pooling: PoolingConfig,
    #[serde(default = "yes")]
    pub homogeneous: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Exponential { sigma: f64 },
    Arccos1,
    Polynomial { degree: u32 },
    Linear,
    Series { coeffs: Vec<f64> },
}

impl KernelConfig {
    pub fn build(&self) -> Result<DotProductKernel> {
        let k = match self {
            KernelConfig::Exponential { sigma } => DotProductKernel::exponential(*sigma)?,
            KernelConfig::Arccos1 => DotProductKernel::ArcCos1,
            KernelConfig::Polynomial { degree } => DotProductKernel::Polynomial { degree: *degree },
            KernelConfig::Linear => DotProductKernel::Linear,
            KernelConfig::Series { coeffs } => DotProductKernel::series(coeffs.clone())?,
        };
        Ok(k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolingConfig {
    /// Width `2s+1`, stride `s` unless overridden.
    Gaussian { s: usize, stride: Option<usize> },
    Dirac { stride: Option<usize> },
    Average { width: usize, stride: Option<usize> },
}

impl PoolingConfig {
    pub fn build(&self, rank: usize) -> Result<PoolingFilter> {
        let f = match self {
            PoolingConfig::Gaussian { s, stride } => {
                let f = PoolingFilter::gaussian(*s, rank)?;
                match stride {
                    Some(st) => f.with_stride(*st)?,
                    None => f,
                }
            }
            PoolingConfig::Dirac { stride } => PoolingFilter::dirac(rank, stride.unwrap_or(1))?,
            PoolingConfig::Average { width, stride } => PoolingFilter::average(*width, stride.unwrap_or(1), rank)?,
        };
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Cifar,
    Spheres,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    #[default]
    Local,
    Global,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    pub train: usize,
    pub test: usize,
    /// Dataset directory; defaults to `$CKN_DATA_ROOT`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default)]
    pub whitening: Whitening,
    /// Whitening patch side; defaults to the first layer's patch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whiten_patch: Option<usize>,
    /// Sites of a product-of-spheres signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<usize>,
    /// Patch dimension of a product-of-spheres signal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run config")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!("schema_version {} unsupported (expected {SCHEMA_VERSION})", cfg.schema_version);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Default pipeline run for a named preset on a CIFAR subset.
    pub fn for_preset(name: &str, train: usize, test: usize) -> Result<Self> {
        presets::preset(name)?;
        Ok(RunConfig {
            schema_version: SCHEMA_VERSION,
            arch: ArchConfig { preset: Some(name.to_string()), ..Default::default() },
            data: DataConfig {
                source: Source::Cifar,
                train,
                test,
                root: None,
                whitening: Whitening::Local,
                whiten_patch: None,
                omega: None,
                d: None,
            },
            lambda: default_lambda(),
            seed: 0,
            threads: None,
            out_dir: None,
            tile: None,
        })
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<ArchSpec> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            bail!("lambda must be finite and non-negative, got {}", self.lambda);
        }
        if self.data.train == 0 {
            bail!("data.train must be positive");
        }
        let arch = self.arch.build().context("invalid architecture")?;
        match self.data.source {
            Source::Cifar => {
                let g = arch.input_grid();
                if g.rank() != 2 || arch.channels() != 3 {
                    bail!("CIFAR input needs a 2-D, 3-channel architecture");
                }
                if g.extents()[0] != g.extents()[1] || g.extents()[0] > 32 {
                    bail!("CIFAR architectures need a square input of side <= 32");
                }
            }
            Source::Spheres => {
                let (Some(omega), Some(d)) = (self.data.omega, self.data.d) else {
                    bail!("spheres data needs data.omega and data.d");
                };
                if arch.input_grid().size() != omega || arch.input_grid().rank() != 1 || arch.channels() != d {
                    bail!("architecture input must be a line of {omega} sites with {d} channels");
                }
            }
        }
        Ok(arch)
    }

    /// Side of the whitening window.
    pub fn whiten_side(&self) -> Result<usize> {
        if let Some(p) = self.data.whiten_patch {
            return Ok(p);
        }
        if let Some(name) = &self.arch.preset {
            let _ = presets::preset(name)?;
            return Ok(3);
        }
        Ok(self.arch.layers.first().map_or(1, |l| l.patch))
    }
}

impl ArchConfig {
    pub fn build(&self) -> Result<ArchSpec> {
        if let Some(name) = &self.preset {
            if self.grid.is_some() || self.channels.is_some() || !self.layers.is_empty() {
                bail!("arch.preset cannot be combined with an explicit layer list");
            }
            return Ok(presets::preset(name)?.arch);
        }
        let Some(extents) = &self.grid else { bail!("arch.grid is required without a preset") };
        let Some(channels) = self.channels else { bail!("arch.channels is required without a preset") };
        if self.layers.is_empty() {
            bail!("arch.layers is empty");
        }
        let boundary = match self.boundary.unwrap_or(BoundaryConfig::Periodic) {
            BoundaryConfig::Periodic => Boundary::Periodic,
            BoundaryConfig::ZeroPad => Boundary::ZeroPad,
        };
        let grid = Grid::new(extents.clone(), boundary)?;
        let rank = grid.rank();
        let layers = self
            .layers
            .iter()
            .map(|l| -> Result<LayerSpec> {
                let spec = LayerSpec::new(
                    PatchShape::centered(rank, l.patch)?,
                    l.kernel.build()?,
                    l.pooling.build(rank)?,
                );
                Ok(if l.homogeneous { spec } else { spec.non_homogeneous() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchSpec::new(grid, channels, layers)?)
    }
}
