//! Exact evaluation of multi-layer convolutional kernels.
//!
//! The propagation state for a pair of signals `(x, y)` is the cross map
//! `Σ[u, v] = ⟨Ψ_ℓ(x)[u], Ψ_ℓ(y)[v]⟩` over all position pairs of the current
//! layer grid. Each layer updates it in three stages:
//!
//! * patch extraction: `Σ'[u, v] = Σ_{δ ∈ S} Σ[u+δ, v+δ]`
//! * kernel mapping: `Σ'[u, v] = ‖a‖‖b‖ κ(Σ[u, v] / (‖a‖‖b‖))` where the norms
//!   come from the diagonals of the two self maps (or `κ(Σ[u, v])` for
//!   non-homogeneous layers)
//! * pooling: `Σ' = A Σ Aᵀ`
//!
//! The kernel value is the trace of the final map. All loops run in a fixed
//! order (row-major over `u`, then `v`, then the inner index), so results do
//! not depend on scheduling.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::domain::{Grid, PatchShape, PoolingFilter, Signal};
use crate::dpk::{DotProductKernel, COSINE_TOLERANCE};
use crate::error::{Error, Result};
use crate::fingerprint::Fnv64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub patch: PatchShape,
    pub kernel: DotProductKernel,
    pub pooling: PoolingFilter,
    /// Homogeneous lift `‖z‖‖z'‖κ(cos)` when true, plain `κ(⟨z, z'⟩)` otherwise.
    pub homogeneous: bool,
}

impl LayerSpec {
    pub fn new(patch: PatchShape, kernel: DotProductKernel, pooling: PoolingFilter) -> Self {
        LayerSpec { patch, kernel, pooling, homogeneous: true }
    }

    pub fn non_homogeneous(mut self) -> Self {
        self.homogeneous = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    input: Grid,
    channels: usize,
    layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(input: Grid, channels: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("architecture needs >= 1 input channel".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidArgument("architecture needs >= 1 layer".into()));
        }
        let mut grid = input.clone();
        for layer in &layers {
            if layer.patch.rank() != grid.rank() {
                return Err(Error::RankMismatch { expected: grid.rank(), found: layer.patch.rank() });
            }
            if layer.pooling.rank() != grid.rank() {
                return Err(Error::RankMismatch {
                    expected: grid.rank(),
                    found: layer.pooling.rank(),
                });
            }
            layer.kernel.validate()?;
            grid = grid.downsample(layer.pooling.stride())?;
        }
        Ok(ArchSpec { input, channels, layers })
    }

    pub fn input_grid(&self) -> &Grid {
        &self.input
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Grids `Ω_0, …, Ω_L`.
    pub fn grids(&self) -> Vec<Grid> {
        let mut out = vec![self.input.clone()];
        for layer in &self.layers {
            let g = out.last().unwrap().downsample(layer.pooling.stride()).expect("validated");
            out.push(g);
        }
        out
    }

    /// Stable hash of the serialized architecture.
    pub fn fingerprint(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("architecture serializes");
        Fnv64::new().write(b"ckn-arch").write(&bytes).finish()
    }

    pub fn check_signal(&self, x: &Signal) -> Result<()> {
        if x.grid().extents() != self.input.extents() || x.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "signal {:?}x{} does not match architecture input {:?}x{}",
                x.grid().extents(),
                x.channels(),
                self.input.extents(),
                self.channels
            )));
        }
        Ok(())
    }
}

/// Content hash of a signal (grid, channels and values).
pub fn signal_fingerprint(x: &Signal) -> u64 {
    let mut h = Fnv64::new();
    h.write(b"ckn-signal");
    for &e in x.grid().extents() {
        h.write_u64(e as u64);
    }
    h.write_u64(x.channels() as u64).write_f64s(x.values()).finish()
}

/// Dense `|Ω| x |Ω|` map of pairwise feature inner products.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCovMap {
    grid: Grid,
    values: Vec<f64>,
}

impl CrossCovMap {
    /// Layer-0 map `Σ[u, v] = ⟨x[u], y[v]⟩`.
    pub fn initial(x: &Signal, y: &Signal) -> Self {
        let n = x.len();
        let mut values = Vec::with_capacity(n * n);
        for u in 0..n {
            let a = x.at(u);
            for v in 0..n {
                values.push(a.iter().zip(y.at(v)).map(|(p, q)| p * q).sum());
            }
        }
        CrossCovMap { grid: x.grid().clone(), values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn size(&self) -> usize {
        self.grid.size()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.size() + v]
    }

    pub fn diag(&self) -> Vec<f64> {
        let n = self.size();
        (0..n).map(|u| self.values[u * n + u]).collect()
    }

    pub fn trace(&self) -> f64 {
        let n = self.size();
        (0..n).map(|u| self.values[u * n + u]).sum()
    }

    fn patch_stage(&self, patch: &PatchShape) -> CrossCovMap {
        let n = self.size();
        let shifts: Vec<Vec<Option<usize>>> = patch
            .offsets()
            .iter()
            .map(|&off| (0..n).map(|u| self.grid.shift(u, off)).collect())
            .collect();
        let mut values = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = 0.0;
                for sh in &shifts {
                    if let (Some(a), Some(b)) = (sh[u], sh[v]) {
                        acc += self.values[a * n + b];
                    }
                }
                values[u * n + v] = acc;
            }
        }
        CrossCovMap { grid: self.grid.clone(), values }
    }

    fn kernel_stage(
        &mut self,
        layer: &LayerSpec,
        diag_x: &[f64],
        diag_y: &[f64],
        index: usize,
    ) -> Result<()> {
        let n = self.size();
        let k = &layer.kernel;
        let fail = |e: Error| Error::NumericalFailure { layer: index, what: e.to_string() };
        if layer.homogeneous {
            let nx: Vec<f64> = diag_x.iter().map(|d| d.max(0.0).sqrt()).collect();
            let ny: Vec<f64> = diag_y.iter().map(|d| d.max(0.0).sqrt()).collect();
            for u in 0..n {
                for v in 0..n {
                    let scale = nx[u] * ny[v];
                    let entry = &mut self.values[u * n + v];
                    *entry = if scale == 0.0 {
                        0.0
                    } else {
                        let cos = *entry / scale;
                        if !(cos.abs() <= 1.0 + COSINE_TOLERANCE) {
                            return Err(Error::NumericalFailure {
                                layer: index,
                                what: format!("cosine {cos} at ({u}, {v})"),
                            });
                        }
                        scale * k.eval(cos).map_err(fail)?
                    };
                }
            }
        } else {
            for entry in self.values.iter_mut() {
                *entry = k.eval_raw(*entry).map_err(fail)?;
            }
        }
        Ok(())
    }

    fn pool_stage(&self, filter: &PoolingFilter) -> Result<CrossCovMap> {
        let n = self.size();
        let (out_grid, rows) = filter.operator_rows(&self.grid)?;
        let m = out_grid.size();
        // T = Σ Aᵀ, then Σ' = A T.
        let mut t = vec![0.0; n * m];
        for a in 0..n {
            let src = &self.values[a * n..(a + 1) * n];
            for (vo, row) in rows.iter().enumerate() {
                let mut acc = 0.0;
                for &(b, w) in row {
                    acc += w * src[b];
                }
                t[a * m + vo] = acc;
            }
        }
        let mut values = vec![0.0; m * m];
        for (uo, row) in rows.iter().enumerate() {
            for vo in 0..m {
                let mut acc = 0.0;
                for &(a, w) in row {
                    acc += w * t[a * m + vo];
                }
                values[uo * m + vo] = acc;
            }
        }
        Ok(CrossCovMap { grid: out_grid, values })
    }

    fn check_finite(&self, layer: usize, stage: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericalFailure { layer, what: format!("non-finite entry after {stage}") })
        }
    }
}

/// Where the kernel stage takes its per-position norms from.
enum Norms<'a> {
    /// Self map: use the map's own diagonal and record it.
    Own(&'a mut Vec<Vec<f64>>),
    /// Cross map: diagonals recorded by the two self propagations.
    Given(&'a [Vec<f64>], &'a [Vec<f64>]),
}

fn propagate(arch: &ArchSpec, x: &Signal, y: &Signal, mut norms: Norms<'_>) -> Result<CrossCovMap> {
    let mut map = CrossCovMap::initial(x, y);
    map.check_finite(0, "input")?;
    for (i, layer) in arch.layers().iter().enumerate() {
        let index = i + 1;
        map = map.patch_stage(&layer.patch);
        match &mut norms {
            Norms::Own(record) => {
                let d = map.diag();
                map.kernel_stage(layer, &d, &d, index)?;
                record.push(d);
            }
            Norms::Given(dx, dy) => {
                map.kernel_stage(layer, &dx[i], &dy[i], index)?;
            }
        }
        map.check_finite(index, "kernel mapping")?;
        map = map.pool_stage(&layer.pooling)?;
        map.check_finite(index, "pooling")?;
    }
    Ok(map)
}

/// Per-signal state reused across every kernel evaluation involving it: the
/// self-map diagonals at each layer and `K(x, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfMapCache {
    arch_fingerprint: u64,
    signal_fingerprint: u64,
    diags: Vec<Vec<f64>>,
    value: f64,
}

impl SelfMapCache {
    pub fn arch_fingerprint(&self) -> u64 {
        self.arch_fingerprint
    }

    pub fn signal_fingerprint(&self) -> u64 {
        self.signal_fingerprint
    }

    /// `K(x, x)`.
    pub fn self_value(&self) -> f64 {
        self.value
    }
}

/// Counters of full map propagations performed by an [`Evaluator`].
#[derive(Debug, Default)]
pub struct PropagationCounts {
    pub self_maps: AtomicU64,
    pub cross_maps: AtomicU64,
}

impl PropagationCounts {
    pub fn self_maps(&self) -> u64 {
        self.self_maps.load(Ordering::Relaxed)
    }

    pub fn cross_maps(&self) -> u64 {
        self.cross_maps.load(Ordering::Relaxed)
    }
}

/// Kernel evaluator bound to one architecture. Shareable across threads.
#[derive(Debug)]
pub struct Evaluator<'a> {
    arch: &'a ArchSpec,
    fingerprint: u64,
    counts: PropagationCounts,
}

impl<'a> Evaluator<'a> {
    pub fn new(arch: &'a ArchSpec) -> Self {
        Evaluator { arch, fingerprint: arch.fingerprint(), counts: PropagationCounts::default() }
    }

    pub fn arch(&self) -> &ArchSpec {
        self.arch
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn counts(&self) -> &PropagationCounts {
        &self.counts
    }

    /// Full self map `Σ_xx` at the last layer, with the cache for `x`.
    pub fn self_map(&self, x: &Signal) -> Result<(CrossCovMap, SelfMapCache)> {
        self.arch.check_signal(x)?;
        self.counts.self_maps.fetch_add(1, Ordering::Relaxed);
        let mut diags = Vec::with_capacity(self.arch.depth());
        let map = propagate(self.arch, x, x, Norms::Own(&mut diags))?;
        let cache = SelfMapCache {
            arch_fingerprint: self.fingerprint,
            signal_fingerprint: signal_fingerprint(x),
            diags,
            value: map.trace(),
        };
        Ok((map, cache))
    }

    pub fn self_cache(&self, x: &Signal) -> Result<SelfMapCache> {
        Ok(self.self_map(x)?.1)
    }

    fn check_cache(&self, x: &Signal, c: &SelfMapCache) -> Result<()> {
        if c.arch_fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found: c.arch_fingerprint,
            });
        }
        let fp = signal_fingerprint(x);
        if c.signal_fingerprint != fp {
            return Err(Error::FingerprintMismatch { expected: fp, found: c.signal_fingerprint });
        }
        Ok(())
    }

    /// Final cross map `Σ_xy` given both self caches.
    pub fn cross_map(
        &self,
        x: &Signal,
        cx: &SelfMapCache,
        y: &Signal,
        cy: &SelfMapCache,
    ) -> Result<CrossCovMap> {
        self.arch.check_signal(x)?;
        self.arch.check_signal(y)?;
        self.check_cache(x, cx)?;
        self.check_cache(y, cy)?;
        self.counts.cross_maps.fetch_add(1, Ordering::Relaxed);
        propagate(self.arch, x, y, Norms::Given(&cx.diags, &cy.diags))
    }

    /// `K(x, y)` from precomputed self caches.
    ///
    /// Arguments are put in a canonical order (by signal fingerprint) first,
    /// so `K(x, y)` and `K(y, x)` are bitwise equal.
    pub fn eval_cached(
        &self,
        x: &Signal,
        cx: &SelfMapCache,
        y: &Signal,
        cy: &SelfMapCache,
    ) -> Result<f64> {
        if cx.signal_fingerprint == cy.signal_fingerprint && x == y {
            self.arch.check_signal(x)?;
            self.check_cache(x, cx)?;
            return Ok(cx.value);
        }
        let (a, ca, b, cb) = if cx.signal_fingerprint <= cy.signal_fingerprint {
            (x, cx, y, cy)
        } else {
            (y, cy, x, cx)
        };
        Ok(self.cross_map(a, ca, b, cb)?.trace())
    }

    /// `K(x, y)` computing both self maps on the fly.
    pub fn eval(&self, x: &Signal, y: &Signal) -> Result<f64> {
        let cx = self.self_cache(x)?;
        if x == y {
            return Ok(cx.value);
        }
        let cy = self.self_cache(y)?;
        self.eval_cached(x, &cx, y, &cy)
    }
}

/// `(Σ_xy, Σ_xx, Σ_yy)` at the last layer.
pub fn propagate_pair(
    arch: &ArchSpec,
    x: &Signal,
    y: &Signal,
) -> Result<(CrossCovMap, CrossCovMap, CrossCovMap)> {
    let ev = Evaluator::new(arch);
    let (sxx, cx) = ev.self_map(x)?;
    let (syy, cy) = ev.self_map(y)?;
    let sxy = ev.cross_map(x, &cx, y, &cy)?;
    Ok((sxy, sxx, syy))
}

/// `K_L(x, y) = ⟨Ψ(x), Ψ(y)⟩`.
pub fn kernel_eval(arch: &ArchSpec, x: &Signal, y: &Signal) -> Result<f64> {
    Evaluator::new(arch).eval(x, y)
}

/// Self cache for `x` under `arch`.
pub fn self_cache(arch: &ArchSpec, x: &Signal) -> Result<SelfMapCache> {
    Evaluator::new(arch).self_cache(x)
}

pub fn kernel_eval_with_selfcache(
    arch: &ArchSpec,
    x: &Signal,
    y: &Signal,
    cache_x: &SelfMapCache,
    cache_y: &SelfMapCache,
) -> Result<f64> {
    Evaluator::new(arch).eval_cached(x, cache_x, y, cache_y)
}
