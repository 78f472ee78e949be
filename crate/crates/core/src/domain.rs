//! Cyclic grids, multi-channel signals, patch geometry, pooling filters and
//! a small DFT.
//!
//! Positions are flattened row-major. Rank-1 grids use the first coordinate
//! only; offsets are `[isize; 2]` with the second component ignored (and
//! required to be zero) on rank-1 grids.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D offset; rank-1 grids use `[o, 0]`.
pub type Offset = [isize; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    ZeroPad,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    extents: Vec<usize>,
    boundary: Boundary,
}

impl Grid {
    pub fn new(extents: Vec<usize>, boundary: Boundary) -> Result<Self> {
        if extents.is_empty() || extents.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "grid rank must be 1 or 2, got {}",
                extents.len()
            )));
        }
        if extents.contains(&0) {
            return Err(Error::InvalidArgument("grid extents must be >= 1".into()));
        }
        Ok(Grid { extents, boundary })
    }

    /// Periodic 1-D grid with `n` positions.
    pub fn line(n: usize) -> Self {
        Grid::new(vec![n], Boundary::Periodic).expect("n >= 1")
    }

    /// Periodic 2-D grid.
    pub fn plane(rows: usize, cols: usize) -> Self {
        Grid::new(vec![rows, cols], Boundary::Periodic).expect("extents >= 1")
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Number of positions |Ω|.
    pub fn size(&self) -> usize {
        self.extents.iter().product()
    }

    /// Extents padded to two axes (`[n, 1]` on rank 1).
    pub fn dims(&self) -> [usize; 2] {
        match self.extents.as_slice() {
            [n] => [*n, 1],
            [r, c] => [*r, *c],
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn coords(&self, idx: usize) -> [usize; 2] {
        let [_, w] = self.dims();
        [idx / w, idx % w]
    }

    pub fn index(&self, coords: [usize; 2]) -> usize {
        let [_, w] = self.dims();
        coords[0] * w + coords[1]
    }

    /// Position `idx + off`, wrapped on periodic grids; `None` when it falls
    /// outside a zero-padded grid.
    pub fn shift(&self, idx: usize, off: Offset) -> Option<usize> {
        let dims = self.dims();
        let c = self.coords(idx);
        let mut out = [0usize; 2];
        for a in 0..2 {
            let n = dims[a] as isize;
            let v = c[a] as isize + off[a];
            out[a] = match self.boundary {
                Boundary::Periodic => v.rem_euclid(n) as usize,
                Boundary::ZeroPad => {
                    if v < 0 || v >= n {
                        return None;
                    }
                    v as usize
                }
            };
        }
        Some(self.index(out))
    }

    /// Grid after downsampling every axis by `stride`.
    pub fn downsample(&self, stride: usize) -> Result<Grid> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let mut extents = Vec::with_capacity(self.rank());
        for &e in &self.extents {
            if e % stride != 0 {
                return Err(Error::NonDivisibleStride { stride, extent: e });
            }
            extents.push(e / stride);
        }
        Grid::new(extents, self.boundary)
    }
}

/// Multi-channel values on a grid, stored position-major: `values[u * p + c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

impl Signal {
    pub fn new(grid: Grid, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("channel count must be >= 1".into()));
        }
        if values.len() != grid.size() * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {} positions x {} channels, got {}",
                grid.size() * channels,
                grid.size(),
                channels,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite signal entry {v}")));
        }
        Ok(Signal { grid, channels, values })
    }

    /// Single-channel periodic 1-D signal.
    pub fn from_line(values: Vec<f64>) -> Self {
        let n = values.len();
        Signal::new(Grid::line(n), 1, values).expect("finite values")
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.size()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Channel vector at position `u`.
    pub fn at(&self, u: usize) -> &[f64] {
        &self.values[u * self.channels..(u + 1) * self.channels]
    }

    /// Cyclic translation `L_c x[u] = x[u - c]`.
    pub fn translate(&self, c: Offset) -> Signal {
        let n = self.grid.size();
        let p = self.channels;
        let mut values = vec![0.0; self.values.len()];
        let neg = [-c[0], -c[1]];
        for u in 0..n {
            if let Some(src) = self.grid.shift(u, neg) {
                values[u * p..(u + 1) * p].copy_from_slice(self.at(src));
            }
        }
        Signal { grid: self.grid.clone(), channels: p, values }
    }

    pub fn with_grid_boundary(mut self, boundary: Boundary) -> Self {
        self.grid = self.grid.with_boundary(boundary);
        self
    }
}

/// Ordered list of patch offsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchShape {
    rank: usize,
    offsets: Vec<Offset>,
}

impl PatchShape {
    pub fn new(rank: usize, offsets: Vec<Offset>) -> Result<Self> {
        if !(1..=2).contains(&rank) {
            return Err(Error::InvalidArgument(format!("patch rank {rank}")));
        }
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("patch shape needs at least one offset".into()));
        }
        if rank == 1 && offsets.iter().any(|o| o[1] != 0) {
            return Err(Error::InvalidArgument(
                "rank-1 patch offsets must have a zero second component".into(),
            ));
        }
        for (i, a) in offsets.iter().enumerate() {
            if offsets[..i].contains(a) {
                return Err(Error::InvalidArgument(format!("duplicate patch offset {a:?}")));
            }
        }
        Ok(PatchShape { rank, offsets })
    }

    /// 1-D patch from explicit offsets.
    pub fn line(offsets: &[isize]) -> Result<Self> {
        PatchShape::new(1, offsets.iter().map(|&o| [o, 0]).collect())
    }

    /// The single-position patch `[0]`.
    pub fn point(rank: usize) -> Self {
        PatchShape::new(rank, vec![[0, 0]]).expect("valid rank")
    }

    /// Centered window of `size` positions per axis (`-(size-1)/2 ..`).
    pub fn centered(rank: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("patch size must be >= 1".into()));
        }
        let lo = -((size as isize - 1) / 2);
        let axis: Vec<isize> = (lo..lo + size as isize).collect();
        let offsets = match rank {
            1 => axis.iter().map(|&a| [a, 0]).collect(),
            2 => axis.iter().flat_map(|&a| axis.iter().map(move |&b| [a, b])).collect(),
            _ => return Err(Error::InvalidArgument(format!("patch rank {rank}"))),
        };
        PatchShape::new(rank, offsets)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// `P x[u] = (x[u + v])_{v in S}`; out-of-range entries are zero on
/// zero-padded grids.
pub fn extract_patches(x: &Signal, shape: &PatchShape) -> Result<Signal> {
    if shape.rank() != x.grid().rank() {
        return Err(Error::RankMismatch { expected: x.grid().rank(), found: shape.rank() });
    }
    let n = x.len();
    let p = x.channels();
    let q = p * shape.len();
    let mut values = vec![0.0; n * q];
    for u in 0..n {
        for (k, &off) in shape.offsets().iter().enumerate() {
            if let Some(v) = x.grid().shift(u, off) {
                values[u * q + k * p..u * q + (k + 1) * p].copy_from_slice(x.at(v));
            }
        }
    }
    Signal::new(x.grid().clone(), q, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Gaussian,
    Average,
    Dirac,
    Custom,
}

/// Separable pooling filter: 1-D taps applied along every axis, followed by
/// downsampling with `stride`.
///
/// `taps[i]` is the weight at offset `origin + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingFilter {
    rank: usize,
    taps: Vec<f64>,
    origin: isize,
    stride: usize,
    kind: FilterKind,
}

impl PoolingFilter {
    fn build(
        rank: usize,
        taps: Vec<f64>,
        origin: isize,
        stride: usize,
        kind: FilterKind,
    ) -> Result<Self> {
        if !(1..=2).contains(&rank) {
            return Err(Error::InvalidArgument(format!("filter rank {rank}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if taps.is_empty() || taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("filter taps must be finite and non-empty".into()));
        }
        Ok(PoolingFilter { rank, taps, origin, stride, kind })
    }

    /// Gaussian filter of width `2s+1` and bandwidth `sqrt(2) s`, normalized
    /// to unit sum, with stride `s`.
    pub fn gaussian(s: usize, rank: usize) -> Result<Self> {
        if s == 0 {
            return Err(Error::InvalidArgument("gaussian pooling needs s >= 1".into()));
        }
        let bw2 = 2.0 * (s as f64) * (s as f64);
        let raw: Vec<f64> = (-(s as isize)..=s as isize)
            .map(|u| (-((u * u) as f64) / (2.0 * bw2)).exp())
            .collect();
        // The 2-D filter is the outer product of two unit-sum axes.
        let sum: f64 = raw.iter().sum();
        let taps = raw.into_iter().map(|t| t / sum).collect();
        Self::build(rank, taps, -(s as isize), s, FilterKind::Gaussian)
    }

    /// Identity filter `h = δ_0`.
    pub fn dirac(rank: usize, stride: usize) -> Result<Self> {
        Self::build(rank, vec![1.0], 0, stride, FilterKind::Dirac)
    }

    /// Box filter of `width` taps of weight `1/width` per axis, centered at
    /// `-(width-1)/2`. On a periodic grid of extent `width` this is global
    /// average pooling.
    pub fn average(width: usize, stride: usize, rank: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidArgument("average width must be >= 1".into()));
        }
        let origin = -((width as isize - 1) / 2);
        Self::build(rank, vec![1.0 / width as f64; width], origin, stride, FilterKind::Average)
    }

    /// Arbitrary taps, used as given (no normalization).
    pub fn custom(rank: usize, taps: Vec<f64>, origin: isize, stride: usize) -> Result<Self> {
        Self::build(rank, taps, origin, stride, FilterKind::Custom)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn origin(&self) -> isize {
        self.origin
    }

    /// Same taps with a different stride.
    pub fn with_stride(&self, stride: usize) -> Result<Self> {
        Self::build(self.rank, self.taps.clone(), self.origin, stride, self.kind)
    }

    /// 1-D weight at `offset`.
    pub fn tap(&self, offset: isize) -> f64 {
        let i = offset - self.origin;
        if i < 0 || i as usize >= self.taps.len() {
            0.0
        } else {
            self.taps[i as usize]
        }
    }

    /// Full (separable) weight at a 2-D offset.
    pub fn weight(&self, off: Offset) -> f64 {
        match self.rank {
            1 => self.tap(off[0]),
            _ => self.tap(off[0]) * self.tap(off[1]),
        }
    }

    /// Sum of 1-D taps; the separable filter sums to this raised to the rank.
    pub fn axis_sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.taps.iter().map(|t| t.abs()).sum::<f64>().powi(self.rank as i32)
    }

    /// Taps folded onto the cyclic group Z/n (1-D view).
    pub fn cyclic_taps(&self, n: usize) -> Vec<f64> {
        let mut h = vec![0.0; n];
        for (i, &t) in self.taps.iter().enumerate() {
            let off = self.origin + i as isize;
            h[off.rem_euclid(n as isize) as usize] += t;
        }
        h
    }

    /// Contributions `(input index, weight)` for each output index along an
    /// axis of length `n_in`: `A x[u] = sum_t h[t] x[s u - t]`.
    pub fn axis_weights(&self, n_in: usize, boundary: Boundary) -> Result<Vec<Vec<(usize, f64)>>> {
        if n_in % self.stride != 0 {
            return Err(Error::NonDivisibleStride { stride: self.stride, extent: n_in });
        }
        let n_out = n_in / self.stride;
        let mut rows = Vec::with_capacity(n_out);
        for u in 0..n_out {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(self.taps.len());
            for (i, &t) in self.taps.iter().enumerate() {
                if t == 0.0 {
                    continue;
                }
                let v = (self.stride * u) as isize - (self.origin + i as isize);
                let idx = match boundary {
                    Boundary::Periodic => v.rem_euclid(n_in as isize) as usize,
                    Boundary::ZeroPad => {
                        if v < 0 || v >= n_in as isize {
                            continue;
                        }
                        v as usize
                    }
                };
                match row.iter_mut().find(|(j, _)| *j == idx) {
                    Some(entry) => entry.1 += t,
                    None => row.push((idx, t)),
                }
            }
            row.sort_by_key(|&(j, _)| j);
            rows.push(row);
        }
        Ok(rows)
    }

    /// Sparse pooling matrix over flattened positions of `grid`.
    pub fn operator_rows(&self, grid: &Grid) -> Result<(Grid, Vec<Vec<(usize, f64)>>)> {
        if grid.rank() != self.rank {
            return Err(Error::RankMismatch { expected: grid.rank(), found: self.rank });
        }
        let out = grid.downsample(self.stride)?;
        let dims = grid.dims();
        let ax0 = self.axis_weights(dims[0], grid.boundary())?;
        let ax1 = if self.rank == 2 {
            self.axis_weights(dims[1], grid.boundary())?
        } else {
            vec![vec![(0usize, 1.0)]]
        };
        let mut rows = Vec::with_capacity(out.size());
        for r0 in &ax0 {
            for r1 in &ax1 {
                let mut row = Vec::with_capacity(r0.len() * r1.len());
                for &(i, wi) in r0 {
                    for &(j, wj) in r1 {
                        row.push((grid.index([i, j]), wi * wj));
                    }
                }
                rows.push(row);
            }
        }
        Ok((out, rows))
    }
}

/// `A x[u] = sum_v h[s u - v] x[v]`, per channel.
pub fn pool(x: &Signal, h: &PoolingFilter) -> Result<Signal> {
    let (out_grid, rows) = h.operator_rows(x.grid())?;
    let p = x.channels();
    let mut values = vec![0.0; out_grid.size() * p];
    for (u, row) in rows.iter().enumerate() {
        let dst = &mut values[u * p..(u + 1) * p];
        for &(v, w) in row {
            for (d, s) in dst.iter_mut().zip(x.at(v)) {
                *d += w * s;
            }
        }
    }
    Signal::new(out_grid, p, values)
}

/// Unnormalized forward DFT, `X[w] = sum_u x[u] exp(-2 pi i w u / N)`.
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    transform(x, -1.0)
}

/// Inverse of [`dft`] (includes the `1/N` factor).
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len() as f64;
    transform(x, 1.0).into_iter().map(|v| v / n).collect()
}

fn transform(x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|w| {
            x.iter()
                .enumerate()
                .map(|(u, &v)| {
                    // Reduce w*u mod n first to keep the phase argument small.
                    let k = (w * u) % n;
                    let theta = sign * 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    v * Complex64::new(theta.cos(), theta.sin())
                })
                .sum()
        })
        .collect()
}

/// Separable 2-D DFT of a row-major `rows x cols` array.
pub fn dft2(x: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    transform2(x, rows, cols, dft)
}

pub fn idft2(x: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    transform2(x, rows, cols, idft)
}

fn transform2(
    x: &[Complex64],
    rows: usize,
    cols: usize,
    f: fn(&[Complex64]) -> Vec<Complex64>,
) -> Vec<Complex64> {
    assert_eq!(x.len(), rows * cols);
    let mut tmp = Vec::with_capacity(x.len());
    for r in 0..rows {
        tmp.extend(f(&x[r * cols..(r + 1) * cols]));
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for c in 0..cols {
        let col: Vec<Complex64> = (0..rows).map(|r| tmp[r * cols + c]).collect();
        for (r, v) in f(&col).into_iter().enumerate() {
            out[r * cols + c] = v;
        }
    }
    out
}

/// Power spectrum `|DFT(h)[w]|^2` of real taps.
pub fn power_spectrum(h: &[f64]) -> Vec<f64> {
    let c: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&c).into_iter().map(|z| z.norm_sqr()).collect()
}
