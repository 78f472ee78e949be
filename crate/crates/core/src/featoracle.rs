//! Explicit finite-dimensional feature maps for polynomial convolutional
//! kernels, minimum-norm RKHS computations, and pooling-operator algebra.
//!
//! With every layer kernel a finite series `κ(t) = Σ_j b_j t^j` applied
//! without the homogeneous lift, the feature map is explicit:
//! `φ(z) = ⊕_{j : b_j > 0} sqrt(b_j) z^{⊗j}`. Features are laid out with
//! positions outermost and tensor indices row-major within each layer, so a
//! witness vector can be sliced back into per-position components.
//!
//! RKHS norms then reduce to least squares: the norm of
//! `f = ⟨W, Ψ(·)⟩` is the norm of the minimum-norm `W` reproducing `f`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::ckmap::ArchSpec;
use crate::domain::{self, Grid, PoolingFilter, Signal};
use crate::error::{Error, Result};

/// Default cap on total feature dimension (positions x per-position dim).
pub const DEFAULT_DIM_CAP: usize = 2_000_000;

/// Relative singular-value cutoff for pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitFeatures {
    grid: Grid,
    per_position: usize,
    vector: Vec<f64>,
}

impl ExplicitFeatures {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn per_position(&self) -> usize {
        self.per_position
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn at(&self, u: usize) -> &[f64] {
        &self.vector[u * self.per_position..(u + 1) * self.per_position]
    }

    pub fn dot(&self, other: &ExplicitFeatures) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

fn layer_coeffs(arch: &ArchSpec) -> Result<Vec<Vec<f64>>> {
    arch.layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let b = layer.kernel.polynomial_coeffs().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "layer {}: explicit features need a polynomial kernel, got {:?}",
                    i + 1,
                    layer.kernel
                ))
            })?;
            let linear = b.iter().enumerate().all(|(j, &c)| (j == 1) == (c != 0.0)) && b[1] == 1.0;
            if layer.homogeneous && !linear {
                return Err(Error::InvalidArgument(format!(
                    "layer {}: explicit features need the non-homogeneous polynomial kernel",
                    i + 1
                )));
            }
            Ok(b)
        })
        .collect()
}

fn lifted_dim(input: usize, coeffs: &[f64]) -> Option<usize> {
    let mut total: usize = 0;
    for (j, &b) in coeffs.iter().enumerate() {
        if b > 0.0 {
            total = total.checked_add(input.checked_pow(j as u32)?)?;
        }
    }
    Some(total)
}

/// Total feature dimension of the final layer without building anything.
pub fn feature_dim(arch: &ArchSpec) -> Result<usize> {
    let coeffs = layer_coeffs(arch)?;
    let mut per = arch.channels();
    for (layer, b) in arch.layers().iter().zip(&coeffs) {
        per = lifted_dim(per * layer.patch.len(), b).unwrap_or(usize::MAX);
    }
    let grids = arch.grids();
    Ok(per.saturating_mul(grids.last().unwrap().size()))
}

/// Largest unpooled workspace `positions x per-position dim` over the layers;
/// this is what [`build_features`] checks against its cap.
pub fn peak_feature_dim(arch: &ArchSpec) -> Result<usize> {
    let coeffs = layer_coeffs(arch)?;
    let mut per = arch.channels();
    let mut peak = feature_dim(arch)?;
    for ((layer, b), grid) in arch.layers().iter().zip(&coeffs).zip(arch.grids()) {
        per = lifted_dim(per * layer.patch.len(), b).unwrap_or(usize::MAX);
        peak = peak.max(per.saturating_mul(grid.size()));
    }
    Ok(peak)
}

/// `⊕_j sqrt(b_j) z^{⊗j}`, appended to `out`.
fn lift(z: &[f64], coeffs: &[f64], out: &mut Vec<f64>) {
    for (j, &b) in coeffs.iter().enumerate() {
        if b <= 0.0 {
            continue;
        }
        let s = b.sqrt();
        let mut t = vec![s];
        for _ in 0..j {
            let mut next = Vec::with_capacity(t.len() * z.len());
            for &a in &t {
                for &c in z {
                    next.push(a * c);
                }
            }
            t = next;
        }
        out.extend(t);
    }
}

/// Explicit `Ψ(x)` for an all-polynomial architecture.
pub fn build_features(arch: &ArchSpec, x: &Signal, cap: usize) -> Result<ExplicitFeatures> {
    arch.check_signal(x)?;
    let dim = feature_dim(arch)?;
    if dim > cap {
        return Err(Error::DimensionCap { dim, cap });
    }
    let coeffs = layer_coeffs(arch)?;
    let mut grid = x.grid().clone();
    let mut per = x.channels();
    let mut feats = x.values().to_vec();
    for (layer, b) in arch.layers().iter().zip(&coeffs) {
        let n = grid.size();
        let patch_dim = per * layer.patch.len();
        let new_per = lifted_dim(patch_dim, b).expect("checked against cap");
        if new_per.saturating_mul(n) > cap {
            return Err(Error::DimensionCap { dim: new_per.saturating_mul(n), cap });
        }
        let mut lifted = Vec::with_capacity(n * new_per);
        let mut z = vec![0.0; patch_dim];
        for u in 0..n {
            z.iter_mut().for_each(|v| *v = 0.0);
            for (k, &off) in layer.patch.offsets().iter().enumerate() {
                if let Some(v) = grid.shift(u, off) {
                    z[k * per..(k + 1) * per].copy_from_slice(&feats[v * per..(v + 1) * per]);
                }
            }
            lift(&z, b, &mut lifted);
        }
        let (out_grid, rows) = layer.pooling.operator_rows(&grid)?;
        let mut pooled = vec![0.0; out_grid.size() * new_per];
        for (uo, row) in rows.iter().enumerate() {
            let dst = &mut pooled[uo * new_per..(uo + 1) * new_per];
            for &(v, w) in row {
                for (d, s) in dst.iter_mut().zip(&lifted[v * new_per..(v + 1) * new_per]) {
                    *d += w * s;
                }
            }
        }
        grid = out_grid;
        per = new_per;
        feats = pooled;
    }
    Ok(ExplicitFeatures { grid, per_position: per, vector: feats })
}

/// Moore–Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = PINV_CUTOFF * smax;
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += (vt.row(k).transpose() * u.column(k).transpose()) / s;
        }
    }
    out
}

/// Result of a minimum-norm solve.
#[derive(Clone, Debug)]
pub struct MinNorm {
    pub norm: f64,
    pub witness: Vec<f64>,
    /// `‖Φ W - f‖ / max(1, ‖f‖)` over the constraint sample.
    pub residual: f64,
}

/// Residual above which constraints are declared inconsistent.
pub const FEASIBILITY_TOL: f64 = 1e-8;

fn feature_matrix(arch: &ArchSpec, xs: &[&Signal], cap: usize) -> Result<DMatrix<f64>> {
    let dim = feature_dim(arch)?;
    if dim > cap {
        return Err(Error::DimensionCap { dim, cap });
    }
    let mut m = DMatrix::zeros(xs.len(), dim);
    for (i, x) in xs.iter().enumerate() {
        let f = build_features(arch, x, cap)?;
        for (j, v) in f.vector().iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

fn solve_min_norm(phi: &DMatrix<f64>, f: &DVector<f64>) -> Result<MinNorm> {
    let w = pinv(phi) * f;
    let r = (phi * &w - f).norm() / f.norm().max(1.0);
    if r > FEASIBILITY_TOL {
        return Err(Error::Infeasible { residual: r });
    }
    Ok(MinNorm { norm: w.norm(), witness: w.iter().copied().collect(), residual: r })
}

/// Minimum `‖W‖` such that `⟨W, Ψ(x_i)⟩ = f_i` for every constraint.
pub fn min_norm(arch: &ArchSpec, constraints: &[(Signal, f64)], cap: usize) -> Result<MinNorm> {
    if constraints.is_empty() || constraints.len() > 10_000 {
        return Err(Error::InvalidArgument(format!(
            "constraint count {} outside 1..=10000",
            constraints.len()
        )));
    }
    let xs: Vec<&Signal> = constraints.iter().map(|(x, _)| x).collect();
    let phi = feature_matrix(arch, &xs, cap)?;
    let f = DVector::from_iterator(constraints.len(), constraints.iter().map(|(_, v)| *v));
    solve_min_norm(&phi, &f)
}

/// Norm of the function `⟨V, Ψ(·)⟩` given as a feature-space vector: the
/// minimum-norm vector reproducing it on a spanning sample.
pub fn min_norm_functional(
    arch: &ArchSpec,
    v: &[f64],
    sample: &[Signal],
    cap: usize,
) -> Result<MinNorm> {
    let xs: Vec<&Signal> = sample.iter().collect();
    let phi = feature_matrix(arch, &xs, cap)?;
    if v.len() != phi.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "functional has {} entries, features have {}",
            v.len(),
            phi.ncols()
        )));
    }
    let f = &phi * DVector::from_column_slice(v);
    solve_min_norm(&phi, &f)
}

/// Random signals spanning the feature space generically; `3 x dim` by default.
pub fn spanning_sample(arch: &ArchSpec, count: usize, seed: u64) -> Vec<Signal> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = arch.input_grid().clone();
    let len = grid.size() * arch.channels();
    (0..count)
        .map(|_| {
            let values = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            Signal::new(grid.clone(), arch.channels(), values).expect("finite")
        })
        .collect()
}

/// Dense 1-D pooling operator `A[u, v] = h[s u - v]` on a periodic grid.
#[derive(Clone, Debug)]
pub struct PoolingOperatorMatrix {
    filter: PoolingFilter,
    n: usize,
    matrix: DMatrix<f64>,
}

impl PoolingOperatorMatrix {
    pub fn new(filter: &PoolingFilter, n: usize) -> Result<Self> {
        if filter.rank() != 1 {
            return Err(Error::RankMismatch { expected: 1, found: filter.rank() });
        }
        let (out, rows) = filter.operator_rows(&Grid::line(n))?;
        let mut matrix = DMatrix::zeros(out.size(), n);
        for (u, row) in rows.iter().enumerate() {
            for &(v, w) in row {
                matrix[(u, v)] += w;
            }
        }
        Ok(PoolingOperatorMatrix { filter: filter.clone(), n, matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_in(&self) -> usize {
        self.n
    }

    pub fn n_out(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn filter(&self) -> &PoolingFilter {
        &self.filter
    }

    pub fn adjoint(&self) -> DMatrix<f64> {
        self.matrix.transpose()
    }

    /// `A†` via SVD.
    pub fn pinv_svd(&self) -> DMatrix<f64> {
        pinv(&self.matrix)
    }

    /// `A⁻¹ = F⁻¹ diag(F h)⁻¹ F` for stride-1 filters with a non-vanishing
    /// spectrum; `None` otherwise.
    pub fn inverse_dft(&self) -> Option<DMatrix<f64>> {
        if self.filter.stride() != 1 {
            return None;
        }
        let n = self.n;
        let h: Vec<Complex64> =
            self.filter.cyclic_taps(n).into_iter().map(|t| Complex64::new(t, 0.0)).collect();
        let spec = domain::dft(&h);
        let smax = spec.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if spec.iter().any(|z| z.norm() <= PINV_CUTOFF * smax) {
            return None;
        }
        let inv: Vec<Complex64> = spec.iter().map(|z| 1.0 / z).collect();
        // A is circulant with first column h, so A⁻¹ is circulant with first
        // column idft(1 / ĥ).
        let g = domain::idft(&inv);
        Some(DMatrix::from_fn(n, n, |u, v| g[(u + n - v) % n].re))
    }

    /// `A†` from the DFT route when it applies, SVD otherwise.
    pub fn pinv(&self) -> DMatrix<f64> {
        self.inverse_dft().unwrap_or_else(|| self.pinv_svd())
    }

    /// `A†* = (A†)ᵀ`.
    pub fn pinv_adjoint(&self) -> DMatrix<f64> {
        self.pinv().transpose()
    }
}

/// Norm `‖A†* G‖` of the one-layer coefficient field `G` (rows = input
/// positions, columns = feature components), together with the residual of
/// the `G ∈ Range(A*)` constraint.
pub fn one_layer_norm(op: &PoolingOperatorMatrix, g: &DMatrix<f64>) -> Result<(f64, f64)> {
    if g.nrows() != op.n_in() {
        return Err(Error::ShapeMismatch(format!(
            "coefficient field has {} positions, operator expects {}",
            g.nrows(),
            op.n_in()
        )));
    }
    let at = op.adjoint();
    let proj = &at * pinv(&at);
    let residual = (&proj * g - g).norm() / g.norm().max(1.0);
    Ok(((op.pinv_adjoint() * g).norm(), residual))
}

/// `B_p[w, u] = h1[w + p - u]`: the map from first-layer features to the
/// patch component at offset `p` of the second layer (stride 1).
fn shifted_pooling(h1: &PoolingFilter, p: isize, n: usize) -> DMatrix<f64> {
    let hc = h1.cyclic_taps(n);
    let ni = n as isize;
    DMatrix::from_fn(n, n, |w, u| hc[(w as isize + p - u as isize).rem_euclid(ni) as usize])
}

/// `E_pq x = (L_p A₁ ⊗ L_q A₁)* diag(x)`, as an `n x n` row-major array:
/// `out[u, v] = Σ_w h1[w - (u - p)] h1[w - (v - q)] x[w]`.
///
/// The offset sign follows patch extraction `P z[u] = (z[u + p])_p`.
pub fn e_pq_apply(h1: &PoolingFilter, p: isize, q: isize, x: &[f64]) -> Result<Vec<f64>> {
    e_pq_apply_multi(h1, p, q, x, 1)
}

/// [`e_pq_apply`] on a vector-valued input with `comps` components per
/// position (`x[w * comps + c]`); output is `[u][v][c]`.
pub fn e_pq_apply_multi(
    h1: &PoolingFilter,
    p: isize,
    q: isize,
    x: &[f64],
    comps: usize,
) -> Result<Vec<f64>> {
    if h1.rank() != 1 || h1.stride() != 1 {
        return Err(Error::InvalidArgument("E_pq needs a rank-1, stride-1 filter".into()));
    }
    if comps == 0 || x.len() % comps != 0 {
        return Err(Error::ShapeMismatch("input length not a multiple of comps".into()));
    }
    let n = x.len() / comps;
    let hc = h1.cyclic_taps(n);
    let ni = n as isize;
    let tap = |r: isize| hc[r.rem_euclid(ni) as usize];
    let mut out = vec![0.0; n * n * comps];
    for u in 0..n {
        for v in 0..n {
            let dst = &mut out[(u * n + v) * comps..(u * n + v + 1) * comps];
            for w in 0..n {
                let coef = tap(w as isize - (u as isize - p)) * tap(w as isize - (v as isize - q));
                if coef == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&x[w * comps..(w + 1) * comps]) {
                    *d += coef * s;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`e_pq_apply`]: `diag((L_p A₁ ⊗ L_q A₁) M)`.
pub fn e_pq_adjoint(h1: &PoolingFilter, p: isize, q: isize, m: &[f64], n: usize) -> Result<Vec<f64>> {
    if m.len() != n * n {
        return Err(Error::ShapeMismatch("matrix must be n x n".into()));
    }
    let bp = shifted_pooling(h1, p, n);
    let bq = shifted_pooling(h1, q, n);
    let mm = DMatrix::from_row_slice(n, n, m);
    let t = &bp * mm * bq.transpose();
    Ok((0..n).map(|w| t[(w, w)]).collect())
}

/// One interaction term `G_pq` of a two-layer quadratic decomposition:
/// values `[u][v][c]` over `n x n` positions and `comps` tensor components.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTerm {
    pub p: isize,
    pub q: isize,
    pub n: usize,
    pub comps: usize,
    pub values: Vec<f64>,
}

impl PairTerm {
    pub fn zeros(p: isize, q: isize, n: usize, comps: usize) -> Self {
        PairTerm { p, q, n, comps, values: vec![0.0; n * n * comps] }
    }

    /// `n² x comps` matrix view.
    fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n * self.n, self.comps, &self.values)
    }
}

/// Forward map of a second-layer witness `F_pq` (rows = second-layer
/// positions, columns = components) to its interaction term
/// `G_pq = (L_p A₁ ⊗ L_q A₁)* diag(A₂* F_pq)`. Stride 1 at both layers.
pub fn pair_term_from_witness(
    h1: &PoolingFilter,
    h2: &PoolingFilter,
    p: isize,
    q: isize,
    f: &DMatrix<f64>,
) -> Result<PairTerm> {
    let n = f.nrows();
    let a2 = PoolingOperatorMatrix::new(h2, n)?;
    if a2.n_out() != n {
        return Err(Error::InvalidArgument("interaction algebra needs stride 1".into()));
    }
    let y = a2.adjoint() * f;
    let comps = f.ncols();
    let mut flat = Vec::with_capacity(n * comps);
    for w in 0..n {
        flat.extend(y.row(w).iter());
    }
    let values = e_pq_apply_multi(h1, p, q, &flat, comps)?;
    Ok(PairTerm { p, q, n, comps, values })
}

/// Value of the two-layer interaction penalty on one decomposition.
#[derive(Clone, Debug)]
pub struct PenaltyReport {
    pub penalty: f64,
    /// Largest relative residual of the range constraints before projection.
    pub max_residual: f64,
}

/// Constraint residuals up to this size are projected away silently.
pub const RANGE_TOL: f64 = 1e-8;
/// Constraint residuals above this make the decomposition infeasible.
pub const RANGE_FAIL: f64 = 1e-6;

/// `Σ_pq ‖A₂†* diag((L_p A₁ ⊗ L_q A₁)†* G_pq)‖²` with both range constraints
/// checked (and projected onto when the residual is within tolerance).
pub fn prop2_penalty(
    terms: &[PairTerm],
    h1: &PoolingFilter,
    h2: &PoolingFilter,
) -> Result<PenaltyReport> {
    let mut total = 0.0;
    let mut worst: f64 = 0.0;
    for term in terms {
        let n = term.n;
        let a1 = PoolingOperatorMatrix::new(h1, n)?;
        let a2 = PoolingOperatorMatrix::new(h2, n)?;
        if a1.n_out() != n || a2.n_out() != n {
            return Err(Error::InvalidArgument("interaction penalty needs stride 1".into()));
        }
        let g = term.as_matrix();
        if g.norm() == 0.0 {
            continue;
        }
        // Range(E_pq), built column by column from the operator on a basis.
        let mut e = DMatrix::zeros(n * n, n);
        for w in 0..n {
            let mut basis = vec![0.0; n];
            basis[w] = 1.0;
            let col = e_pq_apply(h1, term.p, term.q, &basis)?;
            for (r, v) in col.into_iter().enumerate() {
                e[(r, w)] = v;
            }
        }
        let proj_e = &e * pinv(&e);
        let g_proj = &proj_e * &g;
        let res_e = (&g_proj - &g).norm() / g.norm().max(1.0);
        check_residual(res_e)?;
        let g = if res_e > RANGE_TOL { g_proj } else { g };

        let bp = shifted_pooling(h1, term.p, n);
        let bq = shifted_pooling(h1, term.q, n);
        let bp_pt = pinv(&bp).transpose();
        let bq_p = pinv(&bq);
        let mut d = DMatrix::zeros(n, term.comps);
        for c in 0..term.comps {
            let m = DMatrix::from_fn(n, n, |u, v| g[(u * n + v, c)]);
            let t = &bp_pt * m * &bq_p;
            for w in 0..n {
                d[(w, c)] = t[(w, w)];
            }
        }
        let at = a2.adjoint();
        let proj_a = &at * pinv(&at);
        let d_proj = &proj_a * &d;
        let res_a = (&d_proj - &d).norm() / d.norm().max(1.0);
        check_residual(res_a)?;
        let d = if res_a > RANGE_TOL { d_proj } else { d };

        let f = a2.pinv_adjoint() * d;
        total += f.norm_squared();
        worst = worst.max(res_e).max(res_a);
    }
    Ok(PenaltyReport { penalty: total, max_residual: worst })
}

fn check_residual(r: f64) -> Result<()> {
    if r > RANGE_FAIL {
        Err(Error::Infeasible { residual: r })
    } else {
        Ok(())
    }
}

/// Evaluates `f(x) = Σ_pq Σ_uv ⟨G_pq[u, v], φ(x)[u] ⊗ φ(x)[v]⟩` where
/// `phi` holds first-layer (unpooled) features, `per` components per
/// position.
pub fn eval_pair_terms(terms: &[PairTerm], phi: &[f64], per: usize) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        if t.comps != per * per || phi.len() != t.n * per {
            return Err(Error::ShapeMismatch("pair term does not match features".into()));
        }
        for u in 0..t.n {
            let a = &phi[u * per..(u + 1) * per];
            for v in 0..t.n {
                let b = &phi[v * per..(v + 1) * per];
                let g = &t.values[(u * t.n + v) * t.comps..(u * t.n + v + 1) * t.comps];
                for i in 0..per {
                    for j in 0..per {
                        total += g[i * per + j] * a[i] * b[j];
                    }
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckmap::{kernel_eval, LayerSpec};
    use crate::domain::PatchShape;
    use crate::dpk::DotProductKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn poly(r: u32) -> DotProductKernel {
        DotProductKernel::Polynomial { degree: r }
    }

    fn one_layer(n: usize, p: usize, patch: PatchShape, k: DotProductKernel, h: PoolingFilter) -> ArchSpec {
        ArchSpec::new(Grid::line(n), p, vec![LayerSpec::new(patch, k, h).non_homogeneous()]).unwrap()
    }

    #[test]
    fn linear_dirac_features_are_input() {
        let arch = one_layer(
            4,
            2,
            PatchShape::point(1),
            DotProductKernel::Linear,
            PoolingFilter::dirac(1, 1).unwrap(),
        );
        let x = spanning_sample(&arch, 1, 3).remove(0);
        let f = build_features(&arch, &x, DEFAULT_DIM_CAP).unwrap();
        assert_eq!(f.vector(), x.values());
    }

    #[test]
    fn quadratic_feature_dimension() {
        let arch = one_layer(
            4,
            1,
            PatchShape::line(&[0, 1]).unwrap(),
            poly(2),
            PoolingFilter::dirac(1, 1).unwrap(),
        );
        assert_eq!(feature_dim(&arch).unwrap(), 16);
        let x = spanning_sample(&arch, 1, 4).remove(0);
        assert_eq!(build_features(&arch, &x, DEFAULT_DIM_CAP).unwrap().dim(), 16);
    }

    #[test]
    fn dimension_cap_enforced() {
        let arch = one_layer(
            8,
            3,
            PatchShape::centered(1, 3).unwrap(),
            poly(3),
            PoolingFilter::dirac(1, 1).unwrap(),
        );
        let x = spanning_sample(&arch, 1, 5).remove(0);
        assert!(matches!(build_features(&arch, &x, 1000), Err(Error::DimensionCap { .. })));
    }

    #[test]
    fn homogeneous_polynomial_rejected() {
        let arch = ArchSpec::new(
            Grid::line(4),
            1,
            vec![LayerSpec::new(PatchShape::point(1), poly(2), PoolingFilter::dirac(1, 1).unwrap())],
        )
        .unwrap();
        let x = spanning_sample(&arch, 1, 5).remove(0);
        assert!(build_features(&arch, &x, DEFAULT_DIM_CAP).is_err());
    }

    #[test]
    fn series_kernel_features_match() {
        let k = DotProductKernel::series(vec![0.2, 0.5, 0.3]).unwrap();
        let arch = ArchSpec::new(
            Grid::line(6),
            2,
            vec![
                LayerSpec::new(
                    PatchShape::line(&[-1, 0]).unwrap(),
                    k.clone(),
                    PoolingFilter::gaussian(1, 1).unwrap(),
                )
                .non_homogeneous(),
                LayerSpec::new(PatchShape::point(1), poly(2), PoolingFilter::gaussian(1, 1).unwrap())
                    .non_homogeneous(),
            ],
        )
        .unwrap();
        let xs = spanning_sample(&arch, 2, 9);
        let fa = build_features(&arch, &xs[0], DEFAULT_DIM_CAP).unwrap();
        let fb = build_features(&arch, &xs[1], DEFAULT_DIM_CAP).unwrap();
        let k = kernel_eval(&arch, &xs[0], &xs[1]).unwrap();
        assert!((fa.dot(&fb) - k).abs() <= 1e-10 * k.abs().max(1.0));
    }

    #[test]
    fn reproducing_property_norm() {
        let arch = one_layer(
            4,
            2,
            PatchShape::line(&[0, 1]).unwrap(),
            poly(2),
            PoolingFilter::gaussian(1, 1).unwrap(),
        );
        let dim = feature_dim(&arch).unwrap();
        let sample = spanning_sample(&arch, 3 * dim, 11);
        let x0 = &sample[0];
        let constraints: Vec<(Signal, f64)> = sample
            .iter()
            .map(|x| (x.clone(), kernel_eval(&arch, x0, x).unwrap()))
            .collect();
        let r = min_norm(&arch, &constraints, DEFAULT_DIM_CAP).unwrap();
        let kxx = kernel_eval(&arch, x0, x0).unwrap();
        assert!((r.norm * r.norm - kxx).abs() < 1e-8 * kxx);
    }

    #[test]
    fn inconsistent_constraints_infeasible() {
        let arch = one_layer(
            2,
            1,
            PatchShape::point(1),
            DotProductKernel::Linear,
            PoolingFilter::dirac(1, 1).unwrap(),
        );
        let x = Signal::from_line(vec![1.0, 2.0]);
        let y = Signal::from_line(vec![2.0, 4.0]);
        let r = min_norm(&arch, &[(x, 1.0), (y, 5.0)], DEFAULT_DIM_CAP);
        assert!(matches!(r, Err(Error::Infeasible { .. })));
    }

    #[test]
    fn pooling_operator_examples() {
        let id = PoolingOperatorMatrix::new(&PoolingFilter::dirac(1, 1).unwrap(), 5).unwrap();
        assert_eq!(id.matrix(), &DMatrix::<f64>::identity(5, 5));

        let avg = PoolingOperatorMatrix::new(&PoolingFilter::average(4, 1, 1).unwrap(), 4).unwrap();
        let a = avg.matrix();
        assert!((a - DMatrix::from_element(4, 4, 0.25)).norm() < 1e-15);
        let ap = avg.pinv_svd();
        assert!((a * &ap * a - a).norm() < 1e-9);
        assert!((&ap - DMatrix::from_element(4, 4, 0.25)).norm() < 1e-9);
        assert!(avg.inverse_dft().is_none());

        let g = PoolingOperatorMatrix::new(&PoolingFilter::gaussian(1, 1).unwrap(), 8).unwrap();
        let by_dft = g.inverse_dft().unwrap();
        assert!((by_dft - g.pinv_svd()).norm() <= 1e-8);
        assert!((g.matrix() * g.pinv() - DMatrix::<f64>::identity(8, 8)).norm() < 1e-9);
    }

    #[test]
    fn strided_pooling_pseudo_inverse() {
        let h = PoolingFilter::gaussian(2, 1).unwrap();
        let op = PoolingOperatorMatrix::new(&h, 8).unwrap();
        assert_eq!(op.n_out(), 4);
        let a = op.matrix();
        let ap = op.pinv();
        assert!((a * &ap * a - a).norm() < 1e-9);
    }

    #[test]
    fn e_pq_dirac_filter_single_entry() {
        let h = PoolingFilter::dirac(1, 1).unwrap();
        let n = 10;
        let (p, q, u0) = (3, -1, 4usize);
        let mut x = vec![0.0; n];
        x[u0] = 1.0;
        let out = e_pq_apply(&h, p, q, &x).unwrap();
        let iu = (u0 as isize + p).rem_euclid(n as isize) as usize;
        let iv = (u0 as isize + q).rem_euclid(n as isize) as usize;
        for u in 0..n {
            for v in 0..n {
                let expect = if (u, v) == (iu, iv) { 1.0 } else { 0.0 };
                assert_eq!(out[u * n + v], expect);
            }
        }
    }

    #[test]
    fn e_pq_adjoint_identity() {
        let h = PoolingFilter::gaussian(1, 1).unwrap();
        let n = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (p, q) in [(0, 0), (2, -1), (-3, 1)] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ex = e_pq_apply(&h, p, q, &x).unwrap();
            let lhs: f64 = ex.iter().zip(&m).map(|(a, b)| a * b).sum();
            let tm = e_pq_adjoint(&h, p, q, &m, n).unwrap();
            let rhs: f64 = x.iter().zip(&tm).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_zero_and_dirac_cases() {
        let d = PoolingFilter::dirac(1, 1).unwrap();
        let zero = PairTerm::zeros(1, 0, 6, 2);
        assert_eq!(prop2_penalty(&[zero], &d, &d).unwrap().penalty, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let f = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let t = pair_term_from_witness(&d, &d, 2, -1, &f).unwrap();
        let diag_energy: f64 = t.values.iter().map(|v| v * v).sum();
        let r = prop2_penalty(&[t], &d, &d).unwrap();
        assert!((r.penalty - diag_energy).abs() < 1e-10);
    }

    #[test]
    fn penalty_rejects_out_of_range_terms() {
        let d = PoolingFilter::dirac(1, 1).unwrap();
        let mut t = PairTerm::zeros(0, 0, 4, 1);
        // (0, 1) is off the p - q diagonal for p = q = 0.
        t.values[1] = 1.0;
        assert!(matches!(prop2_penalty(&[t], &d, &d), Err(Error::Infeasible { .. })));
    }
}
