//! Closed-form theory for one- and two-layer kernels on product-of-spheres
//! data, and the synthetic learning-curve harness.
//!
//! Non-overlapping patches are modelled by re-channeling: each of the
//! `|Ω|` sites carries one patch in `R^d` as `d` channels, and the first
//! layer uses a single-point patch. Patches are i.i.d. uniform on the sphere.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ckmap::{ArchSpec, Evaluator, LayerSpec};
use crate::data::{gen_product_of_spheres, item_rng, sphere_point, Dataset};
use crate::domain::{self, Grid, PatchShape, PoolingFilter, Signal};
use crate::dpk::{legendre_coeffs, multiplicity, sigma_sq_offdiag, tilde_epsilon, DotProductKernel, LegendreCoeffs};
use crate::error::{Error, Result};
use crate::gram::{self, compute_gram, GramOptions};
use crate::krr;

/// Residual of the truncated Gegenbauer series above which a spectrum
/// carries a warning.
pub const SERIES_TOL: f64 = 1e-6;

fn require_stride_one(h: &PoolingFilter) -> Result<()> {
    if h.rank() != 1 || h.stride() != 1 {
        return Err(Error::InvalidArgument(
            "spectral formulas need a rank-1, stride-1 filter".into(),
        ));
    }
    Ok(())
}

/// `λ_w = |ĥ[w]|²` for the filter wrapped onto `n` points.
pub fn filter_spectrum(h: &PoolingFilter, n: usize) -> Result<Vec<f64>> {
    require_stride_one(h)?;
    Ok(domain::power_spectrum(&h.cyclic_taps(n)))
}

/// `⟨h, L_r h⟩ = Σ_u h[u] h[u - r]` on `n` cyclic points, `r = 0..n`.
pub fn autocorrelation(h: &PoolingFilter, n: usize) -> Result<Vec<f64>> {
    require_stride_one(h)?;
    let t = h.cyclic_taps(n);
    Ok((0..n).map(|r| (0..n).map(|u| t[u] * t[(u + n - r) % n]).sum()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub eigenvalue: f64,
    pub multiplicity: usize,
    /// Frequency; `None` for the constant eigenfunction.
    pub w: Option<usize>,
    pub k: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MercerSpectrum {
    pub omega: usize,
    pub d: usize,
    pub lambdas: Vec<f64>,
    pub coeffs: LegendreCoeffs,
    pub entries: Vec<SpectrumEntry>,
    /// `κ(1)`, used for the untruncated trace.
    pub kappa_one: f64,
    pub warning: Option<String>,
}

impl MercerSpectrum {
    pub fn total_multiplicity(&self) -> usize {
        self.entries.iter().map(|e| e.multiplicity).sum()
    }

    /// Eigenvalues with multiplicity, descending; at most `limit`.
    pub fn expanded(&self, limit: usize) -> Vec<f64> {
        self.labelled(limit).into_iter().map(|(v, _, _)| v).collect()
    }

    /// As [`expanded`](Self::expanded) with `(w, k)` labels.
    pub fn labelled(&self, limit: usize) -> Vec<(f64, Option<usize>, usize)> {
        let mut order: Vec<&SpectrumEntry> = self.entries.iter().collect();
        order.sort_by(|a, b| b.eigenvalue.total_cmp(&a.eigenvalue).then(a.k.cmp(&b.k)).then(a.w.cmp(&b.w)));
        let mut out = Vec::new();
        for e in order {
            for _ in 0..e.multiplicity {
                if out.len() == limit {
                    return out;
                }
                out.push((e.eigenvalue, e.w, e.k));
            }
        }
        out
    }

    /// Sum of the truncated spectrum with multiplicities.
    pub fn truncated_trace(&self) -> f64 {
        self.entries.iter().map(|e| e.eigenvalue * e.multiplicity as f64).sum()
    }

    /// `E[K(x, x)] = |Ω| λ₀ μ₀ + (Σ_w λ_w)(κ(1) - μ₀)`, the full trace.
    pub fn trace(&self) -> f64 {
        let mu0 = self.coeffs.mu[0];
        self.omega as f64 * self.lambdas[0] * mu0 + self.lambdas.iter().sum::<f64>() * (self.kappa_one - mu0)
    }
}

/// Mercer spectrum of the one-layer kernel with filter `h` on `|Ω|` i.i.d.
/// spherical patches, truncated at degree `kmax`.
pub fn predict_spectrum(
    k: &DotProductKernel,
    d: usize,
    omega: usize,
    h: &PoolingFilter,
    kmax: usize,
) -> Result<MercerSpectrum> {
    let lambdas = filter_spectrum(h, omega)?;
    let coeffs = legendre_coeffs(k, d, kmax)?;
    let mut entries = vec![SpectrumEntry {
        eigenvalue: omega as f64 * lambdas[0] * coeffs.mu[0],
        multiplicity: 1,
        w: None,
        k: 0,
    }];
    for deg in 1..=kmax {
        let mult = multiplicity(d, deg).round() as usize;
        for (w, &l) in lambdas.iter().enumerate() {
            entries.push(SpectrumEntry { eigenvalue: l * coeffs.mu[deg], multiplicity: mult, w: Some(w), k: deg });
        }
    }
    let warning = (coeffs.reconstruction_residual > SERIES_TOL).then(|| {
        format!(
            "degree {kmax} leaves series residual {:.3e}; raise kmax",
            coeffs.reconstruction_residual
        )
    });
    Ok(MercerSpectrum { omega, d, lambdas, coeffs, entries, kappa_one: k.eval(1.0)?, warning })
}

/// `N(λ) = Σ ξ / (λ + ξ)` over the spectrum with multiplicities.
pub fn degrees_of_freedom(spec: &MercerSpectrum, lambda: f64) -> f64 {
    spec.entries
        .iter()
        .filter(|e| e.eigenvalue > 0.0)
        .map(|e| e.multiplicity as f64 * e.eigenvalue / (lambda + e.eigenvalue))
        .sum()
}

/// `N_κ(λ) = Σ_{k≥1} N(d,k) μ_k / (λ + μ_k)` of the patch kernel.
pub fn patch_degrees_of_freedom(coeffs: &LegendreCoeffs, lambda: f64) -> f64 {
    coeffs.mu[1..]
        .iter()
        .zip(&coeffs.multiplicities[1..])
        .filter(|(m, _)| **m > 0.0)
        .map(|(m, n)| n * m / (lambda + m))
        .sum()
}

/// `|Ω| Σ_r ⟨h, L_r h⟩ σ_r²` with `σ_0² = κ(1)` and `σ_r²` the off-diagonal
/// sphere moment otherwise.
pub fn trace_bound_one_layer(k: &DotProductKernel, d: usize, h: &PoolingFilter, omega: usize) -> Result<f64> {
    let g = autocorrelation(h, omega)?;
    let s0 = k.eval(1.0)?;
    let s = sigma_sq_offdiag(k, d)?;
    Ok(omega as f64 * g.iter().enumerate().map(|(r, gr)| gr * if r == 0 { s0 } else { s }).sum::<f64>())
}

/// `|S₂|² |Ω| (Σ_v ⟨h₂, L_v h₂⟩ ⟨h₁, L_v h₁⟩² + ε)`.
pub fn trace_bound_two_layer(h1: &PoolingFilter, h2: &PoolingFilter, s2: usize, omega: usize, eps: f64) -> Result<f64> {
    let g1 = autocorrelation(h1, omega)?;
    let g2 = autocorrelation(h2, omega)?;
    let s: f64 = g2.iter().zip(&g1).map(|(a, b)| a * b * b).sum();
    Ok((s2 * s2) as f64 * omega as f64 * (s + eps))
}

/// Off-diagonal fourth moments of the patch kernel under i.i.d. patches:
/// one shared pair (`ε = E κ`), a repeated pair (`ε̃ = E κ²`) and two
/// independent pairs (`ε²`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerMoments {
    pub eps: f64,
    pub tilde_eps: f64,
    pub eps_sq: f64,
}

impl TwoLayerMoments {
    pub fn new(k: &DotProductKernel, d: usize) -> Result<Self> {
        let eps = sigma_sq_offdiag(k, d)?;
        Ok(TwoLayerMoments { eps, tilde_eps: tilde_epsilon(k, d)?, eps_sq: eps * eps })
    }

    /// Largest off-diagonal case; the assumption of the two-layer bound.
    pub fn bound_eps(&self) -> f64 {
        self.eps.max(self.tilde_eps).max(self.eps_sq)
    }
}

/// `‖f*‖ √(τ² E[K(x,x)] / n)` (absolute constant taken as 1).
pub fn krr_bound(norm_fstar: f64, trace_term: f64, tau2: f64, n: usize) -> f64 {
    norm_fstar * (tau2 * trace_term / n as f64).sqrt()
}

/// Filters of the two-layer table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableFilter {
    Dirac,
    Global,
}

impl TableFilter {
    pub fn filter(self, omega: usize) -> Result<PoolingFilter> {
        match self {
            TableFilter::Dirac => PoolingFilter::dirac(1, 1),
            TableFilter::Global => PoolingFilter::average(omega, 1, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TableFilter::Dirac => "dirac",
            TableFilter::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub h1: TableFilter,
    pub h2: TableFilter,
    /// `true` when `|S₂| = |Ω|`, `false` when `|S₂| = 1`.
    pub full_patch: bool,
    /// `‖f*‖ / ‖g‖ = |Ω|^norm_exp`.
    pub norm_exp: f64,
    /// `E[K(x,x)]` at `ε = 0` is `|Ω|^trace_exp`.
    pub trace_exp: f64,
    /// `ε` coefficient is `|Ω|^eps_exp`.
    pub eps_exp: f64,
}

impl TableRow {
    pub fn s2(&self, omega: usize) -> usize {
        if self.full_patch {
            omega
        } else {
            1
        }
    }

    /// Bound column exponent at `ε = 0, τ² = 1`: `‖g‖ |Ω|^e / √n`.
    pub fn bound_exp(&self) -> f64 {
        self.norm_exp + self.trace_exp / 2.0
    }

    pub fn name(&self) -> String {
        format!("{}-{}-S{}", self.h1.label(), self.h2.label(), if self.full_patch { "omega" } else { "1" })
    }
}

/// The four architectures of the two-layer table with their symbolic
/// exponents.
pub fn two_layer_table() -> Vec<TableRow> {
    use TableFilter::*;
    vec![
        TableRow { h1: Dirac, h2: Dirac, full_patch: true, norm_exp: 1.0, trace_exp: 3.0, eps_exp: 3.0 },
        TableRow { h1: Dirac, h2: Global, full_patch: true, norm_exp: 1.0, trace_exp: 2.0, eps_exp: 3.0 },
        TableRow { h1: Global, h2: Global, full_patch: true, norm_exp: 0.5, trace_exp: 1.0, eps_exp: 3.0 },
        TableRow { h1: Global, h2: Dirac, full_patch: false, norm_exp: 0.5, trace_exp: -1.0, eps_exp: 1.0 },
    ]
}

/// One-layer architecture on re-channeled non-overlapping patches.
pub fn one_layer_arch(omega: usize, d: usize, k: DotProductKernel, h: PoolingFilter) -> Result<ArchSpec> {
    ArchSpec::new(Grid::line(omega), d, vec![LayerSpec::new(PatchShape::point(1), k, h)])
}

/// Two-layer architecture with a quadratic second layer over `s2` sites.
pub fn two_layer_arch(
    omega: usize,
    d: usize,
    k1: DotProductKernel,
    h1: PoolingFilter,
    h2: PoolingFilter,
    s2: usize,
) -> Result<ArchSpec> {
    let offsets: Vec<isize> = (0..s2 as isize).collect();
    ArchSpec::new(
        Grid::line(omega),
        d,
        vec![
            LayerSpec::new(PatchShape::point(1), k1, h1),
            LayerSpec::new(PatchShape::line(&offsets)?, DotProductKernel::Polynomial { degree: 2 }, h2)
                .non_homogeneous(),
        ],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Monte-Carlo `E[K(x, x)]` over sampled product-of-spheres signals.
pub fn monte_carlo_self_kernel(arch: &ArchSpec, n: usize, seed: u64) -> Result<McEstimate> {
    let omega = arch.input_grid().size();
    let ds = gen_product_of_spheres(omega, arch.channels(), n, seed)?;
    let ev = Evaluator::new(arch);
    let vals = ds.signals().iter().map(|x| ev.self_cache(x).map(|c| c.self_value())).collect::<Result<Vec<_>>>()?;
    Ok(mean_se(&vals, n))
}

fn mean_se(vals: &[f64], n: usize) -> McEstimate {
    let m = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / m;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    McEstimate { mean, std_err: (var / m).sqrt(), n }
}

/// Row of `bounds.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub arch: String,
    pub omega: usize,
    pub bound_eps0: f64,
    pub symbolic: f64,
    pub bound: f64,
    pub eps: f64,
    pub mc_mean: f64,
    pub mc_std_err: f64,
    pub krr_bound_coeff: f64,
}

impl BoundCheck {
    /// The sampled mean does not exceed the bound beyond sampling error.
    pub fn holds(&self) -> bool {
        self.mc_mean - 3.0 * self.mc_std_err <= self.bound
    }

    pub fn symbolic_matches(&self) -> bool {
        (self.bound_eps0 - self.symbolic).abs() <= 1e-12 * self.symbolic
    }
}

/// Evaluates every table architecture at `omega`: symbolic `ε = 0` values,
/// the bound at `eps`, and a Monte-Carlo estimate of `E[K₂(x,x)]`.
pub fn check_two_layer_table(
    k1: &DotProductKernel,
    d: usize,
    omega: usize,
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<BoundCheck>> {
    let o = omega as f64;
    two_layer_table()
        .into_iter()
        .map(|row| {
            let (h1, h2) = (row.h1.filter(omega)?, row.h2.filter(omega)?);
            let s2 = row.s2(omega);
            let b0 = trace_bound_two_layer(&h1, &h2, s2, omega, 0.0)?;
            let b = trace_bound_two_layer(&h1, &h2, s2, omega, eps)?;
            let arch = two_layer_arch(omega, d, k1.clone(), h1, h2, s2)?;
            let mc = monte_carlo_self_kernel(&arch, n, seed)?;
            Ok(BoundCheck {
                arch: row.name(),
                omega,
                bound_eps0: b0,
                symbolic: o.powf(row.trace_exp),
                bound: b,
                eps,
                mc_mean: mc.mean,
                mc_std_err: mc.std_err,
                krr_bound_coeff: krr_bound(o.powf(row.norm_exp), b0, 1.0, 1),
            })
        })
        .collect()
}

/// Groups a descending list into runs whose consecutive relative gaps are
/// below `gap`: `(first value, count)`.
pub fn group_eigenvalues(sorted: &[f64], gap: f64) -> Vec<(f64, usize)> {
    let mut groups: Vec<(f64, usize)> = Vec::new();
    let mut prev = f64::NAN;
    for &v in sorted {
        let same = !prev.is_nan() && (prev - v).abs() <= gap * prev.abs();
        match groups.last_mut() {
            Some(g) if same => g.1 += 1,
            _ => groups.push((v, 1)),
        }
        prev = v;
    }
    groups
}

/// Predicted versus empirical top of the spectrum for one filter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumCheck {
    pub filter: String,
    pub labels: Vec<(Option<usize>, usize)>,
    pub predicted: Vec<f64>,
    pub empirical: Vec<f64>,
    pub rel_err: Vec<f64>,
    pub predicted_groups: Vec<(f64, usize)>,
    pub trace_predicted: f64,
    pub trace_empirical: f64,
    pub trace_std_err: f64,
    pub warning: Option<String>,
}

impl SpectrumCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }

    /// Rank-by-rank agreement of the sorted spectra. Every predicted group
    /// of size `m` is then matched by exactly `m` empirical values at its
    /// ranks, so this also checks multiplicities.
    pub fn eigenvalues_match(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }

    pub fn trace_matches(&self) -> bool {
        // The floor covers filters whose diagonal is constant (zero spread).
        let tol = (3.0 * self.trace_std_err).max(1e-10 * self.trace_predicted.abs());
        (self.trace_empirical - self.trace_predicted).abs() <= tol
    }
}

/// Samples `n` signals, forms the Gram matrix of the one-layer kernel and
/// compares its top `top` eigenvalues over `n` with the Mercer prediction.
#[allow(clippy::too_many_arguments)]
pub fn spectrum_check(
    k: &DotProductKernel,
    d: usize,
    omega: usize,
    h: &PoolingFilter,
    name: &str,
    n: usize,
    top: usize,
    kmax: usize,
    seed: u64,
) -> Result<SpectrumCheck> {
    let spec = predict_spectrum(k, d, omega, h, kmax)?;
    let arch = one_layer_arch(omega, d, k.clone(), h.clone())?;
    let ds = gen_product_of_spheres(omega, d, n, seed)?;
    let (g, _) = compute_gram(&arch, ds.signals(), ds.fingerprint(), &GramOptions::default())?;
    let ev = gram::eigen_decay(&g, top)?;
    let empirical: Vec<f64> = ev.iter().map(|v| v / n as f64).collect();
    let lab = spec.labelled(top);
    let predicted: Vec<f64> = lab.iter().map(|l| l.0).collect();
    let rel_err = predicted
        .iter()
        .zip(&empirical)
        .map(|(p, e)| (e - p).abs() / p.abs().max(f64::MIN_POSITIVE))
        .collect();
    let diag: Vec<f64> = (0..n).map(|i| g.get(i, i)).collect();
    let mc = mean_se(&diag, n);
    Ok(SpectrumCheck {
        filter: name.to_string(),
        labels: lab.iter().map(|l| (l.1, l.2)).collect(),
        predicted_groups: group_eigenvalues(&predicted, 0.05),
        predicted,
        empirical,
        rel_err,
        trace_predicted: spec.trace(),
        trace_empirical: mc.mean,
        trace_std_err: mc.std_err,
        warning: spec.warning,
    })
}

/// Target patch function `g = Σ_j β_j κ(⟨z_j, ·⟩)`, optionally with its
/// constant component removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GSpec {
    pub kernel: DotProductKernel,
    pub d: usize,
    pub centers: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub centered: bool,
    pub mu0: f64,
}

pub const DEFAULT_TERMS: usize = 20;

impl GSpec {
    pub fn random(kernel: DotProductKernel, d: usize, terms: usize, seed: u64, centered: bool) -> Result<Self> {
        let mu0 = sigma_sq_offdiag(&kernel, d)?;
        let mut centers = Vec::with_capacity(terms);
        let mut beta = Vec::with_capacity(terms);
        for j in 0..terms {
            let mut rng = item_rng(seed, j as u64);
            centers.push(sphere_point(&mut rng, d));
            beta.push(StandardNormal.sample(&mut rng));
        }
        Ok(GSpec { kernel, d, centers, beta, centered, mu0 })
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for (c, b) in self.centers.iter().zip(&self.beta) {
            let t: f64 = c.iter().zip(z).map(|(a, b)| a * b).sum();
            s += b * (self.kernel.eval(t)? - if self.centered { self.mu0 } else { 0.0 });
        }
        Ok(s)
    }

    /// RKHS norm from the `J x J` Gram of the centers.
    pub fn norm(&self) -> Result<f64> {
        let j = self.beta.len();
        let mut q = 0.0;
        for a in 0..j {
            for b in 0..j {
                let t: f64 = self.centers[a].iter().zip(&self.centers[b]).map(|(x, y)| x * y).sum();
                let kv = self.kernel.eval(t)? - if self.centered { self.mu0 } else { 0.0 };
                q += self.beta[a] * self.beta[b] * kv;
            }
        }
        Ok(q.max(0.0).sqrt())
    }
}

/// Invariant target `f*(x) = Σ_u g(x_u)` with Gaussian label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub omega: usize,
    pub d: usize,
    pub g: GSpec,
    pub tau: f64,
}

impl SyntheticTask {
    pub fn f_star(&self, x: &Signal) -> Result<f64> {
        (0..self.omega).map(|u| self.g.eval(x.at(u))).sum()
    }

    /// `‖f*‖ = √|Ω| ‖g‖` for any normalized filter.
    pub fn norm(&self) -> Result<f64> {
        Ok((self.omega as f64).sqrt() * self.g.norm()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    pub lambdas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_grid: vec![16, 32, 64, 128, 256, 512],
            seeds: (0..5).collect(),
            test_size: 500,
            lambdas: (0..=14).map(|i| 10f64.powf(-0.5 * i as f64)).collect(),
        }
    }
}

/// One `(arch, n, seed)` cell at the selected `λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub arch: String,
    pub n: usize,
    pub seed: u64,
    pub lambda: f64,
    pub excess_risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arch: String,
    pub n: usize,
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Curves {
    pub cells: Vec<CurveCell>,
    pub points: Vec<CurvePoint>,
}

impl Curves {
    /// Mean excess risk per grid size for one architecture.
    pub fn means(&self, arch: &str) -> Vec<(usize, f64)> {
        self.points.iter().filter(|p| p.arch == arch).map(|p| (p.n, p.mean)).collect()
    }
}

fn noisy_targets(task: &SyntheticTask, xs: &[Signal], seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let f: Vec<f64> = xs.iter().map(|x| task.f_star(x)).collect::<Result<_>>()?;
    let y = f
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let z: f64 = StandardNormal.sample(&mut item_rng(seed ^ 0x6e6f_6973_65, i as u64));
            v + task.tau * z
        })
        .collect();
    Ok((f, y))
}

/// Learning curves of excess risk `E[(f̂ - f*)²]` on a held-out set for
/// each architecture. `λ` is picked per `(arch, n)` from the grid to
/// minimize the seed-averaged excess risk.
pub fn run_generalization_experiment(
    task: &SyntheticTask,
    archs: &[(String, ArchSpec)],
    cfg: &ExperimentConfig,
) -> Result<Curves> {
    let n_max = *cfg.n_grid.iter().max().ok_or_else(|| Error::InvalidArgument("empty n grid".into()))?;
    if cfg.lambdas.is_empty() || cfg.seeds.is_empty() || cfg.test_size == 0 {
        return Err(Error::InvalidArgument("empty lambda grid, seeds or test set".into()));
    }
    for (name, arch) in archs {
        if arch.input_grid().size() != task.omega || arch.channels() != task.d {
            return Err(Error::InvalidArgument(format!("architecture {name} does not fit the task")));
        }
    }
    // risk[arch][n][lambda][seed]
    let mut risk = vec![vec![vec![vec![0.0; cfg.seeds.len()]; cfg.lambdas.len()]; cfg.n_grid.len()]; archs.len()];
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let train = gen_product_of_spheres(task.omega, task.d, n_max, seed.wrapping_mul(2).wrapping_add(1))?;
        let test = gen_product_of_spheres(task.omega, task.d, cfg.test_size, seed.wrapping_mul(2).wrapping_add(2))?;
        let (_, y) = noisy_targets(task, train.signals(), seed)?;
        let f_test: Vec<f64> = test.signals().iter().map(|x| task.f_star(x)).collect::<Result<_>>()?;
        for (ai, (_, arch)) in archs.iter().enumerate() {
            let (g, _) = compute_gram(arch, train.signals(), train.fingerprint(), &GramOptions::default())?;
            let cross = gram::cross_gram(arch, train.signals(), test.signals(), train.fingerprint(), 0)?.to_dmatrix();
            for (ni, &n) in cfg.n_grid.iter().enumerate() {
                let idx: Vec<usize> = (0..n).collect();
                let sub = g.select(&idx);
                let kx = cross.columns(0, n).into_owned();
                for (li, &lambda) in cfg.lambdas.iter().enumerate() {
                    let model = krr::fit(&sub, &y[..n], lambda)?;
                    let pred = model.predict_matrix(&kx)?;
                    risk[ai][ni][li][si] = krr::excess_risk(pred.column(0).as_slice(), &f_test, &f_test)?;
                }
            }
        }
    }
    let mut curves = Curves::default();
    for (ai, (name, _)) in archs.iter().enumerate() {
        for (ni, &n) in cfg.n_grid.iter().enumerate() {
            let mean_of = |li: usize| risk[ai][ni][li].iter().sum::<f64>() / cfg.seeds.len() as f64;
            let best = (0..cfg.lambdas.len()).min_by(|&a, &b| mean_of(a).total_cmp(&mean_of(b))).unwrap();
            let vals = &risk[ai][ni][best];
            let mean = mean_of(best);
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            for (si, &seed) in cfg.seeds.iter().enumerate() {
                curves.cells.push(CurveCell {
                    arch: name.clone(),
                    n,
                    seed,
                    lambda: cfg.lambdas[best],
                    excess_risk: vals[si],
                });
            }
            curves.points.push(CurvePoint { arch: name.clone(), n, lambda: cfg.lambdas[best], mean, std });
        }
    }
    Ok(curves)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope over the upper half of a learning curve.
pub fn rate_slope(curve: &[(usize, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = curve[curve.len() / 2..].iter().map(|&(n, e)| (n as f64, e)).collect();
    loglog_slope(&pts)
}

/// Sample size at which a decreasing learning curve reaches `target`, by
/// log-log interpolation between grid points, or extrapolation along the
/// least-squares slope of the nearest half of the curve.
pub fn sample_size_for(curve: &[(usize, f64)], target: f64) -> f64 {
    let pts: Vec<(f64, f64)> = curve.iter().map(|&(n, e)| (n as f64, e)).collect();
    for w in pts.windows(2) {
        let ((n0, e0), (n1, e1)) = (w[0], w[1]);
        if (e0 >= target && target >= e1) || (e0 <= target && target <= e1) {
            if e0 == e1 {
                return n0;
            }
            let t = (target.ln() - e0.ln()) / (e1.ln() - e0.ln());
            return (n0.ln() + t * (n1.ln() - n0.ln())).exp();
        }
    }
    let half = pts.len().div_ceil(2);
    let (anchor, fit) = if target > pts[0].1 {
        (pts[0], &pts[..half])
    } else {
        (*pts.last().unwrap(), &pts[pts.len() - half..])
    };
    let slope = loglog_slope(fit);
    (anchor.0.ln() + (target.ln() - anchor.1.ln()) / slope).exp()
}

/// `n_reference / n_improved` at the reference curve's error at its largest
/// sample size.
pub fn matched_error_ratio(reference: &[(usize, f64)], improved: &[(usize, f64)]) -> f64 {
    let &(n_ref, target) = reference.last().unwrap();
    n_ref as f64 / sample_size_for(improved, target)
}

pub fn write_spectrum_csv(path: &Path, checks: &[SpectrumCheck]) -> Result<()> {
    let mut s = String::from("# filter, frequency w (- for constant), degree k, predicted and empirical eigenvalue / n\nfilter,w,k,predicted,empirical\n");
    for c in checks {
        for (i, (w, k)) in c.labels.iter().enumerate() {
            let w = w.map_or("-".to_string(), |w| w.to_string());
            let e = c.empirical.get(i).map_or(String::new(), |v| format!("{v:.10e}"));
            writeln!(s, "{},{w},{k},{:.10e},{e}", c.filter, c.predicted[i]).unwrap();
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_curves_csv(path: &Path, curves: &Curves) -> Result<()> {
    let mut s = String::from("# excess risk E[(f_hat - f*)^2] on held-out data; lambda chosen per (arch, n)\narch,n,seed,lambda,excess_risk\n");
    for c in &curves.cells {
        writeln!(s, "{},{},{},{:e},{:.10e}", c.arch, c.n, c.seed, c.lambda, c.excess_risk).unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_bounds_csv(path: &Path, rows: &[BoundCheck]) -> Result<()> {
    let mut s = String::from(
        "# trace bounds: eps=0 value, symbolic |Omega|^p, bound at eps, Monte-Carlo E[K(x,x)] and its standard error\narch,omega,bound_eps0,symbolic,eps,bound,mc_mean,mc_std_err,krr_bound_coeff\n",
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{:.10e},{:.10e},{:.6e},{:.10e},{:.10e},{:.3e},{:.10e}",
            r.arch, r.omega, r.bound_eps0, r.symbolic, r.eps, r.bound, r.mc_mean, r.mc_std_err, r.krr_bound_coeff
        )
        .unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}

/// Invariant-task learning curves for global pooling against no pooling.
pub fn pooling_gain_experiment(
    omega: usize,
    d: usize,
    kernel: &DotProductKernel,
    tau: f64,
    g_seed: u64,
    cfg: &ExperimentConfig,
) -> Result<(Curves, f64)> {
    let g = GSpec::random(kernel.clone(), d, DEFAULT_TERMS, g_seed, true)?;
    let task = SyntheticTask { omega, d, g, tau };
    let archs = vec![
        ("global".to_string(), one_layer_arch(omega, d, kernel.clone(), PoolingFilter::average(omega, 1, 1)?)?),
        ("none".to_string(), one_layer_arch(omega, d, kernel.clone(), PoolingFilter::dirac(1, 1)?)?),
    ];
    let curves = run_generalization_experiment(&task, &archs, cfg)?;
    let ratio = matched_error_ratio(&curves.means("none"), &curves.means("global"));
    Ok((curves, ratio))
}

/// Synthetic dataset helper exposed for the CLI.
pub fn sample_sphere_dataset(omega: usize, d: usize, n: usize, seed: u64) -> Result<Dataset> {
    gen_product_of_spheres(omega, d, n, seed)
}

/// Dense `n x n` Gram of `K_h` evaluated directly from its spatial form
/// `Σ_{u,v} (h ⊛ h̄)[u - v] κ(⟨x_u, y_v⟩)`, independent of the layer engine.
pub fn direct_one_layer_gram(k: &DotProductKernel, h: &PoolingFilter, xs: &[Signal]) -> Result<DMatrix<f64>> {
    let omega = xs.first().map_or(0, |x| x.grid().size());
    let g = autocorrelation(h, omega)?;
    let n = xs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for u in 0..omega {
                for v in 0..omega {
                    let t: f64 = xs[i].at(u).iter().zip(xs[j].at(v)).map(|(a, b)| a * b).sum();
                    s += g[(u + omega - v) % omega] * k.eval(t)?;
                }
            }
            m[(i, j)] = s;
        }
    }
    Ok(m)
}

/// `ĥ` itself, for reports.
pub fn filter_dft(h: &PoolingFilter, n: usize) -> Vec<Complex64> {
    let t: Vec<Complex64> = h.cyclic_taps(n).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    domain::dft(&t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp() -> DotProductKernel {
        DotProductKernel::exponential(0.6).unwrap()
    }

    #[test]
    fn filter_spectrum_cases() {
        let l = filter_spectrum(&PoolingFilter::dirac(1, 1).unwrap(), 8).unwrap();
        assert!(l.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let l = filter_spectrum(&PoolingFilter::average(8, 1, 1).unwrap(), 8).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-14);
        assert!(l[1..].iter().all(|v| v.abs() < 1e-14));
        let l = filter_spectrum(&PoolingFilter::gaussian(1, 1).unwrap(), 8).unwrap();
        assert!((l[0] - 1.0).abs() < 1e-14);
        for w in 0..3 {
            assert!(l[w] > l[w + 1]);
        }
        for w in 1..8 {
            assert!((l[w] - l[8 - w]).abs() < 1e-14);
        }
    }

    #[test]
    fn spectrum_structure() {
        let k = exp();
        let avg = PoolingFilter::average(4, 1, 1).unwrap();
        let s = predict_spectrum(&k, 3, 4, &avg, 6).unwrap();
        let total = 1 + 4 * (1..=6).map(|j| multiplicity(3, j) as usize).sum::<usize>();
        assert_eq!(s.total_multiplicity(), total);
        assert!((s.entries[0].eigenvalue - 4.0 * s.coeffs.mu[0]).abs() < 1e-15);
        for e in &s.entries[1..] {
            if e.w != Some(0) {
                assert!(e.eigenvalue.abs() < 1e-14);
            }
        }
        let dirac = predict_spectrum(&k, 3, 4, &PoolingFilter::dirac(1, 1).unwrap(), 6).unwrap();
        for deg in 1..=6 {
            let n = dirac.entries.iter().filter(|e| e.k == deg && (e.eigenvalue - dirac.coeffs.mu[deg]).abs() < 1e-15).count();
            assert_eq!(n, 4);
        }
        assert!(s.entries.iter().all(|e| e.eigenvalue >= -1e-12));
    }

    #[test]
    fn linear_kernel_spectrum() {
        let s = predict_spectrum(&DotProductKernel::Linear, 3, 4, &PoolingFilter::average(4, 1, 1).unwrap(), 3).unwrap();
        let top = s.expanded(4);
        assert!((top[0] - 1.0 / 3.0).abs() < 1e-10 && (top[2] - 1.0 / 3.0).abs() < 1e-10);
        assert!(top[3].abs() < 1e-10);
        assert!(s.entries[0].eigenvalue.abs() < 1e-12);
    }

    #[test]
    fn spectrum_matches_direct_gram_trace() {
        // The operator trace equals E[K(x,x)] computed straight from the
        // spatial form of the kernel.
        let k = exp();
        let h = PoolingFilter::gaussian(1, 1).unwrap();
        let s = predict_spectrum(&k, 3, 4, &h, 20).unwrap();
        let xs = gen_product_of_spheres(4, 3, 400, 3).unwrap();
        let m = direct_one_layer_gram(&k, &h, xs.signals()).unwrap();
        let diag: Vec<f64> = (0..400).map(|i| m[(i, i)]).collect();
        let est = mean_se(&diag, 400);
        assert!((est.mean - s.trace()).abs() < 3.0 * est.std_err);
        assert!((s.truncated_trace() - s.trace()).abs() < 1e-6);
        let arch = one_layer_arch(4, 3, k.clone(), h).unwrap();
        let (g, _) = compute_gram(&arch, &xs.signals()[..20], 0, &GramOptions::default()).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                assert!((g.get(i, j) - m[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dof_limits_and_bounds() {
        let k = exp();
        let h = PoolingFilter::gaussian(1, 1).unwrap();
        let s = predict_spectrum(&k, 3, 8, &h, 12).unwrap();
        assert!(degrees_of_freedom(&s, 1e12) < 1e-10);
        let nonzero: usize = s.entries.iter().filter(|e| e.eigenvalue > 0.0).map(|e| e.multiplicity).sum();
        assert!((degrees_of_freedom(&s, 1e-30) - nonzero as f64).abs() < 1e-6);
        let h2: f64 = h.taps().iter().map(|t| t * t).sum();
        for i in 0..20 {
            let lambda = 10f64.powf(-6.0 + 0.3 * i as f64);
            assert!(degrees_of_freedom(&s, lambda) <= 1.0 + 8.0 * patch_degrees_of_freedom(&s.coeffs, lambda / h2) + 1e-12);
        }
        let avg = predict_spectrum(&k, 3, 8, &PoolingFilter::average(8, 1, 1).unwrap(), 12).unwrap();
        for i in 0..20 {
            let lambda = 10f64.powf(-6.0 + 0.3 * i as f64);
            assert!(degrees_of_freedom(&avg, lambda) - 1.0 <= patch_degrees_of_freedom(&avg.coeffs, lambda) + 1e-12);
        }
    }

    #[test]
    fn table_rows_symbolic() {
        for omega in [3usize, 4, 7, 10] {
            let o = omega as f64;
            for row in two_layer_table() {
                let (h1, h2) = (row.h1.filter(omega).unwrap(), row.h2.filter(omega).unwrap());
                let s2 = row.s2(omega);
                let b0 = trace_bound_two_layer(&h1, &h2, s2, omega, 0.0).unwrap();
                assert!((b0 - o.powf(row.trace_exp)).abs() < 1e-12 * b0);
                let b1 = trace_bound_two_layer(&h1, &h2, s2, omega, 1.0).unwrap();
                assert!((b1 - b0 - o.powf(row.eps_exp)).abs() < 1e-10 * b1);
                let bound = krr_bound(o.powf(row.norm_exp), b0, 1.0, 1);
                assert!((bound - o.powf(row.bound_exp())).abs() < 1e-10 * bound);
            }
        }
        let exps: Vec<f64> = two_layer_table().iter().map(|r| r.bound_exp()).collect();
        assert_eq!(exps, vec![2.5, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn krr_bound_scaling() {
        let b = krr_bound(2.0, 3.0, 0.5, 100);
        assert!((krr_bound(2.0, 3.0, 0.5, 200) - b / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(krr_bound(2.0, 3.0, 0.0, 100), 0.0);
    }

    #[test]
    fn one_layer_bound_is_exact_in_model() {
        let k = exp();
        for h in [PoolingFilter::dirac(1, 1).unwrap(), PoolingFilter::average(4, 1, 1).unwrap()] {
            let b = trace_bound_one_layer(&k, 3, &h, 4).unwrap();
            let arch = one_layer_arch(4, 3, k.clone(), h).unwrap();
            let mc = monte_carlo_self_kernel(&arch, 2000, 5).unwrap();
            assert!((mc.mean - b).abs() <= 3.0 * mc.std_err + 1e-12);
        }
    }

    #[test]
    fn moments_ordering() {
        let m = TwoLayerMoments::new(&exp(), 3).unwrap();
        assert!(m.eps > m.tilde_eps && m.tilde_eps > m.eps_sq);
        assert_eq!(m.bound_eps(), m.eps);
    }

    #[test]
    fn grouping() {
        let g = group_eigenvalues(&[1.0, 0.99, 0.5, 0.49, 0.48, 0.1], 0.05);
        assert_eq!(g.iter().map(|x| x.1).collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn sample_size_interpolation() {
        let curve: Vec<(usize, f64)> = [10usize, 20, 40, 80].iter().map(|&n| (n, 1.0 / n as f64)).collect();
        assert!((sample_size_for(&curve, 1.0 / 30.0) - 30.0).abs() < 1e-9);
        assert!((sample_size_for(&curve, 1.0 / 5.0) - 5.0).abs() < 1e-9);
        assert!((sample_size_for(&curve, 1.0 / 160.0) - 160.0).abs() < 1e-6);
        let slow: Vec<(usize, f64)> = curve.iter().map(|&(n, _)| (n, 4.0 / n as f64)).collect();
        assert!((matched_error_ratio(&slow, &curve) - 4.0).abs() < 1e-9);
        assert!((rate_slope(&curve) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn g_spec_norm_and_centering() {
        let g = GSpec::random(exp(), 3, 5, 1, true).unwrap();
        let mean = {
            let ds = gen_product_of_spheres(1, 3, 4000, 2).unwrap();
            ds.signals().iter().map(|s| g.eval(s.at(0)).unwrap()).sum::<f64>() / 4000.0
        };
        assert!(mean.abs() < 0.1 * g.norm().unwrap());
        let raw = GSpec { centered: false, ..g.clone() };
        assert!(raw.norm().unwrap() > g.norm().unwrap());
    }

    #[test]
    fn realizable_noiseless_interpolation() {
        // f* lies in the RKHS of both architectures; with enough points and
        // no noise the excess risk vanishes.
        let k = DotProductKernel::Polynomial { degree: 2 };
        let g = GSpec::random(k.clone(), 3, 3, 4, false).unwrap();
        let task = SyntheticTask { omega: 4, d: 3, g, tau: 0.0 };
        let archs = vec![(
            "none".to_string(),
            ArchSpec::new(
                Grid::line(4),
                3,
                vec![LayerSpec::new(PatchShape::point(1), k, PoolingFilter::dirac(1, 1).unwrap()).non_homogeneous()],
            )
            .unwrap(),
        )];
        let cfg = ExperimentConfig { n_grid: vec![60], seeds: vec![0], test_size: 50, lambdas: vec![1e-12] };
        let c = run_generalization_experiment(&task, &archs, &cfg).unwrap();
        assert!(c.points[0].mean < 1e-12);
    }
}
