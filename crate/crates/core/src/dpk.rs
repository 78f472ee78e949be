//! Dot-product kernels `κ(u) = Σ_j b_j u^j` on the sphere: evaluation,
//! homogeneous lifts, Gegenbauer (Legendre) coefficients and sphere moments.
//!
//! Sphere integrals `c_d ∫_{-1}^{1} f(t) (1-t²)^{(d-3)/2} dt` are computed
//! after the substitution `t = cos θ`, i.e. as `c_d ∫_0^π f(cos θ) sin^{d-2} θ dθ`
//! with Gauss–Legendre nodes on `[0, π]`. The integrand is analytic on the
//! interval for every `d ≥ 2`, so the `d = 2` Chebyshev weight needs no
//! special casing.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Cosines further than this outside `[-1, 1]` are rejected instead of clamped.
pub const COSINE_TOLERANCE: f64 = 1e-6;

const QUAD_START: usize = 256;
const QUAD_MAX: usize = 1 << 14;
const QUAD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DotProductKernel {
    /// `κ(u) = exp((u - 1) / σ²)`.
    Exponential { sigma: f64 },
    /// Degree-1 arc-cosine kernel.
    ArcCos1,
    /// `κ(u) = u^degree`.
    Polynomial { degree: u32 },
    /// `κ(u) = u`.
    Linear,
    /// `κ(u) = Σ_j coeffs[j] u^j` with non-negative coefficients.
    Series { coeffs: Vec<f64> },
}

impl DotProductKernel {
    pub fn exponential(sigma: f64) -> Result<Self> {
        let k = DotProductKernel::Exponential { sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn series(coeffs: Vec<f64>) -> Result<Self> {
        let k = DotProductKernel::Series { coeffs };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DotProductKernel::Exponential { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::InvalidArgument(format!("exponential kernel needs sigma > 0, got {sigma}")))
            }
            DotProductKernel::Series { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::InvalidArgument("empty series kernel".into()));
                }
                if coeffs.iter().any(|b| !b.is_finite() || *b < 0.0) {
                    return Err(Error::InvalidArgument(
                        "series coefficients must be finite and non-negative".into(),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Polynomial degree when `κ` is a finite series.
    pub fn polynomial_degree(&self) -> Option<usize> {
        match self {
            DotProductKernel::Polynomial { degree } => Some(*degree as usize),
            DotProductKernel::Linear => Some(1),
            DotProductKernel::Series { coeffs } => Some(coeffs.len() - 1),
            _ => None,
        }
    }

    /// Finite coefficient list `b_0..b_r` for polynomial kernels.
    pub fn polynomial_coeffs(&self) -> Option<Vec<f64>> {
        match self {
            DotProductKernel::Polynomial { degree } => {
                let mut b = vec![0.0; *degree as usize + 1];
                b[*degree as usize] = 1.0;
                Some(b)
            }
            DotProductKernel::Linear => Some(vec![0.0, 1.0]),
            DotProductKernel::Series { coeffs } => Some(coeffs.clone()),
            _ => None,
        }
    }

    /// Taylor coefficient `b_j` of `κ` at 0.
    pub fn series_coefficient(&self, j: usize) -> f64 {
        match self {
            DotProductKernel::Exponential { sigma } => {
                let a = 1.0 / (sigma * sigma);
                (-a + j as f64 * a.ln() - ln_gamma(j as f64 + 1.0)).exp()
            }
            DotProductKernel::ArcCos1 => arccos1_coefficient(j),
            _ => self
                .polynomial_coeffs()
                .and_then(|b| b.get(j).copied())
                .unwrap_or(0.0),
        }
    }

    /// `κ(t)` for any real `t` where the kernel function is defined.
    ///
    /// Series kernels are entire; the arc-cosine kernel only exists on
    /// `[-1, 1]` (clamped within [`COSINE_TOLERANCE`]).
    pub fn eval_raw(&self, t: f64) -> Result<f64> {
        Ok(match self {
            DotProductKernel::Exponential { sigma } => ((t - 1.0) / (sigma * sigma)).exp(),
            DotProductKernel::ArcCos1 => {
                let u = clamp_cosine(t)?;
                (u * (std::f64::consts::PI - u.acos()) + (1.0 - u * u).max(0.0).sqrt())
                    / std::f64::consts::PI
            }
            DotProductKernel::Polynomial { degree } => t.powi(*degree as i32),
            DotProductKernel::Linear => t,
            DotProductKernel::Series { coeffs } => {
                coeffs.iter().rev().fold(0.0, |acc, &b| acc * t + b)
            }
        })
    }

    /// `κ(u)` for a cosine `u`, clamped to `[-1, 1]`.
    pub fn eval(&self, u: f64) -> Result<f64> {
        self.eval_raw(clamp_cosine(u)?)
    }
}

fn clamp_cosine(u: f64) -> Result<f64> {
    if !u.is_finite() || u.abs() > 1.0 + COSINE_TOLERANCE {
        return Err(Error::KernelDomain { value: u });
    }
    Ok(u.clamp(-1.0, 1.0))
}

/// Taylor coefficients of the degree-1 arc-cosine kernel
/// `κ(u) = u/2 + (u·asin(u) + sqrt(1-u²))/π`.
fn arccos1_coefficient(j: usize) -> f64 {
    use std::f64::consts::PI;
    match j {
        0 => 1.0 / PI,
        1 => 0.5,
        _ if j % 2 == 1 => 0.0,
        _ => {
            let m = j / 2;
            // u·asin(u) contributes (2m-2)! / (4^{m-1} ((m-1)!)^2 (2m-1)) u^{2m}.
            let k = (m - 1) as f64;
            let asin_part = (ln_gamma(2.0 * k + 1.0) - k * 4f64.ln() - 2.0 * ln_gamma(k + 1.0)).exp()
                / (2.0 * k + 1.0);
            // sqrt(1-u²) contributes binom(1/2, m) (-1)^m u^{2m}.
            let mut binom = 1.0;
            for i in 0..m {
                binom *= (0.5 - i as f64) / (i as f64 + 1.0);
            }
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            (asin_part + sign * binom) / PI
        }
    }
}

/// `k(z, z') = ‖z‖‖z'‖ κ(⟨z, z'⟩ / (‖z‖‖z'‖))`, zero when either norm is zero.
pub fn homogeneous_eval(k: &DotProductKernel, dot: f64, nz: f64, nz2: f64) -> Result<f64> {
    if nz < 0.0 || nz2 < 0.0 || !nz.is_finite() || !nz2.is_finite() {
        return Err(Error::InvalidArgument(format!("negative or non-finite norms {nz}, {nz2}")));
    }
    let scale = nz * nz2;
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(scale * k.eval(dot / scale)?)
}

/// Number of linearly independent degree-`k` spherical harmonics in `d`
/// dimensions.
pub fn multiplicity(d: usize, k: usize) -> f64 {
    assert!(d >= 2, "multiplicity needs d >= 2");
    if k == 0 {
        return 1.0;
    }
    // binom(k + d - 3, k - 1), built with exact intermediate divisions.
    let n = (k + d - 3) as u128;
    let mut binom: u128 = 1;
    for i in 1..k as u128 {
        match binom.checked_mul(n - i + 1) {
            Some(v) => binom = v / i,
            None => return multiplicity_approx(d, k),
        }
    }
    match binom.checked_mul((2 * k + d - 2) as u128) {
        Some(v) => (v / k as u128) as f64,
        None => multiplicity_approx(d, k),
    }
}

fn multiplicity_approx(d: usize, k: usize) -> f64 {
    let (d, k) = (d as f64, k as f64);
    (2.0 * k + d - 2.0) / k
        * (ln_gamma(k + d - 2.0) - ln_gamma(k) - ln_gamma(d - 1.0)).exp()
}

/// Values `P_{0,d}(t), …, P_{kmax,d}(t)` of the Gegenbauer polynomials
/// normalized by `P_{k,d}(1) = 1`.
pub fn gegenbauer(kmax: usize, d: usize, t: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(kmax + 1);
    p.push(1.0);
    if kmax >= 1 {
        p.push(t);
    }
    let df = d as f64;
    for k in 1..kmax {
        let kf = k as f64;
        let next = ((2.0 * kf + df - 2.0) * t * p[k] - kf * p[k - 1]) / (kf + df - 2.0);
        p.push(next);
    }
    p
}

/// Normalizing constant `ω_{d-2} / ω_{d-1}` of the projected sphere measure.
pub fn sphere_density_constant(d: usize) -> f64 {
    let df = d as f64;
    (ln_gamma(df / 2.0) - ln_gamma((df - 1.0) / 2.0)).exp() / std::f64::consts::PI.sqrt()
}

type Rule = Arc<(Vec<f64>, Vec<f64>)>;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, cached per order.
pub fn gauss_legendre(n: usize) -> Rule {
    static CACHE: OnceLock<Mutex<HashMap<usize, Rule>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return r.clone();
    }
    let rule = Arc::new(compute_gauss_legendre(n));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = nf * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// `c_d ∫ f(t) (1-t²)^{(d-3)/2} dt` for a vector-valued integrand, doubling
/// the node count until every component changes by less than the tolerance.
fn sphere_integrals<F>(d: usize, len: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    if d < 2 {
        return Err(Error::InvalidArgument(format!("sphere dimension d = {d} < 2")));
    }
    let c = sphere_density_constant(d);
    let eval = |n: usize| -> Result<Vec<f64>> {
        let rule = gauss_legendre(n);
        let (nodes, weights) = (&rule.0, &rule.1);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let mut acc = vec![0.0; len];
        for (&x, &w) in nodes.iter().zip(weights) {
            let theta = half_pi * (x + 1.0);
            let jac = theta.sin().powi(d as i32 - 2);
            let vals = f(theta.cos())?;
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += w * jac * v;
            }
        }
        Ok(acc.into_iter().map(|a| a * c * half_pi).collect())
    };
    let mut n = QUAD_START;
    let mut prev = eval(n)?;
    while n < QUAD_MAX {
        n *= 2;
        let cur = eval(n)?;
        let converged = cur
            .iter()
            .zip(&prev)
            .all(|(a, b)| (a - b).abs() <= QUAD_TOL * a.abs().max(1.0));
        if converged {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::QuadratureNonConvergence(format!(
        "sphere integral in d = {d} not converged at {QUAD_MAX} nodes"
    )))
}

/// Expectation of `f(⟨z, z'⟩)` for independent uniform `z, z'` on `S^{d-1}`.
pub fn sphere_average<F: Fn(f64) -> f64>(d: usize, f: F) -> Result<f64> {
    Ok(sphere_integrals(d, 1, |t| Ok(vec![f(t)]))?[0])
}

/// Gegenbauer coefficients of a dot-product kernel in dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegendreCoeffs {
    pub d: usize,
    /// `μ_0, …, μ_Kmax`.
    pub mu: Vec<f64>,
    /// `N(d, k)` for the same indices.
    pub multiplicities: Vec<f64>,
    /// `max_t |κ(t) - Σ_k μ_k N(d,k) P_k(t)|` on a uniform grid of `[-1, 1]`.
    pub reconstruction_residual: f64,
}

impl LegendreCoeffs {
    pub fn kmax(&self) -> usize {
        self.mu.len() - 1
    }

    /// Truncated Mercer series `Σ_k μ_k N(d,k) P_k(t)`.
    pub fn reconstruct(&self, t: f64) -> f64 {
        let p = gegenbauer(self.kmax(), self.d, t);
        self.mu
            .iter()
            .zip(&self.multiplicities)
            .zip(p)
            .map(|((m, n), pk)| m * n * pk)
            .sum()
    }
}

const RECONSTRUCTION_GRID: usize = 401;

/// `μ_k = c_d ∫ κ(t) P_{k,d}(t) (1-t²)^{(d-3)/2} dt` for `k = 0..=kmax`.
pub fn legendre_coeffs(k: &DotProductKernel, d: usize, kmax: usize) -> Result<LegendreCoeffs> {
    k.validate()?;
    let mu = sphere_integrals(d, kmax + 1, |t| {
        let kt = k.eval(t)?;
        Ok(gegenbauer(kmax, d, t).into_iter().map(|p| kt * p).collect())
    })?;
    let multiplicities = (0..=kmax).map(|j| multiplicity(d, j)).collect();
    let mut coeffs = LegendreCoeffs { d, mu, multiplicities, reconstruction_residual: 0.0 };
    let mut residual: f64 = 0.0;
    for i in 0..RECONSTRUCTION_GRID {
        let t = -1.0 + 2.0 * i as f64 / (RECONSTRUCTION_GRID - 1) as f64;
        residual = residual.max((k.eval(t)? - coeffs.reconstruct(t)).abs());
    }
    coeffs.reconstruction_residual = residual;
    Ok(coeffs)
}

/// `E[κ(⟨z, z'⟩)]` for independent uniform patches: the off-diagonal
/// second moment `σ_r²` (r ≠ 0), equal to `μ_0`.
pub fn sigma_sq_offdiag(k: &DotProductKernel, d: usize) -> Result<f64> {
    k.validate()?;
    let v = sphere_integrals(d, 1, |t| Ok(vec![k.eval(t)?]))?;
    Ok(v[0])
}

/// `E[κ(⟨z, z'⟩)²]` for independent uniform patches.
pub fn tilde_epsilon(k: &DotProductKernel, d: usize) -> Result<f64> {
    k.validate()?;
    let v = sphere_integrals(d, 1, |t| {
        let kt = k.eval(t)?;
        Ok(vec![kt * kt])
    })?;
    Ok(v[0])
}

/// Closed form of [`sigma_sq_offdiag`] for the exponential kernel:
/// `e^{-1/σ²} (2σ²)^{(d-2)/2} I_{d/2-1}(1/σ²) Γ(d/2)`.
pub fn exponential_sigma_sq_bessel(sigma: f64, d: usize) -> f64 {
    let a = 1.0 / (sigma * sigma);
    let df = d as f64;
    let nu = df / 2.0 - 1.0;
    (-a + (df - 2.0) / 2.0 * (2.0 * sigma * sigma).ln() + ln_bessel_i(nu, a) + ln_gamma(df / 2.0))
        .exp()
}

/// `ln I_ν(x)` for `x > 0`, `ν ≥ 0`, by the ascending series.
pub fn ln_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0 && nu >= 0.0);
    let half = x / 2.0;
    let ln_t0 = nu * half.ln() - ln_gamma(nu + 1.0);
    let q = half * half;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut m = 0.0;
    loop {
        m += 1.0;
        term *= q / (m * (m + nu));
        sum += term;
        if term < 1e-17 * sum && m > q {
            break;
        }
    }
    ln_t0 + sum.ln()
}
