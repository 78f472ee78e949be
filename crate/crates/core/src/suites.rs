//! Property suites shared by the acceptance tests and `ckn verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::ckmap::{kernel_eval, ArchSpec, LayerSpec};
use crate::domain::{Boundary, Grid, PatchShape, PoolingFilter, Signal};
use crate::dpk::DotProductKernel;
use crate::error::Result;
use crate::featoracle::{build_features, feature_dim, min_norm, peak_feature_dim, spanning_sample, DEFAULT_DIM_CAP};
use crate::theory::{self, BoundCheck, SpectrumCheck, TwoLayerMoments};

/// Cap on the oracle's feature workspace for random architectures.
pub const ORACLE_CAP: usize = 20_000;
pub const ORACLE_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-6;
pub const SPECTRUM_TOL: f64 = 0.15;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub summary: String,
    pub cases: Vec<Value>,
}

fn random_kernel(rng: &mut ChaCha8Rng) -> (DotProductKernel, bool) {
    let degree = rng.random_range(1..=3u32);
    match rng.random_range(0..3) {
        0 if degree == 1 => (DotProductKernel::Linear, rng.random_bool(0.5)),
        0 | 1 => (DotProductKernel::Polynomial { degree }, false),
        _ => {
            let mut c: Vec<f64> = (0..=degree)
                .map(|_| if rng.random_bool(0.7) { rng.random_range(0.0..1.0) } else { 0.0 })
                .collect();
            c[degree as usize] = rng.random_range(0.1..1.0);
            (DotProductKernel::Series { coeffs: c }, false)
        }
    }
}

fn random_filter(rng: &mut ChaCha8Rng, extent: usize) -> Result<PoolingFilter> {
    let divisors: Vec<usize> = (1..=extent.min(4)).filter(|s| extent % s == 0).collect();
    let stride = divisors[rng.random_range(0..divisors.len())];
    let f = match rng.random_range(0..4) {
        0 => PoolingFilter::dirac(1, 1)?,
        1 => PoolingFilter::gaussian(1, 1)?,
        2 => PoolingFilter::average(rng.random_range(1..=extent.min(4)), 1, 1)?,
        _ => {
            let taps = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0.0..1.0)).collect();
            PoolingFilter::custom(1, taps, -(rng.random_range(0..=1i64) as isize), 1)?
        }
    };
    f.with_stride(stride)
}

/// Random all-polynomial architecture: depth at most 3, degrees at most 3,
/// `|Ω| <= 8`, resampled until the explicit features fit [`ORACLE_CAP`].
pub fn random_poly_arch(rng: &mut ChaCha8Rng) -> Result<ArchSpec> {
    loop {
        let omega = rng.random_range(1..=8);
        let boundary = if rng.random_bool(0.5) { Boundary::Periodic } else { Boundary::ZeroPad };
        let channels = rng.random_range(1..=3);
        let mut extent = omega;
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let len = rng.random_range(1..=3i64);
            let start = rng.random_range(-1..=0i64);
            let offsets: Vec<isize> = (start..start + len).map(|o| o as isize).collect();
            let (k, homogeneous) = random_kernel(rng);
            let h = random_filter(rng, extent)?;
            extent /= h.stride();
            let layer = LayerSpec::new(PatchShape::line(&offsets)?, k, h);
            layers.push(if homogeneous { layer } else { layer.non_homogeneous() });
        }
        let arch = ArchSpec::new(Grid::line(omega).with_boundary(boundary), channels, layers)?;
        if peak_feature_dim(&arch)? <= ORACLE_CAP {
            return Ok(arch);
        }
    }
}

/// Kernel engine against explicit features on `count` random
/// architectures. `fault` is added to the first engine value, to check
/// that a wrong kernel is caught.
pub fn oracle_suite(count: usize, seed: u64, fault: Option<f64>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut depths = [0usize; 3];
    let mut cases = Vec::new();
    for trial in 0..count {
        let arch = random_poly_arch(&mut rng)?;
        depths[arch.depth() - 1] += 1;
        let xy = spanning_sample(&arch, 2, seed.wrapping_mul(7919).wrapping_add(trial as u64));
        let fx = build_features(&arch, &xy[0], ORACLE_CAP)?;
        let fy = build_features(&arch, &xy[1], ORACLE_CAP)?;
        let mut k = kernel_eval(&arch, &xy[0], &xy[1])?;
        if trial == 0 {
            k += fault.unwrap_or(0.0);
        }
        let err = (fx.dot(&fy) - k).abs() / (1.0 + k.abs());
        worst = worst.max(err);
        if err > ORACLE_TOL {
            failures += 1;
            cases.push(json!({ "trial": trial, "error": err, "depth": arch.depth(), "dim": fx.dim() }));
        }
    }
    Ok(SuiteReport {
        suite: "oracle".into(),
        pass: failures == 0,
        summary: format!(
            "{count} random archs (depths 1/2/3: {depths:?}), {failures} failures, worst |<Psi,Psi> - K|/(1+|K|) = {worst:.2e}"
        ),
        cases,
    })
}

/// Norm of `f*(x) = Σ_u zᵤᵀ M zᵤ` under a one-layer quadratic kernel
/// against `√|Ω| ‖M‖_F`, for three filters and `|Ω| ∈ {4, 8}`.
pub fn norms_suite(seed: u64) -> Result<SuiteReport> {
    let d = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for omega in [4usize, 8] {
        let filters = [
            ("dirac", PoolingFilter::dirac(1, 1)?),
            ("average", PoolingFilter::average(omega, 1, 1)?),
            ("gaussian", PoolingFilter::gaussian(1, 1)?),
        ];
        for (name, h) in filters {
            let arch = ArchSpec::new(
                Grid::line(omega),
                d,
                vec![LayerSpec::new(PatchShape::point(1), DotProductKernel::Polynomial { degree: 2 }, h)
                    .non_homogeneous()],
            )?;
            let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..d * d).map(|ij| 0.5 * (a[ij] + a[(ij % d) * d + ij / d])).collect();
            let g = |z: &[f64]| -> f64 { (0..d * d).map(|ij| z[ij / d] * m[ij] * z[ij % d]).sum() };
            let dim = feature_dim(&arch)?;
            let constraints: Vec<(Signal, f64)> = spanning_sample(&arch, 3 * dim, seed ^ omega as u64)
                .into_iter()
                .map(|x| {
                    let f = (0..omega).map(|u| g(x.at(u))).sum();
                    (x, f)
                })
                .collect();
            let r = min_norm(&arch, &constraints, DEFAULT_DIM_CAP)?;
            let g_norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected = (omega as f64).sqrt() * g_norm;
            let rel = (r.norm - expected).abs() / expected;
            worst = worst.max(rel);
            cases.push(json!({ "filter": name, "omega": omega, "min_norm": r.norm, "expected": expected, "rel_err": rel }));
        }
    }
    Ok(SuiteReport {
        suite: "norms".into(),
        pass: worst <= NORM_TOL,
        summary: format!("min-norm vs sqrt|Omega| ||g|| on 6 cases, worst rel err {worst:.2e}"),
        cases,
    })
}

/// Top-20 spectrum of the one-layer exponential kernel at `|Ω| = 4`,
/// `d = 3` for Dirac, average and Gaussian pooling.
pub fn spectrum_suite(n: usize, seed: u64) -> Result<(SuiteReport, Vec<SpectrumCheck>)> {
    let k = DotProductKernel::Exponential { sigma: 0.6 };
    let filters = [
        ("dirac", PoolingFilter::dirac(1, 1)?),
        ("average", PoolingFilter::average(4, 1, 1)?),
        ("gaussian", PoolingFilter::gaussian(1, 1)?),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut cases = Vec::new();
    let mut checks = Vec::new();
    for (i, (name, h)) in filters.into_iter().enumerate() {
        let c = theory::spectrum_check(&k, 3, 4, &h, name, n, 20, 14, seed + i as u64)?;
        let ok = c.eigenvalues_match(SPECTRUM_TOL) && c.trace_matches();
        pass &= ok;
        let groups: Vec<String> = c.predicted_groups.iter().map(|(v, m)| format!("{m}x{v:.4}")).collect();
        parts.push(format!(
            "{name}: max rel err {:.3}, trace {:.4} vs {:.4} +- {:.4}, groups [{}]",
            c.max_rel_err(),
            c.trace_empirical,
            c.trace_predicted,
            c.trace_std_err,
            groups.join(" ")
        ));
        cases.push(json!({
            "filter": name,
            "pass": ok,
            "max_rel_err": c.max_rel_err(),
            "trace_empirical": c.trace_empirical,
            "trace_predicted": c.trace_predicted,
            "trace_std_err": c.trace_std_err,
            "warning": c.warning,
        }));
        checks.push(c);
    }
    Ok((SuiteReport { suite: "spectrum".into(), pass, summary: parts.join("; "), cases }, checks))
}

/// Two-layer table: Monte-Carlo `E[K₂(x,x)]` under the bound and the
/// `ε = 0` column equal to its symbolic power of `|Ω|`.
pub fn bounds_suite(n: usize, seed: u64, omegas: &[usize]) -> Result<(SuiteReport, Vec<BoundCheck>)> {
    let k = DotProductKernel::Exponential { sigma: 0.6 };
    let eps = TwoLayerMoments::new(&k, 3)?.bound_eps();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut rows = Vec::new();
    for &omega in omegas {
        for r in theory::check_two_layer_table(&k, 3, omega, eps, n, seed + omega as u64)? {
            pass &= r.holds() && r.symbolic_matches();
            parts.push(format!("{}@{omega}: MC {:.3}+-{:.3} <= {:.3}", r.arch, r.mc_mean, r.mc_std_err, r.bound));
            rows.push(r);
        }
    }
    for omega in 2..=16usize {
        for row in theory::two_layer_table() {
            let b = theory::trace_bound_two_layer(
                &row.h1.filter(omega)?,
                &row.h2.filter(omega)?,
                row.s2(omega),
                omega,
                0.0,
            )?;
            let sym = (omega as f64).powf(row.trace_exp);
            pass &= (b - sym).abs() <= 1e-12 * sym;
        }
    }
    let cases = rows.iter().map(|r| serde_json::to_value(r).expect("plain data")).collect();
    Ok((
        SuiteReport { suite: "bounds".into(), pass, summary: format!("eps = {eps:.4}; {}", parts.join("; ")), cases },
        rows,
    ))
}
