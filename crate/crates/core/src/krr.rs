//! Kernel ridge regression on precomputed Gram matrices.
//!
//! The estimator minimizes `(1/n) Σ (y_i - f(x_i))² + λ ‖f‖²`, so the
//! coefficients solve `(K + nλ I) α = y`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gram::{CrossGram, GramMatrix};

pub const MAGIC: &[u8; 8] = b"CKKRR001";
/// Above this size the system is solved by conjugate gradients.
pub const CG_THRESHOLD: usize = 20_000;
const JITTER: f64 = 1e-10;

/// Fitted coefficients, one column per output.
#[derive(Clone, Debug, PartialEq)]
pub struct KrrModel {
    pub alpha: DMatrix<f64>,
    pub lambda: f64,
    pub arch_fp: u64,
    pub data_fp: u64,
    /// Diagonal shift actually added beyond `nλ` (nonzero after a jitter retry).
    pub jitter: f64,
}

/// Target values for one-vs-all coding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetCoding {
    pub positive: f64,
    pub negative: f64,
}

impl Default for TargetCoding {
    fn default() -> Self {
        TargetCoding { positive: 0.9, negative: -0.1 }
    }
}

fn regularized(k: &GramMatrix, lambda: f64, extra: f64) -> DMatrix<f64> {
    let n = k.n();
    let mut a = k.to_dmatrix();
    let shift = n as f64 * lambda + extra;
    for i in 0..n {
        a[(i, i)] += shift;
    }
    a
}

fn conjugate_gradient(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let target = (1e-12 * b.norm()).powi(2);
    for _ in 0..(10 * n).max(100) {
        if rr <= target {
            return Ok(x);
        }
        let ap = a * &p;
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::Singular("matrix not positive definite in CG".into()));
        }
        let step = rr / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rr_new = r.norm_squared();
        p = &r + (rr_new / rr) * &p;
        rr = rr_new;
    }
    Err(Error::Singular("conjugate gradients did not converge".into()))
}

fn solve(k: &GramMatrix, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = k.n();
    if n >= CG_THRESHOLD {
        let a = regularized(k, lambda, 0.0);
        let mut alpha = DMatrix::zeros(n, y.ncols());
        for c in 0..y.ncols() {
            let col = conjugate_gradient(&a, &y.column(c).into_owned())?;
            alpha.set_column(c, &col);
        }
        return Ok((alpha, 0.0));
    }
    if let Some(ch) = Cholesky::new(regularized(k, lambda, 0.0)) {
        return Ok((ch.solve(y), 0.0));
    }
    let jitter = JITTER * k.trace() / n as f64;
    match Cholesky::new(regularized(k, lambda, jitter)) {
        Some(ch) => Ok((ch.solve(y), jitter)),
        None => Err(Error::Singular(format!(
            "Cholesky failed for n = {n}, lambda = {lambda:e} after jitter {jitter:e}"
        ))),
    }
}

/// Fits every column of `y` against one factorization.
pub fn fit_multi(k: &GramMatrix, y: &DMatrix<f64>, lambda: f64) -> Result<KrrModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda = {lambda}")));
    }
    if y.nrows() != k.n() {
        return Err(Error::ShapeMismatch(format!("{} targets for n = {}", y.nrows(), k.n())));
    }
    if k.n() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let (alpha, jitter) = solve(k, y, lambda)?;
    Ok(KrrModel { alpha, lambda, arch_fp: k.arch_fingerprint(), data_fp: k.data_fingerprint(), jitter })
}

pub fn fit(k: &GramMatrix, y: &[f64], lambda: f64) -> Result<KrrModel> {
    fit_multi(k, &DMatrix::from_column_slice(y.len(), 1, y), lambda)
}

/// `labels` coded as `positive` on the true class, `negative` elsewhere.
pub fn one_hot(labels: &[usize], classes: usize, coding: TargetCoding) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), classes, |i, c| {
        if labels[i] == c {
            coding.positive
        } else {
            coding.negative
        }
    })
}

pub fn fit_onevsall(
    k: &GramMatrix,
    labels: &[usize],
    classes: usize,
    lambda: f64,
    coding: TargetCoding,
) -> Result<KrrModel> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("{classes} classes; need at least 2")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    fit_multi(k, &one_hot(labels, classes, coding), lambda)
}

impl KrrModel {
    pub fn n(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.alpha.ncols()
    }

    /// Predictions `K_cross α` after checking provenance.
    pub fn predict(&self, cross: &CrossGram) -> Result<DMatrix<f64>> {
        if cross.arch_fp != self.arch_fp {
            return Err(Error::FingerprintMismatch { expected: self.arch_fp, found: cross.arch_fp });
        }
        if cross.train_fp != self.data_fp {
            return Err(Error::FingerprintMismatch { expected: self.data_fp, found: cross.train_fp });
        }
        self.predict_matrix(&cross.to_dmatrix())
    }

    pub fn predict_matrix(&self, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if cross.ncols() != self.n() {
            return Err(Error::ShapeMismatch(format!(
                "cross Gram has {} columns, model has {} coefficients",
                cross.ncols(),
                self.n()
            )));
        }
        Ok(cross * &self.alpha)
    }

    /// Fitted values on the training set.
    pub fn fitted(&self, k: &GramMatrix) -> Result<DMatrix<f64>> {
        self.predict_matrix(&k.to_dmatrix())
    }

    /// `‖(K + nλI) α - y‖ / ‖y‖`.
    pub fn residual(&self, k: &GramMatrix, y: &DMatrix<f64>) -> f64 {
        let a = regularized(k, self.lambda, 0.0);
        (a * &self.alpha - y).norm() / y.norm().max(f64::MIN_POSITIVE)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::with_capacity(48 + 8 * self.alpha.len());
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.arch_fp.to_le_bytes());
        b.extend_from_slice(&self.data_fp.to_le_bytes());
        b.extend_from_slice(&self.lambda.to_le_bytes());
        b.extend_from_slice(&self.jitter.to_le_bytes());
        b.extend_from_slice(&(self.n() as u64).to_le_bytes());
        b.extend_from_slice(&(self.outputs() as u64).to_le_bytes());
        for i in 0..self.n() {
            for c in 0..self.outputs() {
                b.extend_from_slice(&self.alpha[(i, c)].to_le_bytes());
            }
        }
        File::create(path)?.write_all(&b)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut b = Vec::new();
        File::open(path)?.read_to_end(&mut b)?;
        if b.len() < 56 || &b[0..8] != MAGIC {
            return Err(Error::Format(format!("{}: not a model file", path.display())));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let n = u64_at(40) as usize;
        let c = u64_at(48) as usize;
        if b.len() != 56 + 8 * n * c {
            return Err(Error::Format(format!("{}: truncated", path.display())));
        }
        let alpha = DMatrix::from_fn(n, c, |i, j| f64_at(56 + 8 * (i * c + j)));
        Ok(KrrModel { alpha, lambda: f64_at(24), arch_fp: u64_at(8), data_fp: u64_at(16), jitter: f64_at(32) })
    }
}

/// Row-wise argmax; ties go to the lowest class id.
pub fn classify(pred: &DMatrix<f64>) -> Vec<usize> {
    (0..pred.nrows())
        .map(|i| {
            let mut best = 0;
            for c in 1..pred.ncols() {
                if pred[(i, c)] > pred[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Accuracy per true class; `None` for classes absent from `labels`.
pub fn per_class_accuracy(pred: &[usize], labels: &[usize], classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l < classes {
            tot[l] += 1;
            if p == l {
                hit[l] += 1;
            }
        }
    }
    hit.iter().zip(&tot).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect()
}

pub fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len().max(1) as f64
}

/// Empirical `R(f̂) - R(f*)` on a test set.
pub fn excess_risk(pred: &[f64], y: &[f64], f_star: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || f_star.len() != y.len() || y.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} targets, {} reference values",
            pred.len(),
            y.len(),
            f_star.len()
        )));
    }
    Ok(mse(pred, y) - mse(f_star, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gram(n: usize, d: usize, seed: u64) -> GramMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let k = &x * x.transpose();
        let v: Vec<f64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| k[(i, j)]).collect();
        GramMatrix::from_values(n, v, 1, 2).unwrap()
    }

    fn exp_gram(points: &[f64]) -> GramMatrix {
        let n = points.len();
        let v = (0..n * n)
            .map(|t| {
                let (a, b) = (points[t / n], points[t % n]);
                (-(a - b) * (a - b)).exp()
            })
            .collect();
        GramMatrix::from_values(n, v, 1, 2).unwrap()
    }

    #[test]
    fn scalar_case() {
        let k = GramMatrix::from_values(1, vec![2.0], 0, 0).unwrap();
        let m = fit(&k, &[3.0], 0.5).unwrap();
        let kx = DMatrix::from_element(1, 1, 0.7);
        let p = m.predict_matrix(&kx).unwrap()[(0, 0)];
        assert!((p - 0.7 * 3.0 / (2.0 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn large_lambda_shrinks() {
        let k = random_gram(12, 20, 1);
        let y: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let lambda = 1e6;
        let m = fit(&k, &y, lambda).unwrap();
        let ynorm = DVector::from_column_slice(&y).norm();
        assert!(m.alpha.norm() <= ynorm / (12.0 * lambda) * (1.0 + 1e-12));
        assert!(m.fitted(&k).unwrap().amax() < 1e-3);
    }

    #[test]
    fn interpolation_at_zero_lambda() {
        let pts: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let k = exp_gram(&pts);
        let y: Vec<f64> = pts.iter().map(|p| p.cos()).collect();
        let m = fit(&k, &y, 0.0).unwrap();
        let f = m.fitted(&k).unwrap();
        for i in 0..10 {
            assert!((f[(i, 0)] - y[i]).abs() < 1e-6);
        }
        assert!(m.residual(&k, &DMatrix::from_column_slice(10, 1, &y)) < 1e-8);
    }

    #[test]
    fn rank_deficient_zero_lambda_jitters() {
        let k = random_gram(10, 3, 2);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = fit(&k, &y, 0.0).unwrap();
        assert!(m.jitter > 0.0);
    }

    #[test]
    fn linearity_in_targets() {
        let k = random_gram(15, 30, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y1: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y2: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sum: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a + b).collect();
        let a1 = fit(&k, &y1, 1e-3).unwrap().alpha;
        let a2 = fit(&k, &y2, 1e-3).unwrap().alpha;
        let a3 = fit(&k, &sum, 1e-3).unwrap().alpha;
        assert!((a1 + a2 - a3).amax() < 1e-10);
    }

    #[test]
    fn training_loss_monotone_in_lambda() {
        let k = random_gram(20, 8, 5);
        let y: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let mut last = -1.0;
        for lambda in [1e-8, 1e-6, 1e-4, 1e-2, 1.0, 100.0] {
            let f = fit(&k, &y, lambda).unwrap().fitted(&k).unwrap();
            let loss = mse(f.column(0).as_slice(), &y);
            assert!(loss >= last - 1e-12);
            last = loss;
        }
    }

    #[test]
    fn onevsall_separated_clusters() {
        let pts: Vec<f64> = (0..20).map(|i| if i < 10 { i as f64 * 0.01 } else { 5.0 + i as f64 * 0.01 }).collect();
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let k = exp_gram(&pts);
        let m = fit_onevsall(&k, &labels, 2, 1e-8, TargetCoding::default()).unwrap();
        let pred = classify(&m.fitted(&k).unwrap());
        assert_eq!(accuracy(&pred, &labels), 1.0);

        let swapped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let ms = fit_onevsall(&k, &swapped, 2, 1e-8, TargetCoding::default()).unwrap();
        assert!((ms.alpha.column(0) - m.alpha.column(1)).amax() < 1e-12);

        let same = fit_onevsall(&k, &[0; 20], 2, 1e-8, TargetCoding::default()).unwrap();
        assert!(classify(&same.fitted(&k).unwrap()).iter().all(|&c| c == 0));
        assert!(fit_onevsall(&k, &labels, 1, 1e-8, TargetCoding::default()).is_err());
    }

    #[test]
    fn rescaled_coding_keeps_argmax() {
        let k = random_gram(16, 30, 6);
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let c = TargetCoding::default();
        let scaled = TargetCoding { positive: 2.5 * c.positive, negative: 2.5 * c.negative };
        let a = fit_onevsall(&k, &labels, 3, 1e-2, c).unwrap();
        let b = fit_onevsall(&k, &labels, 3, 1e-2, scaled).unwrap();
        let (pa, pb) = (a.fitted(&k).unwrap(), b.fitted(&k).unwrap());
        assert!((&pa * 2.5 - &pb).amax() < 1e-10);
        assert_eq!(classify(&pa), classify(&pb));
    }

    #[test]
    fn predict_cases() {
        let k = random_gram(6, 10, 7);
        let m = fit(&k, &[1., 2., 3., 4., 5., 6.], 1e-3).unwrap();
        let cross = CrossGram { rows: 6, cols: 6, arch_fp: 1, train_fp: 2, values: k.values().to_vec() };
        assert_eq!(m.predict(&cross).unwrap(), m.fitted(&k).unwrap());
        let bad = CrossGram { arch_fp: 9, ..cross.clone() };
        assert!(matches!(m.predict(&bad), Err(Error::FingerprintMismatch { .. })));
        let zero = KrrModel { alpha: DMatrix::zeros(6, 1), ..m.clone() };
        assert_eq!(zero.predict(&cross).unwrap().amax(), 0.0);
        let mut dup = DMatrix::zeros(2, 6);
        dup.row_mut(0).copy_from(&k.to_dmatrix().row(2));
        dup.row_mut(1).copy_from(&k.to_dmatrix().row(2));
        let p = m.predict_matrix(&dup).unwrap();
        assert_eq!(p[(0, 0)], p[(1, 0)]);
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.krr");
        let k = random_gram(5, 10, 8);
        let m = fit_onevsall(&k, &[0, 1, 2, 0, 1], 3, 1e-4, TargetCoding::default()).unwrap();
        m.save(&p).unwrap();
        assert_eq!(KrrModel::load(&p).unwrap(), m);
    }

    #[test]
    fn excess_risk_cases() {
        let y = [0.3, -0.2, 1.1];
        let f = [0.2, -0.1, 1.0];
        assert_eq!(excess_risk(&f, &y, &f).unwrap(), 0.0);
        assert!((excess_risk(&[0.0; 3], &[1.0; 3], &[1.0; 3]).unwrap() - 1.0).abs() < 1e-15);
        assert!(excess_risk(&f, &y, &f[..2]).is_err());
    }

    #[test]
    fn conjugate_gradient_matches_cholesky() {
        let k = random_gram(30, 40, 9);
        let a = regularized(&k, 1e-3, 0.0);
        let b = DVector::from_fn(30, |i, _| i as f64 - 10.0);
        let x = conjugate_gradient(&a, &b).unwrap();
        let y = Cholesky::new(a).unwrap().solve(&b);
        assert!((x - y).amax() < 1e-8);
    }
}
