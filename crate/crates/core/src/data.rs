//! Datasets: CIFAR-10 binary batches, patch-level ZCA whitening and
//! synthetic product-of-spheres signals.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::domain::{Boundary, Grid, PatchShape, Signal};
use crate::error::{Error, Result};
use crate::fingerprint::Fnv64;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
pub const CACHE_MAGIC: &[u8; 8] = b"CKDATA01";

/// Environment variable naming the directory that holds dataset files.
pub const DATA_ROOT_ENV: &str = "CKN_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    signals: Vec<Signal>,
    labels: Option<Vec<usize>>,
    /// Preprocessing history, folded into the fingerprint.
    provenance: String,
    fingerprint: u64,
}

impl Dataset {
    pub fn new(signals: Vec<Signal>, labels: Option<Vec<usize>>, provenance: &str) -> Result<Self> {
        if let Some(first) = signals.first() {
            for (i, s) in signals.iter().enumerate() {
                if s.grid() != first.grid() || s.channels() != first.channels() {
                    return Err(Error::ShapeMismatch(format!("signal {i} differs in grid or channels")));
                }
            }
        }
        if let Some(l) = &labels {
            if l.len() != signals.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} signals",
                    l.len(),
                    signals.len()
                )));
            }
        }
        let fingerprint = fingerprint_of(&signals, labels.as_deref(), provenance);
        Ok(Dataset { signals, labels, provenance: provenance.to_string(), fingerprint })
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.signals.first().map(|s| s.grid())
    }

    pub fn channels(&self) -> Option<usize> {
        self.signals.first().map(|s| s.channels())
    }

    /// Items at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let signals = idx.iter().map(|&i| self.signals[i].clone()).collect();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        Dataset::new(signals, labels, &format!("{}|subset", self.provenance))
    }

    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Dataset cache: magic, fingerprint, shape, values, labels.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(CACHE_MAGIC);
        b.extend_from_slice(&self.fingerprint.to_le_bytes());
        let put = |b: &mut Vec<u8>, v: u64| b.extend_from_slice(&v.to_le_bytes());
        put(&mut b, self.provenance.len() as u64);
        b.extend_from_slice(self.provenance.as_bytes());
        put(&mut b, self.len() as u64);
        let (extents, boundary, channels) = match self.signals.first() {
            Some(s) => (s.grid().extents().to_vec(), s.grid().boundary(), s.channels()),
            None => (vec![], Boundary::Periodic, 0),
        };
        put(&mut b, extents.len() as u64);
        for &e in &extents {
            put(&mut b, e as u64);
        }
        put(&mut b, u64::from(boundary == Boundary::ZeroPad));
        put(&mut b, channels as u64);
        put(&mut b, u64::from(self.labels.is_some()));
        for s in &self.signals {
            for v in s.values() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(l) = &self.labels {
            for &v in l {
                put(&mut b, v as u64);
            }
        }
        File::create(path)?.write_all(&b)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut b = Vec::new();
        File::open(path)?.read_to_end(&mut b)?;
        let bad = || Error::Format(format!("{}: malformed dataset cache", path.display()));
        if b.len() < 16 || &b[0..8] != CACHE_MAGIC {
            return Err(bad());
        }
        let mut cur = Cursor { b: &b, pos: 8, path };
        let stored_fp = cur.u64()?;
        let plen = cur.u64()? as usize;
        let provenance = String::from_utf8(cur.bytes(plen)?.to_vec()).map_err(|_| bad())?;
        let n = cur.u64()? as usize;
        let rank = cur.u64()? as usize;
        let extents = (0..rank).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let zero_pad = cur.u64()? == 1;
        let channels = cur.u64()? as usize;
        let has_labels = cur.u64()? == 1;
        let mut signals = Vec::with_capacity(n);
        if n > 0 {
            let boundary = if zero_pad { Boundary::ZeroPad } else { Boundary::Periodic };
            let grid = Grid::new(extents, boundary)?;
            let len = grid.size() * channels;
            for _ in 0..n {
                let values = (0..len).map(|_| cur.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                signals.push(Signal::new(grid.clone(), channels, values)?);
            }
        }
        let labels = if has_labels {
            Some((0..n).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let ds = Dataset::new(signals, labels, &provenance)?;
        if ds.fingerprint != stored_fp {
            return Err(Error::FingerprintMismatch { expected: stored_fp, found: ds.fingerprint });
        }
        Ok(ds)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| {
            Error::Format(format!("{}: truncated dataset cache", self.path.display()))
        })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

fn fingerprint_of(signals: &[Signal], labels: Option<&[usize]>, provenance: &str) -> u64 {
    let mut h = Fnv64::new();
    h.write(provenance.as_bytes());
    h.write_u64(signals.len() as u64);
    if let Some(s) = signals.first() {
        for &e in s.grid().extents() {
            h.write_u64(e as u64);
        }
        h.write_u64(s.channels() as u64);
    }
    for s in signals {
        h.write_f64s(s.values());
    }
    if let Some(l) = labels {
        for &v in l {
            h.write_u64(v as u64);
        }
    }
    h.finish()
}

/// One CIFAR-10 binary batch.
pub fn load_cifar_batch(path: &Path) -> Result<Dataset> {
    let mut b = Vec::new();
    File::open(path)?.read_to_end(&mut b)?;
    parse_cifar(&b, &format!("cifar:{}", path.file_name().and_then(|s| s.to_str()).unwrap_or("")))
}

fn parse_cifar(b: &[u8], provenance: &str) -> Result<Dataset> {
    if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            b.len()
        )));
    }
    let grid = Grid::plane(CIFAR_SIDE, CIFAR_SIDE);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut signals = Vec::with_capacity(b.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(b.len() / CIFAR_RECORD);
    for rec in b.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("label {label} outside 0..{CIFAR_CLASSES}")));
        }
        let mut values = vec![0.0; 3 * plane];
        for c in 0..3 {
            for u in 0..plane {
                values[u * 3 + c] = rec[1 + c * plane + u] as f64 / 255.0;
            }
        }
        signals.push(Signal::new(grid.clone(), 3, values)?);
        labels.push(label);
    }
    Dataset::new(signals, Some(labels), provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Files for a split inside a `cifar-10-batches-bin` directory.
pub fn cifar_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Loads a split, concatenating batches in order; at most `limit` images.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in cifar_files(dir, split) {
        if limit.is_some_and(|l| bytes.len() >= l * CIFAR_RECORD) {
            break;
        }
        File::open(&f)
            .map_err(|e| Error::Format(format!("{}: {e}", f.display())))?
            .read_to_end(&mut bytes)?;
    }
    if let Some(l) = limit {
        bytes.truncate(l * CIFAR_RECORD);
    }
    parse_cifar(&bytes, &format!("cifar:{split:?}:{}", bytes.len() / CIFAR_RECORD))
}

/// Central `rows x cols` window of every image (top-left offset rounds down).
pub fn center_crop(ds: &Dataset, rows: usize, cols: usize) -> Result<Dataset> {
    let Some(grid) = ds.grid() else {
        return Dataset::new(Vec::new(), None, &format!("{}|crop{rows}x{cols}", ds.provenance));
    };
    let [r0, c0] = grid.dims();
    if grid.rank() != 2 || rows == 0 || cols == 0 || rows > r0 || cols > c0 {
        return Err(Error::InvalidArgument(format!("cannot crop {r0}x{c0} to {rows}x{cols}")));
    }
    let (top, left) = ((r0 - rows) / 2, (c0 - cols) / 2);
    let out_grid = Grid::plane(rows, cols).with_boundary(grid.boundary());
    let signals = ds
        .signals
        .iter()
        .map(|x| {
            let p = x.channels();
            let mut v = Vec::with_capacity(rows * cols * p);
            for i in 0..rows {
                for j in 0..cols {
                    v.extend_from_slice(x.at(grid.index([top + i, left + j])));
                }
            }
            Signal::new(out_grid.clone(), p, v)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(signals, ds.labels.clone(), &format!("{}|crop{rows}x{cols}", ds.provenance))
}

/// Writes signals back in the binary batch layout. Values are rounded to bytes.
pub fn write_cifar_batch(ds: &Dataset, path: &Path) -> Result<()> {
    let labels = ds.labels().ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (s, &l) in ds.signals().iter().zip(labels) {
        if s.grid().extents() != [CIFAR_SIDE, CIFAR_SIDE] || s.channels() != 3 || l > 255 {
            return Err(Error::ShapeMismatch("not a CIFAR-shaped signal".into()));
        }
        out.push(l as u8);
        for c in 0..3 {
            for u in 0..plane {
                out.push((s.values()[u * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Symmetric whitening of patches (or of whole signals when `patch` is `None`).
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaTransform {
    pub patch: Option<PatchShape>,
    pub channels: usize,
    pub mean: DVector<f64>,
    pub whitening: DMatrix<f64>,
    pub eps: f64,
}

/// Default regularizer scale relative to the mean covariance eigenvalue.
pub const ZCA_EPS_SCALE: f64 = 1e-5;

fn patch_vectors(x: &Signal, patch: &PatchShape) -> Vec<DVector<f64>> {
    let p = x.channels();
    let grid = x.grid();
    (0..grid.size())
        .map(|u| {
            let mut z = DVector::zeros(p * patch.len());
            for (k, &off) in patch.offsets().iter().enumerate() {
                if let Some(v) = grid.shift(u, off) {
                    z.rows_mut(k * p, p).copy_from_slice(x.at(v));
                }
            }
            z
        })
        .collect()
}

fn vectors(x: &Signal, patch: Option<&PatchShape>) -> Vec<DVector<f64>> {
    match patch {
        Some(p) => patch_vectors(x, p),
        None => vec![DVector::from_column_slice(x.values())],
    }
}

/// Fits ZCA on every patch of every signal. `eps = None` uses
/// `1e-5 · trace(C) / dim`.
pub fn fit_zca(ds: &Dataset, patch: Option<&PatchShape>, eps: Option<f64>) -> Result<ZcaTransform> {
    let first = ds.signals().first().ok_or_else(|| Error::InvalidArgument("empty dataset".into()))?;
    if let Some(p) = patch {
        if p.rank() != first.grid().rank() {
            return Err(Error::RankMismatch { expected: first.grid().rank(), found: p.rank() });
        }
    }
    if let Some(e) = eps {
        if !(e > 0.0) {
            return Err(Error::InvalidArgument(format!("eps = {e}; must be > 0")));
        }
    }
    let all: Vec<DVector<f64>> = ds.signals().iter().flat_map(|x| vectors(x, patch)).collect();
    let dim = all[0].len();
    let count = all.len() as f64;
    let mean = all.iter().fold(DVector::zeros(dim), |acc, z| acc + z) / count;
    let mut cov = DMatrix::zeros(dim, dim);
    for z in &all {
        let c = z - &mean;
        cov.ger(1.0 / count, &c, &c, 1.0);
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    let tr = cov.trace();
    // Rounding in the mean leaves a residual covariance on constant data.
    let degenerate = tr <= 1e-20 * mean.norm_squared().max(1.0);
    let eps = eps.unwrap_or(if degenerate { 1.0 } else { ZCA_EPS_SCALE * tr / dim as f64 });
    let eig = SymmetricEigen::new(cov);
    let lo = eig.eigenvalues.min();
    if lo < -1e-10 * tr.max(f64::MIN_POSITIVE) {
        return Err(Error::NumericalFailure {
            layer: 0,
            what: format!("patch covariance has eigenvalue {lo:e}"),
        });
    }
    let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt());
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
    let whitening = (&w + w.transpose()) * 0.5;
    Ok(ZcaTransform { patch: patch.cloned(), channels: first.channels(), mean, whitening, eps })
}

impl ZcaTransform {
    pub fn whiten(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.whitening * (z - &self.mean)
    }

    /// Whitens each patch and rebuilds every position as the average of the
    /// whitened patches covering it.
    pub fn apply_signal(&self, x: &Signal) -> Result<Signal> {
        if x.channels() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} channels; transform expects {}",
                x.channels(),
                self.channels
            )));
        }
        let p = self.channels;
        match &self.patch {
            None => {
                if x.values().len() != self.mean.len() {
                    return Err(Error::ShapeMismatch("signal size differs from fit".into()));
                }
                let w = self.whiten(&DVector::from_column_slice(x.values()));
                Signal::new(x.grid().clone(), p, w.iter().copied().collect())
            }
            Some(patch) => {
                let grid = x.grid();
                let mut acc = vec![0.0; x.values().len()];
                let mut hits = vec![0usize; grid.size()];
                for (u, z) in patch_vectors(x, patch).iter().enumerate() {
                    let w = self.whiten(z);
                    for (k, &off) in patch.offsets().iter().enumerate() {
                        if let Some(v) = grid.shift(u, off) {
                            for c in 0..p {
                                acc[v * p + c] += w[k * p + c];
                            }
                            hits[v] += 1;
                        }
                    }
                }
                for (v, &h) in hits.iter().enumerate() {
                    if h > 0 {
                        for c in 0..p {
                            acc[v * p + c] /= h as f64;
                        }
                    }
                }
                Signal::new(grid.clone(), p, acc)
            }
        }
    }
}

pub fn apply_zca(ds: &Dataset, t: &ZcaTransform) -> Result<Dataset> {
    let signals = ds.signals().par_iter().map(|x| t.apply_signal(x)).collect::<Result<Vec<_>>>()?;
    let tag = match &t.patch {
        Some(p) => format!("{}|zca:local:{}:{:e}", ds.provenance(), p.len(), t.eps),
        None => format!("{}|zca:global:{:e}", ds.provenance(), t.eps),
    };
    Dataset::new(signals, ds.labels().map(|l| l.to_vec()), &tag)
}

/// Uniform unit vector in `R^d` from a seeded stream.
pub fn sphere_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Generator for item `i` of a seeded collection; independent of threading.
pub fn item_rng(seed: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i);
    rng
}

/// `n` signals on a 1-D grid of `omega` sites, each site an independent
/// uniform unit vector in `R^d` stored as `d` channels.
pub fn gen_product_of_spheres(omega: usize, d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d < 2 || omega == 0 {
        return Err(Error::InvalidArgument(format!("omega = {omega}, d = {d}; need omega >= 1, d >= 2")));
    }
    let grid = Grid::line(omega);
    let signals = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let values: Vec<f64> = (0..omega).flat_map(|_| sphere_point(&mut rng, d)).collect();
            Signal::new(grid.clone(), d, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(signals, None, &format!("spheres:{omega}:{d}:{n}:{seed}"))
}

/// Gaussian white-noise images (for whitening checks and smoke runs).
pub fn gen_white_noise(grid: &Grid, channels: usize, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let len = grid.size() * channels;
    let signals = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = item_rng(seed, i as u64);
            let values = (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect();
            Signal::new(grid.clone(), channels, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(signals, None, &format!("noise:{sigma}:{n}:{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpk::{sigma_sq_offdiag, DotProductKernel};

    fn fake_cifar(n: usize) -> Vec<u8> {
        (0..n * CIFAR_RECORD)
            .map(|i| if i % CIFAR_RECORD == 0 { ((i / CIFAR_RECORD) % 10) as u8 } else { (i * 31 % 251) as u8 })
            .collect()
    }

    #[test]
    fn cifar_parse_and_write_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let bytes = fake_cifar(12);
        std::fs::write(&p, &bytes).unwrap();
        let ds = load_cifar_batch(&p).unwrap();
        assert_eq!(ds.len(), 12);
        assert!(ds.labels().unwrap().iter().all(|&l| l < 10));
        let x = &ds.signals()[0];
        // R plane first, row-major.
        assert_eq!(x.at(0)[0], bytes[1] as f64 / 255.0);
        assert_eq!(x.at(0)[1], bytes[1 + 1024] as f64 / 255.0);
        assert_eq!(x.at(33)[2], bytes[1 + 2048 + 33] as f64 / 255.0);
        assert!(x.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let q = dir.path().join("c.bin");
        write_cifar_batch(&ds, &q).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn cifar_rejects_bad_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        std::fs::write(&p, vec![0u8; CIFAR_RECORD + 5]).unwrap();
        assert!(matches!(load_cifar_batch(&p), Err(Error::Format(_))));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cache");
        let ds = gen_product_of_spheres(4, 3, 10, 1).unwrap();
        ds.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), ds);
        let labelled = Dataset::new(ds.signals().to_vec(), Some((0..10).collect()), "x").unwrap();
        labelled.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), labelled);
    }

    #[test]
    fn spheres_unit_norm_and_deterministic() {
        let a = gen_product_of_spheres(5, 4, 50, 9).unwrap();
        let b = gen_product_of_spheres(5, 4, 50, 9).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), gen_product_of_spheres(5, 4, 50, 10).unwrap().fingerprint());
        for s in a.signals() {
            for u in 0..5 {
                let n: f64 = s.at(u).iter().map(|v| v * v).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-12);
            }
        }
        // A prefix of a larger draw is the smaller draw.
        let c = gen_product_of_spheres(5, 4, 80, 9).unwrap();
        assert_eq!(&c.signals()[..50], a.signals());
    }

    #[test]
    fn spheres_offdiag_moments() {
        let d = 3;
        let ds = gen_product_of_spheres(2, d, 5000, 4).unwrap();
        let k = DotProductKernel::exponential(0.6).unwrap();
        let dots: Vec<f64> = ds.signals().iter().map(|s| s.at(0).iter().zip(s.at(1)).map(|(a, b)| a * b).sum()).collect();
        let m = dots.len() as f64;
        let mean_dot = dots.iter().sum::<f64>() / m;
        assert!(mean_dot.abs() < 3.0 / (d as f64 * m).sqrt());
        let kv: Vec<f64> = dots.iter().map(|&t| k.eval(t).unwrap()).collect();
        let mean = kv.iter().sum::<f64>() / m;
        let var = kv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let se = (var / m).sqrt();
        let exact = sigma_sq_offdiag(&k, d).unwrap();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn zca_identical_images_zero() {
        // Spatially constant images: every patch equals the mean.
        let x = Signal::new(Grid::line(6), 3, [0.3, -0.7, 0.1].repeat(6)).unwrap();
        let ds = Dataset::new(vec![x.clone(); 4], None, "same").unwrap();
        let t = fit_zca(&ds, Some(&PatchShape::centered(1, 3).unwrap()), None).unwrap();
        for s in apply_zca(&ds, &t).unwrap().signals() {
            assert!(s.values().iter().all(|v| v.abs() < 1e-12));
        }
        // Whole-signal whitening zeroes any repeated image.
        let y = gen_product_of_spheres(6, 3, 1, 2).unwrap().signals()[0].clone();
        let ds = Dataset::new(vec![y; 4], None, "same").unwrap();
        let t = fit_zca(&ds, None, None).unwrap();
        for s in apply_zca(&ds, &t).unwrap().signals() {
            assert!(s.values().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn zca_point_patch_standardizes_channels() {
        let grid = Grid::plane(4, 4);
        let mut ds = gen_white_noise(&grid, 3, 40, 1.0, 3).unwrap();
        let scaled: Vec<Signal> = ds
            .signals()
            .iter()
            .map(|s| {
                let v = s.values().chunks(3).flat_map(|c| [2.0 * c[0] + 1.0, 0.5 * c[1], 3.0 * c[2] - 2.0]).collect();
                Signal::new(grid.clone(), 3, v).unwrap()
            })
            .collect();
        ds = Dataset::new(scaled, None, "scaled").unwrap();
        let t = fit_zca(&ds, Some(&PatchShape::point(2)), Some(1e-14)).unwrap();
        let w = apply_zca(&ds, &t).unwrap();
        let all: Vec<&[f64]> = w.signals().iter().flat_map(|s| s.values().chunks(3)).collect();
        let m = all.len() as f64;
        for c in 0..3 {
            let mean = all.iter().map(|v| v[c]).sum::<f64>() / m;
            let var = all.iter().map(|v| v[c] * v[c]).sum::<f64>() / m;
            assert!(mean.abs() < 1e-8);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zca_whitened_patch_covariance() {
        let grid = Grid::plane(6, 6);
        let ds = gen_white_noise(&grid, 2, 30, 1.0, 5).unwrap();
        // Correlate neighbours so whitening has work to do.
        let smooth: Vec<Signal> = ds
            .signals()
            .iter()
            .map(|s| {
                let v = (0..s.values().len())
                    .map(|i| s.values()[i] + 0.5 * s.values()[(i + 2) % s.values().len()])
                    .collect();
                Signal::new(grid.clone(), 2, v).unwrap()
            })
            .collect();
        let ds = Dataset::new(smooth, None, "smooth").unwrap();
        let patch = PatchShape::centered(2, 2).unwrap();
        let t = fit_zca(&ds, Some(&patch), Some(1e-13)).unwrap();
        let zs: Vec<DVector<f64>> =
            ds.signals().iter().flat_map(|x| patch_vectors(x, &patch)).map(|z| t.whiten(&z)).collect();
        let m = zs.len() as f64;
        let dim = zs[0].len();
        let mean = zs.iter().fold(DVector::zeros(dim), |a, z| a + z) / m;
        assert!(mean.amax() < 1e-8);
        let mut cov = DMatrix::zeros(dim, dim);
        for z in &zs {
            cov += z * z.transpose() / m;
        }
        assert!((cov - DMatrix::identity(dim, dim)).amax() < 1e-6);
        assert!((&t.whitening - t.whitening.transpose()).amax() == 0.0);
        assert!(SymmetricEigen::new(t.whitening.clone()).eigenvalues.min() > 0.0);
    }

    #[test]
    fn zca_white_noise_scales_by_sigma() {
        let grid = Grid::plane(8, 8);
        let sigma = 2.0;
        let ds = gen_white_noise(&grid, 1, 200, sigma, 6).unwrap();
        let t = fit_zca(&ds, Some(&PatchShape::centered(2, 2).unwrap()), None).unwrap();
        let target = DMatrix::<f64>::identity(4, 4) / sigma;
        assert!((&t.whitening - target).amax() < 0.05);
    }

    #[test]
    fn zca_global_whitens_whole_signal() {
        let grid = Grid::line(4);
        let ds = gen_white_noise(&grid, 1, 100, 1.0, 7).unwrap();
        let t = fit_zca(&ds, None, Some(1e-14)).unwrap();
        assert_eq!(t.whitening.nrows(), 4);
        let w = apply_zca(&ds, &t).unwrap();
        assert_ne!(w.fingerprint(), ds.fingerprint());
    }

    #[test]
    fn center_crop_window() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = Signal::new(Grid::plane(4, 4), 1, v).unwrap();
        let ds = Dataset::new(vec![x], Some(vec![3]), "t").unwrap();
        let c = center_crop(&ds, 2, 3).unwrap();
        assert_eq!(c.signals()[0].values(), &[4.0, 5.0, 6.0, 8.0, 9.0, 10.0]);
        assert_eq!(c.labels(), Some(&[3usize][..]));
        assert!(center_crop(&ds, 5, 1).is_err());
    }

}
