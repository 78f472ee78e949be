//! Tiled, parallel and resumable Gram matrix computation.
//!
//! Entries are computed by [`Evaluator::eval_cached`] against self-map caches
//! built once per signal, so every entry is a pure function of the pair and
//! results do not depend on tile size or worker count.
//!
//! On disk a Gram matrix is a header followed by the upper-triangular tiles
//! (`ti <= tj`, row-major over tiles), each stored row-major at its actual
//! size. A sidecar text ledger records one `ti tj status checksum` line per
//! tile event; the last line for a tile wins.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::ckmap::{ArchSpec, Evaluator, SelfMapCache};
use crate::domain::Signal;
use crate::error::{Error, Result};
use crate::fingerprint::Fnv64;

pub const MAGIC: &[u8; 8] = b"CKGRAM01";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 8 + 4 + 8 + 4 + 8 + 8;
pub const DEFAULT_TILE: usize = 128;
/// Largest matrix handed to the dense eigensolver.
pub const EIGEN_MAX_N: usize = 4096;

const WRITE_RETRIES: usize = 3;

/// Dense symmetric Gram matrix with its provenance fingerprints.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    n: usize,
    tile: usize,
    arch_fp: u64,
    data_fp: u64,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn from_values(n: usize, values: Vec<f64>, arch_fp: u64, data_fp: u64) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{} values for n = {n}", values.len())));
        }
        Ok(GramMatrix { n, tile: DEFAULT_TILE, arch_fp, data_fp, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tile(&self) -> usize {
        self.tile
    }

    pub fn arch_fingerprint(&self) -> u64 {
        self.arch_fp
    }

    pub fn data_fingerprint(&self) -> u64 {
        self.data_fp
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Row-major `n x n` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.values)
    }

    /// Submatrix on the given indices (in that order).
    pub fn select(&self, idx: &[usize]) -> GramMatrix {
        let m = idx.len();
        let mut values = Vec::with_capacity(m * m);
        for &i in idx {
            for &j in idx {
                values.push(self.get(i, j));
            }
        }
        GramMatrix { n: m, tile: self.tile, arch_fp: self.arch_fp, data_fp: self.data_fp, values }
    }

    /// Writes the matrix with a fully `done` ledger.
    pub fn save(&self, path: &Path) -> Result<()> {
        let layout = Layout::new(self.n, self.tile);
        let mut file = File::create(path)?;
        write_header(&mut file, self.n, self.tile, self.arch_fp, self.data_fp)?;
        let mut ledger = File::create(ledger_path(path))?;
        for t in &layout.tiles {
            let block = extract_tile(&self.values, self.n, t);
            let bytes = f64_bytes(&block);
            file.write_all(&bytes)?;
            writeln!(ledger, "{} {} done {:016x}", t.ti, t.tj, checksum(&block))?;
        }
        file.flush()?;
        ledger.flush()?;
        Ok(())
    }

    /// Reads a complete Gram file, verifying every tile checksum.
    pub fn load(path: &Path) -> Result<Self> {
        let report = verify_file(path)?;
        if report.pending > 0 || report.bad_checksums > 0 {
            return Err(Error::Format(format!(
                "{}: {} pending and {} corrupt tiles",
                path.display(),
                report.pending,
                report.bad_checksums
            )));
        }
        Ok(report.matrix.expect("complete file"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Tile {
    ti: usize,
    tj: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    offset: u64,
}

impl Tile {
    fn len(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }
}

struct Layout {
    tiles: Vec<Tile>,
}

impl Layout {
    fn new(n: usize, tile: usize) -> Self {
        let nt = n.div_ceil(tile);
        let mut tiles = Vec::new();
        let mut offset = HEADER_LEN;
        for ti in 0..nt {
            for tj in ti..nt {
                let rows = (ti * tile, ((ti + 1) * tile).min(n));
                let cols = (tj * tile, ((tj + 1) * tile).min(n));
                let t = Tile { ti, tj, rows, cols, offset };
                offset += 8 * t.len() as u64;
                tiles.push(t);
            }
        }
        Layout { tiles }
    }

    fn find(&self, ti: usize, tj: usize) -> Option<usize> {
        self.tiles.iter().position(|t| t.ti == ti && t.tj == tj)
    }

    fn file_len(&self) -> u64 {
        self.tiles.last().map_or(HEADER_LEN, |t| t.offset + 8 * t.len() as u64)
    }
}

pub fn ledger_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ledger");
    PathBuf::from(s)
}

fn checksum(block: &[f64]) -> u64 {
    Fnv64::new().write_f64s(block).finish()
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f64(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

fn extract_tile(values: &[f64], n: usize, t: &Tile) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    for i in t.rows.0..t.rows.1 {
        out.extend_from_slice(&values[i * n + t.cols.0..i * n + t.cols.1]);
    }
    out
}

fn place_tile(values: &mut [f64], n: usize, t: &Tile, block: &[f64]) {
    let w = t.cols.1 - t.cols.0;
    for (r, i) in (t.rows.0..t.rows.1).enumerate() {
        for (c, j) in (t.cols.0..t.cols.1).enumerate() {
            let v = block[r * w + c];
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
}

fn write_header(f: &mut File, n: usize, tile: usize, arch_fp: u64, data_fp: u64) -> Result<()> {
    let mut h = Vec::with_capacity(HEADER_LEN as usize);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&(n as u64).to_le_bytes());
    h.extend_from_slice(&(tile as u32).to_le_bytes());
    h.extend_from_slice(&arch_fp.to_le_bytes());
    h.extend_from_slice(&data_fp.to_le_bytes());
    f.write_all(&h)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GramHeader {
    pub version: u32,
    pub n: usize,
    pub tile: usize,
    pub arch_fp: u64,
    pub data_fp: u64,
}

pub fn read_header(f: &mut File) -> Result<GramHeader> {
    let mut h = [0u8; HEADER_LEN as usize];
    f.seek(SeekFrom::Start(0))?;
    f.read_exact(&mut h).map_err(|_| Error::Format("truncated header".into()))?;
    if &h[0..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().unwrap());
    let header = GramHeader {
        version: u32_at(8),
        n: u64_at(12) as usize,
        tile: u32_at(20) as usize,
        arch_fp: u64_at(24),
        data_fp: u64_at(32),
    };
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    if header.tile == 0 {
        return Err(Error::Format("zero tile size".into()));
    }
    Ok(header)
}

/// Latest `(status done, checksum)` per tile index in the layout.
fn read_ledger(path: &Path, layout: &Layout) -> Result<Vec<Option<u64>>> {
    let mut state = vec![None; layout.tiles.len()];
    let lp = ledger_path(path);
    if !lp.exists() {
        return Ok(state);
    }
    for (no, line) in BufReader::new(File::open(&lp)?).lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("{} line {}: {line:?}", lp.display(), no + 1));
        if parts.len() != 4 {
            return Err(bad());
        }
        let ti: usize = parts[0].parse().map_err(|_| bad())?;
        let tj: usize = parts[1].parse().map_err(|_| bad())?;
        let sum = u64::from_str_radix(parts[3], 16).map_err(|_| bad())?;
        let k = layout.find(ti, tj).ok_or_else(bad)?;
        state[k] = match parts[2] {
            "done" => Some(sum),
            "pending" => None,
            _ => return Err(bad()),
        };
    }
    Ok(state)
}

fn read_tile(f: &mut File, t: &Tile) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * t.len()];
    f.seek(SeekFrom::Start(t.offset))?;
    f.read_exact(&mut buf)?;
    Ok(bytes_f64(&buf))
}

/// Run options for [`compute_gram`].
#[derive(Clone, Debug)]
pub struct GramOptions {
    pub tile: usize,
    /// Worker threads; 0 uses the global rayon pool.
    pub workers: usize,
    /// Output file; `None` keeps the matrix in memory only.
    pub path: Option<PathBuf>,
    /// Stop after this many newly written tiles (simulated interruption).
    pub stop_after: Option<usize>,
}

impl Default for GramOptions {
    fn default() -> Self {
        GramOptions { tile: DEFAULT_TILE, workers: 0, path: None, stop_after: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GramStats {
    pub tiles_total: usize,
    pub tiles_computed: usize,
    pub tiles_reused: usize,
    pub self_maps: u64,
    pub cross_maps: u64,
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn build_caches(ev: &Evaluator, xs: &[Signal]) -> Result<Vec<SelfMapCache>> {
    xs.par_iter().map(|x| ev.self_cache(x)).collect()
}

fn compute_tile(
    ev: &Evaluator,
    xs: &[Signal],
    caches: &[SelfMapCache],
    t: &Tile,
) -> Result<Vec<f64>> {
    let w = t.cols.1 - t.cols.0;
    let mut block = vec![0.0; t.len()];
    for (r, i) in (t.rows.0..t.rows.1).enumerate() {
        for (c, j) in (t.cols.0..t.cols.1).enumerate() {
            if t.ti == t.tj && j < i {
                block[r * w + c] = block[c * w + r];
                continue;
            }
            block[r * w + c] = ev.eval_cached(&xs[i], &caches[i], &xs[j], &caches[j])?;
        }
    }
    Ok(block)
}

fn write_with_retry(f: &mut File, offset: u64, bytes: &[u8]) -> Result<()> {
    let mut last = None;
    for _ in 0..WRITE_RETRIES {
        match f.seek(SeekFrom::Start(offset)).and_then(|_| f.write_all(bytes)) {
            Ok(()) => return Ok(()),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Io(last.unwrap()))
}

struct Sink {
    file: File,
    ledger: File,
}

fn open_sink(
    path: &Path,
    n: usize,
    tile: usize,
    arch_fp: u64,
    data_fp: u64,
    layout: &Layout,
) -> Result<(Sink, Vec<Option<Vec<f64>>>)> {
    let mut existing = vec![None; layout.tiles.len()];
    if path.exists() {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let h = read_header(&mut file)?;
        if h.arch_fp != arch_fp {
            return Err(Error::FingerprintMismatch { expected: arch_fp, found: h.arch_fp });
        }
        if h.data_fp != data_fp {
            return Err(Error::FingerprintMismatch { expected: data_fp, found: h.data_fp });
        }
        if h.n != n || h.tile != tile {
            return Err(Error::Format(format!(
                "existing file has n = {}, tile = {}; requested n = {n}, tile = {tile}",
                h.n, h.tile
            )));
        }
        let state = read_ledger(path, layout)?;
        if file.metadata()?.len() < layout.file_len() {
            file.set_len(layout.file_len())?;
        }
        for (k, s) in state.iter().enumerate() {
            if let Some(sum) = s {
                let block = read_tile(&mut file, &layout.tiles[k])?;
                // A checksum mismatch leaves the tile pending.
                if checksum(&block) == *sum {
                    existing[k] = Some(block);
                }
            }
        }
        let ledger = OpenOptions::new().create(true).append(true).open(ledger_path(path))?;
        Ok((Sink { file, ledger }, existing))
    } else {
        let mut file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        write_header(&mut file, n, tile, arch_fp, data_fp)?;
        file.set_len(layout.file_len())?;
        let mut ledger = File::create(ledger_path(path))?;
        for t in &layout.tiles {
            writeln!(ledger, "{} {} pending {:016x}", t.ti, t.tj, 0)?;
        }
        ledger.flush()?;
        Ok((Sink { file, ledger }, existing))
    }
}

/// Computes (or resumes) `K[i, j] = K_L(x_i, x_j)` over `xs`.
pub fn compute_gram(
    arch: &ArchSpec,
    xs: &[Signal],
    data_fp: u64,
    opts: &GramOptions,
) -> Result<(GramMatrix, GramStats)> {
    if opts.tile == 0 || opts.tile > u32::MAX as usize {
        return Err(Error::InvalidArgument(format!("tile size {}", opts.tile)));
    }
    for x in xs {
        arch.check_signal(x)?;
    }
    let n = xs.len();
    let tile = opts.tile;
    let ev = Evaluator::new(arch);
    let arch_fp = ev.fingerprint();
    let layout = Layout::new(n, tile);
    let total = layout.tiles.len();

    let (mut sink, existing) = match &opts.path {
        Some(p) => {
            let (s, e) = open_sink(p, n, tile, arch_fp, data_fp, &layout)?;
            (Some(s), e)
        }
        None => (None, vec![None; total]),
    };

    let mut values = vec![0.0; n * n];
    let mut stats = GramStats { tiles_total: total, ..Default::default() };
    let mut todo = Vec::new();
    for (k, e) in existing.into_iter().enumerate() {
        match e {
            Some(block) => {
                place_tile(&mut values, n, &layout.tiles[k], &block);
                stats.tiles_reused += 1;
            }
            None => todo.push(k),
        }
    }

    if !todo.is_empty() {
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<f64>>)>();
        let tiles = &layout.tiles;
        let limit = opts.stop_after.unwrap_or(usize::MAX);

        let written = std::thread::scope(|scope| -> Result<usize> {
            let producer = scope.spawn(|| {
                with_pool(opts.workers, || -> Result<()> {
                    let caches = build_caches(&ev, xs)?;
                    todo.par_iter().for_each_with(tx, |tx, &k| {
                        if stop.load(Ordering::Relaxed) {
                            return;
                        }
                        let r = compute_tile(&ev, xs, &caches, &tiles[k]);
                        let _ = tx.send((k, r));
                    });
                    Ok(())
                })
            });

            // Single writer: places tiles, persists them, then appends the ledger.
            let mut written = 0;
            let mut failure = None;
            for (k, r) in rx {
                if failure.is_some() || written >= limit {
                    stop.store(true, Ordering::Relaxed);
                    continue;
                }
                let block = match r {
                    Ok(b) => b,
                    Err(e) => {
                        failure = Some(e);
                        stop.store(true, Ordering::Relaxed);
                        continue;
                    }
                };
                let t = &tiles[k];
                if let Some(s) = sink.as_mut() {
                    let res = write_with_retry(&mut s.file, t.offset, &f64_bytes(&block))
                        .and_then(|_| s.file.flush().map_err(Error::from))
                        .and_then(|_| {
                            writeln!(s.ledger, "{} {} done {:016x}", t.ti, t.tj, checksum(&block))
                                .and_then(|_| s.ledger.flush())
                                .map_err(Error::from)
                        });
                    if let Err(e) = res {
                        failure = Some(e);
                        stop.store(true, Ordering::Relaxed);
                        continue;
                    }
                }
                place_tile(&mut values, n, t, &block);
                written += 1;
                if written >= limit {
                    stop.store(true, Ordering::Relaxed);
                }
            }
            let produced = producer.join().expect("gram worker panicked");
            produced??;
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(written)
        })?;

        stats.tiles_computed = written;
        if written < todo.len() {
            return Err(Error::Interrupted { done: stats.tiles_reused + written, total });
        }
    }

    stats.self_maps = ev.counts().self_maps();
    stats.cross_maps = ev.counts().cross_maps();
    let g = GramMatrix { n, tile, arch_fp, data_fp, values };
    check_gram(&g)?;
    Ok((g, stats))
}

fn check_gram(g: &GramMatrix) -> Result<()> {
    for i in 0..g.n {
        let d = g.get(i, i);
        if !d.is_finite() || d < 0.0 {
            return Err(Error::NumericalFailure { layer: 0, what: format!("diagonal {i} = {d}") });
        }
    }
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { layer: 0, what: "non-finite Gram entry".into() });
    }
    Ok(())
}

/// Rectangular cross Gram `K[i, j] = K_L(test_i, train_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossGram {
    pub rows: usize,
    pub cols: usize,
    pub arch_fp: u64,
    pub train_fp: u64,
    pub values: Vec<f64>,
}

impl CrossGram {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(CROSS_MAGIC)?;
        f.write_all(&(self.rows as u64).to_le_bytes())?;
        f.write_all(&(self.cols as u64).to_le_bytes())?;
        f.write_all(&self.arch_fp.to_le_bytes())?;
        f.write_all(&self.train_fp.to_le_bytes())?;
        f.write_all(&f64_bytes(&self.values))?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut b = Vec::new();
        File::open(path)?.read_to_end(&mut b)?;
        if b.len() < 40 || &b[0..8] != CROSS_MAGIC {
            return Err(Error::Format(format!("{}: not a cross Gram file", path.display())));
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let rows = u64_at(8) as usize;
        let cols = u64_at(16) as usize;
        if b.len() != 40 + 8 * rows * cols {
            return Err(Error::Format(format!("{}: truncated", path.display())));
        }
        Ok(CrossGram { rows, cols, arch_fp: u64_at(24), train_fp: u64_at(32), values: bytes_f64(&b[40..]) })
    }
}

pub const CROSS_MAGIC: &[u8; 8] = b"CKXGRM01";

pub fn cross_gram(
    arch: &ArchSpec,
    train: &[Signal],
    test: &[Signal],
    train_fp: u64,
    workers: usize,
) -> Result<CrossGram> {
    for x in train.iter().chain(test) {
        arch.check_signal(x)?;
    }
    let ev = Evaluator::new(arch);
    let values = with_pool(workers, || -> Result<Vec<f64>> {
        let ctrain = build_caches(&ev, train)?;
        let ctest = build_caches(&ev, test)?;
        let rows: Vec<Vec<f64>> = (0..test.len())
            .into_par_iter()
            .map(|i| {
                (0..train.len())
                    .map(|j| ev.eval_cached(&test[i], &ctest[i], &train[j], &ctrain[j]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        Ok(rows.concat())
    })??;
    Ok(CrossGram { rows: test.len(), cols: train.len(), arch_fp: ev.fingerprint(), train_fp, values })
}

/// Full descending spectrum of a Gram matrix.
pub fn eigenvalues(g: &GramMatrix) -> Result<Vec<f64>> {
    if g.n > EIGEN_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "n = {} exceeds dense eigensolver limit {EIGEN_MAX_N}",
            g.n
        )));
    }
    if g.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { layer: 0, what: "non-finite Gram entry".into() });
    }
    let mut ev: Vec<f64> = g.to_dmatrix().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let sum: f64 = ev.iter().sum();
    let tr = g.trace();
    if (sum - tr).abs() > 1e-8 * tr.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::NumericalFailure {
            layer: 0,
            what: format!("eigenvalue sum {sum} differs from trace {tr}"),
        });
    }
    Ok(ev)
}

/// Top `top_m` eigenvalues, descending.
pub fn eigen_decay(g: &GramMatrix, top_m: usize) -> Result<Vec<f64>> {
    let mut ev = eigenvalues(g)?;
    ev.truncate(top_m.min(g.n));
    Ok(ev)
}

/// Outcome of checking a Gram file against its ledger.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub header: GramHeader,
    pub tiles: usize,
    pub done: usize,
    pub pending: usize,
    pub bad_checksums: usize,
    /// Present when every tile is done and intact.
    pub matrix: Option<GramMatrix>,
}

pub fn verify_file(path: &Path) -> Result<VerifyReport> {
    let mut f = File::open(path)?;
    let header = read_header(&mut f)?;
    let layout = Layout::new(header.n, header.tile);
    if f.metadata()?.len() < layout.file_len() {
        return Err(Error::Format(format!("{}: truncated tile data", path.display())));
    }
    let state = read_ledger(path, &layout)?;
    let n = header.n;
    let mut values = vec![0.0; n * n];
    let (mut done, mut pending, mut bad) = (0, 0, 0);
    for (k, s) in state.iter().enumerate() {
        match s {
            None => pending += 1,
            Some(sum) => {
                let block = read_tile(&mut f, &layout.tiles[k])?;
                if checksum(&block) == *sum {
                    done += 1;
                    place_tile(&mut values, n, &layout.tiles[k], &block);
                } else {
                    bad += 1;
                }
            }
        }
    }
    let matrix = if pending == 0 && bad == 0 {
        let g = GramMatrix { n, tile: header.tile, arch_fp: header.arch_fp, data_fp: header.data_fp, values };
        check_gram(&g)?;
        Some(g)
    } else {
        None
    };
    Ok(VerifyReport { header, tiles: layout.tiles.len(), done, pending, bad_checksums: bad, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckmap::{kernel_eval, LayerSpec};
    use crate::domain::{Grid, PatchShape, PoolingFilter};
    use crate::dpk::DotProductKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch() -> ArchSpec {
        ArchSpec::new(
            Grid::line(8),
            2,
            vec![
                LayerSpec::new(
                    PatchShape::centered(1, 3).unwrap(),
                    DotProductKernel::exponential(0.6).unwrap(),
                    PoolingFilter::gaussian(1, 1).unwrap(),
                ),
                LayerSpec::new(
                    PatchShape::centered(1, 3).unwrap(),
                    DotProductKernel::ArcCos1,
                    PoolingFilter::gaussian(2, 1).unwrap(),
                ),
            ],
        )
        .unwrap()
    }

    fn signals(n: usize, seed: u64) -> Vec<Signal> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                Signal::new(Grid::line(8), 2, v).unwrap()
            })
            .collect()
    }

    fn opts(tile: usize, workers: usize) -> GramOptions {
        GramOptions { tile, workers, ..Default::default() }
    }

    #[test]
    fn identical_signals_constant() {
        let a = arch();
        let x = signals(1, 1).remove(0);
        let xs = vec![x.clone(), x.clone(), x.clone()];
        let (g, _) = compute_gram(&a, &xs, 0, &opts(2, 1)).unwrap();
        let k = kernel_eval(&a, &x, &x).unwrap();
        assert!(g.values().iter().all(|&v| v == k));
    }

    #[test]
    fn matches_kernel_eval_and_tile_independent() {
        let a = arch();
        let xs = signals(11, 2);
        let (g1, s1) = compute_gram(&a, &xs, 7, &opts(4, 1)).unwrap();
        let (g2, _) = compute_gram(&a, &xs, 7, &opts(128, 3)).unwrap();
        assert_eq!(g1.values(), g2.values());
        assert_eq!(s1.tiles_total, 6);
        assert_eq!(s1.self_maps, 11);
        assert_eq!(s1.cross_maps, 55);
        for i in 0..11 {
            for j in 0..11 {
                let k = kernel_eval(&a, &xs[i], &xs[j]).unwrap();
                assert!((g1.get(i, j) - k).abs() <= 1e-12 * k.abs().max(1.0));
                assert_eq!(g1.get(i, j), g1.get(j, i));
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.gram");
        let a = arch();
        let (g, _) = compute_gram(&a, &signals(9, 3), 5, &opts(4, 1)).unwrap();
        g.save(&p).unwrap();
        assert_eq!(GramMatrix::load(&p).unwrap(), GramMatrix { tile: g.tile(), ..g.clone() });
    }

    #[test]
    fn interrupt_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.gram");
        let a = arch();
        let xs = signals(10, 4);
        let (full, _) = compute_gram(&a, &xs, 1, &opts(3, 2)).unwrap();

        let mut o = opts(3, 2);
        o.path = Some(p.clone());
        o.stop_after = Some(4);
        assert!(matches!(compute_gram(&a, &xs, 1, &o), Err(Error::Interrupted { done: 4, total: 10 })));
        let r = verify_file(&p).unwrap();
        assert_eq!((r.done, r.pending), (4, 6));

        o.stop_after = None;
        let (g, s) = compute_gram(&a, &xs, 1, &o).unwrap();
        assert_eq!(g.values(), full.values());
        assert_eq!((s.tiles_reused, s.tiles_computed), (4, 6));

        let (g2, s2) = compute_gram(&a, &xs, 1, &o).unwrap();
        assert_eq!(g2.values(), full.values());
        assert_eq!((s2.self_maps, s2.cross_maps, s2.tiles_computed), (0, 0, 0));
    }

    #[test]
    fn corrupt_tile_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.gram");
        let a = arch();
        let xs = signals(6, 5);
        let mut o = opts(3, 1);
        o.path = Some(p.clone());
        let (g, _) = compute_gram(&a, &xs, 1, &o).unwrap();
        let mut f = OpenOptions::new().write(true).open(&p).unwrap();
        f.seek(SeekFrom::Start(HEADER_LEN)).unwrap();
        f.write_all(&123.0f64.to_le_bytes()).unwrap();
        drop(f);
        assert_eq!(verify_file(&p).unwrap().bad_checksums, 1);
        let (g2, s) = compute_gram(&a, &xs, 1, &o).unwrap();
        assert_eq!(g2.values(), g.values());
        assert_eq!(s.tiles_computed, 1);
    }

    #[test]
    fn resume_rejects_other_fingerprints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.gram");
        let a = arch();
        let xs = signals(4, 6);
        let mut o = opts(2, 1);
        o.path = Some(p.clone());
        compute_gram(&a, &xs, 1, &o).unwrap();
        assert!(matches!(compute_gram(&a, &xs, 2, &o), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn cross_gram_cases() {
        let a = arch();
        let xs = signals(5, 7);
        let (g, _) = compute_gram(&a, &xs, 0, &opts(2, 1)).unwrap();
        let c = cross_gram(&a, &xs, &xs, 0, 2).unwrap();
        assert_eq!(c.values, g.values());
        let one = cross_gram(&a, &xs, &xs[2..3], 0, 1).unwrap();
        for j in 0..5 {
            assert_eq!(one.get(0, j), g.get(2, j));
        }
        let perm = [3, 0, 4, 1, 2];
        let shuffled: Vec<Signal> = perm.iter().map(|&i| xs[i].clone()).collect();
        let cs = cross_gram(&a, &xs, &shuffled, 0, 1).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..5 {
                assert_eq!(cs.get(r, j), c.get(i, j));
            }
        }
    }

    #[test]
    fn eigen_cases() {
        let a = arch();
        let x = signals(1, 8).remove(0);
        let xs = vec![x.clone(); 4];
        let (g, _) = compute_gram(&a, &xs, 0, &opts(2, 1)).unwrap();
        let ev = eigen_decay(&g, 10).unwrap();
        assert_eq!(ev.len(), 4);
        let k = g.get(0, 0);
        assert!((ev[0] - 4.0 * k).abs() < 1e-10 * k);
        assert!(ev[1..].iter().all(|v| v.abs() < 1e-10 * k));

        let id = GramMatrix::from_values(3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 0, 0).unwrap();
        assert_eq!(eigen_decay(&id, 3).unwrap(), vec![1.0; 3]);

        let (g, _) = compute_gram(&a, &signals(20, 9), 0, &opts(8, 1)).unwrap();
        let ev = eigenvalues(&g).unwrap();
        assert!(*ev.last().unwrap() >= -1e-8 * g.trace());
    }
}
