//! Residual vector quantizer: a small per-corpus stand-in for a neural
//! codec's tokenizer. Book `q` quantizes what books `1..q` left over.
//!
//! Books after the first reserve codeword 0 as the zero vector, so adding a
//! book can never increase reconstruction error.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_NUM_BOOKS: usize = 8;
pub const DEFAULT_BOOK_SIZE: usize = 1024;
pub const DEFAULT_FEATURE_DIM: usize = 32;
/// Books kept for language modeling.
pub const LM_BOOKS: usize = 3;

const MAGIC: &[u8; 4] = b"RVQB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    num_books: usize,
    book_size: usize,
    dim: usize,
    /// `num_books × book_size × dim`, row-major.
    data: Vec<f32>,
    hash: String,
}

fn content_hash(num_books: usize, book_size: usize, dim: usize, data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in [num_books, book_size, dim] {
        h.update((v as u32).to_le_bytes());
    }
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebooks {
    pub fn from_data(num_books: usize, book_size: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_books == 0 || book_size == 0 || dim == 0 {
            return Err(Error::invalid("codebook dimensions must be positive"));
        }
        if data.len() != num_books * book_size * dim {
            return Err(Error::invalid("codebook data length does not match its dimensions"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite codeword"));
        }
        if book_size > u16::MAX as usize + 1 {
            return Err(Error::invalid("codes must fit in 16 bits"));
        }
        let hash = content_hash(num_books, book_size, dim, &data);
        Ok(Self { num_books, book_size, dim, data, hash })
    }

    pub fn num_books(&self) -> usize {
        self.num_books
    }

    pub fn book_size(&self) -> usize {
        self.book_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hex SHA-256 over the dimensions and codewords.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn codeword(&self, book: usize, index: usize) -> &[f32] {
        let start = (book * self.book_size + index) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Greedy residual encoding through every book.
    pub fn encode(&self, frame: &[f32]) -> Result<Vec<u16>> {
        if frame.len() != self.dim {
            return Err(Error::invalid(format!("frame has {} dims, codebooks expect {}", frame.len(), self.dim)));
        }
        // Distances are taken against `frame - (recon + codeword)` with the
        // same float operations `decode` performs, so the pinned zero
        // codeword guarantees the decoded error never grows with depth.
        let mut recon = vec![0.0f32; self.dim];
        let mut codes = Vec::with_capacity(self.num_books);
        for q in 0..self.num_books {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for j in 0..self.book_size {
                let d: f32 = frame
                    .iter()
                    .zip(&recon)
                    .zip(self.codeword(q, j))
                    .map(|((f, r), c)| {
                        let e = f - (r + c);
                        e * e
                    })
                    .sum();
                // strict: ties keep the lowest index
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            for (r, c) in recon.iter_mut().zip(self.codeword(q, best)) {
                *r += c;
            }
            codes.push(best as u16);
        }
        Ok(codes)
    }

    /// Sum of the selected codewords. Fewer codes than books decodes with
    /// the leading books only.
    pub fn decode(&self, codes: &[u16]) -> Result<Vec<f32>> {
        if codes.len() > self.num_books {
            return Err(Error::invalid(format!("{} codes for {} books", codes.len(), self.num_books)));
        }
        let mut out = vec![0.0f32; self.dim];
        for (q, &c) in codes.iter().enumerate() {
            if c as usize >= self.book_size {
                return Err(Error::invalid(format!("code {c} out of range for book size {}", self.book_size)));
            }
            for (o, v) in out.iter_mut().zip(self.codeword(q, c as usize)) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn encode_frames(&self, frames: &[Vec<f32>]) -> Result<AcousticFrameCodes> {
        let codes = frames.par_iter().map(|f| self.encode(f)).collect::<Result<Vec<_>>>()?;
        Ok(AcousticFrameCodes { num_books: self.num_books, codes })
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.num_books as u32, self.book_size as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&hex::decode(&self.hash).expect("hex hash"))?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * 4 + 52);
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Io(io) => Error::format(path, io.to_string()),
            e => e,
        })
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::invalid("not a codebook file"));
        }
        let mut u = [0u8; 4];
        let mut next = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut u)?;
            Ok(u32::from_le_bytes(u) as usize)
        };
        let version = next(r)?;
        if version != VERSION as usize {
            return Err(Error::invalid(format!("unsupported codebook version {version}")));
        }
        let (n, k, d) = (next(r)?, next(r)?, next(r)?);
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let mut raw = vec![0u8; n * k * d * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let books = Self::from_data(n, k, d, data)?;
        let stored = hex::encode(hash);
        if stored != books.hash {
            return Err(Error::CodecMismatch { expected: stored, found: books.hash });
        }
        Ok(books)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcousticFrameCodes {
    num_books: usize,
    codes: Vec<Vec<u16>>,
}

impl AcousticFrameCodes {
    pub fn new(num_books: usize, codes: Vec<Vec<u16>>) -> Result<Self> {
        if codes.iter().any(|c| c.len() != num_books) {
            return Err(Error::invalid("every frame must carry the same number of codes"));
        }
        Ok(Self { num_books, codes })
    }

    pub fn num_books(&self) -> usize {
        self.num_books
    }

    pub fn frames(&self) -> &[Vec<u16>] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Keeps the first `k` books of every frame.
    pub fn truncate(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.num_books {
            return Err(Error::invalid(format!("cannot keep {k} of {} books", self.num_books)));
        }
        Ok(Self { num_books: k, codes: self.codes.iter().map(|c| c[..k].to_vec()).collect() })
    }
}

/// Per-book training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Mean residual L2 norm after books `1..=q`, for each `q`.
    pub mean_residual_norm: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub num_books: usize,
    pub book_size: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { num_books: DEFAULT_NUM_BOOKS, book_size: DEFAULT_BOOK_SIZE, iters: 10, seed: 0 }
    }
}

/// Fits books one at a time with k-means on the running residuals. Books are
/// initialized from distinct training vectors; empty clusters keep their
/// previous centroid.
pub fn fit(features: &[Vec<f32>], opts: FitOptions) -> Result<(Codebooks, FitReport)> {
    let FitOptions { num_books, book_size, iters, seed } = opts;
    if num_books == 0 || book_size == 0 {
        return Err(Error::invalid("need at least one book of at least one codeword"));
    }
    if features.len() < book_size {
        return Err(Error::InsufficientData(format!("{} frames for {} codewords", features.len(), book_size)));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("feature frames must share a nonzero dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residuals: Vec<Vec<f32>> = features.to_vec();
    let mut data = Vec::with_capacity(num_books * book_size * dim);
    let mut report = FitReport { mean_residual_norm: Vec::with_capacity(num_books) };

    for q in 0..num_books {
        let pinned = usize::from(q > 0);
        let mut book = vec![0.0f32; book_size * dim];
        for (slot, idx) in sample(&mut rng, residuals.len(), book_size - pinned).into_iter().enumerate() {
            let j = slot + pinned;
            book[j * dim..(j + 1) * dim].copy_from_slice(&residuals[idx]);
        }
        for _ in 0..iters {
            let assign = assign_all(&book, book_size, dim, &residuals);
            let mut sums = vec![0.0f64; book_size * dim];
            let mut counts = vec![0usize; book_size];
            for (r, &j) in residuals.iter().zip(&assign) {
                counts[j] += 1;
                for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(r) {
                    *s += *v as f64;
                }
            }
            for j in pinned..book_size {
                if counts[j] > 0 {
                    for t in 0..dim {
                        book[j * dim + t] = (sums[j * dim + t] / counts[j] as f64) as f32;
                    }
                }
            }
        }
        let assign = assign_all(&book, book_size, dim, &residuals);
        let mut total = 0.0f64;
        for (r, &j) in residuals.iter_mut().zip(&assign) {
            for (v, c) in r.iter_mut().zip(&book[j * dim..(j + 1) * dim]) {
                *v -= c;
            }
            total += r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        }
        report.mean_residual_norm.push(total / residuals.len() as f64);
        data.extend_from_slice(&book);
    }
    Ok((Codebooks::from_data(num_books, book_size, dim, data)?, report))
}

fn assign_all(book: &[f32], book_size: usize, dim: usize, points: &[Vec<f32>]) -> Vec<usize> {
    points
        .par_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f32::INFINITY;
            for j in 0..book_size {
                let d = sq_dist(p, &book[j * dim..(j + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).collect()
    }

    fn dist(a: &[f32], b: &[f32]) -> f32 {
        sq_dist(a, b).sqrt()
    }

    #[test]
    fn exact_cover_with_one_book() {
        let feats = gaussian(16, 4, 1);
        let (cb, report) = fit(&feats, FitOptions { num_books: 1, book_size: 16, iters: 5, seed: 2 }).unwrap();
        assert_eq!(report.mean_residual_norm, vec![0.0]);
        for f in &feats {
            assert_eq!(cb.decode(&cb.encode(f).unwrap()).unwrap(), *f);
        }
    }

    #[test]
    fn residual_norm_strictly_decreases() {
        let feats = gaussian(2000, 8, 3);
        let (_, report) = fit(&feats, FitOptions { num_books: 8, book_size: 64, iters: 8, seed: 4 }).unwrap();
        for w in report.mean_residual_norm.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.mean_residual_norm);
        }
    }

    #[test]
    fn zero_iters_still_valid() {
        let feats = gaussian(100, 4, 5);
        let (cb, _) = fit(&feats, FitOptions { num_books: 3, book_size: 10, iters: 0, seed: 0 }).unwrap();
        assert_eq!((cb.num_books(), cb.book_size(), cb.dim()), (3, 10, 4));
        assert!(cb.codeword(1, 0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn insufficient_data() {
        let feats = gaussian(5, 4, 5);
        assert!(matches!(
            fit(&feats, FitOptions { num_books: 1, book_size: 10, iters: 1, seed: 0 }),
            Err(Error::InsufficientData(_))
        ));
    }

    fn handmade() -> Codebooks {
        // book 0: three codewords, book 1 and 2: zero codeword plus one other
        let mut data = vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0];
        data.extend([0.0, 0.0, -0.5, 0.5, 9.0, 9.0]);
        data.extend([0.0, 0.0, 0.1, 0.1, 9.0, 9.0]);
        Codebooks::from_data(3, 3, 2, data).unwrap()
    }

    #[test]
    fn encode_exact_codeword() {
        let cb = handmade();
        let codes = cb.encode(&[0.0, 1.0]).unwrap();
        assert_eq!(codes, vec![1, 0, 0]);
        assert_eq!(cb.decode(&codes).unwrap(), vec![0.0, 1.0]);
        assert_eq!(cb.decode(&[0, 0, 0]).unwrap(), vec![1.0, 0.0]);
        assert!(cb.encode(&[1.0]).is_err());
        assert!(cb.decode(&[3]).is_err());
    }

    #[test]
    fn later_books_hold_exact_residuals() {
        let cb = handmade();
        // (2, 2) + (-0.5, 0.5) + (0.1, 0.1)
        let v = [1.6f32, 2.6];
        let codes = cb.encode(&v).unwrap();
        assert_eq!(codes, vec![2, 1, 1]);
        let back = cb.decode(&codes).unwrap();
        assert!(back.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn error_non_increasing_with_depth() {
        let feats = gaussian(3000, 8, 6);
        let (cb, _) = fit(&feats, FitOptions { num_books: 8, book_size: 32, iters: 5, seed: 7 }).unwrap();
        for f in gaussian(1000, 8, 8) {
            let codes = cb.encode(&f).unwrap();
            let full = dist(&f, &cb.decode(&codes).unwrap());
            let mut prev = f32::INFINITY;
            for k in 1..=8 {
                let e = dist(&f, &cb.decode(&codes[..k]).unwrap());
                assert!(e <= prev);
                assert!(full <= e);
                prev = e;
            }
        }
    }

    #[test]
    fn truncate_contract() {
        let codes = AcousticFrameCodes::new(8, vec![(0..8).collect(), (8..16).collect()]).unwrap();
        assert_eq!(codes.truncate(8).unwrap(), codes);
        let t = codes.truncate(3).unwrap();
        assert_eq!(t.frames(), &[vec![0, 1, 2], vec![8, 9, 10]]);
        assert!(codes.truncate(0).is_err());
        assert!(codes.truncate(9).is_err());
    }

    #[test]
    fn file_roundtrip_and_hash_check() {
        let cb = handmade();
        let mut buf = Vec::new();
        cb.write(&mut buf).unwrap();
        assert_eq!(Codebooks::read(&mut buf.as_slice()).unwrap(), cb);
        // corrupt one codeword byte
        let n = buf.len();
        buf[n - 1] ^= 0x01;
        assert!(matches!(Codebooks::read(&mut buf.as_slice()), Err(Error::CodecMismatch { .. })));
    }
}
