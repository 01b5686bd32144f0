//! Semantic token vectors: generation, normalization and the on-disk feature cache.
//!
//! Tokens travel through the pipeline un-normalized; normalization only
//! happens inside cosine similarity.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_dim, Error, Result};
use crate::math::{self, Stream};

/// Image geometry accepted by the toy image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "image spec must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    /// Number of real source values, `C * W * H`.
    pub fn source_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// One N-dimensional semantic feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVector {
    values: Vec<f64>,
}

impl TokenVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("token vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("token vector"));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.values)
    }
}

/// `B` token vectors sharing one dimension, optionally labelled with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    dim: usize,
    rows: Vec<TokenVector>,
    labels: Option<Vec<usize>>,
}

impl TokenBatch {
    pub fn new(rows: Vec<TokenVector>, labels: Option<Vec<usize>>) -> Result<Self> {
        let dim = rows.first().map(TokenVector::dim).ok_or(Error::Empty("token batch"))?;
        for r in &rows {
            ensure_dim("token batch row", dim, r.dim())?;
        }
        if let Some(l) = &labels {
            ensure_dim("token batch labels", rows.len(), l.len())?;
        }
        Ok(Self { dim, rows, labels })
    }

    /// Build from raw rows, validating finiteness.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(TokenVector::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, labels)
    }

    /// Checks that every label lies in `[0, classes)`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[TokenVector] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows[i].values()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        ensure_dim("token batch labels", self.rows.len(), labels.len())?;
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(TokenVector::values)
    }

    /// Rows selected by index, carrying labels along.
    pub fn select(&self, idx: &[usize]) -> TokenBatch {
        TokenBatch {
            dim: self.dim,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &TokenVector) -> Result<TokenVector> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm("l2_normalize"));
    }
    Ok(TokenVector {
        values: v.values.iter().map(|x| x / n).collect(),
    })
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim("cosine", a.len(), b.len())?;
    let (na, nb) = (math::norm(a), math::norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    Ok(math::dot(a, b) / (na * nb))
}

/// Something that turns images into semantic tokens. A pretrained model plugs in here.
pub trait ImageEncoder {
    fn spec(&self) -> ImageSpec;
    fn token_dim(&self) -> usize;
    fn encode(&self, image: &[f64]) -> Result<TokenVector>;

    fn encode_batch(&self, images: &[Vec<f64>]) -> Result<TokenBatch> {
        let rows = images
            .iter()
            .map(|im| self.encode(im))
            .collect::<Result<Vec<_>>>()?;
        TokenBatch::new(rows, None)
    }
}

/// Deterministic stand-in for a frozen image encoder: a seeded random
/// projection of the pixels followed by `tanh`, rounded to the `f32` grid.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    spec: ImageSpec,
    dim: usize,
    seed: u64,
}

impl ToyImageEncoder {
    pub const MIN_DIM: usize = 8;

    pub fn new(spec: ImageSpec, dim: usize, seed: u64) -> Result<Self> {
        if dim < Self::MIN_DIM {
            return Err(Error::InvalidArgument(format!(
                "toy encoder dimension must be at least {}, got {dim}",
                Self::MIN_DIM
            )));
        }
        Ok(Self { spec, dim, seed })
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn spec(&self) -> ImageSpec {
        self.spec
    }

    fn token_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, image: &[f64]) -> Result<TokenVector> {
        ensure_dim("toy image encoder input", self.spec.source_dim(), image.len())?;
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("toy image encoder input"));
        }
        let mut rng = math::substream(self.seed, "toy-image-encoder");
        // bias first, then one projection column per pixel, streamed
        let mut acc: Vec<f64> = (0..self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let gain = 1.0 / (image.len() as f64).sqrt();
        for &px in image {
            for a in acc.iter_mut() {
                let w: f64 = rng.sample(StandardNormal);
                *a += gain * w * px;
            }
        }
        TokenVector::new(acc.into_iter().map(|a| math::to_f32_grid(a.tanh())).collect())
    }
}

/// Unit-norm class centers plus the labelled samples drawn around them.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub centers: Vec<Vec<f64>>,
    pub batch: TokenBatch,
}

/// Draw one unit-norm direction of dimension `dim`.
pub fn random_unit(dim: usize, rng: &mut Stream) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = math::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `per_class` samples around each center with isotropic Gaussian spread.
/// Rows are grouped by class and rounded to the `f32` grid.
pub fn sample_around(
    centers: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    rng: &mut Stream,
) -> Result<TokenBatch> {
    let mut rows = Vec::with_capacity(centers.len() * per_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let row = c
                .iter()
                .map(|&x| math::to_f32_grid(x + spread * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            rows.push(row);
            labels.push(k);
        }
    }
    TokenBatch::from_rows(rows, Some(labels))
}

/// Synthetic labelled clusters: `classes` unit-norm centers, `per_class`
/// Gaussian-perturbed samples each.
pub fn synth_cluster_tokens(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<ClusterSet> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if spread.is_nan() || spread < 0.0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid cluster parameters: per_class={per_class}, dim={dim}, spread={spread}"
        )));
    }
    let mut rng = math::substream(seed, "synth-clusters");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            random_unit(dim, &mut rng)
                .into_iter()
                .map(math::to_f32_grid)
                .collect()
        })
        .collect();
    let batch = sample_around(&centers, per_class, spread, &mut rng)?;
    Ok(ClusterSet { centers, batch })
}

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------

pub const CACHE_MAGIC: &[u8; 4] = b"SCTK";
pub const CACHE_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 1;
const CACHE_HEADER_LEN: u64 = 4 + 2 + 4 + 8 + 1;

/// Parsed feature-cache header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CacheHeader {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
    pub dtype: u8,
}

/// Path of the plain-text label sidecar belonging to a cache file.
pub fn label_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

/// Write `batch` as `f32` little-endian rows. Labels, if any, go to a
/// sidecar with one integer per line.
pub fn save_feature_cache(batch: &TokenBatch, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    let dim = u32::try_from(batch.dim())
        .map_err(|_| Error::InvalidArgument("token dimension exceeds u32".into()))?;
    w.write_all(&dim.to_le_bytes())?;
    w.write_all(&(batch.len() as u64).to_le_bytes())?;
    w.write_all(&[DTYPE_F32_LE])?;
    for row in batch.iter() {
        for &v in row {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;

    let sidecar = label_sidecar(path);
    match batch.labels() {
        Some(labels) => {
            let mut lw = BufWriter::new(File::create(&sidecar)?);
            for l in labels {
                writeln!(lw, "{l}")?;
            }
            lw.flush()?;
        }
        None => {
            if sidecar.exists() {
                std::fs::remove_file(&sidecar)?;
            }
        }
    }
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<CacheHeader> {
    let mut buf = [0u8; CACHE_HEADER_LEN as usize];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("file shorter than the feature-cache header".into()))?;
    if &buf[0..4] != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &buf[0..4],
            CACHE_MAGIC
        )));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache version {version}"
        )));
    }
    let dim = u32::from_le_bytes(buf[6..10].try_into().unwrap());
    let count = u64::from_le_bytes(buf[10..18].try_into().unwrap());
    let dtype = buf[18];
    if dtype != DTYPE_F32_LE {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    if dim == 0 {
        return Err(Error::Format("zero token dimension".into()));
    }
    Ok(CacheHeader {
        version,
        dim,
        count,
        dtype,
    })
}

/// Read and validate only the header of a cache file.
pub fn inspect_feature_cache(path: &Path) -> Result<CacheHeader> {
    let mut f = File::open(path)?;
    let header = read_header(&mut f)?;
    let found = f.metadata()?.len().saturating_sub(CACHE_HEADER_LEN);
    let expected = header.count * u64::from(header.dim) * 4;
    if found != expected {
        return Err(Error::Truncated { expected, found });
    }
    Ok(header)
}

/// Load a cache written by [`save_feature_cache`]. When `expected_dim` is
/// given, a header with a different N is rejected.
pub fn load_feature_cache(path: &Path, expected_dim: Option<usize>) -> Result<TokenBatch> {
    let file = File::open(path)?;
    let total = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    let dim = header.dim as usize;
    if let Some(n) = expected_dim {
        ensure_dim("feature cache N", n, dim)?;
    }
    let expected = header.count * u64::from(header.dim) * 4;
    let found = total - CACHE_HEADER_LEN;
    if found != expected {
        return Err(Error::Truncated { expected, found });
    }
    let mut rows = Vec::with_capacity(header.count as usize);
    let mut word = [0u8; 4];
    for _ in 0..header.count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut word)?;
            row.push(f64::from(f32::from_le_bytes(word)));
        }
        rows.push(row);
    }

    let sidecar = label_sidecar(path);
    let labels = if sidecar.exists() {
        let labels = BufReader::new(File::open(&sidecar)?)
            .lines()
            .map(|line| {
                let line = line?;
                line.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("bad label {line:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(labels)
    } else {
        None
    };
    if rows.is_empty() {
        return Err(Error::Empty("feature cache"));
    }
    TokenBatch::from_rows(rows, labels)
}
