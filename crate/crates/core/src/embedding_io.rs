//! Embedding tables, labelled bundles and their on-disk formats.
//!
//! An embedding file is `b"MCAE"`, a little-endian `u32` version (1), `u32`
//! row count, `u32` dimension, then `n * d` little-endian `f32` values in
//! row-major order. Identifiers, labels and the cluster count live in an
//! optional JSON sidecar next to it (`<stem>.meta.json`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{McaError, Result};
use crate::scalar::Scalar;

pub use crate::taxonomy::{load_taxonomy, parse_taxonomy, TaxonomyTree, ROOT};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MCAE";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Row-major `n x d` embedding table with one identifier per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<T> {
    data: Array2<T>,
    ids: Vec<String>,
}

impl<T: Scalar> EmbeddingMatrix<T> {
    /// Wraps a matrix, naming rows `"0".."n-1"`.
    pub fn new(data: Array2<T>) -> Result<Self> {
        let ids = (0..data.nrows()).map(|i| i.to_string()).collect();
        Self::with_ids(data, ids)
    }

    pub fn with_ids(data: Array2<T>, ids: Vec<String>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 {
            return Err(McaError::Shape("embedding matrix needs at least one row".into()));
        }
        if d < 2 {
            return Err(McaError::Shape(format!("embedding dimension must be >= 2, got {d}")));
        }
        if ids.len() != n {
            return Err(McaError::Shape(format!("{} ids for {n} rows", ids.len())));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(McaError::Metadata(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { data, ids })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(McaError::Shape("ragged rows".into()));
        }
        let flat: Vec<T> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| McaError::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.data.row(i)
    }

    /// Rows at the given indices, in that order, keeping their ids.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), rows),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    pub fn into_parts(self) -> (Array2<T>, Vec<String>) {
        (self.data, self.ids)
    }

    /// Converts precision, e.g. the `f32` file contents into `f64` for training.
    pub fn cast<U: Scalar>(&self) -> EmbeddingMatrix<U> {
        EmbeddingMatrix {
            data: self.data.mapv(|v| U::lit(v.to_f64_lossy())),
            ids: self.ids.clone(),
        }
    }

    /// Largest absolute entry, the `M_u` bound of the risk analysis.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_normalized(&self, tol: T) -> bool {
        self.data
            .rows()
            .into_iter()
            .all(|r| (r.dot(&r).sqrt() - T::one()).abs() <= tol)
    }
}

/// Scales every row to unit L2 norm so dot products become cosines.
pub fn l2_normalize<T: Scalar>(m: &EmbeddingMatrix<T>) -> Result<EmbeddingMatrix<T>> {
    let mut data = m.data.clone();
    for (i, mut row) in data.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(McaError::ZeroRow { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingMatrix {
        data,
        ids: m.ids.clone(),
    })
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses the binary layout from memory. Rows are returned as stored.
pub fn decode_embeddings<T: Scalar>(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(McaError::format(path, "truncated header"));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(McaError::format(path, "magic mismatch, expected MCAE"));
    }
    let version = le_u32(bytes, 4);
    if version != EMBEDDING_VERSION {
        return Err(McaError::format(path, format!("unsupported version {version}")));
    }
    let n = le_u32(bytes, 8) as usize;
    let d = le_u32(bytes, 12) as usize;
    if d == 0 {
        return Err(McaError::format(path, "dimension is zero"));
    }
    let count = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4).map(|b| (c, b)))
        .ok_or_else(|| McaError::format(path, "n*d overflows"))?;
    let (count, payload) = count;
    if bytes.len() - HEADER_LEN != payload {
        return Err(McaError::format(
            path,
            format!(
                "payload is {} bytes, header declares {n}x{d} = {payload}",
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let values: Vec<T> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64))
        .collect();
    debug_assert_eq!(values.len(), count);
    let data = Array2::from_shape_vec((n, d), values).map_err(|e| McaError::format(path, e.to_string()))?;
    EmbeddingMatrix::new(data).map_err(|e| McaError::format(path, e.to_string()))
}

pub fn encode_embeddings<T: Scalar>(m: &EmbeddingMatrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.n() * m.d());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.n() as u32).to_le_bytes());
    out.extend_from_slice(&(m.d() as u32).to_le_bytes());
    for v in m.data.iter() {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    out
}

/// Loads an embedding file and, when present, the ids from its sidecar.
pub fn load_embeddings<T: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingMatrix<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| McaError::io(path, e))?;
    let mut m = decode_embeddings(&bytes, path)?;
    if let Some(meta) = read_sidecar(path)? {
        if let Some(ids) = meta.ids {
            let data = m.data;
            m = EmbeddingMatrix::with_ids(data, ids)?;
        }
    }
    Ok(m)
}

/// Writes the binary payload only; see [`DatasetBundle::save`] for metadata.
pub fn save_embeddings<T: Scalar>(m: &EmbeddingMatrix<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_file(path, &encode_embeddings(m))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| McaError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| McaError::io(path, e))?;
    f.write_all(bytes).map_err(|e| McaError::io(path, e))
}

/// Contents of `<stem>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SidecarMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn read_sidecar(path: &Path) -> Result<Option<SidecarMeta>> {
    let meta = sidecar_path(path);
    if !meta.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta).map_err(|e| McaError::io(&meta, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| McaError::Metadata(format!("{}: {e}", meta.display())))
}

pub fn write_sidecar(path: &Path, meta: &SidecarMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    write_file(&sidecar_path(path), text.as_bytes())
}

/// Image embeddings with optional ground-truth classes.
#[derive(Debug, Clone)]
pub struct DatasetBundle<T> {
    pub images: EmbeddingMatrix<T>,
    pub labels: Option<Vec<usize>>,
    pub c: usize,
}

impl<T: Scalar> DatasetBundle<T> {
    pub fn new(images: EmbeddingMatrix<T>, labels: Option<Vec<usize>>, c: usize) -> Result<Self> {
        if c == 0 {
            return Err(McaError::InvalidArgument("cluster count must be >= 1".into()));
        }
        if let Some(l) = &labels {
            if l.len() != images.n() {
                return Err(McaError::Shape(format!("{} labels for {} images", l.len(), images.n())));
            }
            if let Some(bad) = l.iter().find(|&&v| v >= c) {
                return Err(McaError::Metadata(format!("label {bad} outside [0, {c})")));
            }
        }
        Ok(Self { images, labels, c })
    }

    /// Loads images plus sidecar. `c` falls back to the sidecar, then to the
    /// number of distinct labels.
    pub fn load(path: impl AsRef<Path>, c: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let images = load_embeddings(path)?;
        let meta = read_sidecar(path)?.unwrap_or_default();
        let c = c
            .or(meta.c)
            .or_else(|| meta.labels.as_ref().map(|l| l.iter().max().map_or(1, |m| m + 1)))
            .ok_or_else(|| McaError::Metadata("cluster count unknown; pass --c".into()))?;
        Self::new(images, meta.labels, c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_embeddings(&self.images, path)?;
        write_sidecar(
            path,
            &SidecarMeta {
                ids: Some(self.images.ids().to_vec()),
                labels: self.labels.clone(),
                c: Some(self.c),
            },
        )
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            images: l2_normalize(&self.images)?,
            labels: self.labels.clone(),
            c: self.c,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            images: self.images.select(rows),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&i| l[i]).collect()),
            c: self.c,
        }
    }
}

/// Candidate nouns, their text embeddings and the hypernym edges over them.
#[derive(Debug, Clone)]
pub struct VocabularyBundle<T> {
    pub words: Vec<String>,
    pub embeddings: EmbeddingMatrix<T>,
    pub taxonomy: TaxonomyTree,
}

impl<T: Scalar> VocabularyBundle<T> {
    pub fn new(embeddings: EmbeddingMatrix<T>, taxonomy: TaxonomyTree) -> Self {
        Self {
            words: embeddings.ids().to_vec(),
            embeddings,
            taxonomy,
        }
    }

    /// Word embeddings (ids are the words) plus a taxonomy edge file.
    pub fn load(words: impl AsRef<Path>, taxonomy: impl AsRef<Path>) -> Result<Self> {
        let embeddings = load_embeddings(words)?;
        let tree = load_taxonomy(taxonomy, embeddings.ids())?;
        Ok(Self::new(embeddings, tree))
    }

    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            words: self.words.clone(),
            embeddings: l2_normalize(&self.embeddings)?,
            taxonomy: self.taxonomy.clone(),
        })
    }

    pub fn m(&self) -> usize {
        self.words.len()
    }
}
