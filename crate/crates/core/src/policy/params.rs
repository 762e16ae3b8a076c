use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const WEIGHTS: &str = "W";
const META_WINDOW: &str = "meta.context_window";

pub const DEFAULT_FEATURES: usize = 64;
pub const DEFAULT_WINDOW: usize = 4;

const MAGIC: &[u8; 4] = b"AFPK";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamsError {
    #[error("matrix {name:?} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("matrix {0:?} is missing")]
    MissingMatrix(String),
    #[error("matrix {0:?} holds a non-finite value")]
    NonFinite(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length must equal rows * cols"
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMeta {
    /// Feature buckets `F`.
    pub features: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// Context window `h` in tokens.
    pub context_window: usize,
}

impl Default for PolicyMeta {
    fn default() -> Self {
        Self {
            features: DEFAULT_FEATURES,
            vocab: crate::vocab::DEFAULT_VOCAB,
            context_window: DEFAULT_WINDOW,
        }
    }
}

/// Named parameter matrices of the policy. `W` (F×V) is required.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    meta: PolicyMeta,
    matrices: BTreeMap<String, Matrix>,
}

impl PolicyParams {
    pub fn zeros(meta: PolicyMeta) -> Self {
        let mut matrices = BTreeMap::new();
        matrices.insert(WEIGHTS.to_owned(), Matrix::zeros(meta.features, meta.vocab));
        Self { meta, matrices }
    }

    pub fn from_weights(weights: Matrix, context_window: usize) -> Result<Self, ParamsError> {
        let meta = PolicyMeta {
            features: weights.rows(),
            vocab: weights.cols(),
            context_window,
        };
        let mut matrices = BTreeMap::new();
        matrices.insert(WEIGHTS.to_owned(), weights);
        Self::from_parts(meta, matrices)
    }

    pub fn from_parts(
        meta: PolicyMeta,
        matrices: BTreeMap<String, Matrix>,
    ) -> Result<Self, ParamsError> {
        let w = matrices
            .get(WEIGHTS)
            .ok_or_else(|| ParamsError::MissingMatrix(WEIGHTS.into()))?;
        if w.shape() != (meta.features, meta.vocab) {
            return Err(ParamsError::ShapeMismatch {
                name: WEIGHTS.into(),
                got: w.shape(),
                expected: (meta.features, meta.vocab),
            });
        }
        if let Some((name, _)) = matrices.iter().find(|(_, m)| !m.is_finite()) {
            return Err(ParamsError::NonFinite(name.clone()));
        }
        Ok(Self { meta, matrices })
    }

    pub fn meta(&self) -> PolicyMeta {
        self.meta
    }

    pub fn weights(&self) -> &Matrix {
        &self.matrices[WEIGHTS]
    }

    pub fn matrices(&self) -> &BTreeMap<String, Matrix> {
        &self.matrices
    }

    pub fn into_parts(self) -> (PolicyMeta, BTreeMap<String, Matrix>) {
        (self.meta, self.matrices)
    }

    /// Adds `value` to column `token` of every row of `W`.
    ///
    /// Every context then prefers (or avoids) the token, which is how a warm
    /// start encodes structural priors such as "actions usually begin with a
    /// tool call".
    pub fn with_token_bias(mut self, token: crate::vocab::Token, value: f64) -> Self {
        let w = self.matrices.get_mut(WEIGHTS).expect("W present");
        for r in 0..w.rows() {
            let row = w.row_mut(r);
            row[token.id()] += value;
        }
        self
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.matrices.len() == other.matrices.len()
            && self
                .matrices
                .iter()
                .zip(other.matrices.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// Binary checkpoint: magic, version, then `(name, rows, cols, values)` per matrix.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let window = Matrix::from_vec(1, 1, vec![self.meta.context_window as f64]);
        let entries = self
            .matrices
            .iter()
            .map(|(n, m)| (n.as_str(), m))
            .chain([(META_WINDOW, &window)]);
        let mut entries: Vec<_> = entries.collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        for (name, m) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ParamsError> {
        let bad = |m: &str| ParamsError::BadCheckpoint(m.to_owned());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated version"))?);
        if version != FORMAT_VERSION {
            return Err(ParamsError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let mut matrices = BTreeMap::new();
        let mut window = DEFAULT_WINDOW;
        while cur.pos < bytes.len() {
            let len = u16::from_le_bytes(cur.array().ok_or_else(|| bad("truncated name length"))?)
                as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_owned();
            let rows =
                u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated rows"))?) as usize;
            let cols =
                u32::from_le_bytes(cur.array().ok_or_else(|| bad("truncated cols"))?) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| bad("shape overflow"))?;
            let raw = cur
                .take(n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)
                .ok_or_else(|| bad("truncated values"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_vec(rows, cols, data);
            if name == META_WINDOW {
                window = m
                    .data
                    .first()
                    .copied()
                    .filter(|v| *v >= 1.0 && v.fract() == 0.0)
                    .ok_or_else(|| bad("bad context window"))? as usize;
            } else if matrices.insert(name.clone(), m).is_some() {
                return Err(ParamsError::BadCheckpoint(format!(
                    "duplicate matrix {name:?}"
                )));
            }
        }
        let w = matrices
            .get(WEIGHTS)
            .ok_or_else(|| ParamsError::MissingMatrix(WEIGHTS.into()))?;
        let meta = PolicyMeta {
            features: w.rows(),
            vocab: w.cols(),
            context_window: window,
        };
        Self::from_parts(meta, matrices)
    }

    /// Writes the checkpoint through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<(), ParamsError> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("length checked"))
    }
}

/// Gradient (or any update direction) with the shapes of a [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    matrices: BTreeMap<String, Matrix>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        let matrices = params
            .matrices
            .iter()
            .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows, m.cols)))
            .collect();
        Self { matrices }
    }

    pub fn weights(&self) -> &Matrix {
        &self.matrices[WEIGHTS]
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        self.matrices.get_mut(WEIGHTS).expect("W present")
    }

    pub fn matrices(&self) -> &BTreeMap<String, Matrix> {
        &self.matrices
    }

    pub fn from_matrices(matrices: BTreeMap<String, Matrix>) -> Self {
        Self { matrices }
    }

    pub fn norm(&self) -> f64 {
        self.matrices
            .values()
            .map(Matrix::frobenius_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (name, m) in self.matrices.iter_mut() {
            if let Some(o) = other.matrices.get(name) {
                for (a, b) in m.data.iter_mut().zip(&o.data) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.matrices
            .values()
            .all(|m| m.data.iter().all(|x| *x == 0.0))
    }
}

/// Ascent step: `params + learning_rate * gradient`, as a new value.
pub fn apply_update(
    params: &PolicyParams,
    gradient: &Gradient,
    learning_rate: f64,
) -> Result<PolicyParams, ParamsError> {
    let mut matrices = BTreeMap::new();
    for (name, m) in &params.matrices {
        let g = gradient
            .matrices
            .get(name)
            .ok_or_else(|| ParamsError::MissingMatrix(name.clone()))?;
        if g.shape() != m.shape() {
            return Err(ParamsError::ShapeMismatch {
                name: name.clone(),
                got: g.shape(),
                expected: m.shape(),
            });
        }
        let data = m
            .data
            .iter()
            .zip(&g.data)
            .map(|(p, d)| if *d == 0.0 { *p } else { p + learning_rate * d })
            .collect();
        matrices.insert(name.clone(), Matrix::from_vec(m.rows, m.cols, data));
    }
    if let Some(extra) = gradient
        .matrices
        .keys()
        .find(|k| !params.matrices.contains_key(*k))
    {
        return Err(ParamsError::MissingMatrix(extra.clone()));
    }
    PolicyParams::from_parts(params.meta, matrices)
}
