use crate::error::{Error, Result};

/// Token ids, attention mask and segment ids for `batch` sequences of `len`
/// positions each, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

/// One encoded sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<usize>,
}

impl Encoded {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

impl EncodedBatch {
    /// Stacks sequences, dropping trailing columns that are padding in every
    /// row. Padding never changes a classifier output, so the narrower batch
    /// computes the same results.
    pub fn from_encoded(rows: &[&Encoded], labels: Option<Vec<usize>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::Shape(format!("{} labels for {} rows", l.len(), rows.len())));
            }
        }
        let len = rows.iter().map(|r| r.real_len()).max().unwrap_or(1).max(1);
        let mut batch = Self {
            batch: rows.len(),
            len,
            ids: Vec::with_capacity(rows.len() * len),
            mask: Vec::with_capacity(rows.len() * len),
            segments: Vec::with_capacity(rows.len() * len),
            labels,
        };
        for r in rows {
            if r.ids.len() < len {
                return Err(Error::Shape("encoded row shorter than its real length".into()));
            }
            batch.ids.extend_from_slice(&r.ids[..len]);
            batch.mask.extend_from_slice(&r.mask[..len]);
            batch.segments.extend_from_slice(&r.segments[..len]);
        }
        Ok(batch)
    }

    /// Builds a batch from explicit rows of equal length.
    pub fn from_rows(ids: Vec<Vec<usize>>, mask: Vec<Vec<bool>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let batch = ids.len();
        let len = ids.first().map_or(0, Vec::len);
        if batch == 0 || len == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if ids.iter().any(|r| r.len() != len) || mask.len() != batch || mask.iter().any(|r| r.len() != len) {
            return Err(Error::Shape("ragged batch".into()));
        }
        Ok(Self {
            batch,
            len,
            segments: vec![0; batch * len],
            ids: ids.concat(),
            mask: mask.concat(),
            labels,
        })
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let pick = |v: &[usize]| -> Vec<usize> {
            indices
                .iter()
                .flat_map(|&i| v[i * self.len..(i + 1) * self.len].iter().copied())
                .collect()
        };
        Self {
            batch: indices.len(),
            len: self.len,
            ids: pick(&self.ids),
            segments: pick(&self.segments),
            mask: indices
                .iter()
                .flat_map(|&i| self.mask[i * self.len..(i + 1) * self.len].iter().copied())
                .collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }
}
