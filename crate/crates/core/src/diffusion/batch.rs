use crate::error::{CdmError, Result};

/// Dense `(B × T × F)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub b: usize,
    pub t: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(b: usize, t: usize, f: usize) -> Self {
        Tensor3 { b, t, f, data: vec![0.0; b * t * f] }
    }

    pub fn from_vec(b: usize, t: usize, f: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != b * t * f {
            return Err(CdmError::Shape(format!(
                "tensor data length {} does not match {b}x{t}x{f}",
                data.len()
            )));
        }
        Ok(Tensor3 { b, t, f, data })
    }

    #[inline]
    pub fn idx(&self, b: usize, t: usize, f: usize) -> usize {
        (b * self.t + t) * self.f + f
    }

    #[inline]
    pub fn get(&self, b: usize, t: usize, f: usize) -> f64 {
        self.data[self.idx(b, t, f)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, t: usize, f: usize, v: f64) {
        let i = self.idx(b, t, f);
        self.data[i] = v;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.b, self.t, self.f)
    }
}

/// Training/sampling unit: data, a binary mask (1 = to generate, 0 = observed)
/// and the active length of every item.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub data: Tensor3,
    pub mask: Vec<u8>,
    pub seq_len: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(data: Tensor3, mask: Vec<u8>, seq_len: Vec<usize>) -> Result<Self> {
        let batch = MaskedBatch { data, mask, seq_len };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, t, f) = self.data.shape();
        if self.mask.len() != b * t * f {
            return Err(CdmError::Shape("mask shape differs from data shape".into()));
        }
        if self.seq_len.len() != b {
            return Err(CdmError::Shape("seq_len needs one entry per item".into()));
        }
        for (i, &len) in self.seq_len.iter().enumerate() {
            if len > t {
                return Err(CdmError::Shape(format!("seq_len {len} exceeds T={t}")));
            }
            for tt in 0..t {
                for ff in 0..f {
                    let m = self.mask[self.data.idx(i, tt, ff)];
                    if m > 1 || (tt >= len && m != 0) {
                        return Err(CdmError::Shape(format!(
                            "mask must be binary and zero beyond seq_len (item {i}, t {tt})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.shape()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m == 1).count()
    }

    /// `n` stacked copies of this batch; item `i` of copy `s` sits at `s·b + i`.
    pub fn repeat(&self, n: usize) -> MaskedBatch {
        let (b, t, f) = self.shape();
        let per = t * f;
        let mut data = Vec::with_capacity(n * b * per);
        let mut mask = Vec::with_capacity(n * b * per);
        let mut seq_len = Vec::with_capacity(n * b);
        for _ in 0..n {
            data.extend_from_slice(&self.data.data);
            mask.extend_from_slice(&self.mask);
            seq_len.extend_from_slice(&self.seq_len);
        }
        MaskedBatch { data: Tensor3 { b: n * b, t, f, data }, mask, seq_len }
    }
}

/// One variable-length sequence with its own mask, row-major `(len × F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub len: usize,
    pub data: Vec<f64>,
    pub mask: Vec<u8>,
}

/// A set of examples sharing the feature count `f`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceSet {
    pub f: usize,
    pub items: Vec<Example>,
}

impl SequenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Pads the selected examples to the longest among them.
    pub fn collate(&self, indices: &[usize]) -> MaskedBatch {
        let f = self.f;
        let t = indices.iter().map(|&i| self.items[i].len).max().unwrap_or(0);
        let b = indices.len();
        let mut data = Tensor3::zeros(b, t, f);
        let mut mask = vec![0u8; b * t * f];
        let mut seq_len = Vec::with_capacity(b);
        for (bi, &i) in indices.iter().enumerate() {
            let ex = &self.items[i];
            let start = bi * t * f;
            data.data[start..start + ex.len * f].copy_from_slice(&ex.data);
            mask[start..start + ex.len * f].copy_from_slice(&ex.mask);
            seq_len.push(ex.len);
        }
        MaskedBatch { data, mask, seq_len }
    }
}
