//! Flat parameter vectors and block layouts.
//!
//! Every d-dimensional quantity in the simulator (model weights, gradients,
//! first and second moments, the alignment direction) is a [`ParamVector`].
//! A [`BlockLayout`] groups contiguous index ranges into named blocks so that
//! second moments can be summarised by one mean per block.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_dim, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let v = Self(values);
        v.ensure_finite("ParamVector::new")?;
        Ok(v)
    }

    /// Wraps values without the finiteness check. Intended for hot loops
    /// whose inputs are already known to be finite.
    pub fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{context}: coordinate {i} is {}",
                self.0[i]
            ))),
        }
    }

    pub fn check_dim(&self, other: &ParamVector) -> Result<()> {
        ensure_dim(self.dim(), other.dim())
    }

    /// Euclidean norm; zero for the zero vector.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        Self(self.0.iter().map(|x| a * x).collect())
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for x in &mut self.0 {
            *x *= a;
        }
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += a * y;
        }
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn hadamard(&self, other: &ParamVector) -> ParamVector {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    pub fn squared(&self) -> ParamVector {
        Self(self.0.iter().map(|x| x * x).collect())
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Coordinatewise mean of a non-empty list of equally sized vectors,
    /// folded in list order.
    pub fn mean_of(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty vector list".into()))?;
        let mut acc = ParamVector::zeros(first.dim());
        for v in vectors {
            ensure_dim(first.dim(), v.dim())?;
            acc.axpy(1.0, v);
        }
        acc.scale_in_place(1.0 / vectors.len() as f64);
        Ok(acc)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Euclidean norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    // Scale by the max magnitude so squares neither overflow nor underflow.
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return if scale.is_nan() { f64::NAN } else { scale };
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub range: Range<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Ordered partition of `[0, d)` into non-empty contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    blocks: Vec<Block>,
    dim: usize,
}

impl BlockLayout {
    /// Validates that the blocks tile `[0, d)` in order with no gaps.
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return config_err("block layout needs at least one block");
        }
        let mut next = 0;
        for b in &blocks {
            if b.range.start != next {
                return config_err(format!(
                    "block '{}' starts at {} but previous block ended at {next}",
                    b.name, b.range.start
                ));
            }
            if b.is_empty() {
                return config_err(format!("block '{}' is empty", b.name));
            }
            next = b.range.end;
        }
        Ok(Self { blocks, dim: next })
    }

    /// Builds a layout from consecutive `(name, length)` pairs.
    pub fn from_sizes<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut start = 0;
        let blocks = sizes
            .into_iter()
            .map(|(name, len)| {
                let b = Block {
                    name: name.into(),
                    range: start..start + len,
                };
                start += len;
                b
            })
            .collect();
        Self::new(blocks)
    }

    pub fn single(dim: usize) -> Result<Self> {
        Self::from_sizes([("all", dim)])
    }

    /// One block per coordinate. Aggregating block means over this layout
    /// is the same as aggregating the full second-moment vector.
    pub fn per_coordinate(dim: usize) -> Result<Self> {
        Self::from_sizes((0..dim).map(|i| (format!("p{i}"), 1)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }
}

/// One statistic per block of a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    values: Vec<f64>,
    layout: Arc<BlockLayout>,
}

impl BlockStats {
    pub fn new(values: Vec<f64>, layout: Arc<BlockLayout>) -> Result<Self> {
        ensure_dim(layout.num_blocks(), values.len())?;
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<BlockLayout>) -> Self {
        Self {
            values: vec![0.0; layout.num_blocks()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&x| x == 0.0)
    }

    /// Coordinatewise mean of stats sharing one layout, folded in order.
    pub fn mean_of(stats: &[BlockStats]) -> Result<BlockStats> {
        let first = stats
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty stats list".into()))?;
        let mut acc = vec![0.0; first.values.len()];
        for s in stats {
            if s.layout != first.layout {
                return config_err("block stats with different layouts");
            }
            for (a, x) in acc.iter_mut().zip(&s.values) {
                *a += x;
            }
        }
        let n = stats.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        BlockStats::new(acc, first.layout.clone())
    }
}

/// Incremental mean; exact when all values are equal.
fn running_mean(xs: &[f64]) -> f64 {
    xs.iter()
        .enumerate()
        .fold(0.0, |m, (i, &x)| m + (x - m) / (i + 1) as f64)
}

/// Arithmetic mean of `v` within each block.
pub fn block_mean(v: &ParamVector, layout: &Arc<BlockLayout>) -> Result<BlockStats> {
    ensure_dim(layout.dim(), v.dim())?;
    let values = layout
        .blocks()
        .iter()
        .map(|b| running_mean(&v.as_slice()[b.range.clone()]))
        .collect();
    BlockStats::new(values, layout.clone())
}

/// Expands block statistics back to a d-vector, constant within each block.
pub fn broadcast_blocks(stats: &BlockStats) -> ParamVector {
    let layout = stats.layout();
    let mut out = vec![0.0; layout.dim()];
    for (b, &value) in layout.blocks().iter().zip(stats.values()) {
        out[b.range.clone()].fill(value);
    }
    ParamVector(out)
}
