use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::StratumLayout;

/// Block-diagonal matrix holding the within-stratum entries `a_ij`.
///
/// Block `k` is stored row-major with shape `n_k x n_k`; local index `(i, j)`
/// of block `k` is the global pair `(offset(k) + i, offset(k) + j)`.
/// Cross-stratum entries never enter the statistic and are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct StratifiedMatrix {
    layout: StratumLayout,
    blocks: Vec<Vec<f64>>,
}

/// Wire form: `{"sizes":[...],"blocks":[[[row],...],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub sizes: Vec<usize>,
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl StratifiedMatrix {
    /// Builds a matrix from flat row-major blocks.
    pub fn new(layout: StratumLayout, blocks: Vec<Vec<f64>>) -> Result<Self> {
        if blocks.len() != layout.num_strata() {
            return Err(Error::InvalidInput(format!(
                "{} blocks for {} strata",
                blocks.len(),
                layout.num_strata()
            )));
        }
        for (k, block) in blocks.iter().enumerate() {
            let nk = layout.size(k);
            if block.len() != nk * nk {
                return Err(Error::InvalidInput(format!(
                    "block {k} has {} entries, expected {}x{}",
                    block.len(),
                    nk,
                    nk
                )));
            }
            if let Some(pos) = block.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "block {k} entry ({}, {}) is not finite",
                    pos / nk,
                    pos % nk
                )));
            }
        }
        Ok(Self { layout, blocks })
    }

    /// Builds a matrix from nested rows, one `Vec<Vec<f64>>` per stratum.
    pub fn from_rows(blocks: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let sizes: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
        let layout = StratumLayout::new(sizes)?;
        let mut flat = Vec::with_capacity(blocks.len());
        for (k, rows) in blocks.into_iter().enumerate() {
            let nk = rows.len();
            if let Some(r) = rows.iter().position(|row| row.len() != nk) {
                return Err(Error::InvalidInput(format!(
                    "block {k} row {r} has {} entries, expected {nk}",
                    rows[r].len()
                )));
            }
            flat.push(rows.into_iter().flatten().collect());
        }
        Self::new(layout, flat)
    }

    /// Builds each block from a closure over local `(stratum, row, col)` indices.
    pub fn from_fn(
        layout: StratumLayout,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let blocks = (0..layout.num_strata())
            .map(|k| {
                let nk = layout.size(k);
                let mut b = Vec::with_capacity(nk * nk);
                for i in 0..nk {
                    for j in 0..nk {
                        b.push(f(k, i, j));
                    }
                }
                b
            })
            .collect();
        Self::new(layout, blocks)
    }

    pub fn layout(&self) -> &StratumLayout {
        &self.layout
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    /// Local entry `(i, j)` of block `k`.
    #[inline]
    pub fn entry(&self, k: usize, i: usize, j: usize) -> f64 {
        self.blocks[k][i * self.layout.size(k) + j]
    }

    /// Global entry `a_ij`; both units must lie in the same stratum.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let k = self.layout.stratum_of(i);
        assert_eq!(
            k,
            self.layout.stratum_of(j),
            "cross-stratum entry ({i}, {j})"
        );
        let off = self.layout.offset(k);
        self.entry(k, i - off, j - off)
    }

    /// `W = sum_i a_{i, images[i]}` for a stratum-preserving permutation given by its images.
    pub fn statistic(&self, images: &[usize]) -> f64 {
        debug_assert_eq!(images.len(), self.layout.n());
        let mut total = 0.0;
        for k in 0..self.layout.num_strata() {
            let nk = self.layout.size(k);
            let off = self.layout.offset(k);
            let block = &self.blocks[k];
            for i in 0..nk {
                total += block[i * nk + images[off + i] - off];
            }
        }
        total
    }

    /// Applies `f` to every stored entry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layout: self.layout.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Rows of block `k`, for serialization and display.
    pub fn block_rows(&self, k: usize) -> Vec<Vec<f64>> {
        let nk = self.layout.size(k);
        self.blocks[k]
            .chunks(nk.max(1))
            .map(|r| r.to_vec())
            .collect()
    }

    /// `a_ij = u_i v_j` within each stratum.
    pub fn outer_product(layout: StratumLayout, u: &[f64], v: &[f64]) -> Result<Self> {
        if u.len() != layout.n() || v.len() != layout.n() {
            return Err(Error::InvalidInput(format!(
                "vectors of length {} and {} for {} units",
                u.len(),
                v.len(),
                layout.n()
            )));
        }
        let offsets: Vec<usize> = (0..layout.num_strata()).map(|k| layout.offset(k)).collect();
        Self::from_fn(layout, |k, i, j| u[offsets[k] + i] * v[offsets[k] + j])
    }
}

impl TryFrom<MatrixJson> for StratifiedMatrix {
    type Error = Error;

    fn try_from(json: MatrixJson) -> Result<Self> {
        let m = Self::from_rows(json.blocks)?;
        if m.layout.sizes() != json.sizes.as_slice() {
            return Err(Error::InvalidInput(format!(
                "sizes {:?} do not match block shapes {:?}",
                json.sizes,
                m.layout.sizes()
            )));
        }
        Ok(m)
    }
}

impl From<StratifiedMatrix> for MatrixJson {
    fn from(m: StratifiedMatrix) -> Self {
        let blocks = (0..m.layout.num_strata())
            .map(|k| m.block_rows(k))
            .collect();
        MatrixJson {
            sizes: m.layout.sizes().to_vec(),
            blocks,
        }
    }
}
