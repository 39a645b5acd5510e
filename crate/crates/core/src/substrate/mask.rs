use super::SubstrateError;

/// Boolean attention visibility: `visible(i, j)` means query `i` may read key `j`.
///
/// Visible column indices are precomputed per row so attention kernels can
/// reduce over exactly the visible set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
    row_start: Vec<usize>,
    vis_idx: Vec<u32>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                visible.push(f(i, j));
            }
        }
        Self::from_visible(rows, cols, visible)
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self::from_visible(rows, cols, vec![true; rows * cols])
    }

    pub fn from_visible(rows: usize, cols: usize, visible: Vec<bool>) -> Self {
        assert_eq!(visible.len(), rows * cols, "mask buffer size");
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut vis_idx = Vec::new();
        row_start.push(0);
        for i in 0..rows {
            for j in 0..cols {
                if visible[i * cols + j] {
                    vis_idx.push(j as u32);
                }
            }
            row_start.push(vis_idx.len());
        }
        Self {
            rows,
            cols,
            visible,
            row_start,
            vis_idx,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    /// Visible key indices for query row `i`, ascending.
    pub fn row_keys(&self, i: usize) -> &[u32] {
        &self.vis_idx[self.row_start[i]..self.row_start[i + 1]]
    }

    pub fn visible_count(&self) -> usize {
        self.vis_idx.len()
    }

    pub fn masked_count(&self) -> usize {
        self.rows * self.cols - self.vis_idx.len()
    }

    /// First query row that sees no key at all.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row_start[i] == self.row_start[i + 1])
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        match self.first_empty_row() {
            Some(row) => Err(SubstrateError::FullyMaskedRow(row)),
            None => Ok(()),
        }
    }

    /// Sub-matrix over `rows` x `cols` ranges.
    pub fn slice(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let r0 = rows.start;
        let c0 = cols.start;
        Self::from_fn(rows.len(), cols.len(), |i, j| self.visible(r0 + i, c0 + j))
    }

    /// Flip a single entry; used by mutation probes.
    pub fn with_flipped(&self, i: usize, j: usize) -> Self {
        let mut v = self.visible.clone();
        v[i * self.cols + j] = !v[i * self.cols + j];
        Self::from_visible(self.rows, self.cols, v)
    }

    /// Compact `1`/`.` rendering, one line per query row.
    pub fn to_ascii(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.push(if self.visible(i, j) { '1' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}
