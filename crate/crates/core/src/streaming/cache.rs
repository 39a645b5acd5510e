use crate::model::Role;
use crate::substrate::Tensor;

use super::layout::SuperChunkLayout;
use super::StreamError;

/// Append-only per-block keys and values of the tokens committed so far,
/// with a ledger of their roles and chunks.
#[derive(Clone, Debug)]
pub struct KVCache {
    layout: SuperChunkLayout,
    blocks: Vec<(Tensor, Tensor)>,
    ledger: Vec<(Role, usize)>,
}

impl KVCache {
    pub fn new(layout: SuperChunkLayout, depth: usize, dim: usize) -> Self {
        Self {
            layout,
            blocks: (0..depth).map(|_| (Tensor::zeros(&[0, dim]), Tensor::zeros(&[0, dim]))).collect(),
            ledger: Vec::new(),
        }
    }

    pub fn layout(&self) -> &SuperChunkLayout {
        &self.layout
    }

    /// Committed `(role, chunk)` per token.
    pub fn ledger(&self) -> &[(Role, usize)] {
        &self.ledger
    }

    pub fn len(&self) -> usize {
        self.ledger.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ledger.is_empty()
    }

    pub fn block_len(&self, block: usize) -> usize {
        self.blocks[block].0.dims2().0
    }

    /// Appends rows to one block. `roles` must continue that block's prefix of the layout.
    pub fn append(
        &mut self,
        block: usize,
        k_rows: &Tensor,
        v_rows: &Tensor,
        roles: &[(Role, usize)],
    ) -> Result<(), StreamError> {
        let Some((k, v)) = self.blocks.get(block) else {
            return Err(StreamError::LedgerMismatch(format!("no block {}", block)));
        };
        let at = k.dims2().0;
        let n = roles.len();
        let (kn, kd) = k_rows.dims2();
        if kn != n || v_rows.dims2() != (kn, kd) || kd != k.dims2().1 {
            return Err(StreamError::LedgerMismatch(format!(
                "{} roles for keys {:?} and values {:?}",
                n,
                k_rows.shape(),
                v_rows.shape()
            )));
        }
        if at + n > self.layout.len() {
            return Err(StreamError::LedgerMismatch(format!(
                "appending {} rows after {} overruns the {}-token layout",
                n,
                at,
                self.layout.len()
            )));
        }
        for (j, &(role, chunk)) in roles.iter().enumerate() {
            let want = (self.layout.role(at + j), self.layout.chunk(at + j));
            if (role, chunk) != want {
                return Err(StreamError::LedgerMismatch(format!(
                    "token {} is {:?} of chunk {}, layout expects {:?} of chunk {}",
                    at + j,
                    role,
                    chunk,
                    want.0,
                    want.1
                )));
            }
        }
        let k = Tensor::concat_rows(&[k, k_rows])?;
        let v = Tensor::concat_rows(&[v, v_rows])?;
        self.blocks[block] = (k, v);
        if at + n > self.ledger.len() {
            self.ledger.extend_from_slice(&roles[self.ledger.len() - at..]);
        }
        Ok(())
    }

    /// Appends one forward call's keys and values at every block.
    pub fn append_all(&mut self, kv: &[(Tensor, Tensor)], roles: &[(Role, usize)]) -> Result<(), StreamError> {
        if kv.len() != self.blocks.len() {
            return Err(StreamError::LedgerMismatch(format!(
                "{} blocks of keys for a {}-block cache",
                kv.len(),
                self.blocks.len()
            )));
        }
        for (b, (k, v)) in kv.iter().enumerate() {
            self.append(b, k, v, roles)?;
        }
        Ok(())
    }

    /// Every committed key and value of `block`.
    pub fn view(&self, block: usize) -> (&Tensor, &Tensor) {
        let (k, v) = &self.blocks[block];
        (k, v)
    }

    /// Per-block buffers, for a forward call reading the cache.
    pub fn past(&self) -> &[(Tensor, Tensor)] {
        &self.blocks
    }
}
