use crate::error::{Error, Result};
use crate::numerics::{Real, TokenMatrix};

use super::block::{multihead_forward, BlockDiagnostics, DydilaParams};

/// Ordered attention sublayers sharing width, head count and grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<T> {
    pub blocks: Vec<DydilaParams<T>>,
}

impl<T: Real> AttentionStack<T> {
    pub fn new(blocks: Vec<DydilaParams<T>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::config("blocks", "stack needs at least one block"));
        };
        for (i, b) in blocks.iter().enumerate() {
            b.validate()?;
            if b.dim() != first.dim() || b.n_heads() != first.n_heads() || b.grid != first.grid {
                return Err(Error::config(
                    format!("blocks[{i}]"),
                    "all blocks must share d, heads and grid",
                ));
            }
        }
        Ok(AttentionStack { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn cast<U: Real>(&self) -> AttentionStack<U> {
        AttentionStack {
            blocks: self.blocks.iter().map(DydilaParams::cast).collect(),
        }
    }
}

/// Applies `x ← x + block(x)` for every block in order.
pub fn stack_forward<T: Real>(
    x: &TokenMatrix<T>,
    stack: &AttentionStack<T>,
) -> Result<(TokenMatrix<T>, Vec<BlockDiagnostics<T>>)> {
    let mut x = x.clone();
    let mut diagnostics = Vec::with_capacity(stack.len());
    for block in &stack.blocks {
        let (out, diag) = multihead_forward(&x, block)?;
        x = x.add(&out)?;
        diagnostics.push(diag);
    }
    Ok((x, diagnostics))
}
