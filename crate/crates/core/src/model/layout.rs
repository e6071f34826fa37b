use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A packed sequence: text prefix, one contiguous visual block, text suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n: usize,
    pub n_v: usize,
    pub visual_offset: usize,
}

impl TokenLayout {
    pub fn new(n: usize, n_v: usize, visual_offset: usize) -> Result<Self> {
        ensure!(
            visual_offset + n_v <= n,
            Error::InvalidArgument(format!(
                "visual block [{visual_offset}, {}) exceeds sequence length {n}",
                visual_offset + n_v
            ))
        );
        Ok(TokenLayout {
            n,
            n_v,
            visual_offset,
        })
    }

    pub fn from_spans(prefix: usize, n_v: usize, suffix: usize) -> Self {
        TokenLayout {
            n: prefix + n_v + suffix,
            n_v,
            visual_offset: prefix,
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.visual_offset
    }

    pub fn suffix_len(&self) -> usize {
        self.n - self.visual_offset - self.n_v
    }

    pub fn text_len(&self) -> usize {
        self.n - self.n_v
    }

    pub fn visual_range(&self) -> Range<usize> {
        self.visual_offset..self.visual_offset + self.n_v
    }

    pub fn is_visual(&self, pos: usize) -> bool {
        self.visual_range().contains(&pos)
    }

    /// Text positions in sequence order (prefix then suffix).
    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.n).filter(|&p| !self.is_visual(p)).collect()
    }

    pub(crate) fn require_visual(&self) -> Result<()> {
        ensure!(
            self.n_v >= 1,
            Error::InvalidArgument("empty visual block".into())
        );
        Ok(())
    }
}
