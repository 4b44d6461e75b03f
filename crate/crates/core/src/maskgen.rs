//! Segmented attention masks and loss masks.
//!
//! Inside a segment attention is causal over its items and its own expert
//! slots. Across segments a position only sees the expert slots of earlier
//! segments; earlier item slots are hidden.

use std::ops::Range;

use crate::seqcore::{SegmentationPlan, Slot, TokenLayout};

/// Dense `n x n` mask, `get(i, j)` is true when position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn clear_block(&mut self, rows: Range<usize>, cols: Range<usize>) {
        for i in rows {
            self.bits[i * self.n + cols.start..i * self.n + cols.end].fill(false);
        }
    }

    /// Rows of `'0'`/`'1'` characters, one line per row.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            out.extend(self.row(i).iter().map(|&b| if b { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

pub fn causal_mask(n: usize) -> AttentionMask {
    let mut bits = vec![false; n * n];
    for i in 0..n {
        bits[i * n..i * n + i + 1].fill(true);
    }
    AttentionMask { n, bits }
}

pub fn segmented_mask(plan: &SegmentationPlan) -> AttentionMask {
    let mut mask = causal_mask(plan.flat_len());
    for i in 1..plan.num_segments() {
        let rows = plan.segment_span(i);
        for j in 0..i {
            let start = plan.segment_start(j);
            mask.clear_block(rows.clone(), start..start + plan.segment_lengths()[j]);
        }
    }
    mask
}

/// An allowed rectangle of the mask; `causal` blocks are square and only
/// their lower triangle (diagonal included) is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBlock {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub causal: bool,
}

impl MaskBlock {
    pub fn allowed_pairs(&self) -> usize {
        let (r, c) = (self.rows.len(), self.cols.len());
        if self.causal {
            r * (r + 1) / 2
        } else {
            r * c
        }
    }
}

/// Block form of [`segmented_mask`]: for each segment, one rectangle per
/// earlier segment's expert columns plus the causal diagonal block.
pub fn mask_blocks(plan: &SegmentationPlan) -> Vec<MaskBlock> {
    let mut blocks = Vec::new();
    for i in 0..plan.num_segments() {
        let rows = plan.segment_span(i);
        for j in 0..i {
            let experts = plan.experts_per_segment()[j];
            if experts > 0 {
                let start = plan.segment_start(j) + plan.segment_lengths()[j];
                blocks.push(MaskBlock {
                    rows: rows.clone(),
                    cols: start..start + experts,
                    causal: false,
                });
            }
        }
        blocks.push(MaskBlock {
            rows: rows.clone(),
            cols: rows,
            causal: true,
        });
    }
    blocks
}

pub fn blocks_to_mask(n: usize, blocks: &[MaskBlock]) -> AttentionMask {
    let mut bits = vec![false; n * n];
    for b in blocks {
        for i in b.rows.clone() {
            for j in b.cols.clone() {
                if !b.causal || j - b.cols.start <= i - b.rows.start {
                    bits[i * n + j] = true;
                }
            }
        }
    }
    AttentionMask { n, bits }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub include: Vec<bool>,
}

impl LossMask {
    pub fn count(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }
}

pub fn loss_mask(layout: &TokenLayout) -> LossMask {
    LossMask {
        include: layout
            .slots
            .iter()
            .zip(&layout.target_of)
            .map(|(s, t)| matches!(s, Slot::Item { .. }) && t.is_some())
            .collect(),
    }
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Line-by-line transcription of the reference mask routine: start from a
    /// lower-triangular matrix of ones and zero each (segment i rows, earlier
    /// segment j item columns) block.
    pub fn reference_mask(segment_lengths: &[usize], number_learnable: &[usize]) -> Vec<Vec<u8>> {
        let uih_length: usize =
            segment_lengths.iter().sum::<usize>() + number_learnable.iter().sum::<usize>();
        let mut mask = vec![vec![1u8; uih_length]; uih_length];
        for (r, row) in mask.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if c > r {
                    *v = 0;
                }
            }
        }
        let mut y_offset = 0;
        for i in 0..segment_lengths.len() {
            let mut x_offset = 0;
            for j in 0..i {
                for row in mask
                    .iter_mut()
                    .take(segment_lengths[i] + number_learnable[i] + y_offset)
                    .skip(y_offset)
                {
                    for v in row.iter_mut().take(x_offset + segment_lengths[j]).skip(x_offset) {
                        *v = 0;
                    }
                }
                x_offset += number_learnable[j] + segment_lengths[j];
            }
            y_offset += number_learnable[i] + segment_lengths[i];
        }
        mask
    }
}
