//! NaViT-style batch packing: variable-length patch sequences share one
//! token axis, separated by cumulative boundary offsets instead of padding
//! or attention masks. The defining property — packed and per-sample
//! forwards agree — is enforced by the backbone tests.

use nvf_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::ingest::Label;
use crate::patchify::PatchSequence;

/// Identity attached to a sequence while it travels through packing,
/// training, and evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTag {
    pub id: String,
    pub label: Option<Label>,
}

impl SampleTag {
    pub fn new(id: impl Into<String>, label: Option<Label>) -> Self {
        SampleTag {
            id: id.into(),
            label,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PackedSample {
    pub tag: SampleTag,
    pub grid: (usize, usize, usize),
    pub source_dims: (usize, usize, usize),
}

#[derive(Clone, Debug)]
pub struct PackedBatch<R: Real> {
    /// ΣNᵢ × D token block.
    pub tokens: Tensor<R>,
    /// Cumulative offsets [0, N₁, N₁+N₂, …, ΣNᵢ].
    pub boundaries: Vec<usize>,
    /// Patch coordinates for every packed token, sample by sample.
    pub coords: Vec<(usize, usize, usize)>,
    pub samples: Vec<PackedSample>,
}

impl<R: Real> PackedBatch<R> {
    pub fn total_tokens(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Token index range of sample `i`.
    pub fn sample_range(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i]..self.boundaries[i + 1]
    }
}

/// Order-preserving concatenation with boundary offsets.
pub fn pack<R: Real>(sequences: &[(PatchSequence<R>, SampleTag)]) -> Result<PackedBatch<R>> {
    let dim = sequences
        .first()
        .map(|(s, _)| s.dim())
        .ok_or_else(|| CoreError::Contract("pack: empty sequence list".into()))?;
    let total: usize = sequences.iter().map(|(s, _)| s.len()).sum();
    let mut tokens = Vec::with_capacity(total * dim);
    let mut boundaries = Vec::with_capacity(sequences.len() + 1);
    let mut coords = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(sequences.len());
    boundaries.push(0);
    for (seq, tag) in sequences {
        if seq.dim() != dim {
            return Err(CoreError::Contract(format!(
                "pack: mixed token dims {} and {dim}",
                seq.dim()
            )));
        }
        tokens.extend_from_slice(seq.tokens.data());
        coords.extend_from_slice(&seq.coords);
        boundaries.push(boundaries.last().unwrap() + seq.len());
        samples.push(PackedSample {
            tag: tag.clone(),
            grid: seq.grid,
            source_dims: seq.source_dims,
        });
    }
    Ok(PackedBatch {
        tokens: Tensor::new(vec![total, dim], tokens)?,
        boundaries,
        coords,
        samples,
    })
}

/// Slice a packed feature block back into per-sample blocks.
pub fn unpack<R: Real>(features: &Tensor<R>, boundaries: &[usize]) -> Result<Vec<Tensor<R>>> {
    validate_boundaries(boundaries, features.rows())?;
    let dim = features.cols();
    let mut out = Vec::with_capacity(boundaries.len() - 1);
    for w in boundaries.windows(2) {
        let (a, b) = (w[0], w[1]);
        out.push(Tensor::new(
            vec![b - a, dim],
            features.data()[a * dim..b * dim].to_vec(),
        )?);
    }
    Ok(out)
}

pub fn validate_boundaries(boundaries: &[usize], total: usize) -> Result<()> {
    let ok = boundaries.first() == Some(&0)
        && boundaries.last() == Some(&total)
        && boundaries.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(CoreError::Contract(format!(
            "invalid boundaries {boundaries:?} for {total} tokens"
        )));
    }
    Ok(())
}

/// First-fit-decreasing packing under a token cap. Every sequence lands in
/// exactly one batch; ties in length keep original order.
pub fn greedy_bucket<R: Real>(
    sequences: Vec<(PatchSequence<R>, SampleTag)>,
    max_tokens: usize,
) -> Result<Vec<PackedBatch<R>>> {
    if sequences.is_empty() {
        return Ok(Vec::new());
    }
    for (seq, tag) in &sequences {
        if seq.len() > max_tokens {
            return Err(CoreError::OversizeSequence {
                id: tag.id.clone(),
                len: seq.len(),
                cap: max_tokens,
            });
        }
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| {
        sequences[b]
            .0
            .len()
            .cmp(&sequences[a].0.len())
            .then(a.cmp(&b))
    });
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new(); // (used tokens, member indices)
    for idx in order {
        let len = sequences[idx].0.len();
        match bins.iter_mut().find(|(used, _)| used + len <= max_tokens) {
            Some((used, members)) => {
                *used += len;
                members.push(idx);
            }
            None => bins.push((len, vec![idx])),
        }
    }
    let mut by_index: Vec<Option<(PatchSequence<R>, SampleTag)>> =
        sequences.into_iter().map(Some).collect();
    bins.into_iter()
        .map(|(_, members)| {
            let items: Vec<_> = members
                .into_iter()
                .map(|i| by_index[i].take().expect("each sequence packs once"))
                .collect();
            pack(&items)
        })
        .collect()
}
