//! Slicing flat weight vectors into fixed-size chunks and back.
//!
//! A network's flattened weights rarely divide evenly, so the final chunk is
//! zero-padded up to `chunk_size`; `assemble` uses the original length to
//! drop the padding again. Chunks also carry their position, and
//! `chunk_index_encoding` turns that position into the conditioning vector
//! shared by the encoder and decoder.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WeightChunk {
    pub model_index: usize,
    pub chunk_index: usize,
    /// Always exactly `chunk_size` long; trailing entries of the last chunk
    /// are padding zeros.
    pub values: Vec<f64>,
}

pub fn chunk_count(total_len: usize, chunk_size: usize) -> usize {
    total_len.div_ceil(chunk_size)
}

pub fn chunk(values: &[f64], chunk_size: usize, model_index: usize) -> Result<Vec<WeightChunk>> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk_size must be positive".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot chunk an empty weight vector".into()));
    }
    let n = chunk_count(values.len(), chunk_size);
    let mut out = Vec::with_capacity(n);
    for (ci, piece) in values.chunks(chunk_size).enumerate() {
        let mut v = piece.to_vec();
        v.resize(chunk_size, 0.0);
        out.push(WeightChunk { model_index, chunk_index: ci, values: v });
    }
    debug_assert_eq!(out.len(), n);
    Ok(out)
}

/// Inverse of `chunk`: concatenates in `chunk_index` order and truncates the
/// padding. Chunks must form a contiguous run 0..n for a single model.
pub fn assemble(chunks: &[WeightChunk], total_len: usize) -> Result<Vec<f64>> {
    if chunks.is_empty() {
        return Err(Error::InvalidArgument("assemble of no chunks".into()));
    }
    let chunk_size = chunks[0].values.len();
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("zero-length chunks".into()));
    }
    if chunks.len() != chunk_count(total_len, chunk_size) {
        return Err(Error::Contract(format!(
            "{} chunks of size {} cannot hold exactly {} values",
            chunks.len(),
            chunk_size,
            total_len
        )));
    }
    let mut out = vec![0.0; total_len];
    let mut seen = vec![false; chunks.len()];
    for ch in chunks {
        if ch.values.len() != chunk_size {
            return Err(Error::Contract("chunks of mixed sizes".into()));
        }
        if ch.chunk_index >= chunks.len() || seen[ch.chunk_index] {
            return Err(Error::Contract(format!(
                "chunk index {} repeated or out of range",
                ch.chunk_index
            )));
        }
        seen[ch.chunk_index] = true;
        let start = ch.chunk_index * chunk_size;
        let take = chunk_size.min(total_len - start);
        out[start..start + take].copy_from_slice(&ch.values[..take]);
    }
    Ok(out)
}

/// Position code for chunk `index` out of `total`: a one-hot over positions,
/// mirroring how the task identity is encoded. The decoder has to address
/// every position individually when generating weights; a dedicated input
/// feature per position keeps positions from interfering with each other,
/// and AdaGrad's per-feature accumulators then give each position's rows
/// their own step-size schedule (the sparse-feature regime it is built for).
pub fn chunk_index_encoding(index: usize, total: usize) -> Vec<f64> {
    assert!(index < total, "chunk index {index} out of {total}");
    let mut out = vec![0.0; total];
    out[index] = 1.0;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_split_of_the_default_classifier() {
        // 89,610 flattened weights at chunk size 300: 299 chunks, the last
        // holding 210 real values and 90 padding zeros.
        let values: Vec<f64> = (0..89_610).map(|i| i as f64).collect();
        let chunks = chunk(&values, 300, 0).unwrap();
        assert_eq!(chunks.len(), 299);
        let last = &chunks[298];
        assert_eq!(last.values[0], 89_400.0);
        assert_eq!(last.values[209], 89_609.0);
        assert!(last.values[210..].iter().all(|&v| v == 0.0));
        let back = assemble(&chunks, 89_610).unwrap();
        assert_eq!(back, values);
    }

    #[test]
    fn exact_division_has_no_padding() {
        let values: Vec<f64> = (1..=600).map(|i| i as f64).collect();
        let chunks = chunk(&values, 300, 0).unwrap();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1].values[299], 600.0);
    }

    #[test]
    fn inconsistent_total_len_is_rejected() {
        let values = vec![1.0; 10];
        let chunks = chunk(&values, 4, 0).unwrap();
        assert!(assemble(&chunks, 13).is_err());
        assert!(assemble(&chunks, 10).is_ok());
    }

    #[test]
    fn zero_chunk_size_is_rejected() {
        assert!(chunk(&[1.0], 0, 0).is_err());
    }

    #[test]
    fn index_encoding_is_one_hot() {
        for total in [1, 45, 299] {
            for i in [0, total / 2, total - 1] {
                let e = chunk_index_encoding(i, total);
                assert_eq!(e.len(), total);
                assert_eq!(e[i], 1.0);
                assert_eq!(e.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of")]
    fn index_encoding_rejects_out_of_range() {
        chunk_index_encoding(5, 5);
    }

    proptest! {
        #[test]
        fn chunk_then_assemble_round_trips(
            len in 1usize..4000,
            chunk_size in 1usize..600,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let values: Vec<f64> = (0..len)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                })
                .collect();
            let chunks = chunk(&values, chunk_size, 3).unwrap();
            prop_assert_eq!(chunks.len(), len.div_ceil(chunk_size));
            for ch in &chunks {
                prop_assert_eq!(ch.values.len(), chunk_size);
                prop_assert_eq!(ch.model_index, 3);
            }
            let tail = len % chunk_size;
            if tail != 0 {
                let last = &chunks[chunks.len() - 1].values;
                prop_assert!(last[tail..].iter().all(|&v| v == 0.0));
            }
            let back = assemble(&chunks, len).unwrap();
            prop_assert_eq!(back, values);
        }
    }
}
