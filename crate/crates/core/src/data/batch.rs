use crate::labels::TargetMatrix;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Split;

/// Index batches for one epoch. With `shuffle = Some((seed, epoch))` the
/// order is a Fisher–Yates permutation from a stream derived from both;
/// otherwise it is the original order. The last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        Rng::derived(seed, 0x5348_5546_0000_0000 ^ epoch).shuffle(&mut idx);
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Model-ready batch: grids `[b, tokens, raw_channels]` and targets.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Vec<usize>,
    pub grids: Tensor<T>,
    pub targets: TargetMatrix,
}

impl<T: Scalar> Batch<T> {
    pub fn gather(split: &Split, images: &[usize], tokens: usize, channels: usize) -> Self {
        let mut data = Vec::with_capacity(images.len() * tokens * channels);
        for &i in images {
            data.extend(split.grid(i).iter().map(|&v| T::lit(f64::from(v))));
        }
        Self {
            images: images.to_vec(),
            grids: Tensor::new(&[images.len(), tokens, channels], data).expect("grid length"),
            targets: split.targets.select(images),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_keeps_order() {
        assert_eq!(batch_order(5, 5, None), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn partial_last_batch() {
        let b = batch_order(7, 3, None);
        assert_eq!(b.len(), 3);
        assert_eq!(b[2], vec![6]);
    }

    #[test]
    fn shuffle_is_deterministic_per_epoch() {
        assert_eq!(batch_order(50, 8, Some((3, 1))), batch_order(50, 8, Some((3, 1))));
        assert_ne!(batch_order(50, 8, Some((3, 1))), batch_order(50, 8, Some((3, 2))));
    }
}
