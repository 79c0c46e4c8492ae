use rand::Rng;

use super::Partition;
use crate::error::{Error, Result};

pub const MANS_POOL_ERROR: &str = "MaNS requires cross-partition pool";

/// Uniform draw over the pooled records of every cluster except the
/// anchor's.
pub fn sample_macro_negative<R: Rng + ?Sized>(
    anchor: usize,
    partition: &Partition,
    rng: &mut R,
) -> Result<usize> {
    let own = *partition
        .assignments
        .get(anchor)
        .ok_or_else(|| Error::InvalidParameter(format!("anchor {anchor} not in partition")))?;
    let eligible = partition.assignments.iter().filter(|&&a| a != own).count();
    if partition.k < 2 || eligible == 0 {
        return Err(Error::Precondition(MANS_POOL_ERROR.into()));
    }
    let mut r = rng.random_range(0..eligible);
    for (i, &a) in partition.assignments.iter().enumerate() {
        if a != own {
            if r == 0 {
                return Ok(i);
            }
            r -= 1;
        }
    }
    unreachable!("eligible count is exact")
}

/// Uniform draw of a batch slot; the anchor itself is eligible.
pub fn sample_in_batch<R: Rng + ?Sized>(batch_len: usize, rng: &mut R) -> usize {
    rng.random_range(0..batch_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn partition(assign: Vec<usize>, k: usize) -> Partition {
        Partition {
            k,
            seed: 0,
            restarts: 1,
            inertia: 0.0,
            centroids: vec![vec![0.0]; k],
            assignments: assign,
        }
    }

    #[test]
    fn never_lands_in_own_cluster() {
        let p = partition((0..100).map(|i| i % 4).collect(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let j = sample_macro_negative(0, &p, &mut rng).unwrap();
            assert_ne!(p.cluster_of(j), 0);
        }
    }

    #[test]
    fn uniform_over_eligible_pool() {
        // sizes {2, 3, 5}; anchor in the size-2 cluster
        let p = partition(vec![0, 0, 1, 1, 1, 2, 2, 2, 2, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 80_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[sample_macro_negative(1, &p, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0] + counts[1], 0);
        let expect = draws as f64 / 8.0;
        let stat: f64 = counts[2..]
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        let pval = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
        assert!(pval > 0.01, "p = {pval}");
    }

    #[test]
    fn single_cluster_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = partition(vec![0; 5], 1);
        let err = sample_macro_negative(0, &p, &mut rng).unwrap_err();
        assert!(err.to_string().contains(MANS_POOL_ERROR));
        // K=2 declared but everything in one cluster
        let p = partition(vec![1; 5], 2);
        assert!(sample_macro_negative(0, &p, &mut rng).is_err());
        assert!(sample_macro_negative(9, &p, &mut rng).is_err());
    }
}
