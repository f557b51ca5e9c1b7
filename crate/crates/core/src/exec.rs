//! Data-parallel execution helpers with a sequential fallback.
//!
//! Every helper assigns each output element to exactly one task and keeps
//! inner accumulation sequential, so results are bit-identical with and
//! without the `parallel` feature and under any thread count. Work is
//! dispatched in a few coarse blocks per thread; fork-join overhead on
//! fine-grained chunks otherwise swamps small kernels.

/// Work sizes (scalar-op estimates) below this run sequentially even with
/// `parallel` enabled.
pub const PAR_THRESHOLD: usize = 1 << 21;

#[cfg(feature = "parallel")]
mod imp {
    use super::PAR_THRESHOLD;
    use rayon::prelude::*;

    fn tasks() -> usize {
        4 * rayon::current_num_threads().max(1)
    }

    /// Apply `f(chunk_index, chunk)` to disjoint `chunk`-sized pieces of
    /// `data`. `work` estimates total scalar ops and gates parallelism.
    pub fn for_each_chunk_mut<T: Send, F>(data: &mut [T], chunk: usize, work: usize, f: F)
    where
        F: Fn(usize, &mut [T]) + Sync,
    {
        let n_chunks = data.len().div_ceil(chunk.max(1));
        if work < PAR_THRESHOLD || n_chunks <= 1 {
            for (i, c) in data.chunks_mut(chunk).enumerate() {
                f(i, c);
            }
            return;
        }
        let per_task = n_chunks.div_ceil(tasks());
        data.par_chunks_mut(chunk * per_task)
            .enumerate()
            .for_each(|(t, block)| {
                for (i, c) in block.chunks_mut(chunk).enumerate() {
                    f(t * per_task + i, c);
                }
            });
    }

    /// Order-preserving parallel map over `0..n`.
    pub fn map_range<R: Send, F>(n: usize, work: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R + Sync + Send,
    {
        if work < PAR_THRESHOLD || n <= 1 {
            (0..n).map(f).collect()
        } else {
            let min_len = n.div_ceil(tasks());
            (0..n)
                .into_par_iter()
                .with_min_len(min_len)
                .map(f)
                .collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, _work: usize, f: F)
    where
        F: Fn(usize, &mut [T]),
    {
        for (i, c) in data.chunks_mut(chunk.max(1)).enumerate() {
            f(i, c);
        }
    }

    pub fn map_range<R, F>(n: usize, _work: usize, f: F) -> Vec<R>
    where
        F: Fn(usize) -> R,
    {
        (0..n).map(f).collect()
    }
}

pub use imp::{for_each_chunk_mut, map_range};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_map_matches_sequential() {
        let mut par = vec![0u64; 1 << 15];
        for_each_chunk_mut(&mut par, 64, usize::MAX, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 64 + j) as u64 * 3;
            }
        });
        let seq: Vec<u64> = (0..1 << 15).map(|k| k as u64 * 3).collect();
        assert_eq!(par, seq);
    }

    #[test]
    fn chunk_map_handles_ragged_tail() {
        let mut par = vec![0u64; 1000];
        for_each_chunk_mut(&mut par, 64, usize::MAX, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 64 + j) as u64 + 7;
            }
        });
        for (k, v) in par.iter().enumerate() {
            assert_eq!(*v, k as u64 + 7);
        }
    }

    #[test]
    fn map_range_preserves_order() {
        let out = map_range(100_000, usize::MAX, |i| i * i);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, i * i);
        }
    }
}
