//! Data-parallel execution helpers.
//!
//! Markets, federated clients, and sweep grid points are independent jobs.
//! With the `parallel` feature (default) they run on the rayon pool; without
//! it the same helpers degrade to plain sequential loops. Results are
//! identical either way: every job derives its own seed and output order is
//! preserved, so parallelism never changes what gets computed.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_jobs<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

/// Maps `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_jobs<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Maps `f` over mutable references, preserving order.
#[cfg(feature = "parallel")]
pub fn map_jobs_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(&mut T) -> R + Sync + Send,
{
    items.par_iter_mut().map(f).collect()
}

/// Maps `f` over mutable references, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_jobs_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    F: Fn(&mut T) -> R,
{
    items.iter_mut().map(f).collect()
}

/// Sequential reference path, always available. The criterion bench suite
/// compares this against [`map_jobs`] on the same workloads.
pub fn map_jobs_seq<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

/// Sequential reference path for mutable references.
pub fn map_jobs_seq_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    F: Fn(&mut T) -> R,
{
    items.iter_mut().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..64).collect();
        let par = map_jobs(xs.clone(), |x| x * x + 1);
        let seq = map_jobs_seq(xs, |x| x * x + 1);
        assert_eq!(par, seq);
    }
}
