//! Data-parallel helpers. With the default `parallel` feature the mapping
//! helpers fan out over rayon; without it they degrade to plain iterators
//! with identical results (outputs are collected in input order either way,
//! so both paths are deterministic and bit-identical).

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential twin of [`map_collect`]; always runs on the calling thread.
/// Exists so benchmarks can compare both execution modes in one build.
pub fn map_collect_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Fallible map that stops at the first error.
pub fn try_map_collect<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| (*x as f64).sin() * 1e6;
        let a = map_collect(&items, f);
        let b = map_collect_seq(&items, f);
        assert_eq!(a, b);
    }

    #[test]
    fn try_map_propagates_errors() {
        let items = vec![1i32, 2, -3, 4];
        let r: Result<Vec<i32>, String> = try_map_collect(&items, |&x| {
            if x < 0 {
                Err(format!("negative: {x}"))
            } else {
                Ok(x * 2)
            }
        });
        assert!(r.is_err());
    }
}
