//! Data-parallel map helpers. With the `parallel` feature (default) the
//! closures run on the rayon pool; without it they run sequentially. Results
//! always come back in input order and any reduction over them is performed
//! sequentially by the caller, so numeric output is identical for any worker
//! count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

/// Maps `f` over `items`, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
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

/// Maps `f` over `(index, item)` pairs, preserving order.
pub fn map_indexed<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Fallible variant of [`map_indexed`]; the first error (in input order for
/// the sequential build, an arbitrary one under rayon) aborts the map.
pub fn try_map_indexed<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Sequential reference implementation, available regardless of features;
/// the benchmark suite compares it against the parallel path.
pub fn map_indexed_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(usize, &T) -> U,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map_indexed(&items, |i, v| (i as u64) * 2 + v);
        let seq = map_indexed_seq(&items, |i, v| (i as u64) * 2 + v);
        assert_eq!(out, seq);
    }

    #[test]
    fn try_map_propagates_errors() {
        let items = vec![1.0f64, 2.0, -1.0, 4.0];
        let res = try_map_indexed(&items, |_, v| {
            if *v < 0.0 {
                Err(crate::error::Error::InvalidParameter("negative".into()))
            } else {
                Ok(v.sqrt())
            }
        });
        assert!(res.is_err());
        let ok = try_map_indexed(&items[..2], |_, v| Ok(v * 2.0)).unwrap();
        assert_eq!(ok, vec![2.0, 4.0]);
    }
}
