//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) [`map`] and [`map_range`] fan
//! out over rayon; without it they run sequentially. Outputs are collected
//! in input order either way, and callers reduce sequentially, so results
//! are bit-identical across both modes and across thread counts.
//!
//! The `_seq` variants are always compiled; the bench suite uses them as the
//! baseline when comparing the two lanes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map<T, U, G>(items: &[T], f: G) -> Vec<U>
where
    T: Sync,
    U: Send,
    G: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map<T, U, G>(items: &[T], f: G) -> Vec<U>
where
    T: Sync,
    U: Send,
    G: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential map, always available.
pub fn map_seq<T, U, G>(items: &[T], f: G) -> Vec<U>
where
    G: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_range<U, G>(n: usize, f: G) -> Vec<U>
where
    U: Send,
    G: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, preserving order.
#[cfg(not(feature = "parallel"))]
pub fn map_range<U, G>(n: usize, f: G) -> Vec<U>
where
    U: Send,
    G: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Sequential range map, always available.
pub fn map_range_seq<U, G>(n: usize, f: G) -> Vec<U>
where
    G: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}
