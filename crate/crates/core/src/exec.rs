//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces results in index order and folds partial results
//! in a fixed order, so output never depends on the worker count. Without
//! the `parallel` feature, [`Execution::Parallel`] runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this build can actually run loops in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Fallible variant of [`Execution::map`]; the first error in index order wins.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Applies `f` to every element of `items` with its index.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
            _ => items.iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
        }
    }

    /// Splits `0..n` into fixed blocks of `block` indices, folds each block
    /// sequentially with `fold`, then merges the block results left to right.
    ///
    /// Block boundaries depend only on `n` and `block`, so floating-point
    /// results are bit-identical for any thread count.
    pub fn block_reduce<A, I, F, M>(self, n: usize, block: usize, init: I, fold: F, merge: M) -> A
    where
        A: Send,
        I: Fn() -> A + Sync + Send,
        F: Fn(&mut A, usize) + Sync + Send,
        M: Fn(&mut A, A),
    {
        let block = block.max(1);
        let n_blocks = n.div_ceil(block);
        let partials = self.map(n_blocks, |b| {
            let mut acc = init();
            let end = ((b + 1) * block).min(n);
            for i in b * block..end {
                fold(&mut acc, i);
            }
            acc
        });
        let mut total = init();
        for p in partials {
            merge(&mut total, p);
        }
        total
    }
}

/// Default block size for [`Execution::block_reduce`] over Monte Carlo paths.
pub const PATH_BLOCK: usize = 4096;
