//! Sequential / data-parallel execution of independent jobs.
//!
//! Results are always collected in input order, so the choice of mode never
//! changes numerical output. Without the `parallel` feature every mode runs
//! sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }
}

/// Whether this build can run jobs concurrently at all.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x.wrapping_mul(2654435761) % 1009;
        assert_eq!(Execution::Sequential.map(&xs, f), Execution::Parallel.map(&xs, f));
    }
}
