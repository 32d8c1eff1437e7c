//! Execution mode for the data-parallel inner loops.
//!
//! Every parallel loop in this crate splits work over independent output
//! rows, so results are bit-identical between [`Exec::Sequential`] and
//! [`Exec::Parallel`]. The mode is thread-local: [`scoped`] switches the
//! calling thread, and loops consult the mode before fanning out. Without the
//! `parallel` feature every loop runs sequentially.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

thread_local! {
    static MODE: Cell<Exec> = const { Cell::new(Exec::Parallel) };
}

/// Mode in effect on the current thread.
pub fn current() -> Exec {
    MODE.with(|m| m.get())
}

/// Runs `f` with the given mode on the current thread, restoring the
/// previous mode afterwards (also on panic).
pub fn scoped<R>(mode: Exec, f: impl FnOnce() -> R) -> R {
    struct Restore(Exec);
    impl Drop for Restore {
        fn drop(&mut self) {
            MODE.with(|m| m.set(self.0));
        }
    }
    let _restore = Restore(MODE.with(|m| m.replace(mode)));
    f()
}

/// True when the parallel backend is compiled in.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(feature = "parallel")]
fn go_parallel(n: usize) -> bool {
    n > 1 && current() == Exec::Parallel
}

/// Maps `f` over `0..n`, preserving order.
pub(crate) fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if go_parallel(n) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(index, chunk)` on consecutive `chunk_len`-sized chunks of `data`.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if go_parallel(data.len() / chunk_len.max(1)) {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Like [`for_each_chunk`] over two buffers chunked in lockstep.
pub(crate) fn for_each_chunk_pair<F>(a: &mut [f64], a_len: usize, b: &mut [f64], b_len: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(a.len() / a_len, b.len() / b_len);
    #[cfg(feature = "parallel")]
    if go_parallel(a.len() / a_len) {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len).zip(b.par_chunks_mut(b_len)).enumerate().for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    for (i, (x, y)) in a.chunks_mut(a_len).zip(b.chunks_mut(b_len)).enumerate() {
        f(i, x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scoped_restores_mode() {
        assert_eq!(current(), Exec::Parallel);
        scoped(Exec::Sequential, || {
            assert_eq!(current(), Exec::Sequential);
            scoped(Exec::Parallel, || assert_eq!(current(), Exec::Parallel));
            assert_eq!(current(), Exec::Sequential);
        });
        assert_eq!(current(), Exec::Parallel);
    }

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = scoped(Exec::Sequential, || map_range(1000, f));
        let b = scoped(Exec::Parallel, || map_range(1000, f));
        assert_eq!(a, b);

        let mut x = vec![0.0; 64];
        let mut y = vec![0.0; 64];
        let g = |i: usize, c: &mut [f64]| c.iter_mut().for_each(|v| *v = i as f64);
        scoped(Exec::Sequential, || for_each_chunk(&mut x, 8, g));
        scoped(Exec::Parallel, || for_each_chunk(&mut y, 8, g));
        assert_eq!(x, y);
        assert_eq!(x[63], 7.0);
    }
}
