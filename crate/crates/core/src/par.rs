//! Order-preserving data parallelism with a sequential fallback.
//!
//! With the `parallel` feature disabled every mode runs sequentially. Results
//! are always returned in input order, so callers that reduce them in order
//! get bit-identical output in either mode.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

pub fn map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Sum fixed-size chunk results in chunk order.
pub fn chunked_sum<T, F>(mode: ExecMode, items: &[T], chunk: usize, len: usize, f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(&[T], &mut [f64]) + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let parts = map(mode, &chunks, |c| {
        let mut acc = vec![0.0; len];
        f(c, &mut acc);
        acc
    });
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin() * 1e-3).collect();
        let run = |mode| {
            chunked_sum(mode, &xs, 7, 3, |c, acc| {
                for x in c {
                    acc[0] += x;
                    acc[1] += x * x;
                    acc[2] += x.abs();
                }
            })
        };
        assert_eq!(run(ExecMode::Parallel), run(ExecMode::Sequential));
        assert_eq!(map(ExecMode::Parallel, &xs, |x| x * 2.0), map(ExecMode::Sequential, &xs, |x| x * 2.0));
    }
}
