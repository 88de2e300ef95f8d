//! Deterministic parallel ensembles.
//!
//! Trajectory i derives everything from (base seed + i), and results are
//! collected in index order, so the worker count changes wall time only,
//! never a single output byte. The LOGDISP_WORKERS environment variable is
//! the user-facing way to cap parallelism.

use rayon::prelude::*;

/// Worker cap from LOGDISP_WORKERS; `None` means let the runtime decide.
/// Invalid values are rejected rather than ignored.
pub fn workers_from_env() -> crate::Result<Option<usize>> {
    match std::env::var("LOGDISP_WORKERS") {
        Err(_) => Ok(None),
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                crate::Error::InvalidParameter(format!(
                    "LOGDISP_WORKERS must be a positive integer, got '{v}'"
                ))
            })?;
            if n == 0 {
                return Err(crate::Error::InvalidParameter(
                    "LOGDISP_WORKERS must be a positive integer, got '0'".into(),
                ));
            }
            Ok(Some(n))
        }
    }
}

/// Run `job(i)` for i in 0..count on up to `workers` threads (0 = default)
/// and return the results in index order.
pub fn run_indexed<T, F>(count: usize, workers: usize, job: F) -> crate::Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync,
{
    if workers == 1 {
        return (0..count).map(job).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| crate::Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(|i| job(i)).collect())
}
