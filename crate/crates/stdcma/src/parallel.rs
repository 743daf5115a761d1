//! Worker-count policy and data-parallel evaluation.

use stdcma_core::attention::AttentionMode;
use stdcma_core::dataset::SegSample;
use stdcma_core::metrics::ConfusionMatrix;
use stdcma_core::network::NetworkParams;
use stdcma_core::train::evaluate;

use crate::error::AppError;

pub const THREADS_ENV: &str = "STDCMA_THREADS";

/// Worker cap from `STDCMA_THREADS`, else every available core.
pub fn worker_count() -> Result<usize, AppError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(AppError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Splits `samples` into contiguous chunks, one per worker, and merges the
/// partial confusion matrices. Counts are integers, so the result does not
/// depend on the worker count.
pub fn evaluate_parallel(
    params: &NetworkParams,
    samples: &[SegSample],
    scales: &[f64],
    mode: AttentionMode,
    workers: usize,
) -> Result<ConfusionMatrix, AppError> {
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return Ok(evaluate(params, samples, scales, mode)?);
    }
    let chunk = samples.len().div_ceil(workers);
    let partials: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || evaluate(params, part, scales, mode)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = ConfusionMatrix::new(params.config.classes);
    for p in partials {
        total.merge(&p?)?;
    }
    Ok(total)
}
