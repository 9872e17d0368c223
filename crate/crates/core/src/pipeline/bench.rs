//! Timing helpers shared by the CLI `bench` command and the scaling checks.

use std::time::Instant;

use rand::Rng;

use crate::data_io::FeatureSet;
use crate::error::Result;
use crate::fisher::{fv_backward_input, fv_backward_params, fv_forward};
use crate::gmm::GmmParams;
use crate::matrix::Matrix;
use crate::par::{map_ordered, Workers};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub k: usize,
    pub d: usize,
    pub threads: usize,
    pub fwd_ms: f64,
    pub bwd_params_ms: f64,
    pub bwd_input_ms: f64,
}

pub const BENCH_HEADER: &str = "t,k,d,threads,fwd_ms,bwd_params_ms,bwd_input_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3}",
            self.t, self.k, self.d, self.threads, self.fwd_ms, self.bwd_params_ms, self.bwd_input_ms
        )
    }
}

/// A random mixture and `images` random descriptor sets of `t` points.
pub fn random_problem(t: usize, k: usize, d: usize, images: usize, seed: u64) -> Result<(GmmParams, Vec<FeatureSet>)> {
    let mut r = rng::seeded(seed, 0);
    let weights = vec![1.0 / k as f64; k];
    let means = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let variances = Matrix::from_vec(k, d, (0..k * d).map(|_| r.random_range(0.2..1.0)).collect())?;
    let sets = (0..images)
        .map(|_| FeatureSet::new(t, d, (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_>>()?;
    Ok((GmmParams::new(weights, means, variances)?, sets))
}

fn best_of<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .fold(f64::INFINITY, f64::min)
}

/// Best-of-`repeats` wall time, in milliseconds, of the forward pass and the
/// two backward passes over a batch of `images` sets.
pub fn measure(t: usize, k: usize, d: usize, threads: usize, images: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    let (gmm, sets) = random_problem(t, k, d, images, seed)?;
    let workers = Workers(threads);
    let forward = map_ordered(workers, &sets, |_, x| fv_forward(x, &gmm)).into_iter().collect::<Result<Vec<_>>>()?;
    let upstream = vec![1.0; gmm.fv_len()];
    let fwd_ms = best_of(repeats, || {
        let _ = map_ordered(workers, &sets, |_, x| fv_forward(x, &gmm).map(|r| r.0));
    });
    let bwd_params_ms = best_of(repeats, || {
        let _ = map_ordered(workers, &sets, |i, x| fv_backward_params(x, &gmm, &forward[i].1, &upstream));
    });
    let bwd_input_ms = best_of(repeats, || {
        let _ = map_ordered(workers, &sets, |i, x| fv_backward_input(x, &gmm, &forward[i].1, &upstream));
    });
    Ok(BenchRow { t, k, d, threads, fwd_ms, bwd_params_ms, bwd_input_ms })
}
