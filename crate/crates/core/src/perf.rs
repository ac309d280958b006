//! Timing of training iterations (forward, backward and optimizer update)
//! at several batch sizes and thread counts.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Network;
use crate::model::params::msra_init;
use crate::tensor::FeatureMap;
use crate::train::{Optimizer, OptimizerKind};

pub const DEFAULT_BATCHES: [usize; 4] = [50, 100, 150, 200];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub batch: usize,
    pub threads: usize,
    /// Timed iterations (after one warm-up iteration).
    pub iterations: usize,
    /// Measured mean scaled to 100 iterations.
    pub seconds_per_100: f64,
}

/// Times `iterations` training steps of `config` for every
/// `(batch, threads)` pair on random inputs.
pub fn bench_training(
    config: &ModelConfig,
    batches: &[usize],
    threads: &[usize],
    iterations: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if iterations == 0 || batches.is_empty() || threads.is_empty() {
        return Err(Error::config("benchmark needs iterations, batch sizes and thread counts"));
    }
    let mut rows = Vec::new();
    for &t in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::config(format!("thread pool of {t}: {e}")))?;
        for &batch in batches {
            let secs = pool.install(|| time_steps(config, batch, iterations, seed))?;
            rows.push(BenchRow {
                batch,
                threads: t,
                iterations,
                seconds_per_100: secs / iterations as f64 * 100.0,
            });
        }
    }
    Ok(rows)
}

fn time_steps(config: &ModelConfig, batch: usize, iterations: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(config.clone(), msra_init::<f32>(config, seed))?;
    let shape = config.input_shape.with_batch(batch);
    let x = FeatureMap::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..config.classes())).collect();
    let mut opt = Optimizer::new(OptimizerKind::Adam, &net.params());
    let mut step = |net: &mut Network<f32>| -> Result<()> {
        let g = net.loss_and_gradients(&x, &labels)?.gradients.kernels;
        opt.update(net, &g, 1e-4);
        Ok(())
    };
    step(&mut net)?;
    let start = Instant::now();
    for _ in 0..iterations {
        step(&mut net)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// `(t(largest) / t(smallest)) / (largest / smallest)` for one thread count;
/// 1.0 is perfectly linear in batch size.
pub fn batch_linearity(rows: &[BenchRow], threads: usize) -> Option<f64> {
    let mut sel: Vec<&BenchRow> = rows.iter().filter(|r| r.threads == threads).collect();
    sel.sort_by_key(|r| r.batch);
    let (lo, hi) = (sel.first()?, sel.last()?);
    if lo.batch == hi.batch {
        return None;
    }
    Some((hi.seconds_per_100 / lo.seconds_per_100) / (hi.batch as f64 / lo.batch as f64))
}

/// Single-thread time over `threads`-thread time at `batch`.
pub fn speedup(rows: &[BenchRow], batch: usize, threads: usize) -> Option<f64> {
    let find = |t: usize| rows.iter().find(|r| r.batch == batch && r.threads == t);
    Some(find(1)?.seconds_per_100 / find(threads)?.seconds_per_100)
}

/// Markdown table: one row per batch size, one column per thread count.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut threads: Vec<usize> = rows.iter().map(|r| r.threads).collect();
    threads.sort_unstable();
    threads.dedup();
    let mut batches: Vec<usize> = rows.iter().map(|r| r.batch).collect();
    batches.sort_unstable();
    batches.dedup();
    let mut out = String::from("| batch |");
    for t in &threads {
        out.push_str(&format!(" {t} thread(s) s/100 it |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(threads.len()));
    out.push('\n');
    for b in &batches {
        out.push_str(&format!("| {b} |"));
        for t in &threads {
            match rows.iter().find(|r| r.batch == *b && r.threads == *t) {
                Some(r) => out.push_str(&format!(" {:.2} |", r.seconds_per_100)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
