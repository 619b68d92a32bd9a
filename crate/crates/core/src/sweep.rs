//! Grid of bbox-boost strengths × seeds, each cell a full pretrain + probe.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{Config, Mode};
use crate::data::ShapeSample;
use crate::error::{contract, Result};
use crate::probe::{linear_probe, ProbeResult};
use crate::scalar::Scalar;
use crate::train::{pretrain, split_holdout, Pretrained, RunOutputs};

pub const SWEEP_HEADER: &str = "beta,mean_accuracy,std_accuracy,runs,accuracies";

/// Worker pool capped by `AUTOMASK_THREADS` when it is set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("AUTOMASK_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| contract(format!("cannot start worker pool: {e}")))
}

/// Pretrains on the training part of `samples` and probes on the held-out
/// tail.
pub fn pretrain_and_probe<T: Scalar>(
    cfg: &Config,
    seed: u64,
    samples: &[ShapeSample],
    outputs: &RunOutputs,
) -> Result<(Pretrained<T>, ProbeResult)> {
    let (train, test) = split_holdout(samples, cfg.data.holdout_fraction);
    if test.is_empty() {
        return Err(contract("held-out split is empty; raise data.holdout_fraction"));
    }
    let run = pretrain::<T>(cfg, seed, train, None, outputs)?;
    let mae = &run.models.mae;
    let probe = linear_probe(&mae.encoder, &mae.encoder_params, train, test, &cfg.probe, seed)?;
    Ok((run, probe))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub beta: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let accs: Vec<String> = self.accuracies.iter().map(|a| format!("{a}")).collect();
        format!("{},{},{},{},{}", self.beta, self.mean, self.std, self.accuracies.len(), accs.join(";"))
    }
}

/// Runs every `(β, seed)` cell in bbox mode. Each cell uses its seed
/// unchanged, so the `β = 0` row is a plain random-masking run under the same
/// seeds. Rows come back in `betas` order.
pub fn beta_sweep<T: Scalar>(
    cfg: &Config,
    samples: &[ShapeSample],
    betas: &[f64],
    seeds: &[u64],
) -> Result<(Vec<SweepRow>, Vec<SweepCell>)> {
    if betas.is_empty() || seeds.is_empty() {
        return Err(contract("sweep needs at least one β and one seed"));
    }
    let cells: Vec<(f64, u64)> = betas.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let pool = thread_pool()?;
    let results: Vec<Result<SweepCell>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(beta, seed)| {
                let mut c = cfg.clone();
                c.train.mode = Mode::Bbox;
                c.mask.beta = beta;
                c.validate()?;
                let (_, probe) = pretrain_and_probe::<T>(&c, seed, samples, &RunOutputs::default())?;
                Ok(SweepCell {
                    beta,
                    seed,
                    accuracy: probe.accuracy,
                })
            })
            .collect()
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = betas
        .iter()
        .enumerate()
        .map(|(i, &beta)| {
            let accuracies: Vec<f64> = cells[i * seeds.len()..(i + 1) * seeds.len()].iter().map(|c| c.accuracy).collect();
            let (mean, std) = mean_std(&accuracies);
            SweepRow {
                beta,
                mean,
                std,
                accuracies,
            }
        })
        .collect();
    Ok((rows, cells))
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
    }

    #[test]
    fn csv_row_layout() {
        let r = SweepRow {
            beta: 0.5,
            mean: 0.25,
            std: 0.0,
            accuracies: vec![0.25, 0.25],
        };
        assert_eq!(r.csv_row(), "0.5,0.25,0,2,0.25;0.25");
    }
}
