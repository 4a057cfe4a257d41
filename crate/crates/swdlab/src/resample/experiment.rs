//! Strategy comparison: how far do samples drift when the teacher finishes
//! generation from noisy states built with strategies A, B, and C.

use super::{downsample_area, strategy_transition, Result, Strategy};
use crate::diffusion::{euler_continue, Dataset};
use crate::network::DenoiserNet;
use crate::tensor::{NoGrad, Rng, Tensor};

#[derive(Clone, Debug)]
pub struct StrategyExperimentConfig {
    pub taus: Vec<f64>,
    /// (low, high) resolution pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Samples per cell.
    pub n: usize,
    /// Guidance scale for the continued teacher sampling.
    pub cfg_scale: f64,
    /// Segments of the full sampling grid (the continuation uses its tail).
    pub steps: usize,
}

impl Default for StrategyExperimentConfig {
    fn default() -> Self {
        StrategyExperimentConfig {
            taus: vec![0.4, 0.6, 0.8],
            pairs: vec![(32, 128), (64, 128), (96, 128)],
            n: 128,
            cfg_scale: 3.0,
            steps: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StrategyCell {
    pub strategy: Strategy,
    pub tau: f64,
    pub low: usize,
    pub high: usize,
    pub discrepancy: f64,
}

/// Runs every (strategy, tau, pair) cell: build `x_t` at the target scale,
/// let the teacher finish sampling, and score the batch with the supplied
/// discrepancy metric. Each cell draws from its own rng stream.
pub fn run_strategy_experiment(
    teacher: &DenoiserNet,
    data: &Dataset,
    cfg: &StrategyExperimentConfig,
    rng: &Rng,
    mut score: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<StrategyCell>> {
    let _g = NoGrad::new();
    let full = data.resolution();
    let mut cells = Vec::new();
    let mut cell_id = 0u64;
    for &(low, high) in &cfg.pairs {
        assert_eq!(high, full.1, "pair target must match the dataset resolution");
        let factor = full.1 / low;
        for &tau in &cfg.taus {
            for strategy in [Strategy::A, Strategy::B, Strategy::C] {
                let mut cell_rng = rng.substream(crate::diffusion::mix_stream(rng.stream(), 0xABC0 + cell_id));
                cell_id += 1;
                let idx: Vec<usize> = (0..cfg.n).map(|_| cell_rng.uniform_usize(data.len())).collect();
                let (x0_full, classes) = data.gather(&idx)?;
                let x0_low = downsample_area(&x0_full, (1, factor, factor))?;
                let x_t = strategy_transition(
                    &x0_low.detach(),
                    tau,
                    (1, high, high),
                    strategy,
                    &mut cell_rng,
                    Some(&x0_full.detach()),
                )?;
                let cls: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
                let samples = euler_continue(teacher, &x_t, tau, cfg.steps, cfg.cfg_scale, &cls)?;
                let discrepancy = score(&samples)?;
                cells.push(StrategyCell {
                    strategy,
                    tau,
                    low,
                    high,
                    discrepancy,
                });
            }
        }
    }
    Ok(cells)
}

/// CSV rows for the experiment table, deterministic formatting.
pub fn cells_to_csv(cells: &[StrategyCell]) -> String {
    let mut out = String::from("strategy,tau,low,high,discrepancy\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{:.6e}\n",
            c.strategy.as_str(),
            c.tau,
            c.low,
            c.high,
            c.discrepancy
        ));
    }
    out
}
