//! The resolution experiment: identical models trained at several input
//! resolutions on the synthetic dataset (whose taxon cue is fine-scale),
//! reporting accuracy, token counts, and the t_p^2 attention-memory proxy.

use serde::Serialize;

use crate::model::{patch_count, Conviformer, ConviformerConfig};
use crate::synth::{generate, SynthSpec};
use crate::train::{evaluate, train, TrainConfig, TrainError};

#[derive(Debug, Clone, Serialize)]
pub struct ResolutionRun {
    pub resolution: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    /// Sequence length with the frontend reduction active.
    pub t_p: usize,
    /// Sequence length with the reduction pinned to 1.
    pub t_p_convit: usize,
    /// Attention-memory proxies (t_p squared).
    pub attn_proxy: u64,
    pub attn_proxy_convit: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolutionReport {
    pub resolutions: Vec<usize>,
    pub seeds: Vec<u64>,
    pub runs: Vec<ResolutionRun>,
}

impl ResolutionReport {
    /// True when, for every seed, accuracy strictly increases from the
    /// first (lowest) resolution to the last (highest).
    pub fn strictly_improves(&self) -> bool {
        self.seeds.iter().all(|&seed| {
            let per_res: Vec<f64> = self
                .resolutions
                .iter()
                .map(|&r| {
                    self.runs
                        .iter()
                        .find(|run| run.seed == seed && run.resolution == r)
                        .map(|run| run.test_accuracy)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            per_res.windows(2).all(|w| w[1] > w[0])
        })
    }
}

/// Deterministic 3:1 train/test split.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        if i % 4 == 3 {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

/// Train `model_cfg` at each resolution for each seed and report the
/// accuracy curve. `resolutions` must be sorted ascending; every resolution
/// must divide cleanly into the frontend's power-of-two reduction relative
/// to `model_cfg.base_res`.
pub fn resolution_experiment(
    synth: &SynthSpec,
    resolutions: &[usize],
    seeds: &[u64],
    model_cfg: &ConviformerConfig,
    train_cfg: &TrainConfig,
) -> Result<ResolutionReport, TrainError> {
    if resolutions.len() < 2 {
        return Err(TrainError::Config("need at least two resolutions".into()));
    }
    if resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(TrainError::Config("resolutions must be strictly ascending".into()));
    }
    let dataset = generate(synth)?;
    let (train_idx, test_idx) = split_indices(dataset.len());

    let mut runs = Vec::new();
    for &seed in seeds {
        for &res in resolutions {
            let cfg = model_cfg.clone();
            let t_p = patch_count(res, res, &cfg)?;
            let convit_cfg = ConviformerConfig { use_frontend: false, ..cfg.clone() };
            let t_p_convit = patch_count(res, res, &convit_cfg)?;

            let mut model: Conviformer<f32> = Conviformer::new(cfg, res, seed)?;
            let run_cfg = TrainConfig { seed, input_res: res, ..train_cfg.clone() };
            let outcome = train(&mut model, &dataset, Some(&train_idx), &run_cfg, None)?;
            let train_accuracy = outcome
                .history
                .iter()
                .rev()
                .find_map(|r| r.train_accuracy)
                .unwrap_or(0.0);
            let report = evaluate(&model, &dataset, Some(&test_idx), run_cfg.batch_size)?;
            runs.push(ResolutionRun {
                resolution: res,
                seed,
                test_accuracy: report.top1,
                train_accuracy,
                t_p,
                t_p_convit,
                attn_proxy: (t_p * t_p) as u64,
                attn_proxy_convit: (t_p_convit * t_p_convit) as u64,
            });
        }
    }

    Ok(ResolutionReport {
        resolutions: resolutions.to_vec(),
        seeds: seeds.to_vec(),
        runs,
    })
}
