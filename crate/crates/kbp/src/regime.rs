//! Low-resource training regimes: repeated experiments on seeded,
//! per-relation samples of the training data, averaged.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_report, EvalReport};
use crate::types::GoldRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
}

impl RegimeSpec {
    pub const FRACTIONS: [f64; 4] = [0.05, 0.10, 0.20, 1.00];

    pub fn new(fraction: f64, repetitions: usize, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        if repetitions == 0 {
            return Err(Error::Invalid("repetitions must be at least 1".into()));
        }
        Ok(RegimeSpec { fraction, repetitions, seed })
    }

    /// Sample size for a relation with `n` subjects: `⌈fraction · n⌉`.
    pub fn sample_size(&self, n: usize) -> usize {
        // The epsilon keeps products like 0.1 · 30 from rounding up past 3.
        ((self.fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

/// Draws `⌈fraction · n_r⌉` records from every relation. Records keep their
/// input order.
pub fn sample_records(records: &[GoldRecord], spec: &RegimeSpec, rng: &mut ChaCha8Rng) -> Vec<GoldRecord> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(&r.pair.relation).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (relation, idx) in groups {
        let m = spec.sample_size(idx.len());
        if m == 0 {
            log::warn!("sample for {relation} is empty; relation skipped");
            continue;
        }
        chosen.extend(sample(rng, idx.len(), m).into_iter().map(|k| idx[k]));
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| records[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeResult {
    pub spec: RegimeSpec,
    pub mean: EvalReport,
    pub repetitions: Vec<EvalReport>,
}

/// Runs `experiment` once per repetition on a sample drawn with seed
/// `spec.seed + rep`, and averages the reports elementwise.
pub fn run_regime<F>(train: &[GoldRecord], spec: &RegimeSpec, experiment: F) -> Result<RegimeResult>
where
    F: Fn(&[GoldRecord]) -> Result<EvalReport> + Sync,
{
    if train.is_empty() {
        return Err(Error::Invalid("empty training data".into()));
    }
    let reports = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(rep as u64));
            let sample = sample_records(train, spec, &mut rng);
            experiment(&sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegimeResult { spec: *spec, mean: mean_report(&reports)?, repetitions: reports })
}
