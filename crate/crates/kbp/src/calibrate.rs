//! Per-relation threshold search over a fixed grid.
//!
//! Scores are computed once; every grid point is then evaluated from integer
//! counts, so the sweep needs no backend calls. The objective is the
//! relation-level F1, the mean of the pair F1 values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::f1;
use crate::text::canonical;
use crate::schema::Source;
use crate::types::AliasSet;
use crate::validation::PairRun;

/// `{0.01, 0.02, ..., 0.99}`.
pub fn default_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// One pair for single-threshold calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub candidates: Vec<(String, f64)>,
    pub gold: Vec<AliasSet>,
}

/// A candidate for joint calibration. A missing LM score always passes the
/// LM threshold (the candidate came from another source); a missing
/// entailment score never passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCandidate {
    pub surface: String,
    pub lm_score: Option<f64>,
    pub entail_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPair {
    pub candidates: Vec<JointCandidate>,
    pub gold: Vec<AliasSet>,
}

impl ScoredPair {
    /// Surfaces scoring at least `threshold`, first occurrence kept.
    pub fn predict(&self, threshold: f64) -> Vec<String> {
        dedup(self.candidates.iter().filter(|(_, s)| *s >= threshold).map(|(c, _)| c))
    }
}

impl JointCandidate {
    pub fn passes(&self, lm_threshold: f64, entail_threshold: f64) -> bool {
        self.lm_score.map_or(true, |s| s >= lm_threshold) && self.entail_score.is_some_and(|s| s >= entail_threshold)
    }
}

impl JointPair {
    pub fn predict(&self, lm_threshold: f64, entail_threshold: f64) -> Vec<String> {
        dedup(
            self.candidates
                .iter()
                .filter(|c| c.passes(lm_threshold, entail_threshold))
                .map(|c| &c.surface),
        )
    }
}

impl JointPair {
    /// Calibration input from a pipeline run made with a zero LM threshold.
    /// Only candidates proposed by the LM alone carry an LM score.
    pub fn from_run(run: &PairRun, gold: Vec<AliasSet>) -> Self {
        let candidates = run
            .candidates
            .iter()
            .zip(&run.verdicts)
            .map(|(c, v)| JointCandidate {
                surface: c.surface.clone(),
                lm_score: if c.sources.iter().all(|s| *s == Source::Lm) { c.lm_score } else { None },
                entail_score: v.mean_probability.filter(|_| v.error.is_none()),
            })
            .collect();
        JointPair { candidates, gold }
    }
}

fn dedup<'a>(surfaces: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    surfaces.filter(|s| seen.insert(canonical(s))).cloned().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibrated {
    pub threshold: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointCalibrated {
    pub lm_threshold: f64,
    pub entail_threshold: f64,
    pub f1: f64,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Calibration("empty threshold grid".into()));
    }
    if grid.iter().any(|g| !g.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Calibration("grid must be finite and strictly ascending".into()));
    }
    Ok(())
}

/// Number of grid points at or below `score`: the candidate passes
/// threshold `grid[j]` iff `j < level`.
fn level(grid: &[f64], score: f64) -> Result<usize> {
    if score.is_nan() {
        return Err(Error::Calibration("NaN score".into()));
    }
    Ok(grid.partition_point(|&g| g <= score))
}

fn pair_f1(n_pred: usize, n_correct: usize, n_found: usize, n_gold: usize) -> f64 {
    let precision = if n_pred == 0 {
        if n_gold == 0 { 1.0 } else { 0.0 }
    } else {
        n_correct as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 { 1.0 } else { n_found as f64 / n_gold as f64 };
    f1(precision, recall)
}

/// Counts of items whose level exceeds `j`, for each `j` in `0..g`.
fn suffix_counts(levels: impl IntoIterator<Item = usize>, g: usize) -> Vec<usize> {
    let mut hist = vec![0usize; g + 1];
    for l in levels {
        hist[l] += 1;
    }
    let mut out = vec![0usize; g];
    let mut acc = 0;
    for j in (0..g).rev() {
        acc += hist[j + 1];
        out[j] = acc;
    }
    out
}

/// Returns the grid threshold that maximizes relation-level F1 of
/// `{surface : score ≥ T}`; ties go to the smallest threshold.
pub fn calibrate_1d(pairs: &[ScoredPair], grid: &[f64]) -> Result<Calibrated> {
    check_grid(grid)?;
    if pairs.is_empty() {
        return Err(Error::Calibration("no calibration pairs".into()));
    }
    let g = grid.len();
    let mut total = vec![0.0f64; g];
    for pair in pairs {
        // A surface is predicted when any of its copies passes.
        let mut surfaces: BTreeMap<String, usize> = BTreeMap::new();
        for (s, score) in &pair.candidates {
            let l = level(grid, *score)?;
            let e = surfaces.entry(canonical(s)).or_insert(0);
            *e = (*e).max(l);
        }
        let correct = surfaces.iter().filter(|(s, _)| pair.gold.iter().any(|a| a.matches(s)));
        let gold_levels = pair.gold.iter().map(|a| {
            surfaces.iter().filter(|(s, _)| a.matches(s)).map(|(_, &l)| l).max().unwrap_or(0)
        });
        let pred = suffix_counts(surfaces.values().copied(), g);
        let corr = suffix_counts(correct.map(|(_, &l)| l), g);
        let found = suffix_counts(gold_levels, g);
        for j in 0..g {
            total[j] += pair_f1(pred[j], corr[j], found[j], pair.gold.len());
        }
    }
    let n = pairs.len() as f64;
    let mut best = Calibrated { threshold: grid[0], f1: total[0] / n };
    for j in 1..g {
        let f = total[j] / n;
        if f > best.f1 {
            best = Calibrated { threshold: grid[j], f1: f };
        }
    }
    Ok(best)
}

/// Row-wise coverage of a union of lower-left rectangles: cell `(i, j)`
/// is covered iff `j < reach[i]`.
fn reach(points: &[(usize, usize)], g: usize) -> Vec<usize> {
    (0..g)
        .map(|i| points.iter().filter(|(a, _)| *a > i).map(|(_, b)| *b).max().unwrap_or(0))
        .collect()
}

/// Adds one to every covered cell of a `g × g` count grid.
fn add_reach(counts: &mut [u32], reach: &[usize], g: usize) {
    for (i, &r) in reach.iter().enumerate() {
        for c in &mut counts[i * g..i * g + r] {
            *c += 1;
        }
    }
}

/// Exhaustive sweep over `grid × grid` for `(T_lm, T_e)` maximizing
/// relation-level F1 of `{c : lm ≥ T_lm ∧ entail ≥ T_e}`. Ties go to the
/// smallest `T_e`, then the smallest `T_lm`.
pub fn calibrate_joint(pairs: &[JointPair], grid: &[f64]) -> Result<JointCalibrated> {
    check_grid(grid)?;
    if pairs.is_empty() {
        return Err(Error::Calibration("no calibration pairs".into()));
    }
    let g = grid.len();
    // total[i * g + j]: T_lm = grid[i], T_e = grid[j].
    let mut total = vec![0.0f64; g * g];
    let mut pred = vec![0u32; g * g];
    let mut corr = vec![0u32; g * g];
    let mut found = vec![0u32; g * g];
    for pair in pairs {
        let mut surfaces: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for c in &pair.candidates {
            let a = match c.lm_score {
                Some(s) => level(grid, s)?,
                None => g,
            };
            let b = match c.entail_score {
                Some(s) => level(grid, s)?,
                None => 0,
            };
            surfaces.entry(canonical(&c.surface)).or_default().push((a, b));
        }
        pred.fill(0);
        corr.fill(0);
        found.fill(0);
        let mut reaches = BTreeMap::new();
        for (s, points) in &surfaces {
            let r = reach(points, g);
            add_reach(&mut pred, &r, g);
            if pair.gold.iter().any(|a| a.matches(s)) {
                add_reach(&mut corr, &r, g);
            }
            reaches.insert(s.as_str(), points);
        }
        for alias_set in &pair.gold {
            let points: Vec<(usize, usize)> = reaches
                .iter()
                .filter(|(s, _)| alias_set.matches(s))
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            add_reach(&mut found, &reach(&points, g), g);
        }
        let n_gold = pair.gold.len();
        for k in 0..g * g {
            total[k] += pair_f1(pred[k] as usize, corr[k] as usize, found[k] as usize, n_gold);
        }
    }
    let n = pairs.len() as f64;
    let mut best: Option<JointCalibrated> = None;
    for j in 0..g {
        for i in 0..g {
            let f = total[i * g + j] / n;
            if best.map_or(true, |b| f > b.f1) {
                best = Some(JointCalibrated { lm_threshold: grid[i], entail_threshold: grid[j], f1: f });
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}
