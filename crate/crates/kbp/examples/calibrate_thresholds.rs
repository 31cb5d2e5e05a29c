//! Fit per-relation thresholds on the training split, then score the test
//! split before and after.
//!
//! ```text
//! cargo run --example calibrate_thresholds
//! ```

use std::error::Error;
use std::path::PathBuf;

use kbp::cli::{calibrate_system, Context, RunConfig};
use kbp::eval::{evaluate, Averaging};
use kbp::types::System;
use kbp::validation::Pipeline;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus")
}

fn test_f1(pipeline: &Pipeline, ctx: &Context) -> Result<f64, Box<dyn Error>> {
    let gold = ctx.eval_records(&pipeline.registry)?;
    let pairs: Vec<_> = gold.iter().map(|g| g.pair.clone()).collect();
    let predictions: Vec<_> = pipeline.predict_all(&pairs)?.into_iter().map(|r| r.record).collect();
    Ok(evaluate(&predictions, &gold, Averaging::Macro)?.overall.f1)
}

fn main() -> Result<(), Box<dyn Error>> {
    let ctx = Context::new(RunConfig::load(corpus().join("kbp.toml"))?);
    let registry = ctx.registry()?;
    let train = ctx.calibration_records(&registry)?;
    let mut pipeline = ctx.pipeline(registry)?;

    let before = test_f1(&pipeline, &ctx)?;
    let (overlay, summary) = calibrate_system(&pipeline, System::Satori, &train)?;

    println!("{:<26} {:>8} {:>8} {:>9}", "relation", "lm", "entail", "train F1");
    for (relation, th) in &overlay.relations {
        let default = pipeline.registry.get(relation)?;
        println!(
            "{:<26} {:>4.2}->{:<4.2} {:>4.2}->{:<4.2} {:>6.3}",
            relation,
            default.lm_threshold,
            th.lm_threshold.unwrap_or(default.lm_threshold),
            default.entail_threshold,
            th.entail_threshold.unwrap_or(default.entail_threshold),
            summary[relation].f1,
        );
    }

    pipeline.registry = pipeline.registry.with_overlay(&overlay)?;
    let after = test_f1(&pipeline, &ctx)?;
    println!("\ntest macro F1: {before:.3} with defaults, {after:.3} calibrated");
    Ok(())
}
