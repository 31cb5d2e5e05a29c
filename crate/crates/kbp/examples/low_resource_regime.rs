//! Calibrate on small seeded samples of the training split and average the
//! test scores over repetitions.

use std::error::Error;
use std::path::PathBuf;

use kbp::cli::{calibrate_system, Context, RunConfig};
use kbp::eval::{evaluate, Averaging};
use kbp::regime::{run_regime, RegimeSpec};
use kbp::types::System;

fn main() -> Result<(), Box<dyn Error>> {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let ctx = Context::new(RunConfig::load(corpus.join("kbp.toml"))?);
    let registry = ctx.registry()?;
    let train = ctx.calibration_records(&registry)?;
    let test = ctx.eval_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let pairs: Vec<_> = test.iter().map(|g| g.pair.clone()).collect();

    for fraction in [0.25, 0.5, 1.0] {
        let spec = RegimeSpec::new(fraction, 5, ctx.seed)?;
        let result = run_regime(&train, &spec, |sample| {
            let (overlay, _) = calibrate_system(&pipeline, System::Satori, sample)?;
            let mut tuned = pipeline.clone();
            tuned.registry = pipeline.registry.with_overlay(&overlay)?;
            let predictions: Vec<_> = tuned.predict_all(&pairs)?.into_iter().map(|r| r.record).collect();
            evaluate(&predictions, &test, Averaging::Macro)
        })?;
        let f1s: Vec<String> = result.repetitions.iter().map(|r| format!("{:.3}", r.overall.f1)).collect();
        println!("fraction {fraction:.2}: mean F1 {:.3}  [{}]", result.mean.overall.f1, f1s.join(" "));
    }
    Ok(())
}
