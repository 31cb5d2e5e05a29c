//! Plug a hand-written entailment model into the pipeline. The scorer below
//! treats a hypothesis as entailed when the premise contains most of its
//! word stems. It needs no model server and is much weaker than a trained
//! model, which the side-by-side reports make plain.
//!
//! ```text
//! cargo run --example custom_entailment
//! ```

use std::collections::HashSet;
use std::error::Error;
use std::path::PathBuf;
use std::sync::Arc;

use kbp::backends::{BackendResult, Describe, Entailment, EntailmentLogits};
use kbp::cli::{Context, RunConfig};
use kbp::eval::{evaluate, Averaging};

struct WordOverlap;

fn words(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(|w| w.to_lowercase().chars().take(5).collect())
        .collect()
}

impl Describe for WordOverlap {
    fn describe(&self) -> String {
        "word-overlap".into()
    }
}

impl Entailment for WordOverlap {
    fn entail(&self, premise: &str, hypothesis: &str) -> BackendResult<EntailmentLogits> {
        let p = words(premise);
        let h = words(hypothesis);
        let covered = h.iter().filter(|w| p.contains(*w)).count() as f64 / h.len().max(1) as f64;
        let margin = 6.0 * (covered - 0.6);
        Ok(EntailmentLogits { entail: margin, contradiction: -margin, neutral: 0.0 })
    }
}

fn main() -> Result<(), Box<dyn Error>> {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let ctx = Context::new(RunConfig::load(corpus.join("kbp.toml"))?);
    let registry = ctx.registry()?;
    let gold = ctx.eval_records(&registry)?;
    let pairs: Vec<_> = gold.iter().map(|g| g.pair.clone()).collect();

    let fixture = ctx.pipeline(registry)?;
    let mut custom = fixture.clone();
    custom.backends.entailment = Arc::new(WordOverlap);

    for (name, pipeline) in [("fixture model", &fixture), ("word overlap", &custom)] {
        let predictions: Vec<_> = pipeline.predict_all(&pairs)?.into_iter().map(|r| r.record).collect();
        let report = evaluate(&predictions, &gold, Averaging::Macro)?;
        println!("== {name} ({})", pipeline.backends.entailment.describe());
        print!("{}", report.to_table());
        println!();
    }
    Ok(())
}
