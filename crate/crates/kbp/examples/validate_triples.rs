//! Predict objects for a few pairs from the bundled corpus and show why each
//! candidate was kept or dropped.
//!
//! ```text
//! cargo run --example validate_triples
//! ```

use std::error::Error;
use std::path::PathBuf;

use kbp::cli::{Context, RunConfig};
use kbp::types::InputPair;

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus")
}

fn main() -> Result<(), Box<dyn Error>> {
    let ctx = Context::new(RunConfig::load(corpus().join("kbp.toml"))?);
    let pipeline = ctx.pipeline(ctx.registry()?)?;

    let pairs = [
        ("John Lennon", "PersonInstrument"),
        ("Frida Kahlo", "PersonPlaceOfDeath"),
        ("Switzerland", "CountryOfficialLanguage"),
        ("Bob Marley", "PersonInstrument"),
    ];

    for (subject, relation) in pairs {
        let pair = InputPair::new(subject, relation)?;
        let run = pipeline.predict_objects(&pair)?;
        println!("{pair}");
        println!("  {} premises, {} candidates", run.premises.len(), run.candidates.len());
        for v in &run.verdicts {
            let probs: Vec<String> = v.per_premise.iter().map(|p| format!("{:.2}", p.entail_probability)).collect();
            let mean = v.mean_probability.map_or("-".to_string(), |m| format!("{m:.3}"));
            println!(
                "  {:<14} {:?} mean {} (threshold {:.2}) per premise [{}]",
                v.triple.object,
                v.status,
                mean,
                v.threshold,
                probs.join(", ")
            );
        }
        println!("  objects: {:?}\n", run.record.surfaces());
    }
    Ok(())
}
