//! Run all four systems over the test split and print their reports.

use std::error::Error;
use std::path::PathBuf;

use kbp::baselines::{BaselineOptions, RelationMap};
use kbp::cli::{Context, RunConfig};
use kbp::eval::{evaluate, Averaging};
use kbp::types::System;

fn main() -> Result<(), Box<dyn Error>> {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let ctx = Context::new(RunConfig::load(corpus.join("kbp.toml"))?);
    let registry = ctx.registry()?;
    let gold = ctx.eval_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let options = BaselineOptions {
        relation_map: RelationMap::load(corpus.join("relation_map.json"))?,
        ..Default::default()
    };

    for system in System::ALL {
        let predictions = gold
            .iter()
            .map(|g| pipeline.predict_system(system, &g.pair, &options))
            .collect::<Result<Vec<_>, _>>()?;
        let report = evaluate(&predictions, &gold, Averaging::Macro)?;
        println!("== {system}");
        print!("{}", report.to_table());
        if !report.unsupported.is_empty() {
            println!("unsupported: {:?}", report.unsupported);
        }
        println!();
    }
    Ok(())
}
