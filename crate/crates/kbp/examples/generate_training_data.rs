//! Build fine-tuning sets for the four model types from the training split
//! and the cached premises.
//!
//! ```text
//! cargo run --example generate_training_data
//! ```

use std::error::Error;
use std::path::PathBuf;

use kbp::baselines::RelationMap;
use kbp::candidates::Stoplist;
use kbp::cli::{Context, RunConfig};
use kbp::retrieval::PremiseCache;
use kbp::traingen::{gen_entailment, gen_mlm, gen_qa, gen_re};

fn main() -> Result<(), Box<dyn Error>> {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let config = RunConfig::load(corpus.join("kbp.toml"))?;
    let k = config.k;
    let ctx = Context::new(config);
    let registry = ctx.registry()?;
    let train = ctx.calibration_records(&registry)?;
    let backends = ctx.config.build_backends()?;
    let cache = PremiseCache::open_read_only(corpus.join("premises.jsonl"))?;
    let relation_map = RelationMap::load(corpus.join("relation_map.json"))?;

    let (mlm, stats) = gen_mlm(&train, &registry)?;
    println!("mlm: {} prompts", stats.instances);
    println!("  {} -> {}", mlm[0].prompt, mlm[0].target);

    let (nli, stats) = gen_entailment(&train, &cache, backends.mask_fill.as_ref(), &registry, &Stoplist::english(), k)?;
    println!(
        "entailment: {} positives, {} negatives from the LM, {} from other subjects",
        stats.positives, stats.negatives_from_lm, stats.negatives_from_dataset
    );
    for inst in nli.iter().take(2) {
        println!("  {:?}: {}\n    => {}", inst.label, inst.premise, inst.hypothesis);
    }

    let (qa, stats) = gen_qa(&train, &cache, &registry, k)?;
    println!("qa: {} instances, {} without an answer", stats.instances, stats.qa_no_answer);
    if let Some(inst) = qa.iter().find(|q| q.answer_start() >= 0) {
        println!("  {} -> {:?} at {}", inst.question, inst.answer(), inst.answer_start());
    }

    let (re, stats) = gen_re(&train, &cache, &registry, &relation_map, k)?;
    println!("re: {} passages, {} pairs skipped as unmapped", stats.instances, stats.re_unmapped);
    if let Some(inst) = re.first() {
        for t in &inst.triples {
            println!("  ({}, {}, {})", t.subject, t.relation, t.object);
        }
    }
    Ok(())
}
