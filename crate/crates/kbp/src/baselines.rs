//! Comparison systems: fill-mask thresholding, extractive QA over the
//! premises, and relation extraction over the premises.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::{MaskFill, QuestionAnswering, RelationExtractor};
use crate::candidates::Stoplist;
use crate::error::{Error, Result};
use crate::retrieval::Premise;
use crate::schema::{Registry, Source};
use crate::template::render_template;
use crate::text::{canonical, same};
use crate::types::{InputPair, PredictedObject, PredictionRecord, System};
use crate::validation::Pipeline;

/// Dataset relation → extractor relation label; `None` marks a relation the
/// extractor cannot express.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationMap(BTreeMap<String, Option<String>>);

impl RelationMap {
    pub fn new(entries: BTreeMap<String, Option<String>>) -> Self {
        RelationMap(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: RelationMap = serde_json::from_str(&text)?;
        if let Some((k, _)) = map.0.iter().find(|(_, v)| v.as_deref().is_some_and(|l| l.trim().is_empty())) {
            return Err(Error::Config(format!("{}: empty label for {k}", path.display())));
        }
        Ok(map)
    }

    /// The extractor label, or `None` when unmapped or absent.
    pub fn label(&self, relation: &str) -> Option<&str> {
        self.0.get(relation).and_then(|l| l.as_deref())
    }
}

fn object(surface: &str, source: Source, score: Option<f64>) -> PredictedObject {
    PredictedObject {
        surface: surface.to_string(),
        sources: BTreeSet::from([source]),
        mean_entailment: None,
        score,
    }
}

/// Fill-mask tokens scoring at least the relation's LM threshold, minus
/// stopwords. No mention filter and no validation.
pub fn lm_baseline(
    pair: &InputPair,
    registry: &Registry,
    mask_fill: &dyn MaskFill,
    stoplist: &Stoplist,
    top_n: usize,
) -> Result<PredictionRecord> {
    let schema = registry.get(&pair.relation)?;
    let mut record = PredictionRecord::new(System::LmBaseline, pair);
    for (token, score) in lm_scores(pair, registry, mask_fill, stoplist, top_n)? {
        if score >= schema.lm_threshold {
            record.push_dedup(object(&token, Source::Lm, Some(score)));
        }
    }
    Ok(record)
}

/// All stopword-filtered fill-mask tokens with their scores, best first.
pub fn lm_scores(
    pair: &InputPair,
    registry: &Registry,
    mask_fill: &dyn MaskFill,
    stoplist: &Stoplist,
    top_n: usize,
) -> Result<Vec<(String, f64)>> {
    let schema = registry.get(&pair.relation)?;
    let prompt = render_template(&schema.t_lm, &pair.subject, None)?;
    Ok(mask_fill
        .fill_mask(&prompt, top_n)?
        .into_iter()
        .filter(|r| !stoplist.is_stop(&r.token))
        .map(|r| (r.token, r.score))
        .collect())
}

/// Splits an enumeration such as `"guitar, keyboard and horn"` into items.
pub fn split_list_answer(answer: &str) -> Vec<String> {
    let mut parts: Vec<&str> = answer.split(',').collect();
    let last = parts.pop().unwrap_or_default();
    let mut items: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
    let lower = last.to_lowercase();
    let trimmed = lower.trim_start();
    // Serial comma: ", and horn".
    let last = if !items.is_empty() && (trimmed.starts_with("and ") || trimmed.starts_with("or ")) {
        let lead = last.len() - last.trim_start().len();
        let word = if trimmed.starts_with("and ") { 4 } else { 3 };
        &last[lead + word..]
    } else {
        last
    };
    let lower = last.to_lowercase();
    let cut = [" and ", " or "].iter().filter_map(|c| lower.rfind(c).map(|i| (i, c.len()))).max();
    match cut {
        // Lowercasing can change byte lengths; only split when offsets agree.
        Some((i, n)) if lower.len() == last.len() => {
            items.push(last[..i].to_string());
            items.push(last[i + n..].to_string());
        }
        _ => items.push(last.to_string()),
    }
    items
        .into_iter()
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Every list item extracted from the per-premise QA answers, with the
/// score of the span it came from.
pub fn qa_scores(
    pair: &InputPair,
    premises: &[Premise],
    qa: &dyn QuestionAnswering,
    registry: &Registry,
) -> Result<Vec<(String, f64)>> {
    let schema = registry.get(&pair.relation)?;
    let question = render_template(&schema.t_qa, &pair.subject, None)?;
    let mut out = Vec::new();
    for p in premises {
        let a = qa.qa(&question, &p.text)?;
        if a.answer.trim().is_empty() {
            continue;
        }
        out.extend(split_list_answer(&a.answer).into_iter().map(|item| (item, a.score)));
    }
    Ok(out)
}

/// Items from answers scoring at least `threshold`, deduplicated
/// case-insensitively and sorted by canonical form. A repeated item keeps
/// its best score and its lexicographically smallest surface.
pub fn qa_select(scored: &[(String, f64)], threshold: f64) -> Vec<(String, f64)> {
    let mut best: BTreeMap<String, (String, f64)> = BTreeMap::new();
    for (item, score) in scored.iter().filter(|(_, s)| *s >= threshold) {
        let e = best.entry(canonical(item)).or_insert_with(|| (item.clone(), *score));
        if *item < e.0 {
            e.0 = item.clone();
        }
        e.1 = e.1.max(*score);
    }
    best.into_values().collect()
}

/// Extractive QA per premise; answers at or above the relation's QA
/// threshold are split into list items and merged.
pub fn qa_baseline(
    pair: &InputPair,
    premises: &[Premise],
    qa: &dyn QuestionAnswering,
    registry: &Registry,
) -> Result<PredictionRecord> {
    let schema = registry.get(&pair.relation)?;
    let scored = qa_scores(pair, premises, qa, registry)?;
    let mut record = PredictionRecord::new(System::QaBaseline, pair);
    record.objects = qa_select(&scored, schema.qa_threshold)
        .into_iter()
        .map(|(s, score)| object(&s, Source::Qa, Some(score)))
        .collect();
    Ok(record)
}

/// Objects of extracted triples whose relation label matches the mapped
/// label of the pair's relation.
pub fn re_baseline(
    pair: &InputPair,
    premises: &[Premise],
    relext: &dyn RelationExtractor,
    relation_map: &RelationMap,
    require_subject_match: bool,
) -> Result<PredictionRecord> {
    let mut record = PredictionRecord::new(System::ReBaseline, pair);
    let Some(label) = relation_map.label(&pair.relation) else {
        record.unsupported = true;
        return Ok(record);
    };
    for p in premises {
        for t in relext.extract_relations(&p.text)? {
            if !same(&t.relation_label, label) || (require_subject_match && !same(&t.subject, &pair.subject)) {
                continue;
            }
            record.push_dedup(object(&t.object, Source::Re, None));
        }
    }
    Ok(record)
}

/// Baseline options shared by every pair of a run.
#[derive(Debug, Clone, Default)]
pub struct BaselineOptions {
    pub relation_map: RelationMap,
    pub require_subject_match: bool,
}

impl Pipeline {
    /// Runs any system for one pair. Backend and retrieval failures become
    /// an error record rather than aborting the batch.
    pub fn predict_system(&self, system: System, pair: &InputPair, options: &BaselineOptions) -> Result<PredictionRecord> {
        self.registry.get(&pair.relation)?;
        let result = match system {
            System::Satori => return Ok(self.predict_objects(pair)?.record),
            System::LmBaseline => lm_baseline(
                pair,
                &self.registry,
                self.backends.mask_fill.as_ref(),
                &self.stoplist,
                self.top_n,
            ),
            System::QaBaseline => self
                .premises_for(pair)
                .and_then(|ps| qa_baseline(pair, &ps, self.backends.qa.as_ref(), &self.registry)),
            System::ReBaseline => self.premises_for(pair).and_then(|ps| {
                re_baseline(
                    pair,
                    &ps,
                    self.backends.relext.as_ref(),
                    &options.relation_map,
                    options.require_subject_match,
                )
            }),
        };
        match result {
            Ok(r) => Ok(r),
            Err(e @ (Error::Backend(_) | Error::Retrieval { .. })) => {
                log::warn!("{pair}: {e}");
                let mut r = PredictionRecord::new(system, pair);
                r.error = Some(e.to_string());
                Ok(r)
            }
            Err(e) => Err(e),
        }
    }
}
