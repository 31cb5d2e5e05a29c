//! Triple validation by textual entailment and the end-to-end object
//! prediction pipeline.
//!
//! A candidate triple is rendered into a hypothesis, scored against each
//! premise, and accepted when the mean two-class entailment probability over
//! the premises reaches the relation's threshold.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Entailment, EntailmentLogits, KnowledgeGraph, DEFAULT_TOP_N};
use crate::candidates::{gather_candidates, CandidateObject, CachedKnowledgeGraph, Stoplist};
use crate::error::{Error, Result};
use crate::retrieval::{fetch_premises, Premise, PremiseCache};
use crate::schema::Registry;
use crate::template::render_template;
use crate::types::{InputPair, PredictedObject, PredictionRecord, System, Triple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictStatus {
    Validated,
    Rejected,
    NoPremises,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiseScore {
    pub rank: usize,
    pub entail_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub triple: Triple,
    pub hypothesis: String,
    pub per_premise: Vec<PremiseScore>,
    /// Mean of `per_premise`; absent when there were no premises.
    pub mean_probability: Option<f64>,
    pub threshold: f64,
    pub accepted: bool,
    pub status: VerdictStatus,
    /// Backend failure that forced a rejection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Verdict {
    fn failed(triple: Triple, hypothesis: String, threshold: f64, error: String) -> Self {
        Verdict {
            triple,
            hypothesis,
            per_premise: Vec::new(),
            mean_probability: None,
            threshold,
            accepted: false,
            status: VerdictStatus::Rejected,
            error: Some(error),
        }
    }

    /// Re-decide acceptance under another threshold.
    pub fn with_threshold(&self, threshold: f64) -> Verdict {
        let mut v = self.clone();
        v.threshold = threshold;
        if let (Some(mean), None) = (v.mean_probability, &v.error) {
            v.accepted = mean >= threshold;
            v.status = if v.accepted { VerdictStatus::Validated } else { VerdictStatus::Rejected };
        }
        v
    }
}

pub fn make_hypothesis(triple: &Triple, registry: &Registry) -> Result<String> {
    let schema = registry.get(&triple.relation)?;
    Ok(render_template(&schema.t_h, &triple.subject, Some(&triple.object))?)
}

/// Softmax over the entailment and contradiction logits only,
/// `exp(e) / (exp(e) + exp(c))`, computed as a logistic of `e − c`.
///
/// The result is clamped into the open interval (0, 1) so that extreme
/// logit gaps do not round to exactly 0 or 1.
pub fn entail_probability(logits: &EntailmentLogits) -> Result<f64> {
    let (e, c) = (logits.entail, logits.contradiction);
    if !e.is_finite() || !c.is_finite() || !logits.neutral.is_finite() {
        return Err(Error::Invalid(format!("non-finite logits {logits:?}")));
    }
    let d = e - c;
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let z = d.exp();
        z / (1.0 + z)
    };
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Arithmetic mean that does not depend on the order of the inputs.
pub fn mean_probability(probs: &[f64]) -> Option<f64> {
    if probs.is_empty() {
        return None;
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

/// Scores one candidate triple against all premises.
pub fn validate_triple(
    triple: &Triple,
    registry: &Registry,
    premises: &[Premise],
    rte: &dyn Entailment,
    entail_threshold: f64,
) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&entail_threshold) {
        return Err(Error::Invalid(format!("entailment threshold {entail_threshold} outside [0, 1]")));
    }
    let hypothesis = make_hypothesis(triple, registry)?;
    if premises.is_empty() {
        return Ok(Verdict {
            triple: triple.clone(),
            hypothesis,
            per_premise: Vec::new(),
            mean_probability: None,
            threshold: entail_threshold,
            accepted: false,
            status: VerdictStatus::NoPremises,
            error: None,
        });
    }
    let mut per_premise = Vec::with_capacity(premises.len());
    for p in premises {
        let logits = rte.entail(&p.text, &hypothesis)?;
        per_premise.push(PremiseScore {
            rank: p.rank,
            entail_probability: entail_probability(&logits)?,
        });
    }
    let probs: Vec<f64> = per_premise.iter().map(|s| s.entail_probability).collect();
    let mean = mean_probability(&probs).expect("non-empty");
    let accepted = mean >= entail_threshold;
    Ok(Verdict {
        triple: triple.clone(),
        hypothesis,
        per_premise,
        mean_probability: Some(mean),
        threshold: entail_threshold,
        accepted,
        status: if accepted { VerdictStatus::Validated } else { VerdictStatus::Rejected },
        error: None,
    })
}

/// Everything computed for one input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRun {
    pub record: PredictionRecord,
    pub premises: Vec<Premise>,
    /// Merged, filtered candidates; `verdicts[i]` belongs to `candidates[i]`.
    pub candidates: Vec<CandidateObject>,
    pub verdicts: Vec<Verdict>,
}

/// Shared state for predicting many pairs: the registry, backends, caches
/// and retrieval settings. Safe to share across worker threads.
#[derive(Clone)]
pub struct Pipeline {
    pub registry: Registry,
    pub backends: Backends,
    pub premises: Arc<PremiseCache>,
    pub kg: Arc<dyn KnowledgeGraph>,
    pub stoplist: Stoplist,
    /// Number of premises retrieved per pair.
    pub k: usize,
    /// Fill-mask results requested before thresholding.
    pub top_n: usize,
    pub refresh: bool,
}

impl Pipeline {
    /// In-memory caches, the bundled stoplist, `k = 3`.
    pub fn new(registry: Registry, backends: Backends) -> Self {
        let kg: Arc<dyn KnowledgeGraph> = Arc::new(CachedKnowledgeGraph::in_memory(backends.kg.clone()));
        Pipeline {
            registry,
            backends,
            premises: Arc::new(PremiseCache::in_memory()),
            kg,
            stoplist: Stoplist::english(),
            k: 3,
            top_n: DEFAULT_TOP_N,
            refresh: false,
        }
    }

    pub fn premises_for(&self, pair: &InputPair) -> Result<Vec<Premise>> {
        fetch_premises(
            pair,
            &self.registry,
            self.k,
            self.backends.search.as_ref(),
            &self.premises,
            self.refresh,
        )
    }

    /// Predicts objects using the relation's configured thresholds.
    pub fn predict_objects(&self, pair: &InputPair) -> Result<PairRun> {
        let schema = self.registry.get(&pair.relation)?;
        self.run_pair(pair, schema.lm_threshold, schema.entail_threshold)
    }

    /// Runs retrieval, candidate generation and validation with explicit
    /// thresholds. Retrieval or candidate-generation failures produce a
    /// pair-level error record; entailment failures reject single triples.
    pub fn run_pair(&self, pair: &InputPair, lm_threshold: f64, entail_threshold: f64) -> Result<PairRun> {
        self.registry.get(&pair.relation)?;
        let mut record = PredictionRecord::new(System::Satori, pair);
        let fail = |mut record: PredictionRecord, premises: Vec<Premise>, e: Error| {
            log::warn!("{pair}: {e}");
            record.error = Some(e.to_string());
            record.verdicts = Some(Vec::new());
            Ok(PairRun { record, premises, candidates: Vec::new(), verdicts: Vec::new() })
        };
        let premises = match self.premises_for(pair) {
            Ok(p) => p,
            Err(e) => return fail(record, Vec::new(), e),
        };
        let set = match gather_candidates(
            pair,
            &self.registry,
            &premises,
            self.backends.mask_fill.as_ref(),
            self.kg.as_ref(),
            self.backends.ner.as_ref(),
            &self.stoplist,
            lm_threshold,
            self.top_n,
        ) {
            Ok(s) => s,
            Err(e) => return fail(record, premises, e),
        };

        let verdicts: Vec<Verdict> = set
            .candidates
            .par_iter()
            .map(|c| {
                let triple = Triple::new(&pair.subject, &pair.relation, &c.surface)?;
                match validate_triple(&triple, &self.registry, &premises, self.backends.entailment.as_ref(), entail_threshold) {
                    Ok(v) => Ok(v),
                    Err(Error::Backend(e)) => {
                        log::warn!("{pair}: validating {:?} failed: {e}", c.surface);
                        let hypothesis = make_hypothesis(&triple, &self.registry)?;
                        Ok(Verdict::failed(triple, hypothesis, entail_threshold, e.to_string()))
                    }
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;

        for (c, v) in set.candidates.iter().zip(&verdicts) {
            if v.accepted {
                record.objects.push(PredictedObject {
                    surface: c.surface.clone(),
                    sources: c.sources.clone(),
                    mean_entailment: v.mean_probability,
                    score: None,
                });
            }
        }
        record.verdicts = Some(verdicts.clone());
        Ok(PairRun {
            record,
            premises,
            candidates: set.candidates,
            verdicts,
        })
    }

    /// Predicts every pair in parallel; output order follows the input.
    pub fn predict_all(&self, pairs: &[InputPair]) -> Result<Vec<PairRun>> {
        pairs.par_iter().map(|p| self.predict_objects(p)).collect()
    }
}
