//! Deterministic, table-driven backends for hermetic runs.
//!
//! Each fixture is loaded from one JSON file in a fixtures directory:
//!
//! | file | shape |
//! |------|-------|
//! | `search.json` | `{query: [{title, url, snippet}]}` |
//! | `fill_mask.json` | `{prompt: [{token, score}]}` |
//! | `entail.json` | `{"pairs": [{premise, hypothesis, entail, contradiction, neutral}], "hypotheses": {hypothesis: logits}}` |
//! | `ner.json` | `{"entities": [{surface, label}]}` |
//! | `qa.json` | `{"pairs": [{question, context, answer, score}], "questions": {question: {answer, score}}}` |
//! | `relext.json` | `{text: [{subject, relation, object}]}` |
//! | `kg.json` | `{class: [label]}` |
//!
//! Unknown keys give empty results for search, fill-mask, NER, relation
//! extraction and the KG, and [`BackendError::UnknownKey`] for entailment
//! and QA. A missing file behaves like an empty table.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::*;
use crate::error::{Error, Result};
use crate::text::{char_len, find_mentions};

/// Logits returned when premise and hypothesis are identical.
pub const IDENTITY_LOGITS: EntailmentLogits = EntailmentLogits {
    entail: 5.0,
    contradiction: -5.0,
    neutral: 0.0,
};

fn load_table<T: DeserializeOwned + Default>(dir: &Path, file: &str) -> Result<(T, String)> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok((T::default(), format!("fixture:{file}:absent")));
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let table = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    Ok((table, format!("fixture:{file}:{hex}")))
}

fn inline_id(name: &str) -> String {
    format!("fixture:{name}:inline")
}

#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    table: HashMap<String, Vec<SearchHit>>,
    id: String,
}

impl FixtureSearch {
    pub fn new(table: HashMap<String, Vec<SearchHit>>) -> Self {
        FixtureSearch { table, id: inline_id("search") }
    }
}

impl Describe for FixtureSearch {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl WebSearch for FixtureSearch {
    fn web_search(&self, query: &str, k: usize) -> BackendResult<Vec<SearchHit>> {
        check_search(k)?;
        Ok(self
            .table
            .get(query)
            .map(|hits| hits.iter().take(k).cloned().collect())
            .unwrap_or_default())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FixtureMaskFill {
    table: HashMap<String, Vec<MaskFillResult>>,
    id: String,
}

impl FixtureMaskFill {
    pub fn new(table: HashMap<String, Vec<MaskFillResult>>) -> Self {
        FixtureMaskFill { table, id: inline_id("fill_mask") }
    }
}

impl Describe for FixtureMaskFill {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl MaskFill for FixtureMaskFill {
    fn fill_mask(&self, prompt: &str, top_n: usize) -> BackendResult<Vec<MaskFillResult>> {
        check_prompt(prompt, top_n)?;
        let results = self.table.get(prompt).cloned().unwrap_or_default();
        normalize_fill_mask(results, top_n)
    }
}

#[derive(Debug, Clone, Deserialize)]
struct EntailPair {
    premise: String,
    hypothesis: String,
    #[serde(flatten)]
    logits: EntailmentLogits,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct EntailTable {
    #[serde(default)]
    pairs: Vec<EntailPair>,
    #[serde(default)]
    hypotheses: HashMap<String, EntailmentLogits>,
}

/// Exact (premise, hypothesis) entries take precedence over per-hypothesis
/// entries that apply to any premise. Identical premise and hypothesis give
/// [`IDENTITY_LOGITS`].
#[derive(Debug, Clone, Default)]
pub struct FixtureEntailment {
    pairs: HashMap<(String, String), EntailmentLogits>,
    hypotheses: HashMap<String, EntailmentLogits>,
    id: String,
}

impl FixtureEntailment {
    pub fn new() -> Self {
        FixtureEntailment { id: inline_id("entail"), ..Default::default() }
    }

    pub fn with_pair(mut self, premise: &str, hypothesis: &str, logits: EntailmentLogits) -> Self {
        self.pairs.insert((premise.into(), hypothesis.into()), logits);
        self
    }

    pub fn with_hypothesis(mut self, hypothesis: &str, logits: EntailmentLogits) -> Self {
        self.hypotheses.insert(hypothesis.into(), logits);
        self
    }

    fn from_table(t: EntailTable, id: String) -> Self {
        FixtureEntailment {
            pairs: t
                .pairs
                .into_iter()
                .map(|p| ((p.premise, p.hypothesis), p.logits))
                .collect(),
            hypotheses: t.hypotheses,
            id,
        }
    }
}

impl Describe for FixtureEntailment {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl Entailment for FixtureEntailment {
    fn entail(&self, premise: &str, hypothesis: &str) -> BackendResult<EntailmentLogits> {
        check_entail_input(premise, hypothesis)?;
        let key = (premise.to_string(), hypothesis.to_string());
        let logits = if let Some(l) = self.pairs.get(&key) {
            *l
        } else if let Some(l) = self.hypotheses.get(hypothesis) {
            *l
        } else if premise == hypothesis {
            IDENTITY_LOGITS
        } else {
            return Err(BackendError::UnknownKey(format!("entail({premise:?}, {hypothesis:?})")));
        };
        check_logits(&logits)?;
        Ok(logits)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct GazetteerEntry {
    pub surface: String,
    pub label: NerLabel,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct NerTable {
    #[serde(default)]
    entities: Vec<GazetteerEntry>,
}

/// Gazetteer NER: every word-boundary occurrence of a listed surface is an
/// entity. Overlaps resolve to the longest match, then the leftmost.
#[derive(Debug, Clone, Default)]
pub struct FixtureNer {
    entities: Vec<GazetteerEntry>,
    id: String,
}

impl FixtureNer {
    pub fn new(entities: Vec<GazetteerEntry>) -> Self {
        FixtureNer { entities, id: inline_id("ner") }
    }
}

impl Describe for FixtureNer {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl Ner for FixtureNer {
    fn ner(&self, text: &str) -> BackendResult<Vec<NerSpan>> {
        check_non_empty_text(text)?;
        let mut hits: Vec<(usize, usize, NerLabel)> = Vec::new();
        for e in &self.entities {
            for m in find_mentions(text, &e.surface) {
                hits.push((m.start, m.end, e.label));
            }
        }
        // Longest first, then leftmost; greedily keep non-overlapping.
        hits.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)).then(a.2.cmp(&b.2)));
        let mut kept: Vec<(usize, usize, NerLabel)> = Vec::new();
        for h in hits {
            if kept.iter().all(|k| h.1 <= k.0 || h.0 >= k.1) {
                kept.push(h);
            }
        }
        kept.sort_by_key(|k| k.0);
        let spans: Vec<NerSpan> = kept
            .into_iter()
            .map(|(start, end, label)| NerSpan {
                surface: crate::text::char_slice(text, start, end).unwrap_or_default().to_string(),
                label,
                start,
                end,
            })
            .collect();
        check_spans(text, &spans)?;
        Ok(spans)
    }
}

#[derive(Debug, Clone, Deserialize)]
struct QaPair {
    question: String,
    context: String,
    answer: String,
    score: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QaEntry {
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct QaTable {
    #[serde(default)]
    pairs: Vec<QaPair>,
    #[serde(default)]
    questions: HashMap<String, QaEntry>,
}

/// Exact (question, context) entries first; otherwise a per-question entry
/// answers from any context that contains the answer text and gives
/// no-answer (score 1) elsewhere. Offsets are the first occurrence.
#[derive(Debug, Clone, Default)]
pub struct FixtureQa {
    pairs: HashMap<(String, String), QaEntry>,
    questions: HashMap<String, QaEntry>,
    id: String,
}

impl FixtureQa {
    pub fn new() -> Self {
        FixtureQa { id: inline_id("qa"), ..Default::default() }
    }

    pub fn with_pair(mut self, question: &str, context: &str, answer: &str, score: f64) -> Self {
        self.pairs.insert(
            (question.into(), context.into()),
            QaEntry { answer: answer.into(), score },
        );
        self
    }

    pub fn with_question(mut self, question: &str, answer: &str, score: f64) -> Self {
        self.questions.insert(question.into(), QaEntry { answer: answer.into(), score });
        self
    }

    fn from_table(t: QaTable, id: String) -> Self {
        FixtureQa {
            pairs: t
                .pairs
                .into_iter()
                .map(|p| ((p.question, p.context), QaEntry { answer: p.answer, score: p.score }))
                .collect(),
            questions: t.questions,
            id,
        }
    }
}

fn locate(context: &str, answer: &str, score: f64) -> Option<QaAnswer> {
    if answer.is_empty() {
        return Some(QaAnswer::no_answer(score));
    }
    let byte = context.find(answer)?;
    let start = char_len(&context[..byte]);
    Some(QaAnswer {
        answer: answer.to_string(),
        score,
        start: start as i64,
        end: (start + char_len(answer)) as i64,
    })
}

impl Describe for FixtureQa {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl QuestionAnswering for FixtureQa {
    fn qa(&self, question: &str, context: &str) -> BackendResult<QaAnswer> {
        check_qa_input(question, context)?;
        let answer = if let Some(e) = self.pairs.get(&(question.to_string(), context.to_string())) {
            locate(context, &e.answer, e.score).ok_or_else(|| {
                contract(format!("fixture answer {:?} is not in its context", e.answer))
            })?
        } else if let Some(e) = self.questions.get(question) {
            locate(context, &e.answer, e.score).unwrap_or_else(|| QaAnswer::no_answer(1.0))
        } else {
            return Err(BackendError::UnknownKey(format!("qa({question:?})")));
        };
        check_qa_answer(context, &answer)?;
        Ok(answer)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FixtureRelationExtractor {
    table: HashMap<String, Vec<ExtractedTriple>>,
    id: String,
}

impl FixtureRelationExtractor {
    pub fn new(table: HashMap<String, Vec<ExtractedTriple>>) -> Self {
        FixtureRelationExtractor { table, id: inline_id("relext") }
    }
}

impl Describe for FixtureRelationExtractor {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl RelationExtractor for FixtureRelationExtractor {
    fn extract_relations(&self, text: &str) -> BackendResult<Vec<ExtractedTriple>> {
        check_non_empty_text(text)?;
        let triples = self.table.get(text).cloned().unwrap_or_default();
        check_triples(&triples)?;
        Ok(triples)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FixtureKnowledgeGraph {
    classes: BTreeMap<String, Vec<String>>,
    id: String,
}

impl FixtureKnowledgeGraph {
    pub fn new(classes: BTreeMap<String, Vec<String>>) -> Self {
        FixtureKnowledgeGraph { classes, id: inline_id("kg") }
    }
}

impl Describe for FixtureKnowledgeGraph {
    fn describe(&self) -> String {
        self.id.clone()
    }
}

impl KnowledgeGraph for FixtureKnowledgeGraph {
    fn sparql_instances(&self, class_name: &str) -> BackendResult<Vec<String>> {
        Ok(dedup_labels(self.classes.get(class_name).cloned().unwrap_or_default()))
    }
}

/// All seven fixtures loaded from one directory.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackends {
    pub search: FixtureSearch,
    pub mask_fill: FixtureMaskFill,
    pub entailment: FixtureEntailment,
    pub ner: FixtureNer,
    pub qa: FixtureQa,
    pub relext: FixtureRelationExtractor,
    pub kg: FixtureKnowledgeGraph,
}

impl FixtureBackends {
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (search, search_id) = load_table(dir, "search.json")?;
        let (mask, mask_id) = load_table(dir, "fill_mask.json")?;
        let (entail, entail_id): (EntailTable, _) = load_table(dir, "entail.json")?;
        let (ner, ner_id): (NerTable, _) = load_table(dir, "ner.json")?;
        let (qa, qa_id): (QaTable, _) = load_table(dir, "qa.json")?;
        let (relext, relext_id) = load_table(dir, "relext.json")?;
        let (kg, kg_id) = load_table(dir, "kg.json")?;
        Ok(FixtureBackends {
            search: FixtureSearch { table: search, id: search_id },
            mask_fill: FixtureMaskFill { table: mask, id: mask_id },
            entailment: FixtureEntailment::from_table(entail, entail_id),
            ner: FixtureNer { entities: ner.entities, id: ner_id },
            qa: FixtureQa::from_table(qa, qa_id),
            relext: FixtureRelationExtractor { table: relext, id: relext_id },
            kg: FixtureKnowledgeGraph { classes: kg, id: kg_id },
        })
    }

    pub fn into_backends(self) -> Backends {
        Backends {
            search: Arc::new(self.search),
            mask_fill: Arc::new(self.mask_fill),
            entailment: Arc::new(self.entailment),
            ner: Arc::new(self.ner),
            qa: Arc::new(self.qa),
            relext: Arc::new(self.relext),
            kg: Arc::new(self.kg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mf(token: &str, score: f64) -> MaskFillResult {
        MaskFillResult { token: token.into(), score }
    }

    fn lennon_mask() -> FixtureMaskFill {
        FixtureMaskFill::new(
            [(
                "John Lennon plays {MASK}".to_string(),
                vec![
                    mf("guitar", 0.30),
                    mf("piano", 0.22),
                    mf("drums", 0.12),
                    mf("himself", 0.08),
                    mf("harmonica", 0.05),
                ],
            )]
            .into(),
        )
    }

    #[test]
    fn fill_mask_fixture() {
        let m = lennon_mask();
        let r = m.fill_mask("John Lennon plays {MASK}", 100).unwrap();
        let tokens: Vec<_> = r.iter().map(|r| r.token.as_str()).collect();
        assert_eq!(tokens, ["guitar", "piano", "drums", "himself", "harmonica"]);
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));

        let top = m.fill_mask("John Lennon plays {MASK}", 1).unwrap();
        assert_eq!(top, vec![mf("guitar", 0.30)]);

        assert!(m.fill_mask("Ringo Starr plays {MASK}", 5).unwrap().is_empty());
        assert!(matches!(m.fill_mask("no mask", 5), Err(BackendError::Contract(_))));
    }

    fn softmax2(l: EntailmentLogits) -> f64 {
        1.0 / (1.0 + (l.contradiction - l.entail).exp())
    }

    #[test]
    fn entailment_fixture() {
        let premise = "John Lennon played guitar in the Beatles.";
        let e = FixtureEntailment::new()
            .with_pair(premise, "John Lennon plays guitar", EntailmentLogits { entail: 3.0, contradiction: -1.0, neutral: 0.5 })
            .with_pair(premise, "John Lennon plays banjo", EntailmentLogits { entail: -2.0, contradiction: 2.5, neutral: 0.0 });

        assert!(softmax2(e.entail(premise, "John Lennon plays guitar").unwrap()) > 0.9);
        assert!(softmax2(e.entail(premise, "John Lennon plays banjo").unwrap()) < 0.1);
        let same = e.entail("Same sentence.", "Same sentence.").unwrap();
        assert!(same.entail > same.contradiction);
        assert!(matches!(e.entail(premise, "unknown"), Err(BackendError::UnknownKey(_))));
        assert!(matches!(e.entail("", "x"), Err(BackendError::Contract(_))));
    }

    #[test]
    fn ner_fixture() {
        let n = FixtureNer::new(vec![
            GazetteerEntry { surface: "John Lennon".into(), label: NerLabel::Per },
            GazetteerEntry { surface: "New York".into(), label: NerLabel::Loc },
            GazetteerEntry { surface: "New York City".into(), label: NerLabel::Loc },
        ]);
        let text = "John Lennon died in New York City";
        let spans = n.ner(text).unwrap();
        assert_eq!(
            spans,
            vec![
                NerSpan { surface: "John Lennon".into(), label: NerLabel::Per, start: 0, end: 11 },
                NerSpan { surface: "New York City".into(), label: NerLabel::Loc, start: 20, end: 33 },
            ]
        );
        for s in &spans {
            assert_eq!(crate::text::char_slice(text, s.start, s.end).unwrap(), s.surface);
        }
        assert!(matches!(n.ner(""), Err(BackendError::Contract(_))));
        assert!(n.ner("nothing to see here").unwrap().is_empty());
    }

    #[test]
    fn qa_fixture() {
        let q = "What instruments plays John Lennon?";
        let ctx = "Lennon played guitar, keyboard, harmonica and horn.";
        let qa = FixtureQa::new()
            .with_pair(q, ctx, "guitar, keyboard, harmonica and horn", 0.87)
            .with_pair(q, "nothing relevant", "", 1.0)
            .with_pair(q, "mismatch", "absent", 0.5);
        let a = qa.qa(q, ctx).unwrap();
        assert_eq!(a.answer, "guitar, keyboard, harmonica and horn");
        assert_eq!(a.start, 14);
        assert_eq!(qa.qa(q, "nothing relevant").unwrap(), QaAnswer::no_answer(1.0));
        assert!(matches!(qa.qa(q, "mismatch"), Err(BackendError::Contract(_))));
        assert!(matches!(qa.qa("other?", ctx), Err(BackendError::UnknownKey(_))));
    }

    #[test]
    fn relext_fixture() {
        let text = "John Lennon played the guitar.";
        let t = ExtractedTriple {
            subject: "John Lennon".into(),
            relation_label: "instrument".into(),
            object: "guitar".into(),
        };
        let r = FixtureRelationExtractor::new([(text.to_string(), vec![t.clone()])].into());
        assert_eq!(r.extract_relations(text).unwrap(), vec![t]);
        assert!(r.extract_relations("other text").unwrap().is_empty());
        assert!(r.extract_relations(" ").is_err());
    }

    #[test]
    fn kg_fixture() {
        let kg = FixtureKnowledgeGraph::new(
            [(
                "MusicalInstrument".to_string(),
                vec!["guitar".into(), "piano".into(), "guitar".into(), "harmonica".into()],
            )]
            .into(),
        );
        assert_eq!(kg.sparql_instances("MusicalInstrument").unwrap(), ["guitar", "piano", "harmonica"]);
        assert!(kg.sparql_instances("Spaceship").unwrap().is_empty());
    }

    #[test]
    fn search_fixture_truncates() {
        let hit = |i: usize| SearchHit {
            title: format!("t{i}"),
            url: format!("https://example.org/{i}"),
            snippet: format!("snippet {i}"),
        };
        let s = FixtureSearch::new([("q".to_string(), (1..=5).map(hit).collect())].into());
        assert_eq!(s.web_search("q", 3).unwrap().len(), 3);
        assert_eq!(s.web_search("q", 3).unwrap()[0], hit(1));
        assert!(s.web_search("other", 3).unwrap().is_empty());
        assert!(s.web_search("q", 0).is_err());
    }

    #[test]
    fn fixtures_are_pure() {
        let m = lennon_mask();
        assert_eq!(
            m.fill_mask("John Lennon plays {MASK}", 3).unwrap(),
            m.fill_mask("John Lennon plays {MASK}", 3).unwrap()
        );
    }
}
