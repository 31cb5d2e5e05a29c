//! Candidate objects from the fill-mask LM, the knowledge graph and NER over
//! premises, with the stopword and mention filters and a provenance-keeping
//! merge.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::backends::{Describe, KnowledgeGraph, MaskFill, Ner, BackendResult};
use crate::error::{Error, Result};
use crate::io::read_jsonl;
use crate::retrieval::Premise;
use crate::schema::{NerLabel, Registry, RelationSchema, Source};
use crate::template::render_template;
use crate::text::{canonical, is_mentioned};
use crate::types::InputPair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateObject {
    pub surface: String,
    pub sources: BTreeSet<Source>,
    /// Present exactly when LM is among the sources.
    pub lm_score: Option<f64>,
}

impl CandidateObject {
    pub fn lm(surface: &str, score: f64) -> Self {
        CandidateObject {
            surface: surface.trim().to_string(),
            sources: [Source::Lm].into(),
            lm_score: Some(score),
        }
    }

    pub fn kg(surface: &str) -> Self {
        Self::unscored(surface, Source::Kg)
    }

    pub fn ner(surface: &str) -> Self {
        Self::unscored(surface, Source::Ner)
    }

    fn unscored(surface: &str, source: Source) -> Self {
        CandidateObject {
            surface: surface.trim().to_string(),
            sources: [source].into(),
            lm_score: None,
        }
    }
}

/// Lowercased stop words. Surfaces made only of punctuation, symbols or
/// whitespace are always treated as stop words.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stoplist(HashSet<String>);

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

impl Stoplist {
    pub fn empty() -> Self {
        Stoplist::default()
    }

    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Stoplist(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(canonical)
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        Stoplist(words.into_iter().map(canonical).collect())
    }

    pub fn is_stop(&self, surface: &str) -> bool {
        let c = canonical(surface);
        c.chars().all(|ch| !ch.is_alphanumeric()) || self.0.contains(&c)
    }
}

fn dedup_first(cands: Vec<CandidateObject>) -> Vec<CandidateObject> {
    let mut seen = HashSet::new();
    cands
        .into_iter()
        .filter(|c| !c.surface.is_empty() && seen.insert(canonical(&c.surface)))
        .collect()
}

/// Fill-mask tokens scoring at least `lm_threshold`, by descending score.
pub fn lm_candidates(
    pair: &InputPair,
    registry: &Registry,
    mask_fill: &dyn MaskFill,
    lm_threshold: f64,
    top_n: usize,
) -> Result<Vec<CandidateObject>> {
    let schema = registry.get(&pair.relation)?;
    let prompt = render_template(&schema.t_lm, &pair.subject, None)?;
    let results = mask_fill.fill_mask(&prompt, top_n)?;
    Ok(dedup_first(
        results
            .into_iter()
            .filter(|r| r.score >= lm_threshold)
            .map(|r| CandidateObject::lm(&r.token, r.score))
            .collect(),
    ))
}

/// Instances of every range class, deduplicated case-insensitively.
pub fn kg_candidates(schema: &RelationSchema, kg: &dyn KnowledgeGraph) -> Result<Vec<CandidateObject>> {
    let mut out = Vec::new();
    for class in &schema.range_classes {
        out.extend(kg.sparql_instances(class)?.iter().map(|l| CandidateObject::kg(l)));
    }
    Ok(dedup_first(out))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NerCandidates {
    pub candidates: Vec<CandidateObject>,
    /// Premises skipped because the NER backend failed on them.
    pub failed_premises: usize,
}

/// Entities in the premises whose NER label corresponds to a range class.
pub fn ner_candidates(
    premises: &[Premise],
    schema: &RelationSchema,
    ner: &dyn Ner,
    class_labels: &BTreeMap<String, NerLabel>,
) -> NerCandidates {
    let wanted = schema.ner_labels(class_labels);
    let mut out = NerCandidates::default();
    let mut found = Vec::new();
    for p in premises {
        match ner.ner(&p.text) {
            Ok(spans) => found.extend(
                spans
                    .into_iter()
                    .filter(|s| wanted.contains(&s.label))
                    .map(|s| CandidateObject::ner(&s.surface)),
            ),
            Err(e) => {
                log::warn!("NER failed on premise {} of {:?}: {e}", p.rank, p.query);
                out.failed_premises += 1;
            }
        }
    }
    out.candidates = dedup_first(found);
    out
}

/// Drops stop words and pure-punctuation surfaces.
pub fn filter_stopwords(cands: Vec<CandidateObject>, stoplist: &Stoplist) -> Vec<CandidateObject> {
    cands.into_iter().filter(|c| !stoplist.is_stop(&c.surface)).collect()
}

/// Keeps candidates mentioned (word boundary, case-insensitive) in at least
/// one premise.
pub fn filter_mentioned(cands: Vec<CandidateObject>, premises: &[Premise]) -> Vec<CandidateObject> {
    cands
        .into_iter()
        .filter(|c| premises.iter().any(|p| is_mentioned(&p.text, &c.surface)))
        .collect()
}

/// Case-insensitive union keeping the first surface seen, the union of
/// sources and the highest LM score.
///
/// Output order: entries with an LM source by descending score, then KG
/// entries, then NER-only entries, each group alphabetical.
pub fn merge_candidates(lists: Vec<Vec<CandidateObject>>) -> Vec<CandidateObject> {
    let mut merged: Vec<CandidateObject> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for c in lists.into_iter().flatten() {
        let key = canonical(&c.surface);
        if key.is_empty() {
            continue;
        }
        match index.get(&key) {
            Some(&i) => {
                let m = &mut merged[i];
                m.sources.extend(c.sources.iter().copied());
                m.lm_score = crate::types::max_opt(m.lm_score, c.lm_score);
            }
            None => {
                index.insert(key, merged.len());
                merged.push(c);
            }
        }
    }
    let group = |c: &CandidateObject| {
        if c.sources.contains(&Source::Lm) {
            0
        } else if c.sources.contains(&Source::Kg) {
            1
        } else {
            2
        }
    };
    merged.sort_by(|a, b| {
        group(a)
            .cmp(&group(b))
            .then_with(|| {
                let sa = a.lm_score.unwrap_or(0.0);
                let sb = b.lm_score.unwrap_or(0.0);
                sb.total_cmp(&sa)
            })
            .then_with(|| canonical(&a.surface).cmp(&canonical(&b.surface)))
            .then_with(|| a.surface.cmp(&b.surface))
    });
    merged
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<CandidateObject>,
    pub ner_failed_premises: usize,
}

/// Runs every configured source for one pair, filters and merges.
///
/// LM and KG candidates pass the stopword and mention filters; NER
/// candidates come from the premises and only pass the stopword filter.
#[allow(clippy::too_many_arguments)]
pub fn gather_candidates(
    pair: &InputPair,
    registry: &Registry,
    premises: &[Premise],
    mask_fill: &dyn MaskFill,
    kg: &dyn KnowledgeGraph,
    ner: &dyn Ner,
    stoplist: &Stoplist,
    lm_threshold: f64,
    top_n: usize,
) -> Result<CandidateSet> {
    let schema = registry.get(&pair.relation)?;
    let mut lists = Vec::new();
    let mut failed = 0;
    if schema.sources.contains(&Source::Lm) {
        let lm = lm_candidates(pair, registry, mask_fill, lm_threshold, top_n)?;
        lists.push(filter_mentioned(filter_stopwords(lm, stoplist), premises));
    }
    if schema.sources.contains(&Source::Kg) {
        let kgc = kg_candidates(schema, kg)?;
        lists.push(filter_mentioned(filter_stopwords(kgc, stoplist), premises));
    }
    if schema.sources.contains(&Source::Ner) {
        let n = ner_candidates(premises, schema, ner, registry.class_labels());
        failed = n.failed_premises;
        lists.push(filter_stopwords(n.candidates, stoplist));
    }
    Ok(CandidateSet {
        candidates: merge_candidates(lists),
        ner_failed_premises: failed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KgCacheLine {
    class: String,
    labels: Vec<String>,
}

/// Per-class instance cache in front of a knowledge graph, persisted as
/// JSONL `{"class", "labels"}`. Each class is fetched at most once.
pub struct CachedKnowledgeGraph {
    inner: Arc<dyn KnowledgeGraph>,
    path: Option<PathBuf>,
    read_only: bool,
    entries: RwLock<BTreeMap<String, Vec<String>>>,
    writer: Mutex<()>,
}

impl CachedKnowledgeGraph {
    pub fn in_memory(inner: Arc<dyn KnowledgeGraph>) -> Self {
        CachedKnowledgeGraph {
            inner,
            path: None,
            read_only: false,
            entries: RwLock::default(),
            writer: Mutex::default(),
        }
    }

    pub fn open(inner: Arc<dyn KnowledgeGraph>, path: impl AsRef<Path>, read_only: bool) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = BTreeMap::new();
        if path.exists() {
            for line in read_jsonl::<KgCacheLine>(path)? {
                entries.insert(line.class, line.labels);
            }
        }
        Ok(CachedKnowledgeGraph {
            inner,
            path: Some(path.to_path_buf()),
            read_only,
            entries: RwLock::new(entries),
            writer: Mutex::default(),
        })
    }

    pub fn cached_classes(&self) -> Vec<String> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    fn store(&self, class: &str, labels: &[String]) -> Result<()> {
        let _w = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(class) {
            return Ok(());
        }
        self.entries.write().unwrap().insert(class.to_string(), labels.to_vec());
        if let (Some(path), false) = (&self.path, self.read_only) {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&KgCacheLine { class: class.into(), labels: labels.to_vec() })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

impl Describe for CachedKnowledgeGraph {
    fn describe(&self) -> String {
        format!("cached:{}", self.inner.describe())
    }
}

impl KnowledgeGraph for CachedKnowledgeGraph {
    fn sparql_instances(&self, class_name: &str) -> BackendResult<Vec<String>> {
        if let Some(labels) = self.entries.read().unwrap().get(class_name) {
            return Ok(labels.clone());
        }
        let labels = self.inner.sparql_instances(class_name)?;
        if let Err(e) = self.store(class_name, &labels) {
            log::warn!("could not persist KG cache entry for {class_name:?}: {e}");
        }
        Ok(labels)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use chrono::Utc;

    use super::*;
    use crate::backends::fixture::{FixtureKnowledgeGraph, FixtureMaskFill, FixtureNer, GazetteerEntry};
    use crate::backends::{BackendError, MaskFillResult, NerSpan};
    use crate::schema::tests::instrument_schema;

    pub(crate) fn premise(rank: usize, text: &str) -> Premise {
        Premise {
            query: "q".into(),
            rank,
            title: String::new(),
            url: String::new(),
            text: text.into(),
            retrieved_at: Utc::now(),
        }
    }

    fn surfaces(c: &[CandidateObject]) -> Vec<&str> {
        c.iter().map(|c| c.surface.as_str()).collect()
    }

    fn registry() -> Registry {
        let death = RelationSchema {
            name: "PersonPlaceOfDeath".into(),
            range_classes: vec!["City".into()],
            sources: [Source::Ner].into(),
            ..instrument_schema()
        };
        let employer = RelationSchema {
            name: "PersonEmployer".into(),
            range_classes: vec!["Company".into()],
            sources: [Source::Ner].into(),
            ..instrument_schema()
        };
        Registry::new(
            vec![instrument_schema(), death, employer],
            [("City".to_string(), NerLabel::Loc), ("Company".to_string(), NerLabel::Org)].into(),
        )
        .unwrap()
    }

    fn mask() -> FixtureMaskFill {
        FixtureMaskFill::new(
            [(
                "John Lennon plays {MASK}.".to_string(),
                vec![
                    MaskFillResult { token: "guitar".into(), score: 0.30 },
                    MaskFillResult { token: "piano".into(), score: 0.22 },
                    MaskFillResult { token: "himself".into(), score: 0.05 },
                ],
            )]
            .into(),
        )
    }

    fn lennon() -> InputPair {
        InputPair::new("John Lennon", "PersonInstrument").unwrap()
    }

    #[test]
    fn lm_threshold() {
        let r = registry();
        let c = lm_candidates(&lennon(), &r, &mask(), 0.10, 100).unwrap();
        assert_eq!(surfaces(&c), ["guitar", "piano"]);
        assert_eq!(c[0].lm_score, Some(0.30));
        assert_eq!(lm_candidates(&lennon(), &r, &mask(), 0.0, 100).unwrap().len(), 3);
        assert!(lm_candidates(&lennon(), &r, &mask(), 1.0, 100).unwrap().is_empty());
    }

    #[test]
    fn kg_union_dedups() {
        let kg = FixtureKnowledgeGraph::new(
            [
                ("MusicalInstrument".to_string(), vec!["guitar".into(), "Piano".into()]),
                ("Keyboard".to_string(), vec!["piano".into(), "organ".into()]),
            ]
            .into(),
        );
        let schema = RelationSchema {
            range_classes: vec!["MusicalInstrument".into(), "Keyboard".into()],
            ..instrument_schema()
        };
        let c = kg_candidates(&schema, &kg).unwrap();
        assert_eq!(surfaces(&c), ["guitar", "Piano", "organ"]);
        assert!(c.iter().all(|c| c.lm_score.is_none() && c.sources == [Source::Kg].into()));
        assert!(kg_candidates(&schema, &FixtureKnowledgeGraph::default()).unwrap().is_empty());
    }

    #[test]
    fn ner_by_range_class() {
        let ner = FixtureNer::new(vec![
            GazetteerEntry { surface: "John Lennon".into(), label: NerLabel::Per },
            GazetteerEntry { surface: "New York City".into(), label: NerLabel::Loc },
        ]);
        let r = registry();
        let ps = [premise(1, "John Lennon died in New York City")];
        let death = r.get("PersonPlaceOfDeath").unwrap();
        let got = ner_candidates(&ps, death, &ner, r.class_labels());
        assert_eq!(surfaces(&got.candidates), ["New York City"]);
        let employer = r.get("PersonEmployer").unwrap();
        assert!(ner_candidates(&ps, employer, &ner, r.class_labels()).candidates.is_empty());
        assert!(ner_candidates(&[], death, &ner, r.class_labels()).candidates.is_empty());
    }

    struct FailsOn(&'static str);
    impl Describe for FailsOn {
        fn describe(&self) -> String {
            "fails".into()
        }
    }
    impl Ner for FailsOn {
        fn ner(&self, text: &str) -> BackendResult<Vec<NerSpan>> {
            if text.contains(self.0) {
                Err(BackendError::Transport("boom".into()))
            } else {
                Ok(vec![NerSpan { surface: "Paris".into(), label: NerLabel::Loc, start: 0, end: 5 }])
            }
        }
    }

    #[test]
    fn failing_premise_is_skipped_and_counted() {
        let r = registry();
        let ps = [premise(1, "Paris is nice"), premise(2, "bad premise")];
        let got = ner_candidates(&ps, r.get("PersonPlaceOfDeath").unwrap(), &FailsOn("bad"), r.class_labels());
        assert_eq!(got.failed_premises, 1);
        assert_eq!(surfaces(&got.candidates), ["Paris"]);
    }

    #[test]
    fn stopwords() {
        let stop = Stoplist::from_words(["the"]);
        let c = vec![CandidateObject::lm("guitar", 0.3), CandidateObject::lm("the", 0.2), CandidateObject::lm(",", 0.1)];
        assert_eq!(surfaces(&filter_stopwords(c.clone(), &stop)), ["guitar"]);
        assert_eq!(surfaces(&filter_stopwords(c, &Stoplist::empty())), ["guitar", "the"]);
        let clean = vec![CandidateObject::kg("guitar"), CandidateObject::kg("piano")];
        assert_eq!(filter_stopwords(clean.clone(), &stop), clean);
        assert!(Stoplist::english().is_stop("The"));
        assert!(Stoplist::english().is_stop(" ... "));
    }

    #[test]
    fn mentions() {
        let ps = [premise(1, "He plays guitar and piano on stage.")];
        let c = vec![CandidateObject::lm("guitar", 0.3), CandidateObject::lm("gui", 0.2)];
        assert_eq!(surfaces(&filter_mentioned(c.clone(), &ps)), ["guitar"]);
        assert!(filter_mentioned(c, &[]).is_empty());
    }

    #[test]
    fn merge_order_and_provenance() {
        let merged = merge_candidates(vec![
            vec![CandidateObject::lm("guitar", 0.3), CandidateObject::lm("drums", 0.1)],
            vec![CandidateObject::kg("Guitar"), CandidateObject::kg("banjo"), CandidateObject::kg("accordion")],
            vec![CandidateObject::ner("Zither"), CandidateObject::ner("bass")],
        ]);
        assert_eq!(surfaces(&merged), ["guitar", "drums", "accordion", "banjo", "bass", "Zither"]);
        assert_eq!(merged[0].sources, [Source::Lm, Source::Kg].into());
        assert_eq!(merged[0].lm_score, Some(0.3));
        assert!(merge_candidates(vec![]).is_empty());
    }

    #[test]
    fn gather_applies_filters_per_source() {
        let r = registry();
        let kg = FixtureKnowledgeGraph::new(
            [("MusicalInstrument".to_string(), vec!["guitar".into(), "harmonica".into(), "oboe".into()])].into(),
        );
        let ps = [premise(1, "John Lennon played guitar, piano and harmonica.")];
        let set = gather_candidates(&lennon(), &r, &ps, &mask(), &kg, &FixtureNer::default(), &Stoplist::english(), 0.1, 100)
            .unwrap();
        assert_eq!(surfaces(&set.candidates), ["guitar", "piano", "harmonica"]);
    }

    struct Counting(AtomicUsize, FixtureKnowledgeGraph);
    impl Describe for Counting {
        fn describe(&self) -> String {
            "counting".into()
        }
    }
    impl KnowledgeGraph for Counting {
        fn sparql_instances(&self, class: &str) -> BackendResult<Vec<String>> {
            self.0.fetch_add(1, Ordering::SeqCst);
            self.1.sparql_instances(class)
        }
    }

    #[test]
    fn kg_cache_fetches_once_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.jsonl");
        let inner = Arc::new(Counting(
            AtomicUsize::new(0),
            FixtureKnowledgeGraph::new([("C".to_string(), vec!["a".into(), "b".into()])].into()),
        ));
        let cached = CachedKnowledgeGraph::open(inner.clone(), &path, false).unwrap();
        assert_eq!(cached.sparql_instances("C").unwrap(), ["a", "b"]);
        assert_eq!(cached.sparql_instances("C").unwrap(), ["a", "b"]);
        assert!(cached.sparql_instances("Unknown").unwrap().is_empty());
        assert_eq!(inner.0.load(Ordering::SeqCst), 2);

        let offline = CachedKnowledgeGraph::open(Arc::new(FixtureKnowledgeGraph::default()), &path, true).unwrap();
        assert_eq!(offline.sparql_instances("C").unwrap(), ["a", "b"]);
        assert_eq!(offline.cached_classes(), ["C", "Unknown"]);
    }
}
