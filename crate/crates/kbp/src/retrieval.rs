//! Search queries, premise retrieval and the offline premise cache.
//!
//! The cache is a JSONL file with one snippet per line:
//! `{"query", "rank", "title", "url", "snippet", "retrieved_at"}`. It is keyed
//! by the exact query string. A cached query is never re-fetched unless the
//! caller asks for a refresh.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::backends::WebSearch;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, to_jsonl, write_atomic};
use crate::schema::Registry;
use crate::template::render_template;
use crate::types::InputPair;

/// One retrieved snippet used as an entailment premise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Premise {
    pub query: String,
    pub rank: usize,
    pub title: String,
    pub url: String,
    #[serde(rename = "snippet")]
    pub text: String,
    pub retrieved_at: DateTime<Utc>,
}

pub fn build_query(pair: &InputPair, registry: &Registry) -> Result<String> {
    let schema = registry.get(&pair.relation)?;
    Ok(render_template(&schema.t_search, &pair.subject, None)?)
}

/// Query-keyed premise store, optionally backed by a JSONL file.
///
/// Reads take a shared lock; writes go through a single writer lock that
/// appends new queries and rewrites the file when a query is replaced.
#[derive(Debug, Default)]
pub struct PremiseCache {
    path: Option<PathBuf>,
    read_only: bool,
    entries: RwLock<BTreeMap<String, Vec<Premise>>>,
    writer: Mutex<()>,
}

impl PremiseCache {
    pub fn in_memory() -> Self {
        PremiseCache::default()
    }

    /// Opens a cache file for reading and writing; a missing file starts empty.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = if path.exists() { load_entries(path)? } else { BTreeMap::new() };
        Ok(PremiseCache {
            path: Some(path.to_path_buf()),
            read_only: false,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    /// Opens an existing cache file; [`PremiseCache::put`] will keep new
    /// entries in memory only.
    pub fn open_read_only(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = load_entries(path)?;
        Ok(PremiseCache {
            path: Some(path.to_path_buf()),
            read_only: true,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn from_premises(premises: Vec<Premise>) -> Result<Self> {
        let cache = PremiseCache::in_memory();
        *cache.entries.write().unwrap() = group(premises, Path::new("<memory>"))?;
        Ok(cache)
    }

    pub fn get(&self, query: &str) -> Option<Vec<Premise>> {
        self.entries.read().unwrap().get(query).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn queries(&self) -> Vec<String> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    /// Stores the premises for a query, replacing earlier ones.
    pub fn put(&self, query: &str, premises: Vec<Premise>) -> Result<()> {
        let _w = self.writer.lock().unwrap();
        let replaced = self
            .entries
            .write()
            .unwrap()
            .insert(query.to_string(), premises.clone())
            .is_some();
        let Some(path) = self.path.as_ref().filter(|_| !self.read_only) else {
            return Ok(());
        };
        if replaced {
            let all: Vec<Premise> = self.entries.read().unwrap().values().flatten().cloned().collect();
            write_atomic(path, to_jsonl(&all)?.as_bytes())
        } else {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(to_jsonl(&premises)?.as_bytes())
                .map_err(|e| Error::io(path, e))
        }
    }
}

fn load_entries(path: &Path) -> Result<BTreeMap<String, Vec<Premise>>> {
    group(read_jsonl(path)?, path)
}

fn group(premises: Vec<Premise>, origin: &Path) -> Result<BTreeMap<String, Vec<Premise>>> {
    let mut map: BTreeMap<String, Vec<Premise>> = BTreeMap::new();
    for p in premises {
        let list = map.entry(p.query.clone()).or_default();
        if p.text.trim().is_empty() {
            return Err(Error::Invalid(format!("{}: empty snippet for {:?}", origin.display(), p.query)));
        }
        if p.rank == 0 || list.iter().any(|q| q.rank == p.rank) {
            return Err(Error::Invalid(format!(
                "{}: invalid or duplicate rank {} for {:?}",
                origin.display(),
                p.rank,
                p.query
            )));
        }
        list.push(p);
    }
    for list in map.values_mut() {
        list.sort_by_key(|p| p.rank);
    }
    Ok(map)
}

/// Top-`k` premises for a pair, from the cache when present.
///
/// On a miss (or with `refresh`) the search backend is queried and non-empty
/// results are stored. Fewer than `k` hits are returned as they are; an empty
/// result is not an error.
pub fn fetch_premises(
    pair: &InputPair,
    registry: &Registry,
    k: usize,
    search: &dyn WebSearch,
    cache: &PremiseCache,
    refresh: bool,
) -> Result<Vec<Premise>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let query = build_query(pair, registry)?;
    if !refresh {
        if let Some(mut cached) = cache.get(&query) {
            cached.truncate(k);
            return Ok(cached);
        }
    }
    let hits = search
        .web_search(&query, k)
        .map_err(|source| Error::Retrieval { query: query.clone(), source })?;
    let now = Utc::now().trunc_subsecs(0);
    let premises: Vec<Premise> = hits
        .into_iter()
        .take(k)
        .enumerate()
        .filter(|(_, h)| !h.snippet.trim().is_empty())
        .map(|(i, h)| Premise {
            query: query.clone(),
            rank: i + 1,
            title: h.title,
            url: h.url,
            text: h.snippet,
            retrieved_at: now,
        })
        .collect();
    if !premises.is_empty() {
        cache.put(&query, premises.clone())?;
    }
    Ok(premises)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::fixture::FixtureSearch;
    use crate::backends::{BackendError, BackendResult, Describe, SearchHit};
    use crate::schema::tests::instrument_schema;

    fn registry() -> Registry {
        Registry::new(vec![instrument_schema()], Default::default()).unwrap()
    }

    fn hit(i: usize) -> SearchHit {
        SearchHit {
            title: format!("Title {i}"),
            url: format!("https://example.org/{i}"),
            snippet: format!("John Lennon snippet {i}"),
        }
    }

    fn search(n: usize) -> FixtureSearch {
        FixtureSearch::new([("John Lennon plays instrument".to_string(), (1..=n).map(hit).collect())].into())
    }

    fn lennon() -> InputPair {
        InputPair::new("John Lennon", "PersonInstrument").unwrap()
    }

    struct Down;
    impl Describe for Down {
        fn describe(&self) -> String {
            "down".into()
        }
    }
    impl WebSearch for Down {
        fn web_search(&self, _: &str, _: usize) -> BackendResult<Vec<SearchHit>> {
            Err(BackendError::Transport("offline".into()))
        }
    }

    #[test]
    fn query_from_template() {
        assert_eq!(build_query(&lennon(), &registry()).unwrap(), "John Lennon plays instrument");
        let p = InputPair::new("Mary  Jane", "PersonInstrument").unwrap();
        assert_eq!(build_query(&p, &registry()).unwrap(), "Mary  Jane plays instrument");
        let p = InputPair::new("x", "Nope").unwrap();
        assert!(matches!(build_query(&p, &registry()), Err(Error::UnknownRelation(_))));
    }

    #[test]
    fn truncates_to_k_with_ranks() {
        let cache = PremiseCache::in_memory();
        let ps = fetch_premises(&lennon(), &registry(), 3, &search(5), &cache, false).unwrap();
        assert_eq!(ps.iter().map(|p| p.rank).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(ps[0].text, "John Lennon snippet 1");
    }

    #[test]
    fn sparse_results_are_not_padded() {
        let cache = PremiseCache::in_memory();
        let ps = fetch_premises(&lennon(), &registry(), 3, &search(1), &cache, false).unwrap();
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn cache_hits_skip_the_backend() {
        let cache = PremiseCache::in_memory();
        let first = fetch_premises(&lennon(), &registry(), 3, &search(5), &cache, false).unwrap();
        let again = fetch_premises(&lennon(), &registry(), 3, &Down, &cache, false).unwrap();
        assert_eq!(first, again);
        // Refresh is explicit and goes to the backend.
        assert!(matches!(
            fetch_premises(&lennon(), &registry(), 3, &Down, &cache, true),
            Err(Error::Retrieval { .. })
        ));
    }

    #[test]
    fn backend_failure_with_empty_cache() {
        let cache = PremiseCache::in_memory();
        assert!(matches!(
            fetch_premises(&lennon(), &registry(), 3, &Down, &cache, false),
            Err(Error::Retrieval { .. })
        ));
        let empty = fetch_premises(&lennon(), &registry(), 3, &FixtureSearch::default(), &cache, false).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn file_round_trip_preserves_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("premises.jsonl");
        let weird = SearchHit {
            title: "t".into(),
            url: "u".into(),
            snippet: "  Lennon — “quotes”, tabs\tand ünïcode  ".into(),
        };
        let s = FixtureSearch::new([("John Lennon plays instrument".to_string(), vec![weird.clone(), hit(2)])].into());
        {
            let cache = PremiseCache::open(&path).unwrap();
            fetch_premises(&lennon(), &registry(), 3, &s, &cache, false).unwrap();
        }
        let cache = PremiseCache::open_read_only(&path).unwrap();
        let got = cache.get("John Lennon plays instrument").unwrap();
        assert_eq!(got[0].text, weird.snippet);
        assert_eq!(got.len(), 2);

        // Refreshing rewrites instead of appending duplicates.
        let rw = PremiseCache::open(&path).unwrap();
        fetch_premises(&lennon(), &registry(), 3, &search(3), &rw, true).unwrap();
        let reread = PremiseCache::open(&path).unwrap();
        assert_eq!(reread.get("John Lennon plays instrument").unwrap().len(), 3);
    }

    #[test]
    fn read_only_cache_does_not_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("premises.jsonl");
        std::fs::write(&path, "").unwrap();
        let cache = PremiseCache::open_read_only(&path).unwrap();
        fetch_premises(&lennon(), &registry(), 3, &search(2), &cache, false).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn duplicate_ranks_rejected() {
        let p = Premise {
            query: "q".into(),
            rank: 1,
            title: String::new(),
            url: String::new(),
            text: "t".into(),
            retrieved_at: Utc::now(),
        };
        assert!(PremiseCache::from_premises(vec![p.clone(), p]).is_err());
    }
}
