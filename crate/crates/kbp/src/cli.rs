//! The `kbp` command line: run configuration, subcommands and run manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::fixture::FixtureBackends;
use crate::backends::http::{ApiKey, SparqlConfig};
use crate::backends::{
    Backends, HttpModelClient, HttpSearch, KnowledgeGraph, Retry, RetryPolicy, SparqlEndpoint, DEFAULT_TOP_N,
};
use crate::baselines::{lm_scores, qa_scores, qa_select, BaselineOptions, RelationMap};
use crate::calibrate::{calibrate_1d, calibrate_joint, default_grid, JointPair, ScoredPair};
use crate::candidates::{CachedKnowledgeGraph, Stoplist};
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, pair_scores, report, Averaging, EvalReport, PairScore};
use crate::io::{read_jsonl, to_jsonl, write_atomic};
use crate::regime::{run_regime, RegimeResult, RegimeSpec};
use crate::retrieval::{fetch_premises, PremiseCache};
use crate::schema::{load_registry, Registry, Source, ThresholdOverlay, Thresholds};
use crate::traingen::{gen_entailment, gen_mlm, gen_qa, gen_re, TraingenStats};
use crate::types::{GoldRecord, InputPair, PredictionRecord, System};
use crate::validation::Pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fixture,
    Http,
}

/// Per-capability mode overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modes {
    pub search: Option<Mode>,
    pub fill_mask: Option<Mode>,
    pub entail: Option<Mode>,
    pub ner: Option<Mode>,
    pub qa: Option<Mode>,
    pub relext: Option<Mode>,
    pub kg: Option<Mode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub modes: Modes,
    /// Directory of fixture tables.
    pub fixtures: Option<PathBuf>,
    /// Base URL of the model server.
    pub model_url: Option<String>,
    pub search_url: Option<String>,
    pub sparql: Option<SparqlConfig>,
    /// Environment variable holding an API key sent with HTTP requests.
    pub api_key_env: Option<String>,
    #[serde(default = "default_api_key_header")]
    pub api_key_header: String,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_api_key_header() -> String {
    "Authorization".into()
}

fn default_retries() -> u32 {
    3
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            mode: Mode::Fixture,
            modes: Modes::default(),
            fixtures: None,
            model_url: None,
            search_url: None,
            sparql: None,
            api_key_env: None,
            api_key_header: default_api_key_header(),
            retries: default_retries(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    /// Fractions to run when `--fraction` is not given.
    #[serde(default)]
    pub fractions: Vec<f64>,
    pub repetitions: Option<usize>,
}

/// Run configuration, read from TOML. Relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub relations: PathBuf,
    /// Evaluation split.
    pub dataset: PathBuf,
    /// Split used for calibration, training data and regimes; defaults to `dataset`.
    pub calibration_dataset: Option<PathBuf>,
    pub premise_cache: PathBuf,
    pub kg_cache: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub stopwords: Option<PathBuf>,
    pub relation_map: Option<PathBuf>,
    /// Threshold overlay applied on top of the relation config.
    pub overlay: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Candidate sources for every relation, replacing the configured ones.
    pub sources: Option<BTreeSet<Source>>,
    #[serde(default = "yes")]
    pub require_subject_match: bool,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub regime: RegimeConfig,
    #[serde(skip)]
    pub sha256: String,
}

fn default_k() -> usize {
    3
}

fn default_top_n() -> usize {
    DEFAULT_TOP_N
}

fn yes() -> bool {
    true
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {msg}", path.display()))
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let mut cfg = RunConfig::parse_str(&text).map_err(|e| config_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check().map_err(|e| config_err(path, e))?;
        Ok(cfg)
    }

    fn parse_str(text: &str) -> std::result::Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.sha256 = hex(&Sha256::digest(text.as_bytes()));
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.relations);
        fix(&mut self.dataset);
        fix(&mut self.premise_cache);
        fix(&mut self.output_dir);
        for p in [
            &mut self.calibration_dataset,
            &mut self.kg_cache,
            &mut self.stopwords,
            &mut self.relation_map,
            &mut self.overlay,
            &mut self.backends.fixtures,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if self.top_n == 0 {
            return Err("top_n must be at least 1".into());
        }
        let b = &self.backends;
        let m = &b.modes;
        let http = |o: Option<Mode>| o.unwrap_or(b.mode) == Mode::Http;
        if [m.fill_mask, m.entail, m.ner, m.qa, m.relext].into_iter().any(http) && b.model_url.is_none() {
            return Err("http model backends need backends.model_url".into());
        }
        if http(m.search) && b.search_url.is_none() {
            return Err("http search needs backends.search_url".into());
        }
        if http(m.kg) && b.sparql.is_none() {
            return Err("http knowledge graph needs [backends.sparql]".into());
        }
        let mut required: Vec<&Path> = vec![&self.relations, &self.dataset];
        required.extend(
            [&self.calibration_dataset, &self.stopwords, &self.relation_map, &self.overlay]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        if self.uses(Mode::Fixture) {
            match &self.backends.fixtures {
                Some(d) => required.push(d),
                None => return Err("fixture mode needs backends.fixtures".into()),
            }
        }
        if let Some(p) = required.iter().find(|p| !p.exists()) {
            return Err(format!("{} does not exist", p.display()));
        }
        Ok(())
    }

    fn uses(&self, mode: Mode) -> bool {
        let m = &self.backends.modes;
        [m.search, m.fill_mask, m.entail, m.ner, m.qa, m.relext, m.kg]
            .into_iter()
            .any(|o| o.unwrap_or(self.backends.mode) == mode)
    }

    pub fn calibration_split(&self) -> &Path {
        self.calibration_dataset.as_deref().unwrap_or(&self.dataset)
    }

    /// Builds every backend, wrapping HTTP ones with retries.
    pub fn build_backends(&self) -> Result<Backends> {
        let b = &self.backends;
        let fixtures = match &b.fixtures {
            Some(d) if self.uses(Mode::Fixture) => FixtureBackends::load_dir(d)?,
            _ => FixtureBackends::default(),
        };
        let key = match &b.api_key_env {
            Some(var) => Some(ApiKey {
                header: b.api_key_header.clone(),
                value: std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?,
            }),
            None => None,
        };
        let policy = RetryPolicy { max_retries: b.retries, ..RetryPolicy::default() };
        let model = b.model_url.as_deref().map(|u| {
            let c = HttpModelClient::new(u);
            Retry::new(match &key {
                Some(k) => c.with_api_key(k.clone()),
                None => c,
            }, policy)
        });
        let mode = |o: Option<Mode>| o.unwrap_or(b.mode);
        let m = &b.modes;
        macro_rules! pick {
            ($mode:expr, $fixture:expr, $http:expr) => {
                match $mode {
                    Mode::Fixture => Arc::new($fixture) as _,
                    Mode::Http => Arc::new($http) as _,
                }
            };
        }
        let model = || model.clone().expect("checked at load");
        Ok(Backends {
            search: pick!(mode(m.search), fixtures.search, {
                let s = HttpSearch::new(b.search_url.as_deref().expect("checked at load"));
                Retry::new(match &key {
                    Some(k) => s.with_api_key(k.clone()),
                    None => s,
                }, policy)
            }),
            mask_fill: pick!(mode(m.fill_mask), fixtures.mask_fill, model()),
            entailment: pick!(mode(m.entail), fixtures.entailment, model()),
            ner: pick!(mode(m.ner), fixtures.ner, model()),
            qa: pick!(mode(m.qa), fixtures.qa, model()),
            relext: pick!(mode(m.relext), fixtures.relext, model()),
            kg: pick!(mode(m.kg), fixtures.kg, {
                Retry::new(SparqlEndpoint::new(b.sparql.clone().expect("checked at load")), policy)
            }),
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance written next to every output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<System>,
    pub config_sha256: String,
    pub seed: u64,
    pub k: usize,
    pub backends: BTreeMap<String, String>,
    pub thresholds: BTreeMap<String, Thresholds>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
    pub created_at: chrono::DateTime<chrono::Utc>,
}

fn thresholds_of(registry: &Registry) -> BTreeMap<String, Thresholds> {
    registry
        .iter()
        .map(|s| {
            (
                s.name.clone(),
                Thresholds {
                    lm_threshold: Some(s.lm_threshold),
                    entail_threshold: Some(s.entail_threshold),
                    qa_threshold: Some(s.qa_threshold),
                },
            )
        })
        .collect()
}

/// Everything a subcommand needs, built once from the config.
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub relation: Option<String>,
    pub overlay: Option<PathBuf>,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        let seed = config.seed;
        let overlay = config.overlay.clone();
        Context { config, seed, relation: None, overlay }
    }

    pub fn registry(&self) -> Result<Registry> {
        let mut registry = load_registry(&self.config.relations)?;
        if let Some(sources) = &self.config.sources {
            registry = registry.with_sources(sources)?;
        }
        if let Some(path) = &self.overlay {
            registry = registry.with_overlay(&ThresholdOverlay::load(path)?)?;
        }
        Ok(registry)
    }

    fn records(&self, path: &Path, registry: &Registry) -> Result<Vec<GoldRecord>> {
        let mut records = load_dataset(path, registry)?;
        if let Some(r) = &self.relation {
            registry.get(r)?;
            records.retain(|g| &g.pair.relation == r);
        }
        records.sort_by(|a, b| order(&a.pair, &b.pair));
        Ok(records)
    }

    pub fn eval_records(&self, registry: &Registry) -> Result<Vec<GoldRecord>> {
        self.records(&self.config.dataset, registry)
    }

    pub fn calibration_records(&self, registry: &Registry) -> Result<Vec<GoldRecord>> {
        self.records(self.config.calibration_split(), registry)
    }

    fn stoplist(&self) -> Result<Stoplist> {
        match &self.config.stopwords {
            Some(p) => Stoplist::load(p),
            None => Ok(Stoplist::english()),
        }
    }

    fn relation_map(&self) -> Result<RelationMap> {
        match &self.config.relation_map {
            Some(p) => RelationMap::load(p),
            None => Ok(RelationMap::default()),
        }
    }

    /// Pipeline over the read-only premise cache. In fixture mode the cache
    /// must exist; otherwise a missing cache starts empty in memory.
    pub fn pipeline(&self, registry: Registry) -> Result<Pipeline> {
        let backends = self.config.build_backends()?;
        let cache_path = &self.config.premise_cache;
        let premises = if cache_path.exists() {
            PremiseCache::open_read_only(cache_path)?
        } else if self.config.uses(Mode::Fixture) {
            return Err(Error::Config(format!(
                "premise cache {} not found; run fetch-premises first",
                cache_path.display()
            )));
        } else {
            PremiseCache::in_memory()
        };
        let kg: Arc<dyn KnowledgeGraph> = match &self.config.kg_cache {
            Some(p) if p.exists() => Arc::new(CachedKnowledgeGraph::open(backends.kg.clone(), p, true)?),
            _ => Arc::new(CachedKnowledgeGraph::in_memory(backends.kg.clone())),
        };
        Ok(Pipeline {
            registry,
            backends,
            premises: Arc::new(premises),
            kg,
            stoplist: self.stoplist()?,
            k: self.config.k,
            top_n: self.config.top_n,
            refresh: false,
        })
    }

    fn output(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn manifest(
        &self,
        command: &str,
        system: Option<System>,
        registry: &Registry,
        backends: &Backends,
        outputs: Vec<PathBuf>,
        details: serde_json::Value,
    ) -> Manifest {
        Manifest {
            command: command.into(),
            system,
            config_sha256: self.config.sha256.clone(),
            seed: self.seed,
            k: self.config.k,
            backends: backends.describe().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            thresholds: thresholds_of(registry),
            outputs,
            details,
            created_at: chrono::Utc::now(),
        }
    }

    fn write_manifest(&self, name: &str, manifest: &Manifest) -> Result<PathBuf> {
        let path = self.output(&format!("{name}.manifest.json"));
        write_atomic(&path, (serde_json::to_string_pretty(manifest)? + "\n").as_bytes())?;
        Ok(path)
    }
}

fn order(a: &InputPair, b: &InputPair) -> std::cmp::Ordering {
    (&a.relation, &a.subject).cmp(&(&b.relation, &b.subject))
}

fn pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

/// Retrieves and caches premises for every pair of both splits, and warms
/// the knowledge-graph cache.
pub fn cmd_fetch_premises(ctx: &Context, refresh: bool) -> Result<PathBuf> {
    let registry = ctx.registry()?;
    let backends = ctx.config.build_backends()?;
    let cache = PremiseCache::open(&ctx.config.premise_cache)?;
    let mut pairs: BTreeSet<InputPair> = ctx.eval_records(&registry)?.into_iter().map(|g| g.pair).collect();
    pairs.extend(ctx.calibration_records(&registry)?.into_iter().map(|g| g.pair));
    let pairs: Vec<InputPair> = pairs.into_iter().collect();

    let failures: Vec<String> = pairs
        .par_iter()
        .filter_map(|p| {
            fetch_premises(p, &registry, ctx.config.k, backends.search.as_ref(), &cache, refresh)
                .err()
                .map(|e| {
                    log::warn!("{p}: {e}");
                    format!("{p}: {e}")
                })
        })
        .collect();

    if let Some(path) = &ctx.config.kg_cache {
        let kg = CachedKnowledgeGraph::open(backends.kg.clone(), path, false)?;
        let classes: BTreeSet<&String> = registry
            .iter()
            .filter(|s| s.sources.contains(&Source::Kg))
            .flat_map(|s| s.range_classes.iter())
            .collect();
        for class in classes {
            if let Err(e) = kg.sparql_instances(class) {
                log::warn!("knowledge graph class {class}: {e}");
            }
        }
    }

    let manifest = ctx.manifest(
        "fetch-premises",
        None,
        &registry,
        &backends,
        vec![ctx.config.premise_cache.clone()],
        serde_json::json!({"pairs": pairs.len(), "cached_queries": cache.len(), "failures": failures}),
    );
    ctx.write_manifest("premises", &manifest)?;
    eprintln!("cached premises for {} queries ({} failures)", cache.len(), failures.len());
    Ok(ctx.config.premise_cache.clone())
}

fn predictions_name(system: System) -> String {
    format!("predictions.{system}.jsonl")
}

/// Predicts objects for the evaluation split.
pub fn cmd_predict(ctx: &Context, system: System, explain: bool) -> Result<PathBuf> {
    let registry = ctx.registry()?;
    let records = ctx.eval_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let options = BaselineOptions {
        relation_map: ctx.relation_map()?,
        require_subject_match: ctx.config.require_subject_match,
    };
    let done = std::sync::atomic::AtomicUsize::new(0);
    let total = records.len();
    let mut out: Vec<PredictionRecord> = records
        .par_iter()
        .map(|g| {
            let r = pipeline.predict_system(system, &g.pair, &options);
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            log::info!("[{n}/{total}] {}", g.pair);
            r
        })
        .collect::<Result<_>>()?;
    if !explain {
        for r in &mut out {
            r.verdicts = None;
        }
    }
    let path = ctx.output(&predictions_name(system));
    write_atomic(&path, to_jsonl(&out)?.as_bytes())?;
    let errors = out.iter().filter(|r| r.error.is_some()).count();
    let manifest = ctx.manifest(
        "predict",
        Some(system),
        &pipeline.registry,
        &pipeline.backends,
        vec![path.clone()],
        serde_json::json!({"pairs": out.len(), "pair_errors": errors, "explain": explain}),
    );
    ctx.write_manifest(&format!("predictions.{system}"), &manifest)?;
    eprintln!("wrote {} predictions to {}", out.len(), path.display());
    Ok(path)
}

/// Per-relation calibration result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub f1: f64,
    pub pairs: usize,
}

/// Searches per-relation thresholds on the calibration split and writes a
/// threshold overlay.
pub fn cmd_calibrate(ctx: &Context, system: System) -> Result<PathBuf> {
    let registry = ctx.registry()?;
    let records = ctx.calibration_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let (overlay, summary) = calibrate_system(&pipeline, system, &records)?;
    let path = ctx.output(&format!("thresholds.{system}.json"));
    write_atomic(&path, &pretty(&overlay)?)?;
    let calibrated = pipeline.registry.with_overlay(&overlay)?;
    let manifest = ctx.manifest(
        "calibrate",
        Some(system),
        &calibrated,
        &pipeline.backends,
        vec![path.clone()],
        serde_json::to_value(&summary)?,
    );
    ctx.write_manifest(&format!("thresholds.{system}"), &manifest)?;
    eprintln!("wrote thresholds for {} relations to {}", overlay.relations.len(), path.display());
    Ok(path)
}

fn by_relation(records: &[GoldRecord]) -> BTreeMap<&str, Vec<&GoldRecord>> {
    let mut m: BTreeMap<&str, Vec<&GoldRecord>> = BTreeMap::new();
    for r in records {
        m.entry(&r.pair.relation).or_default().push(r);
    }
    m
}

/// Precomputed scores for every pair of a split, one enum arm per system.
enum ScoreTable {
    Joint(BTreeMap<InputPair, JointPair>),
    Single(BTreeMap<InputPair, ScoredPair>),
}

fn score_table(pipeline: &Pipeline, system: System, records: &[GoldRecord]) -> Result<ScoreTable> {
    let soft = |pair: &InputPair, r: Result<Vec<(String, f64)>>| match r {
        Ok(v) => Ok(v),
        Err(e @ (Error::Backend(_) | Error::Retrieval { .. })) => {
            log::warn!("{pair}: {e}");
            Ok(Vec::new())
        }
        Err(e) => Err(e),
    };
    match system {
        System::Satori => {
            let rows = records
                .par_iter()
                .map(|g| {
                    let run = pipeline.run_pair(&g.pair, 0.0, 0.5)?;
                    Ok((g.pair.clone(), JointPair::from_run(&run, g.gold_objects.clone())))
                })
                .collect::<Result<_>>()?;
            Ok(ScoreTable::Joint(rows))
        }
        System::LmBaseline | System::QaBaseline => {
            let rows = records
                .par_iter()
                .map(|g| {
                    let scored = if system == System::LmBaseline {
                        lm_scores(&g.pair, &pipeline.registry, pipeline.backends.mask_fill.as_ref(), &pipeline.stoplist, pipeline.top_n)
                    } else {
                        pipeline
                            .premises_for(&g.pair)
                            .and_then(|ps| qa_scores(&g.pair, &ps, pipeline.backends.qa.as_ref(), &pipeline.registry))
                    };
                    let candidates = soft(&g.pair, scored)?;
                    Ok((g.pair.clone(), ScoredPair { candidates, gold: g.gold_objects.clone() }))
                })
                .collect::<Result<_>>()?;
            Ok(ScoreTable::Single(rows))
        }
        System::ReBaseline => Err(Error::Calibration("re-baseline has no thresholds to calibrate".into())),
    }
}

impl ScoreTable {
    /// Calibrates every relation present in `records`.
    fn calibrate(&self, system: System, records: &[GoldRecord]) -> Result<(ThresholdOverlay, BTreeMap<String, CalibrationSummary>)> {
        let grid = default_grid();
        let mut overlay = ThresholdOverlay::default();
        let mut summary = BTreeMap::new();
        for (relation, group) in by_relation(records) {
            let (thresholds, f1) = match self {
                ScoreTable::Joint(t) => {
                    let pairs: Vec<JointPair> = group.iter().map(|g| t[&g.pair].clone()).collect();
                    let c = calibrate_joint(&pairs, &grid)?;
                    (
                        Thresholds { lm_threshold: Some(c.lm_threshold), entail_threshold: Some(c.entail_threshold), qa_threshold: None },
                        c.f1,
                    )
                }
                ScoreTable::Single(t) => {
                    let pairs: Vec<ScoredPair> = group.iter().map(|g| t[&g.pair].clone()).collect();
                    let c = calibrate_1d(&pairs, &grid)?;
                    let mut th = Thresholds::default();
                    if system == System::LmBaseline {
                        th.lm_threshold = Some(c.threshold);
                    } else {
                        th.qa_threshold = Some(c.threshold);
                    }
                    (th, c.f1)
                }
            };
            overlay.relations.insert(relation.to_string(), thresholds);
            summary.insert(relation.to_string(), CalibrationSummary { f1, pairs: group.len() });
        }
        Ok((overlay, summary))
    }

    /// Scores `records` under per-relation thresholds.
    fn score(&self, records: &[GoldRecord], overlay: &ThresholdOverlay, registry: &Registry) -> Result<Vec<PairScore>> {
        records
            .iter()
            .filter(|g| overlay.relations.contains_key(&g.pair.relation))
            .map(|g| {
                let th = &overlay.relations[&g.pair.relation];
                let schema = registry.get(&g.pair.relation)?;
                let predicted = match self {
                    ScoreTable::Joint(t) => t[&g.pair].predict(
                        th.lm_threshold.unwrap_or(schema.lm_threshold),
                        th.entail_threshold.unwrap_or(schema.entail_threshold),
                    ),
                    ScoreTable::Single(t) => {
                        let threshold = th.lm_threshold.or(th.qa_threshold).unwrap_or(schema.lm_threshold);
                        let pair = &t[&g.pair];
                        if th.qa_threshold.is_some() {
                            qa_select(&pair.candidates, threshold).into_iter().map(|(s, _)| s).collect()
                        } else {
                            pair.predict(threshold)
                        }
                    }
                };
                Ok(PairScore { pair: g.pair.clone(), scores: pair_scores(&predicted, &g.gold_objects) })
            })
            .collect()
    }
}

/// Calibrates a system on `records`; returns the overlay and per-relation F1.
pub fn calibrate_system(
    pipeline: &Pipeline,
    system: System,
    records: &[GoldRecord],
) -> Result<(ThresholdOverlay, BTreeMap<String, CalibrationSummary>)> {
    if records.is_empty() {
        return Err(Error::Calibration("empty calibration data".into()));
    }
    score_table(pipeline, system, records)?.calibrate(system, records)
}

/// Scores a predictions file against the evaluation split.
pub fn cmd_evaluate(ctx: &Context, system: System, predictions: Option<&Path>, pooled: bool) -> Result<EvalReport> {
    let registry = ctx.registry()?;
    let gold = ctx.eval_records(&registry)?;
    let default_path = ctx.output(&predictions_name(system));
    let path = predictions.unwrap_or(&default_path);
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run predict first", path.display())));
    }
    let mut preds: Vec<PredictionRecord> = read_jsonl(path)?;
    if let Some(r) = &ctx.relation {
        preds.retain(|p| &p.relation == r);
    }
    let averaging = if pooled { Averaging::Pooled } else { Averaging::Macro };
    let rep = evaluate(&preds, &gold, averaging)?;
    let stem = if pooled { format!("report.{system}.pooled") } else { format!("report.{system}") };
    let json = ctx.output(&format!("{stem}.json"));
    let txt = ctx.output(&format!("{stem}.txt"));
    let csv = ctx.output(&format!("{stem}.csv"));
    write_atomic(&json, &pretty(&rep)?)?;
    write_atomic(&txt, rep.to_table().as_bytes())?;
    write_atomic(&csv, rep.to_csv().as_bytes())?;
    let backends = ctx.config.build_backends()?;
    let manifest = ctx.manifest(
        "evaluate",
        Some(system),
        &registry,
        &backends,
        vec![json, txt, csv],
        serde_json::json!({"predictions": path}),
    );
    ctx.write_manifest(&stem, &manifest)?;
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraingenKind {
    Mlm,
    Entailment,
    Qa,
    Re,
    All,
}

/// Writes fine-tuning data built from the calibration split.
pub fn cmd_traingen(ctx: &Context, kind: TraingenKind) -> Result<Vec<PathBuf>> {
    let registry = ctx.registry()?;
    let records = ctx.calibration_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let kinds = match kind {
        TraingenKind::All => vec![TraingenKind::Mlm, TraingenKind::Entailment, TraingenKind::Qa, TraingenKind::Re],
        k => vec![k],
    };
    let dir = ctx.config.output_dir.join("traingen");
    let mut outputs = Vec::new();
    let mut stats: BTreeMap<String, TraingenStats> = BTreeMap::new();
    for k in kinds {
        let (name, body, s) = match k {
            TraingenKind::Mlm => {
                let (v, s) = gen_mlm(&records, &pipeline.registry)?;
                ("mlm", to_jsonl(&v)?, s)
            }
            TraingenKind::Entailment => {
                let (v, s) = gen_entailment(
                    &records,
                    &pipeline.premises,
                    pipeline.backends.mask_fill.as_ref(),
                    &pipeline.registry,
                    &pipeline.stoplist,
                    pipeline.k,
                )?;
                ("entailment", to_jsonl(&v)?, s)
            }
            TraingenKind::Qa => {
                let (v, s) = gen_qa(&records, &pipeline.premises, &pipeline.registry, pipeline.k)?;
                ("qa", to_jsonl(&v)?, s)
            }
            TraingenKind::Re => {
                let (v, s) = gen_re(&records, &pipeline.premises, &pipeline.registry, &ctx.relation_map()?, pipeline.k)?;
                ("re", to_jsonl(&v)?, s)
            }
            TraingenKind::All => unreachable!(),
        };
        let path = dir.join(format!("{name}.jsonl"));
        write_atomic(&path, body.as_bytes())?;
        eprintln!("{name}: {} instances -> {}", s.instances, path.display());
        stats.insert(name.to_string(), s);
        outputs.push(path);
    }
    let manifest = ctx.manifest(
        "traingen",
        None,
        &pipeline.registry,
        &pipeline.backends,
        outputs.clone(),
        serde_json::to_value(&stats)?,
    );
    let path = dir.join("traingen.manifest.json");
    write_atomic(&path, &pretty(&manifest)?)?;
    Ok(outputs)
}

/// Calibrates on seeded samples of the calibration split and evaluates on
/// the evaluation split, once per repetition. Scores are computed once.
pub fn cmd_regime(
    ctx: &Context,
    system: System,
    fractions: &[f64],
    repetitions: usize,
    pooled: bool,
) -> Result<Vec<RegimeResult>> {
    let registry = ctx.registry()?;
    let train = ctx.calibration_records(&registry)?;
    let test = ctx.eval_records(&registry)?;
    let pipeline = ctx.pipeline(registry)?;
    let train_scores = score_table(&pipeline, system, &train)?;
    let test_scores = score_table(&pipeline, system, &test)?;
    let averaging = if pooled { Averaging::Pooled } else { Averaging::Macro };
    let mut results = Vec::new();
    for &fraction in fractions {
        let spec = RegimeSpec::new(fraction, repetitions, ctx.seed)?;
        let result = run_regime(&train, &spec, |sample| {
            let (overlay, _) = train_scores.calibrate(system, sample)?;
            let scores = test_scores.score(&test, &overlay, &pipeline.registry)?;
            report(&scores, averaging)
        })?;
        let stem = format!("regime.{system}.{}", fraction_label(fraction));
        let json = ctx.output(&format!("{stem}.json"));
        let txt = ctx.output(&format!("{stem}.txt"));
        write_atomic(&json, &pretty(&result)?)?;
        write_atomic(&txt, result.mean.to_table().as_bytes())?;
        let manifest = ctx.manifest(
            "regime",
            Some(system),
            &pipeline.registry,
            &pipeline.backends,
            vec![json, txt],
            serde_json::to_value(spec)?,
        );
        ctx.write_manifest(&stem, &manifest)?;
        results.push(result);
    }
    Ok(results)
}

fn fraction_label(f: f64) -> String {
    format!("{:03}", (f * 100.0).round() as u32)
}

#[derive(Debug, Parser)]
#[command(name = "kbp", version, about = "Object prediction for knowledge base population")]
pub struct Cli {
    #[arg(long, global = true, default_value = "kbp.toml")]
    pub config: PathBuf,
    /// Only process this relation.
    #[arg(long, global = true)]
    pub relation: Option<String>,
    /// Worker threads (default: available processors).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threshold overlay to apply instead of the configured one.
    #[arg(long, global = true)]
    pub overlay: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Retrieve premises for every pair and store them in the cache.
    FetchPremises {
        /// Re-query the search backend even for cached queries.
        #[arg(long)]
        refresh: bool,
    },
    /// Predict objects for the evaluation split.
    Predict {
        #[arg(long, default_value = "satori")]
        system: System,
        /// Include per-candidate verdicts in the output.
        #[arg(long)]
        explain: bool,
    },
    /// Search per-relation thresholds on the calibration split.
    Calibrate {
        #[arg(long, default_value = "satori")]
        system: System,
    },
    /// Score predictions against the evaluation split.
    Evaluate {
        #[arg(long, default_value = "satori")]
        system: System,
        /// Predictions file; defaults to the system's output.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Average over all pairs instead of per relation.
        #[arg(long)]
        pooled: bool,
    },
    /// Build fine-tuning datasets.
    Traingen {
        #[arg(long, value_enum, default_value = "all")]
        kind: TraingenKind,
    },
    /// Repeated calibration on sampled fractions of the calibration split.
    Regime {
        #[arg(long, default_value = "satori")]
        system: System,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        pooled: bool,
    },
}

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Registry(_) | Error::Schema { .. } => EXIT_CONFIG,
        _ => EXIT_FATAL,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::load(&cli.config)?;
    let mut ctx = Context::new(config);
    ctx.relation = cli.relation;
    if let Some(seed) = cli.seed {
        ctx.seed = seed;
    }
    if let Some(overlay) = cli.overlay {
        if !overlay.exists() {
            return Err(Error::Config(format!("{} does not exist", overlay.display())));
        }
        ctx.overlay = Some(overlay);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| Error::Invalid(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::FetchPremises { refresh } => cmd_fetch_premises(&ctx, refresh).map(drop),
        Command::Predict { system, explain } => cmd_predict(&ctx, system, explain).map(drop),
        Command::Calibrate { system } => cmd_calibrate(&ctx, system).map(drop),
        Command::Evaluate { system, predictions, pooled } => {
            let report = cmd_evaluate(&ctx, system, predictions.as_deref(), pooled)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Traingen { kind } => cmd_traingen(&ctx, kind).map(drop),
        Command::Regime { system, fraction, repetitions, pooled } => {
            let fractions = match fraction {
                Some(f) => vec![f],
                None if !ctx.config.regime.fractions.is_empty() => ctx.config.regime.fractions.clone(),
                None => RegimeSpec::FRACTIONS.to_vec(),
            };
            let reps = repetitions.or(ctx.config.regime.repetitions).unwrap_or(10);
            for r in cmd_regime(&ctx, system, &fractions, reps, pooled)? {
                println!("fraction {} ({} repetitions)", r.spec.fraction, r.spec.repetitions);
                print!("{}", r.mean.to_table());
            }
            Ok(())
        }
    })
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
