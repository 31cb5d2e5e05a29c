//! Set-based precision, recall and F1, and macro-averaged reports.
//!
//! Empty-set conventions: predicting nothing scores P = 1 only when the gold
//! set is empty too; an empty gold set always has R = 1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::canonical;
use crate::types::{AliasSet, GoldRecord, InputPair, PredictionRecord};

pub fn match_alias(prediction: &str, gold: &AliasSet) -> bool {
    gold.matches(prediction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        Prf { precision, recall, f1: f1(precision, recall) }
    }

    fn mean<'a>(items: impl IntoIterator<Item = &'a Prf>) -> Option<Prf> {
        let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
        for x in items {
            p += x.precision;
            r += x.recall;
            f += x.f1;
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            Prf { precision: p / n, recall: r / n, f1: f / n }
        })
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair: InputPair,
    #[serde(flatten)]
    pub scores: Prf,
}

/// Scores one pair. Predictions are compared as a set of canonical forms,
/// and each gold alias-set is counted at most once.
pub fn pair_scores<S: AsRef<str>>(predicted: &[S], gold: &[AliasSet]) -> Prf {
    let predicted: BTreeSet<String> = predicted.iter().map(|p| canonical(p.as_ref())).collect();
    let precision = if predicted.is_empty() {
        if gold.is_empty() { 1.0 } else { 0.0 }
    } else {
        let correct = predicted.iter().filter(|p| gold.iter().any(|g| g.matches(p))).count();
        correct as f64 / predicted.len() as f64
    };
    let recall = if gold.is_empty() {
        1.0
    } else {
        let found = gold.iter().filter(|g| predicted.iter().any(|p| g.matches(p))).count();
        found as f64 / gold.len() as f64
    };
    Prf::new(precision, recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    #[serde(flatten)]
    pub scores: Prf,
    pub pair_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Mean over pairs within each relation, then over relations.
    #[default]
    Macro,
    /// Mean over all pairs regardless of relation.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub averaging: Averaging,
    pub per_relation: BTreeMap<String, RelationScore>,
    pub overall: Prf,
    /// Relations the system cannot answer, left out of the averages.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub unsupported: BTreeSet<String>,
}

fn by_relation(scores: &[PairScore]) -> BTreeMap<String, Vec<&PairScore>> {
    let mut groups: BTreeMap<String, Vec<&PairScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.pair.relation.clone()).or_default().push(s);
    }
    groups
}

fn per_relation(scores: &[PairScore]) -> Result<BTreeMap<String, RelationScore>> {
    if scores.is_empty() {
        return Err(Error::Evaluation("no pair scores to report".into()));
    }
    Ok(by_relation(scores)
        .into_iter()
        .map(|(rel, group)| {
            let scores = Prf::mean(group.iter().map(|s| &s.scores)).expect("non-empty group");
            (rel, RelationScore { scores, pair_count: group.len() })
        })
        .collect())
}

/// Per-relation means over pairs; overall is the unweighted mean over relations.
pub fn macro_report(scores: &[PairScore]) -> Result<EvalReport> {
    let per_relation = per_relation(scores)?;
    let overall = Prf::mean(per_relation.values().map(|r| &r.scores)).expect("non-empty");
    Ok(EvalReport { averaging: Averaging::Macro, per_relation, overall, unsupported: BTreeSet::new() })
}

/// Per-relation means as in [`macro_report`]; overall is the mean over all pairs.
pub fn pooled_report(scores: &[PairScore]) -> Result<EvalReport> {
    let per_relation = per_relation(scores)?;
    let overall = Prf::mean(scores.iter().map(|s| &s.scores)).expect("non-empty");
    Ok(EvalReport { averaging: Averaging::Pooled, per_relation, overall, unsupported: BTreeSet::new() })
}

pub fn report(scores: &[PairScore], averaging: Averaging) -> Result<EvalReport> {
    match averaging {
        Averaging::Macro => macro_report(scores),
        Averaging::Pooled => pooled_report(scores),
    }
}

/// Scores predictions against gold records.
///
/// Gold pairs without a prediction count as empty predictions. Records
/// flagged unsupported are dropped and their relations listed separately.
pub fn score_predictions(predictions: &[PredictionRecord], gold: &[GoldRecord]) -> (Vec<PairScore>, BTreeSet<String>) {
    let mut by_pair: HashMap<InputPair, &PredictionRecord> = HashMap::new();
    for p in predictions {
        by_pair.insert(p.pair(), p);
    }
    let mut unsupported = BTreeSet::new();
    let mut scores = Vec::with_capacity(gold.len());
    for g in gold {
        let predicted = match by_pair.remove(&g.pair) {
            Some(p) if p.unsupported => {
                unsupported.insert(g.pair.relation.clone());
                continue;
            }
            Some(p) => p.surfaces(),
            None => {
                log::warn!("no prediction for {}; scoring as empty", g.pair);
                Vec::new()
            }
        };
        scores.push(PairScore { pair: g.pair.clone(), scores: pair_scores(&predicted, &g.gold_objects) });
    }
    for pair in by_pair.keys() {
        log::warn!("prediction for {pair} has no gold record; ignored");
    }
    (scores, unsupported)
}

pub fn evaluate(predictions: &[PredictionRecord], gold: &[GoldRecord], averaging: Averaging) -> Result<EvalReport> {
    let (scores, unsupported) = score_predictions(predictions, gold);
    let mut rep = report(&scores, averaging)?;
    rep.unsupported = unsupported;
    Ok(rep)
}

/// Elementwise mean of several reports. A relation is averaged over the
/// reports that contain it.
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::Evaluation("no reports to average".into()))?;
    let mut groups: BTreeMap<&str, Vec<&RelationScore>> = BTreeMap::new();
    for r in reports {
        for (rel, s) in &r.per_relation {
            groups.entry(rel).or_default().push(s);
        }
    }
    let per_relation = groups
        .into_iter()
        .map(|(rel, ss)| {
            let scores = Prf::mean(ss.iter().map(|s| &s.scores)).expect("non-empty");
            (rel.to_string(), RelationScore { scores, pair_count: ss[0].pair_count })
        })
        .collect();
    Ok(EvalReport {
        averaging: first.averaging,
        per_relation,
        overall: Prf::mean(reports.iter().map(|r| &r.overall)).expect("non-empty"),
        unsupported: reports.iter().flat_map(|r| r.unsupported.iter().cloned()).collect(),
    })
}

impl EvalReport {
    /// Aligned plain-text table, one row per relation plus the overall row.
    pub fn to_table(&self) -> String {
        let label = match self.averaging {
            Averaging::Macro => "macro average",
            Averaging::Pooled => "pooled average",
        };
        let width = self
            .per_relation
            .keys()
            .chain(&self.unsupported)
            .map(|k| k.len())
            .chain([label.len(), "relation".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}  {:>5}", "relation", "P", "R", "F1", "pairs");
        for (rel, s) in &self.per_relation {
            let p = &s.scores;
            let _ = writeln!(
                out,
                "{rel:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>5}",
                p.precision, p.recall, p.f1, s.pair_count
            );
        }
        for rel in self.unsupported.iter().filter(|r| !self.per_relation.contains_key(*r)) {
            let _ = writeln!(out, "{rel:<width$}  {:>6}  {:>6}  {:>6}  {:>5}", "-", "-", "-", "-");
        }
        let total: usize = self.per_relation.values().map(|s| s.pair_count).sum();
        let o = &self.overall;
        let _ = writeln!(
            out,
            "{label:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {total:>5}",
            o.precision, o.recall, o.f1
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("relation,precision,recall,f1,pairs\n");
        for (rel, s) in &self.per_relation {
            let p = &s.scores;
            let _ = writeln!(out, "{rel},{},{},{},{}", p.precision, p.recall, p.f1, s.pair_count);
        }
        let o = &self.overall;
        let total: usize = self.per_relation.values().map(|s| s.pair_count).sum();
        let _ = writeln!(out, "overall,{},{},{},{total}", o.precision, o.recall, o.f1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(sets: &[&[&str]]) -> Vec<AliasSet> {
        sets.iter().map(|s| AliasSet::new(s.iter().map(|a| a.to_string()).collect()).unwrap()).collect()
    }

    fn ps(relation: &str, subject: &str, precision: f64, recall: f64) -> PairScore {
        PairScore { pair: InputPair::new(subject, relation).unwrap(), scores: Prf::new(precision, recall) }
    }

    #[test]
    fn alias_matching() {
        let g = AliasSet::single("guitar");
        assert!(match_alias("Guitar", &g));
        assert!(match_alias(" guitar ", &g));
        assert!(!match_alias("guitars", &g));
    }

    #[test]
    fn conventions() {
        assert_eq!(pair_scores(&["a", "b"], &gold(&[&["a"], &["c"]])), Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
        let none: [&str; 0] = [];
        assert_eq!(pair_scores(&none, &[]), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        assert_eq!(pair_scores(&["x"], &[]), Prf { precision: 0.0, recall: 1.0, f1: 0.0 });
        assert_eq!(pair_scores(&none, &gold(&[&["a"]])), Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
    }

    #[test]
    fn alias_sets_count_once() {
        let g = gold(&[&["USA", "United States"], &["Canada"]]);
        let s = pair_scores(&["usa", "United States", "USA "], &g);
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn macro_is_unweighted_over_relations() {
        let r = macro_report(&[ps("A", "s1", 1.0, 1.0), ps("A", "s2", 0.0, 0.0)]).unwrap();
        assert_eq!(r.per_relation["A"].scores.f1, 0.5);
        assert_eq!(r.overall.f1, 0.5);

        // F1 0.2 from one pair, 0.8 from four.
        let mut v = vec![ps("A", "a", 0.2, 0.2)];
        v.extend((0..4).map(|i| ps("B", &format!("b{i}"), 0.8, 0.8)));
        let r = macro_report(&v).unwrap();
        assert!((r.overall.f1 - 0.5).abs() < 1e-12);
        let pooled = pooled_report(&v).unwrap();
        assert!((pooled.overall.f1 - 0.68).abs() < 1e-12);

        assert!(macro_report(&[]).is_err());
    }

    #[test]
    fn mean_of_reports() {
        let a = macro_report(&[ps("A", "s", 1.0, 1.0)]).unwrap();
        let b = macro_report(&[ps("A", "s", 0.0, 0.5)]).unwrap();
        let m = mean_report(&[a, b]).unwrap();
        assert_eq!(m.overall.precision, 0.5);
        assert_eq!(m.overall.recall, 0.75);
        assert_eq!(m.per_relation["A"].scores.f1, (1.0 + f1(0.0, 0.5)) / 2.0);
        assert!(mean_report(&[]).is_err());
    }

    #[test]
    fn table_layout() {
        let r = macro_report(&[ps("PersonInstrument", "s", 1.0, 0.5)]).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("PersonInstrument"));
        assert!(lines[1].contains("1.000   0.500   0.667"));
        assert!(r.to_csv().starts_with("relation,precision,recall,f1,pairs\nPersonInstrument,1,0.5,"));
    }
}
