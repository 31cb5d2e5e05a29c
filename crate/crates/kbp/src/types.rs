use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Registry, Source};
use crate::text::canonical;
use crate::validation::Verdict;

/// A (subject, relation) query.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InputPair {
    pub subject: String,
    pub relation: String,
}

impl InputPair {
    pub fn new(subject: &str, relation: &str) -> Result<Self> {
        let subject = subject.trim();
        if subject.is_empty() {
            return Err(Error::Invalid("empty subject".into()));
        }
        if relation.trim().is_empty() {
            return Err(Error::Invalid("empty relation".into()));
        }
        Ok(InputPair {
            subject: subject.to_string(),
            relation: relation.trim().to_string(),
        })
    }

    /// Like [`InputPair::new`] but also requires the relation to be configured.
    pub fn resolved(subject: &str, relation: &str, registry: &Registry) -> Result<Self> {
        let pair = InputPair::new(subject, relation)?;
        registry.get(&pair.relation)?;
        Ok(pair)
    }
}

impl fmt::Display for InputPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.subject, self.relation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        if [subject, relation, object].iter().any(|s| s.trim().is_empty()) {
            return Err(Error::Invalid(format!(
                "triple fields must be non-empty: ({subject:?}, {relation:?}, {object:?})"
            )));
        }
        Ok(Triple {
            subject: subject.to_string(),
            relation: relation.to_string(),
            object: object.to_string(),
        })
    }
}

/// The accepted surface forms of one gold object. The first alias is the
/// canonical surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasSet(Vec<String>);

impl AliasSet {
    pub fn new(aliases: Vec<String>) -> Result<Self> {
        if aliases.is_empty() || aliases.iter().any(|a| a.trim().is_empty()) {
            return Err(Error::Invalid("alias-set must hold non-empty aliases".into()));
        }
        Ok(AliasSet(aliases))
    }

    pub fn single(alias: &str) -> Self {
        AliasSet(vec![alias.to_string()])
    }

    pub fn primary(&self) -> &str {
        &self.0[0]
    }

    pub fn aliases(&self) -> &[String] {
        &self.0
    }

    /// Whether `surface` matches any alias under the canonical rule.
    pub fn matches(&self, surface: &str) -> bool {
        let c = canonical(surface);
        self.0.iter().any(|a| canonical(a) == c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldRecord {
    pub pair: InputPair,
    pub gold_objects: Vec<AliasSet>,
}

impl GoldRecord {
    pub fn new(pair: InputPair, gold_objects: Vec<AliasSet>) -> Self {
        GoldRecord { pair, gold_objects }
    }
}

/// Which system produced a prediction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "satori")]
    Satori,
    #[serde(rename = "lm-baseline")]
    LmBaseline,
    #[serde(rename = "qa-baseline")]
    QaBaseline,
    #[serde(rename = "re-baseline")]
    ReBaseline,
}

impl System {
    pub const ALL: [System; 4] = [
        System::Satori,
        System::LmBaseline,
        System::QaBaseline,
        System::ReBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Satori => "satori",
            System::LmBaseline => "lm-baseline",
            System::QaBaseline => "qa-baseline",
            System::ReBaseline => "re-baseline",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown system {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub surface: String,
    pub sources: BTreeSet<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entailment: Option<f64>,
    /// The producing model's own score (LM likelihood or QA answer score).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub system: System,
    pub subject: String,
    pub relation: String,
    pub objects: Vec<PredictedObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdicts: Option<Vec<Verdict>>,
    /// Set when the relation cannot be handled by the system.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unsupported: bool,
    /// Pair-level failure; `objects` is empty when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn new(system: System, pair: &InputPair) -> Self {
        PredictionRecord {
            system,
            subject: pair.subject.clone(),
            relation: pair.relation.clone(),
            objects: Vec::new(),
            verdicts: None,
            unsupported: false,
            error: None,
        }
    }

    pub fn pair(&self) -> InputPair {
        InputPair {
            subject: self.subject.clone(),
            relation: self.relation.clone(),
        }
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.surface.as_str()).collect()
    }

    /// Adds an object unless an equal (canonical) surface is already there;
    /// in that case the sources are unioned and the larger score kept.
    pub fn push_dedup(&mut self, obj: PredictedObject) {
        let c = canonical(&obj.surface);
        if let Some(existing) = self.objects.iter_mut().find(|o| canonical(&o.surface) == c) {
            existing.sources.extend(obj.sources);
            existing.score = max_opt(existing.score, obj.score);
            existing.mean_entailment = max_opt(existing.mean_entailment, obj.mean_entailment);
        } else {
            self.objects.push(obj);
        }
    }
}

pub(crate) fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_pair_trims() {
        let p = InputPair::new("  John Lennon ", "PersonInstrument").unwrap();
        assert_eq!(p.subject, "John Lennon");
        assert!(InputPair::new("   ", "r").is_err());
    }

    #[test]
    fn alias_matching() {
        let a = AliasSet::new(vec!["United States".into(), "USA".into()]).unwrap();
        assert!(a.matches(" usa "));
        assert!(!a.matches("US"));
        assert!(AliasSet::new(vec![]).is_err());
        assert!(AliasSet::new(vec![" ".into()]).is_err());
    }

    #[test]
    fn dedup_unions_sources() {
        let pair = InputPair::new("s", "r").unwrap();
        let mut rec = PredictionRecord::new(System::QaBaseline, &pair);
        rec.push_dedup(PredictedObject {
            surface: "Guitar".into(),
            sources: [Source::Qa].into(),
            mean_entailment: None,
            score: Some(0.4),
        });
        rec.push_dedup(PredictedObject {
            surface: "guitar ".into(),
            sources: [Source::Qa].into(),
            mean_entailment: None,
            score: Some(0.9),
        });
        assert_eq!(rec.objects.len(), 1);
        assert_eq!(rec.objects[0].surface, "Guitar");
        assert_eq!(rec.objects[0].score, Some(0.9));
    }

    #[test]
    fn system_names() {
        for s in System::ALL {
            assert_eq!(s.as_str().parse::<System>().unwrap(), s);
        }
        assert!("bert".parse::<System>().is_err());
    }
}
