//! Relation schemas and the registry loaded from the relation config.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::template::{self, count_slot};

/// Where a predicted object came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "KG")]
    Kg,
    #[serde(rename = "NER")]
    Ner,
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "RE")]
    Re,
}

impl Source {
    /// Sources a relation schema may select for candidate generation.
    pub fn is_candidate_source(self) -> bool {
        matches!(self, Source::Lm | Source::Kg | Source::Ner)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Lm => "LM",
            Source::Kg => "KG",
            Source::Ner => "NER",
            Source::Qa => "QA",
            Source::Re => "RE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NerLabel {
    #[serde(rename = "PER")]
    Per,
    #[serde(rename = "LOC")]
    Loc,
    #[serde(rename = "ORG")]
    Org,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSchema {
    pub name: String,
    pub domain_class: String,
    pub range_classes: Vec<String>,
    /// Search query template, `{X}` only.
    pub t_search: String,
    /// Cloze prompt, `{X}` and exactly one `{MASK}`.
    pub t_lm: String,
    /// Hypothesis template, `{X}` and `{Y}`.
    pub t_h: String,
    /// Question template for the QA baseline.
    pub t_qa: String,
    pub sources: BTreeSet<Source>,
    pub lm_threshold: f64,
    pub entail_threshold: f64,
    pub qa_threshold: f64,
    /// The relation may legitimately have no objects for a subject.
    #[serde(default)]
    pub optional: bool,
}

impl RelationSchema {
    fn invalid(&self, field: &'static str, reason: impl Into<String>) -> Error {
        Error::Schema {
            relation: self.name.clone(),
            field,
            reason: reason.into(),
        }
    }

    pub fn validate(&self, class_labels: &BTreeMap<String, NerLabel>) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(self.invalid("name", "empty"));
        }
        let has = |t: &str, slot: &str| template::has_slot(t, slot);
        if !has(&self.t_search, template::SUBJECT) {
            return Err(self.invalid("t_search", "missing {X}"));
        }
        if !has(&self.t_lm, template::SUBJECT) {
            return Err(self.invalid("t_lm", "missing {X}"));
        }
        let masks = count_slot(&self.t_lm, template::MASK);
        if masks != 1 {
            return Err(self.invalid("t_lm", format!("needs exactly one {{MASK}}, found {masks}")));
        }
        if !has(&self.t_h, template::SUBJECT) || !has(&self.t_h, template::OBJECT) {
            return Err(self.invalid("t_h", "needs both {X} and {Y}"));
        }
        if !has(&self.t_qa, template::SUBJECT) {
            return Err(self.invalid("t_qa", "missing {X}"));
        }
        // Rendering catches unknown placeholders in every template.
        for (field, t, obj) in [
            ("t_search", &self.t_search, None),
            ("t_lm", &self.t_lm, None),
            ("t_h", &self.t_h, Some("o")),
            ("t_qa", &self.t_qa, None),
        ] {
            if let Err(e) = template::render_template(t, "s", obj) {
                return Err(self.invalid(field, e.to_string()));
            }
        }
        if self.range_classes.is_empty() {
            return Err(self.invalid("range_classes", "empty"));
        }
        if self.sources.is_empty() {
            return Err(self.invalid("sources", "empty"));
        }
        if let Some(s) = self.sources.iter().find(|s| !s.is_candidate_source()) {
            return Err(self.invalid("sources", format!("{s} is not a candidate source")));
        }
        for (field, v) in [
            ("lm_threshold", self.lm_threshold),
            ("entail_threshold", self.entail_threshold),
            ("qa_threshold", self.qa_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(self.invalid(field, format!("{v} is outside [0, 1]")));
            }
        }
        if self.sources.contains(&Source::Ner) {
            if let Some(c) = self
                .range_classes
                .iter()
                .find(|c| !class_labels.contains_key(c.as_str()))
            {
                return Err(self.invalid(
                    "range_classes",
                    format!("class {c:?} has no NER label but NER is a source"),
                ));
            }
        }
        Ok(())
    }

    /// NER labels whose entities are legal objects for this relation.
    pub fn ner_labels(&self, class_labels: &BTreeMap<String, NerLabel>) -> BTreeSet<NerLabel> {
        self.range_classes
            .iter()
            .filter_map(|c| class_labels.get(c).copied())
            .collect()
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RegistryFile {
    #[serde(default)]
    class_labels: BTreeMap<String, NerLabel>,
    relations: Vec<RelationSchema>,
}

/// Immutable set of relation schemas keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    relations: BTreeMap<String, RelationSchema>,
    class_labels: BTreeMap<String, NerLabel>,
}

impl Registry {
    pub fn new(
        relations: Vec<RelationSchema>,
        class_labels: BTreeMap<String, NerLabel>,
    ) -> Result<Self> {
        if relations.is_empty() {
            return Err(Error::Registry("no relations defined".into()));
        }
        let mut map = BTreeMap::new();
        for r in relations {
            r.validate(&class_labels)?;
            if map.contains_key(&r.name) {
                return Err(Error::Registry(format!("duplicate relation {:?}", r.name)));
            }
            map.insert(r.name.clone(), r);
        }
        Ok(Registry {
            relations: map,
            class_labels,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Registry("empty config".into()));
        }
        let file: RegistryFile =
            serde_json::from_str(s).map_err(|e| Error::Registry(e.to_string()))?;
        Registry::new(file.relations, file.class_labels)
    }

    pub fn to_json(&self) -> String {
        let file = RegistryFile {
            class_labels: self.class_labels.clone(),
            relations: self.relations.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("registry serializes")
    }

    pub fn get(&self, name: &str) -> Result<&RelationSchema> {
        self.relations
            .get(name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.relations.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationSchema> {
        self.relations.values()
    }

    pub fn class_labels(&self) -> &BTreeMap<String, NerLabel> {
        &self.class_labels
    }

    /// Returns a new registry with the overlay's thresholds applied.
    pub fn with_overlay(&self, overlay: &ThresholdOverlay) -> Result<Self> {
        let mut next = self.clone();
        for (name, t) in &overlay.relations {
            let schema = next
                .relations
                .get_mut(name)
                .ok_or_else(|| Error::UnknownRelation(name.clone()))?;
            if let Some(v) = t.lm_threshold {
                schema.lm_threshold = v;
            }
            if let Some(v) = t.entail_threshold {
                schema.entail_threshold = v;
            }
            if let Some(v) = t.qa_threshold {
                schema.qa_threshold = v;
            }
            schema.validate(&next.class_labels)?;
        }
        Ok(next)
    }

    /// Replace the candidate sources of every relation.
    pub fn with_sources(&self, sources: &BTreeSet<Source>) -> Result<Self> {
        let mut next = self.clone();
        for schema in next.relations.values_mut() {
            schema.sources = sources.clone();
            schema.validate(&next.class_labels)?;
        }
        Ok(next)
    }
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Registry> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Registry::from_json(&s)
}

/// Per-relation thresholds to lay over a relation config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOverlay {
    pub relations: BTreeMap<String, Thresholds>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entail_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_threshold: Option<f64>,
}

impl ThresholdOverlay {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn instrument_schema() -> RelationSchema {
        RelationSchema {
            name: "PersonInstrument".into(),
            domain_class: "Person".into(),
            range_classes: vec!["MusicalInstrument".into()],
            t_search: "{X} plays instrument".into(),
            t_lm: "{X} plays {MASK}.".into(),
            t_h: "{X} plays {Y}".into(),
            t_qa: "What instruments plays {X}?".into(),
            sources: [Source::Lm, Source::Kg].into_iter().collect(),
            lm_threshold: 0.1,
            entail_threshold: 0.5,
            qa_threshold: 0.5,
            optional: true,
        }
    }

    fn labels() -> BTreeMap<String, NerLabel> {
        [("City".to_string(), NerLabel::Loc)].into_iter().collect()
    }

    #[test]
    fn valid_schema_loads() {
        let r = Registry::new(vec![instrument_schema()], labels()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.get("PersonInstrument").unwrap().t_h, "{X} plays {Y}");
        assert!(matches!(r.get("Nope"), Err(Error::UnknownRelation(_))));
    }

    #[test]
    fn invariant_violations_name_relation_and_field() {
        let mut s = instrument_schema();
        s.t_h = "{X} plays".into();
        match Registry::new(vec![s], labels()) {
            Err(Error::Schema { relation, field, .. }) => {
                assert_eq!(relation, "PersonInstrument");
                assert_eq!(field, "t_h");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut s = instrument_schema();
        s.t_lm = "{X} plays {MASK} and {MASK}".into();
        assert!(matches!(
            Registry::new(vec![s], labels()),
            Err(Error::Schema { field: "t_lm", .. })
        ));

        let mut s = instrument_schema();
        s.entail_threshold = 1.5;
        assert!(matches!(
            Registry::new(vec![s], labels()),
            Err(Error::Schema { field: "entail_threshold", .. })
        ));

        let mut s = instrument_schema();
        s.sources = [Source::Ner].into_iter().collect();
        assert!(matches!(
            Registry::new(vec![s], labels()),
            Err(Error::Schema { field: "range_classes", .. })
        ));

        let mut s = instrument_schema();
        s.sources = [Source::Qa].into_iter().collect();
        assert!(matches!(
            Registry::new(vec![s], labels()),
            Err(Error::Schema { field: "sources", .. })
        ));
    }

    #[test]
    fn duplicates_and_empty_rejected() {
        assert!(matches!(
            Registry::new(vec![instrument_schema(), instrument_schema()], labels()),
            Err(Error::Registry(_))
        ));
        assert!(matches!(Registry::from_json(""), Err(Error::Registry(_))));
        assert!(matches!(
            Registry::from_json(r#"{"relations": []}"#),
            Err(Error::Registry(_))
        ));
    }

    #[test]
    fn json_round_trip_and_overlay() {
        let r = Registry::new(vec![instrument_schema()], labels()).unwrap();
        let back = Registry::from_json(&r.to_json()).unwrap();
        assert_eq!(r, back);

        let mut overlay = ThresholdOverlay::default();
        overlay.relations.insert(
            "PersonInstrument".into(),
            Thresholds {
                entail_threshold: Some(0.73),
                ..Default::default()
            },
        );
        let r2 = r.with_overlay(&overlay).unwrap();
        assert_eq!(r2.get("PersonInstrument").unwrap().entail_threshold, 0.73);
        assert_eq!(r2.get("PersonInstrument").unwrap().lm_threshold, 0.1);
    }
}
