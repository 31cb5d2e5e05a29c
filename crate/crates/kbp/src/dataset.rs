//! Gold dataset JSONL: `{"subject", "relation", "objects"}` where `objects`
//! is a list of strings or a list of alias lists (both may be mixed).

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_jsonl, write_jsonl_atomic};
use crate::schema::Registry;
use crate::types::{AliasSet, GoldRecord, InputPair};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawObject {
    Plain(String),
    Aliases(Vec<String>),
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    subject: String,
    relation: String,
    #[serde(default)]
    objects: Vec<RawObject>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    subject: &'a str,
    relation: &'a str,
    objects: &'a [AliasSet],
}

pub fn parse_dataset(reader: impl BufRead, origin: &Path, registry: &Registry) -> Result<Vec<GoldRecord>> {
    // Re-read line numbers for semantic errors: parse_jsonl skips blank lines.
    let mut out = Vec::new();
    let mut text = String::new();
    let mut reader = reader;
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io(origin, e))?;
    let raws: Vec<RawRecord> = parse_jsonl(text.as_bytes(), origin)?;
    let line_numbers = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1);
    for (raw, line) in raws.into_iter().zip(line_numbers) {
        let fail = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let pair = InputPair::new(&raw.subject, &raw.relation).map_err(|e| fail(e.to_string()))?;
        if !registry.contains(&pair.relation) {
            return Err(fail(format!("relation {:?} is not configured", pair.relation)));
        }
        let gold = raw
            .objects
            .into_iter()
            .map(|o| match o {
                RawObject::Plain(s) => AliasSet::new(vec![s]),
                RawObject::Aliases(v) => AliasSet::new(v),
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| fail(e.to_string()))?;
        out.push(GoldRecord::new(pair, gold));
    }
    Ok(out)
}

/// Load a gold dataset. Every relation must be configured in `registry`.
pub fn load_dataset(path: impl AsRef<Path>, registry: &Registry) -> Result<Vec<GoldRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(std::io::BufReader::new(f), path, registry)
}

/// Write records in the alias-list form.
pub fn write_dataset(path: impl AsRef<Path>, records: &[GoldRecord]) -> Result<()> {
    let out: Vec<OutRecord<'_>> = records
        .iter()
        .map(|r| OutRecord {
            subject: &r.pair.subject,
            relation: &r.pair.relation,
            objects: &r.gold_objects,
        })
        .collect();
    write_jsonl_atomic(path, &out)
}
