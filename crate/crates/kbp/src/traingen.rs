//! Fine-tuning data built from gold records and cached premises: masked-LM
//! prompts, entailment pairs, extractive QA spans and relation extraction
//! passages.
//!
//! Generators only read the premise cache; a pair without cached premises
//! is skipped and counted. Output is sorted by relation, then subject.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::backends::{MaskFill, DEFAULT_TOP_N};
use crate::baselines::RelationMap;
use crate::candidates::Stoplist;
use crate::error::Result;
use crate::retrieval::{build_query, Premise, PremiseCache};
use crate::schema::Registry;
use crate::template::render_template;
use crate::text::{char_slice, find_mentions, is_mentioned, Mention};
use crate::types::{AliasSet, GoldRecord, InputPair};

/// Maximum number of whitespace tokens between consecutive objects of a
/// multi-object QA answer span.
pub const MAX_TOKEN_GAP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntailmentLabel {
    Entailment,
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentInstance {
    pub premise: String,
    pub hypothesis: String,
    pub label: EntailmentLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmInstance {
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaAnswers {
    pub text: Vec<String>,
    pub answer_start: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    pub context: String,
    pub answers: QaAnswers,
}

impl QaInstance {
    pub fn answer(&self) -> &str {
        self.answers.text.first().map_or("", String::as_str)
    }

    /// Character offset of the answer, or −1 for no answer.
    pub fn answer_start(&self) -> i64 {
        self.answers.answer_start.first().copied().unwrap_or(-1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReInstance {
    pub text: String,
    pub triples: Vec<ReTriple>,
}

/// Counts of what was generated and skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraingenStats {
    pub pairs: usize,
    pub pairs_without_premises: usize,
    pub instances: usize,
    pub positives: usize,
    pub negatives_from_lm: usize,
    pub negatives_from_dataset: usize,
    pub positives_without_premise: usize,
    pub positives_without_negative: usize,
    pub fill_mask_failures: usize,
    pub qa_no_answer: usize,
    pub qa_skipped: usize,
    pub re_unmapped: usize,
    pub re_skipped: usize,
}

fn sorted(records: &[GoldRecord]) -> Vec<&GoldRecord> {
    let mut v: Vec<&GoldRecord> = records.iter().collect();
    v.sort_by(|a, b| (&a.pair.relation, &a.pair.subject).cmp(&(&b.pair.relation, &b.pair.subject)));
    v
}

fn cached_premises(pair: &InputPair, registry: &Registry, cache: &PremiseCache, k: usize) -> Result<Option<Vec<Premise>>> {
    let query = build_query(pair, registry)?;
    Ok(cache.get(&query).map(|mut ps| {
        ps.truncate(k);
        ps
    }))
}

/// One prompt per gold alias-set, targeting its first alias.
pub fn gen_mlm(records: &[GoldRecord], registry: &Registry) -> Result<(Vec<MlmInstance>, TraingenStats)> {
    let mut stats = TraingenStats::default();
    let mut out = Vec::new();
    for r in sorted(records) {
        stats.pairs += 1;
        let schema = registry.get(&r.pair.relation)?;
        let prompt = render_template(&schema.t_lm, &r.pair.subject, None)?;
        let mut seen = HashSet::new();
        for a in &r.gold_objects {
            if seen.insert(crate::text::canonical(a.primary())) {
                out.push(MlmInstance { prompt: prompt.clone(), target: a.primary().to_string() });
            }
        }
    }
    stats.instances = out.len();
    Ok((out, stats))
}

fn first_mentioning<'a>(premises: &'a [Premise], needle: &str) -> Option<&'a Premise> {
    premises.iter().find(|p| is_mentioned(&p.text, needle))
}

fn matches_gold(gold: &[AliasSet], surface: &str) -> bool {
    gold.iter().any(|g| g.matches(surface))
}

/// Positive and negative entailment pairs.
///
/// A gold object yields a positive from the lowest-rank premise mentioning
/// both the subject and one of its aliases. Each positive gets at most one
/// negative: preferably the best-scoring fill-mask token that is mentioned in
/// a premise and is not gold, otherwise a gold object of another subject of
/// the same relation. Negative objects are never reused within a pair.
pub fn gen_entailment(
    records: &[GoldRecord],
    cache: &PremiseCache,
    mask_fill: &dyn MaskFill,
    registry: &Registry,
    stoplist: &Stoplist,
    k: usize,
) -> Result<(Vec<EntailmentInstance>, TraingenStats)> {
    let mut stats = TraingenStats::default();
    let mut out = Vec::new();
    let ordered = sorted(records);

    let mut by_relation: BTreeMap<&str, Vec<&GoldRecord>> = BTreeMap::new();
    for r in &ordered {
        by_relation.entry(&r.pair.relation).or_default().push(r);
    }

    for r in &ordered {
        stats.pairs += 1;
        let Some(premises) = cached_premises(&r.pair, registry, cache, k)? else {
            stats.pairs_without_premises += 1;
            continue;
        };
        let schema = registry.get(&r.pair.relation)?;
        let subject = &r.pair.subject;

        let mut positives = Vec::new();
        for a in &r.gold_objects {
            let hit = premises.iter().filter(|p| is_mentioned(&p.text, subject)).find_map(|p| {
                a.aliases().iter().find(|al| is_mentioned(&p.text, al)).map(|al| (p, al))
            });
            match hit {
                Some((p, alias)) => positives.push((p, alias.as_str())),
                None => stats.positives_without_premise += 1,
            }
        }
        if positives.is_empty() {
            continue;
        }

        // Source (a): fill-mask tokens, best first.
        let prompt = render_template(&schema.t_lm, subject, None)?;
        let lm_tokens = match mask_fill.fill_mask(&prompt, DEFAULT_TOP_N) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{}: fill-mask failed: {e}", r.pair);
                stats.fill_mask_failures += 1;
                Vec::new()
            }
        };
        let mut lm_pool = lm_tokens
            .into_iter()
            .filter(|t| !stoplist.is_stop(&t.token) && !matches_gold(&r.gold_objects, &t.token))
            .filter_map(|t| first_mentioning(&premises, &t.token).map(|p| (t.token, p)));

        // Source (b): other subjects' gold objects, mentioned ones first.
        let others: Vec<&str> = by_relation[r.pair.relation.as_str()]
            .iter()
            .filter(|o| o.pair != r.pair)
            .flat_map(|o| o.gold_objects.iter().map(|a| a.primary()))
            .filter(|s| !matches_gold(&r.gold_objects, s))
            .collect();
        let mut dataset_pool = others
            .iter()
            .filter_map(|s| first_mentioning(&premises, s).map(|p| (s.to_string(), p)))
            .chain(others.iter().map(|s| (s.to_string(), &premises[0])));

        let mut used = HashSet::new();
        for (premise, alias) in positives {
            out.push(EntailmentInstance {
                premise: premise.text.clone(),
                hypothesis: render_template(&schema.t_h, subject, Some(alias))?,
                label: EntailmentLabel::Entailment,
            });
            stats.positives += 1;

            let negative = match take_fresh(&mut lm_pool, &mut used) {
                Some(n) => {
                    stats.negatives_from_lm += 1;
                    Some(n)
                }
                None => take_fresh(&mut dataset_pool, &mut used).inspect(|_| stats.negatives_from_dataset += 1),
            };
            match negative {
                Some((object, p)) => out.push(EntailmentInstance {
                    premise: p.text.clone(),
                    hypothesis: render_template(&schema.t_h, subject, Some(&object))?,
                    label: EntailmentLabel::Contradiction,
                }),
                None => stats.positives_without_negative += 1,
            }
        }
    }
    stats.instances = out.len();
    Ok((out, stats))
}

fn take_fresh<'p>(
    pool: &mut impl Iterator<Item = (String, &'p Premise)>,
    used: &mut HashSet<String>,
) -> Option<(String, &'p Premise)> {
    pool.find(|(s, _)| used.insert(crate::text::canonical(s)))
}

/// Whitespace tokens as character ranges.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        spans.push((s, n));
    }
    spans
}

fn token_index(spans: &[(usize, usize)], ch: usize) -> usize {
    spans.partition_point(|&(_, end)| end <= ch)
}

/// A gold-object mention with its whitespace-token extent.
#[derive(Debug, Clone, Copy)]
struct Located {
    gold: usize,
    mention: Mention,
    first_token: usize,
    last_token: usize,
}

/// Number of whitespace tokens strictly between two mentions.
fn token_gap(prev: &Located, next: &Located) -> isize {
    next.first_token as isize - prev.last_token as isize - 1
}

/// The best answer span in one passage: most distinct gold objects, then
/// shortest, then earliest. Returns `(count, start, end)` in characters.
fn best_span(text: &str, gold: &[AliasSet]) -> Option<(usize, usize, usize)> {
    let spans = token_spans(text);
    let mut located: Vec<Located> = gold
        .iter()
        .enumerate()
        .flat_map(|(gi, a)| a.aliases().iter().flat_map(move |al| find_mentions(text, al).into_iter().map(move |m| (gi, m))))
        .map(|(gold, mention)| Located {
            gold,
            mention,
            first_token: token_index(&spans, mention.start),
            last_token: token_index(&spans, mention.end - 1),
        })
        .collect();
    located.sort_by_key(|l| (l.mention.start, l.mention.end, l.gold));

    let mut best: Option<(usize, usize, usize)> = None;
    for i in 0..located.len() {
        let mut golds = HashSet::new();
        let mut end = 0;
        for j in i..located.len() {
            if j > i && token_gap(&located[j - 1], &located[j]) > MAX_TOKEN_GAP as isize {
                break;
            }
            golds.insert(located[j].gold);
            end = end.max(located[j].mention.end);
            let cand = (golds.len(), located[i].mention.start, end);
            let better = match best {
                None => true,
                Some((n, s, e)) => cand.0 > n || (cand.0 == n && (cand.2 - cand.1 < e - s || (cand.2 - cand.1 == e - s && cand.1 < s))),
            };
            if better {
                best = Some(cand);
            }
        }
    }
    best
}

/// Extractive QA instances. Empty gold uses the rank-1 passage with an empty
/// answer; otherwise the passage whose best span covers the most gold
/// objects, lowest rank on ties.
pub fn gen_qa(records: &[GoldRecord], cache: &PremiseCache, registry: &Registry, k: usize) -> Result<(Vec<QaInstance>, TraingenStats)> {
    let mut stats = TraingenStats::default();
    let mut out = Vec::new();
    for r in sorted(records) {
        stats.pairs += 1;
        let Some(premises) = cached_premises(&r.pair, registry, cache, k)?.filter(|p| !p.is_empty()) else {
            stats.pairs_without_premises += 1;
            continue;
        };
        let schema = registry.get(&r.pair.relation)?;
        let question = render_template(&schema.t_qa, &r.pair.subject, None)?;
        let id = format!("{}/{}", r.pair.relation, r.pair.subject);
        if r.gold_objects.is_empty() {
            stats.qa_no_answer += 1;
            out.push(QaInstance {
                id,
                question,
                context: premises[0].text.clone(),
                answers: QaAnswers { text: Vec::new(), answer_start: Vec::new() },
            });
            continue;
        }
        let mut chosen: Option<(&Premise, (usize, usize, usize))> = None;
        for p in &premises {
            if let Some(span) = best_span(&p.text, &r.gold_objects) {
                if chosen.map_or(true, |(_, c)| span.0 > c.0) {
                    chosen = Some((p, span));
                }
            }
        }
        let Some((p, (_, start, end))) = chosen else {
            stats.qa_skipped += 1;
            continue;
        };
        let answer = char_slice(&p.text, start, end).expect("span inside passage").to_string();
        out.push(QaInstance {
            id,
            question,
            context: p.text.clone(),
            answers: QaAnswers { text: vec![answer], answer_start: vec![start as i64] },
        });
    }
    stats.instances = out.len();
    Ok((out, stats))
}

/// Relation extraction instances from the lowest-rank passage mentioning at
/// least one gold object. Relations without an extractor label are skipped.
pub fn gen_re(
    records: &[GoldRecord],
    cache: &PremiseCache,
    registry: &Registry,
    relation_map: &RelationMap,
    k: usize,
) -> Result<(Vec<ReInstance>, TraingenStats)> {
    let mut stats = TraingenStats::default();
    let mut out = Vec::new();
    for r in sorted(records) {
        stats.pairs += 1;
        let Some(label) = relation_map.label(&r.pair.relation) else {
            stats.re_unmapped += 1;
            continue;
        };
        let Some(premises) = cached_premises(&r.pair, registry, cache, k)? else {
            stats.pairs_without_premises += 1;
            continue;
        };
        let found = premises.iter().find_map(|p| {
            let objects: Vec<&str> = r
                .gold_objects
                .iter()
                .filter_map(|a| a.aliases().iter().find(|al| is_mentioned(&p.text, al)))
                .map(String::as_str)
                .collect();
            (!objects.is_empty()).then_some((p, objects))
        });
        let Some((p, objects)) = found else {
            stats.re_skipped += 1;
            continue;
        };
        out.push(ReInstance {
            text: p.text.clone(),
            triples: objects
                .into_iter()
                .map(|o| ReTriple { subject: r.pair.subject.clone(), relation: label.to_string(), object: o.to_string() })
                .collect(),
        });
    }
    stats.instances = out.len();
    Ok((out, stats))
}

/// Whitespace-token gaps between consecutive gold mentions inside a QA
/// answer, for auditing generated spans.
pub fn answer_token_gaps(instance: &QaInstance, gold: &[AliasSet]) -> Vec<isize> {
    let start = instance.answer_start();
    if start < 0 {
        return Vec::new();
    }
    let start = start as usize;
    let end = start + crate::text::char_len(instance.answer());
    let spans = token_spans(&instance.context);
    let mut located: Vec<Located> = gold
        .iter()
        .enumerate()
        .flat_map(|(gi, a)| a.aliases().iter().flat_map(move |al| find_mentions(&instance.context, al).into_iter().map(move |m| (gi, m))))
        .filter(|(_, m)| m.start >= start && m.end <= end)
        .map(|(gold, mention)| Located {
            gold,
            mention,
            first_token: token_index(&spans, mention.start),
            last_token: token_index(&spans, mention.end - 1),
        })
        .collect();
    located.sort_by_key(|l| (l.mention.start, l.mention.end));
    located.windows(2).map(|w| token_gap(&w[0], &w[1])).collect()
}
