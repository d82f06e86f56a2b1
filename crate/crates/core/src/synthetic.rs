//! A small fixed knowledge graph and a seeded generator of annotated
//! documents about it.
//!
//! Every document picks a handful of related entities, introduces each with a
//! sentence naming its fine type, then states every knowledge-graph fact that
//! holds between the chosen entities. About half of the facts use a
//! two-sentence template, so head and tail never share a sentence. Later
//! mentions often use a short alias ("Park", "Acme"); aliases are shared by
//! several entities ("Jordan" is a person and a country), but never by two
//! entities of the same document.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::document::{Document, EntityCluster, KbEntity, KnowledgeBase, MentionSpan, Schema, Triple};
use crate::error::{Error, Result};

struct Entity {
    id: &'static str,
    name: &'static str,
    alias: Option<&'static str>,
    kind: &'static str,
    fine: &'static [&'static str],
    /// Noun used in the introduction sentence.
    noun: &'static str,
}

const fn person(id: &'static str, name: &'static str, alias: &'static str, job: &'static str, fine: &'static [&'static str]) -> Entity {
    Entity {
        id,
        name,
        alias: Some(alias),
        kind: "PER",
        fine,
        noun: job,
    }
}

const SCIENTIST: &[&str] = &["human", "scientist"];
const POLITICIAN: &[&str] = &["human", "politician"];
const ATHLETE: &[&str] = &["human", "athlete"];

const ENTITIES: &[Entity] = &[
    person("Q1", "Ada Park", "Park", "scientist", SCIENTIST),
    person("Q2", "Ben Park", "Park", "politician", POLITICIAN),
    person("Q3", "Carl Weiss", "Weiss", "politician", POLITICIAN),
    person("Q4", "Dana Cole", "Cole", "scientist", SCIENTIST),
    person("Q5", "Evan Stone", "Stone", "athlete", ATHLETE),
    person("Q6", "Faye Lin", "Lin", "scientist", SCIENTIST),
    person("Q7", "Sam Jordan", "Jordan", "athlete", ATHLETE),
    person("Q8", "Omar Haddad", "Haddad", "politician", POLITICIAN),
    person("Q9", "Lena Haddad", "Haddad", "scientist", SCIENTIST),
    person("Q10", "Ivo Stone", "Stone", "politician", POLITICIAN),
    person("Q11", "Mia Cole", "Cole", "athlete", ATHLETE),
    person("Q12", "Noah Weiss", "Weiss", "scientist", SCIENTIST),
    Entity { id: "Q20", name: "Acme Corporation", alias: Some("Acme"), kind: "ORG", fine: &["business"], noun: "company" },
    Entity { id: "Q21", name: "Northfield University", alias: Some("Northfield"), kind: "ORG", fine: &["university"], noun: "university" },
    Entity { id: "Q22", name: "Bluestar Motors", alias: Some("Bluestar"), kind: "ORG", fine: &["business"], noun: "company" },
    Entity { id: "Q23", name: "Kestrel College", alias: Some("Kestrel"), kind: "ORG", fine: &["university"], noun: "university" },
    Entity { id: "Q24", name: "Orion Bank", alias: Some("Orion"), kind: "ORG", fine: &["business"], noun: "company" },
    Entity { id: "Q25", name: "Velo Foods", alias: Some("Velo"), kind: "ORG", fine: &["business"], noun: "company" },
    Entity { id: "Q30", name: "Riverton", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q31", name: "Lakeside", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q32", name: "Port Elm", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q33", name: "Highgate", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q34", name: "Amman", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q35", name: "Velo", alias: None, kind: "LOC", fine: &["city"], noun: "city" },
    Entity { id: "Q40", name: "Avalon", alias: None, kind: "LOC", fine: &["country"], noun: "country" },
    Entity { id: "Q41", name: "Norland", alias: None, kind: "LOC", fine: &["country"], noun: "country" },
    Entity { id: "Q42", name: "Jordan", alias: None, kind: "LOC", fine: &["country"], noun: "country" },
    Entity { id: "Q43", name: "Estoria", alias: None, kind: "LOC", fine: &["country"], noun: "country" },
];

/// `(relation, knowledge-base property, same-sentence template, two-sentence template)`.
/// `{h}` and `{t}` stand for head and tail mentions.
const RELATIONS: &[(&str, &str, &str, &str)] = &[
    ("works_for", "P108", "{h} works for {t} .", "{h} signed a new contract last spring . The employer is {t} ."),
    ("born_in", "P19", "{h} was born in {t} .", "{h} grew up in a small house . That birthplace is {t} ."),
    ("citizen_of", "P27", "{h} is a citizen of {t} .", "{h} holds a passport . It was issued by {t} ."),
    ("headquartered_in", "P159", "{h} is based in {t} .", "{h} opened new offices . The head office is in {t} ."),
    ("founded_by", "P112", "{h} was founded by {t} .", "{h} started as a small firm . Its founder is {t} ."),
    ("located_in", "P131", "{h} lies in {t} .", "{h} is a busy place . It belongs to {t} ."),
];

const FACTS: &[(&str, &str, &str)] = &[
    ("Q1", "works_for", "Q21"), ("Q1", "born_in", "Q30"), ("Q1", "citizen_of", "Q40"),
    ("Q2", "works_for", "Q20"), ("Q2", "born_in", "Q33"), ("Q2", "citizen_of", "Q41"),
    ("Q3", "works_for", "Q20"), ("Q3", "born_in", "Q31"), ("Q3", "citizen_of", "Q40"),
    ("Q4", "works_for", "Q21"), ("Q4", "born_in", "Q32"), ("Q4", "citizen_of", "Q41"),
    ("Q5", "works_for", "Q22"), ("Q5", "born_in", "Q35"), ("Q5", "citizen_of", "Q43"),
    ("Q6", "works_for", "Q23"), ("Q6", "born_in", "Q33"), ("Q6", "citizen_of", "Q41"),
    ("Q7", "works_for", "Q22"), ("Q7", "born_in", "Q30"), ("Q7", "citizen_of", "Q40"),
    ("Q8", "works_for", "Q24"), ("Q8", "born_in", "Q34"), ("Q8", "citizen_of", "Q42"),
    ("Q9", "works_for", "Q23"), ("Q9", "born_in", "Q34"), ("Q9", "citizen_of", "Q42"),
    ("Q10", "works_for", "Q25"), ("Q10", "born_in", "Q35"), ("Q10", "citizen_of", "Q43"),
    ("Q11", "works_for", "Q24"), ("Q11", "born_in", "Q31"), ("Q11", "citizen_of", "Q40"),
    ("Q12", "works_for", "Q25"), ("Q12", "born_in", "Q32"), ("Q12", "citizen_of", "Q41"),
    ("Q20", "headquartered_in", "Q30"), ("Q20", "founded_by", "Q3"),
    ("Q21", "headquartered_in", "Q31"), ("Q21", "founded_by", "Q4"),
    ("Q22", "headquartered_in", "Q32"), ("Q22", "founded_by", "Q5"),
    ("Q23", "headquartered_in", "Q33"), ("Q23", "founded_by", "Q6"),
    ("Q24", "headquartered_in", "Q34"), ("Q24", "founded_by", "Q8"),
    ("Q25", "headquartered_in", "Q31"), ("Q25", "founded_by", "Q10"),
    ("Q30", "located_in", "Q40"), ("Q31", "located_in", "Q40"),
    ("Q32", "located_in", "Q41"), ("Q33", "located_in", "Q41"),
    ("Q34", "located_in", "Q42"), ("Q35", "located_in", "Q43"),
];

const ALIAS_RATE: f64 = 0.4;
const CROSS_SENTENCE_RATE: f64 = 0.5;

/// Schema of the synthetic world.
pub fn synthetic_schema() -> Schema {
    let fine: BTreeSet<&str> = ENTITIES.iter().flat_map(|e| e.fine.iter().copied()).collect();
    Schema {
        entity_types: vec!["PER".into(), "ORG".into(), "LOC".into()],
        relations: RELATIONS.iter().map(|r| r.0.to_string()).collect(),
        entities: ENTITIES.iter().map(|e| e.id.to_string()).collect(),
        fine_types: fine.into_iter().map(str::to_string).collect(),
        fine_relations: RELATIONS.iter().map(|r| r.1.to_string()).collect(),
    }
}

fn entity(id: &str) -> &'static Entity {
    ENTITIES.iter().find(|e| e.id == id).expect("fact refers to a known entity")
}

fn name_of(id: &str) -> &'static str {
    entity(id).name
}

/// Knowledge base of the synthetic world: short descriptions built from the
/// entity's fine type and its facts.
pub fn synthetic_kb() -> KnowledgeBase {
    KnowledgeBase::new(ENTITIES.iter().map(|e| {
        let mut words = vec![e.noun.to_string()];
        for (h, r, t) in FACTS {
            if *h == e.id {
                words.push(r.replace('_', " "));
                words.push(name_of(t).to_string());
            }
        }
        KbEntity {
            entity_id: e.id.to_string(),
            description: words.join(" "),
            fine_types: e.fine.iter().map(|f| f.to_string()).collect(),
        }
    }))
}

fn surfaces(e: &Entity) -> impl Iterator<Item = &'static str> {
    std::iter::once(e.name).chain(e.alias)
}

fn neighbours(id: &str) -> Vec<&'static str> {
    let mut out: Vec<&'static str> = FACTS
        .iter()
        .filter_map(|(h, _, t)| {
            if *h == id {
                Some(*t)
            } else if *t == id {
                Some(*h)
            } else {
                None
            }
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

struct Builder {
    tokens: Vec<String>,
    mentions: Vec<Vec<MentionSpan>>,
}

impl Builder {
    fn sentence(&mut self, template: &str, slots: &[(usize, &str)]) {
        for word in template.split_whitespace() {
            if word == "{h}" || word == "{t}" {
                let (cluster, surface) = slots[if word == "{h}" { 0 } else { 1 }];
                let start = self.tokens.len();
                self.tokens.extend(surface.split_whitespace().map(str::to_string));
                self.mentions[cluster].push(MentionSpan::new(start, self.tokens.len()));
            } else {
                self.tokens.push(word.to_string());
            }
        }
    }
}

/// `n_docs` documents, identical for identical `seed`. The schema must be the
/// synthetic one (or a superset of its labels).
pub fn generate_synthetic_corpus(seed: u64, n_docs: usize, schema: &Schema) -> Result<Vec<Document>> {
    schema.validate()?;
    let own = synthetic_schema();
    for (what, need, have) in [
        ("entity type", &own.entity_types, &schema.entity_types),
        ("relation", &own.relations, &schema.relations),
        ("entity", &own.entities, &schema.entities),
    ] {
        if let Some(missing) = need.iter().find(|l| !have.contains(l)) {
            return Err(Error::SchemaMismatch(format!(
                "synthetic world needs {what} {missing} in the schema"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs).map(|d| generate_document(&mut rng, format!("synth-{d}"))).collect()
}

fn generate_document(rng: &mut ChaCha8Rng, id: String) -> Result<Document> {
    let target = rng.gen_range(4..=6);
    let focus = ENTITIES.choose(rng).expect("world is not empty");
    let mut chosen: Vec<&'static str> = vec![focus.id];
    let mut frontier = neighbours(focus.id);
    while chosen.len() < target {
        frontier.retain(|c| !chosen.contains(c));
        let pick = if frontier.is_empty() {
            ENTITIES.choose(rng).expect("world is not empty").id
        } else {
            frontier[rng.gen_range(0..frontier.len())]
        };
        let clash = chosen
            .iter()
            .any(|c| surfaces(entity(c)).any(|s| surfaces(entity(pick)).any(|p| p == s)));
        if chosen.contains(&pick) || clash {
            frontier.retain(|c| *c != pick);
            if frontier.is_empty() && chosen.len() >= 3 {
                break;
            }
            continue;
        }
        chosen.push(pick);
        frontier.extend(neighbours(pick));
    }

    let index: BTreeMap<&str, usize> = chosen.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let facts: Vec<(usize, usize, usize)> = FACTS
        .iter()
        .filter_map(|(h, r, t)| {
            let rel = RELATIONS.iter().position(|x| x.0 == *r)?;
            Some((*index.get(h)?, rel, *index.get(t)?))
        })
        .collect();

    let mut b = Builder {
        tokens: Vec::new(),
        mentions: vec![Vec::new(); chosen.len()],
    };
    let mut intro_order: Vec<usize> = (0..chosen.len()).collect();
    intro_order.shuffle(rng);
    for &c in &intro_order {
        let e = entity(chosen[c]);
        let article = if e.noun.starts_with(['a', 'e', 'i', 'o']) { "an" } else { "a" };
        b.sentence(&format!("{{h}} is {article} {} .", e.noun), &[(c, e.name)]);
    }
    let mut fact_order = facts.clone();
    fact_order.shuffle(rng);
    for (h, r, t) in fact_order {
        let template = if rng.gen_bool(CROSS_SENTENCE_RATE) {
            RELATIONS[r].3
        } else {
            RELATIONS[r].2
        };
        let mut surface = |c: usize| {
            let e = entity(chosen[c]);
            match e.alias {
                Some(a) if rng.gen_bool(ALIAS_RATE) => a,
                _ => e.name,
            }
        };
        let (hs, ts) = (surface(h), surface(t));
        b.sentence(template, &[(h, hs), (t, ts)]);
    }

    let kinds = chosen.iter().map(|c| entity(c).kind);
    let clusters = b
        .mentions
        .into_iter()
        .zip(kinds)
        .zip(&chosen)
        .map(|((mentions, kind), id)| EntityCluster {
            mentions: mentions.into_iter().collect(),
            types: [kind.to_string()].into(),
            entity_id: Some(id.to_string()),
        })
        .collect();
    let doc = Document {
        id,
        tokens: b.tokens,
        clusters,
        triples: facts
            .into_iter()
            .map(|(h, r, t)| Triple {
                head: h,
                relation: RELATIONS[r].0.to_string(),
                tail: t,
            })
            .collect(),
        annotated: true,
    };
    doc.check_overlaps()?;
    Ok(doc)
}

/// Sentence index of every token, splitting after each `.` token.
pub fn sentence_ids(tokens: &[String]) -> Vec<usize> {
    let mut s = 0;
    tokens
        .iter()
        .map(|t| {
            let id = s;
            if t == "." {
                s += 1;
            }
            id
        })
        .collect()
}

/// Fraction of triples whose head and tail never have mentions in the same
/// sentence.
pub fn cross_sentence_fraction(corpus: &[Document]) -> f64 {
    let (mut cross, mut total) = (0usize, 0usize);
    for doc in corpus {
        let sent = sentence_ids(&doc.tokens);
        let sentences = |c: usize| -> BTreeSet<usize> {
            doc.clusters[c].mentions.iter().map(|m| sent[m.start]).collect()
        };
        for t in &doc.triples {
            total += 1;
            if sentences(t.head).is_disjoint(&sentences(t.tail)) {
                cross += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        cross as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{corpus_to_json, parse_corpus_str};

    #[test]
    fn schema_and_kb_are_consistent() {
        let schema = synthetic_schema();
        schema.validate().unwrap();
        let kb = synthetic_kb();
        assert_eq!(kb.len(), schema.entities.len());
        for e in kb.iter() {
            assert!(e.fine_types.iter().all(|f| schema.fine_type_index(f).is_some()));
            assert!(!e.description.is_empty());
        }
        for (h, r, t) in FACTS {
            assert!(schema.relation_index(r).is_some());
            entity(h);
            entity(t);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let schema = synthetic_schema();
        let a = generate_synthetic_corpus(9, 5, &schema).unwrap();
        let b = generate_synthetic_corpus(9, 5, &schema).unwrap();
        assert_eq!(corpus_to_json(&a), corpus_to_json(&b));
        assert_ne!(corpus_to_json(&a), corpus_to_json(&generate_synthetic_corpus(10, 5, &schema).unwrap()));
        assert!(generate_synthetic_corpus(9, 0, &schema).unwrap().is_empty());
    }

    #[test]
    fn round_trips_through_ingestion() {
        let schema = synthetic_schema();
        let docs = generate_synthetic_corpus(1, 20, &schema).unwrap();
        let parsed = parse_corpus_str(&corpus_to_json(&docs), &schema).unwrap();
        assert_eq!(parsed, docs);
    }

    #[test]
    fn surface_clash_never_inside_one_document() {
        let docs = generate_synthetic_corpus(4, 50, &synthetic_schema()).unwrap();
        for doc in &docs {
            let mut seen: BTreeMap<String, &str> = BTreeMap::new();
            for c in &doc.clusters {
                let id = c.entity_id.as_deref().unwrap();
                for m in &c.mentions {
                    let prev = seen.insert(doc.surface(*m), id);
                    assert!(prev.is_none_or(|p| p == id), "{} in {}", doc.surface(*m), doc.id);
                }
            }
        }
    }
}
