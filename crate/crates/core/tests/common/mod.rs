//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod heads;

use std::collections::BTreeSet;

use docie_core::document::{build_candidate_table, Document, EntityCluster, MentionSpan, Triple};
use docie_core::encoder::EncoderConfig;
use docie_core::linking::EdConfig;
use docie_core::model::{Model, ModelConfig};
use docie_core::relation::RcConfig;
use docie_core::synthetic::{generate_synthetic_corpus, synthetic_kb, synthetic_schema};
use rand::Rng;

/// Every dimension at most 8.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embedding_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            max_seq_len: 200,
            dropout: 0.1,
        },
        rc: RcConfig {
            dim: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 8,
            hidden: 8,
            ..RcConfig::default()
        },
        ed: EdConfig {
            description_dim: 8,
            description_layers: 1,
            description_heads: 2,
            description_ffn_dim: 8,
            description_tokens: 8,
            max_candidates: 8,
            ..EdConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn span(a: usize, b: usize) -> MentionSpan {
    MentionSpan::new(a, b)
}

/// "Ada Park works for Northfield . Park smiled": two entities, one fact, and
/// an alias shared with another person of the knowledge base.
pub fn linked_doc() -> Document {
    Document {
        id: "fixture".into(),
        tokens: "Ada Park works for Northfield . Park smiled".split(' ').map(String::from).collect(),
        clusters: vec![
            EntityCluster {
                mentions: [span(0, 2), span(6, 7)].into(),
                types: ["PER".to_string()].into(),
                entity_id: Some("Q1".into()),
            },
            EntityCluster {
                mentions: [span(4, 5)].into(),
                types: ["ORG".to_string()].into(),
                entity_id: Some("Q21".into()),
            },
        ],
        triples: vec![Triple {
            head: 0,
            relation: "works_for".into(),
            tail: 1,
        }],
        annotated: true,
    }
}

/// Tiny model whose vocabulary and candidate table cover the synthetic
/// corpus and the linked fixture.
pub fn tiny_model(config: ModelConfig, seed: u64) -> (Model, Vec<Document>) {
    let schema = synthetic_schema();
    let mut docs = generate_synthetic_corpus(7, 20, &schema).unwrap();
    docs.push(linked_doc());
    let mut model = Model::for_corpus(config, schema, synthetic_kb(), &docs, seed).unwrap();
    model.candidates = build_candidate_table(&docs, model.config.ed.max_candidates);
    (model, docs)
}

// ---- clustering references ----

/// Similarity values on a 1/16 grid so sums are exact in any order.
pub fn random_similarity<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        s[i][i] = 1.0;
        for j in i + 1..n {
            let v = rng.gen_range(0..=16) as f64 / 16.0;
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

fn canonical(mut clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort();
    clusters.dedup();
    clusters
}

/// C_i = { m_j : S_ij > t, m_j not in any C_k, k < i }, then mentions left
/// over become singletons.
pub fn greedy_reference(s: &[Vec<f64>], t: f64) -> Vec<Vec<usize>> {
    let n = s.len();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let c = (0..n)
            .filter(|&j| s[i][j] > t && !clusters.iter().any(|k| k.contains(&j)))
            .collect();
        clusters.push(c);
    }
    for j in 0..n {
        if !clusters.iter().any(|k| k.contains(&j)) {
            clusters.push(vec![j]);
        }
    }
    canonical(clusters)
}

pub fn greedy_multi_reference(s: &[Vec<f64>], t: f64) -> Vec<Vec<usize>> {
    let n = s.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| s[i][j] > t).collect()).collect();
    for j in 0..n {
        if !clusters.iter().any(|k| k.contains(&j)) {
            clusters.push(vec![j]);
        }
    }
    canonical(clusters)
}

/// Naive agglomeration: recompute every inter-cluster distance from scratch
/// each round, merge the closest pair (ties to the pair with the smallest
/// minimum members), stop once the closest exceeds 1 - t.
pub fn linkage_reference(s: &[Vec<f64>], t: f64, complete: bool) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..s.len()).map(|i| vec![i]).collect();
    loop {
        clusters.sort_by_key(|c| *c.iter().min().unwrap());
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let dists: Vec<f64> = clusters[a]
                    .iter()
                    .flat_map(|&i| clusters[b].iter().map(move |&j| 1.0 - s[i][j]))
                    .collect();
                let d = if complete {
                    dists.iter().cloned().fold(f64::MIN, f64::max)
                } else {
                    dists.iter().sum::<f64>() / dists.len() as f64
                };
                if best.is_none() || d < best.unwrap().0 {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= 1.0 - t => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
            }
            _ => break,
        }
    }
    canonical(clusters)
}

pub fn group_by_reference(ids: &[Option<String>]) -> Vec<Vec<usize>> {
    let mut clusters = Vec::new();
    for i in 0..ids.len() {
        match &ids[i] {
            None => clusters.push(vec![i]),
            Some(id) => {
                if !(0..i).any(|k| ids[k].as_ref() == Some(id)) {
                    clusters.push((i..ids.len()).filter(|&k| ids[k].as_ref() == Some(id)).collect());
                }
            }
        }
    }
    canonical(clusters)
}

// ---- hard metric references ----

/// Cluster correctness read straight from the definition: same mentions, same
/// type, and (when asked) same identifier as some gold cluster.
fn cluster_matches(p: &EntityCluster, g: &EntityCluster, with_id: bool) -> bool {
    p.mentions == g.mentions && p.types == g.types && (!with_id || p.entity_id == g.entity_id)
}

fn triple_matches(pd: &Document, pt: &Triple, gd: &Document, gt: &Triple, with_id: bool) -> bool {
    pt.relation == gt.relation
        && cluster_matches(&pd.clusters[pt.head], &gd.clusters[gt.head], with_id)
        && cluster_matches(&pd.clusters[pt.tail], &gd.clusters[gt.tail], with_id)
}

/// `(correct predicted, predicted, gold)`, with duplicate triples (same
/// relation over clusters equal in every compared field) counted once.
pub fn hard_reference(pred: &Document, gold: &Document, with_id: bool) -> (usize, usize, usize) {
    let distinct = |d: &Document| -> Vec<Triple> {
        let mut kept: Vec<Triple> = Vec::new();
        for t in &d.triples {
            if !kept.iter().any(|k| triple_matches(d, k, d, t, with_id)) {
                kept.push(t.clone());
            }
        }
        kept
    };
    let p = distinct(pred);
    let g = distinct(gold);
    let correct = p
        .iter()
        .filter(|pt| g.iter().any(|gt| triple_matches(pred, pt, gold, gt, with_id)))
        .count();
    (correct, p.len(), g.len())
}

pub fn f1(tp: usize, pred: usize, gold: usize) -> f64 {
    let p = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

const TYPES: [&str; 2] = ["PER", "ORG"];
const IDS: [Option<&str>; 4] = [Some("Q1"), Some("Q2"), Some("Q3"), None];
const RELS: [&str; 2] = ["r1", "r2"];

/// A gold document over disjoint single-token spans and a prediction made by
/// perturbing it: moved mentions, merges, splits, type and identifier flips,
/// dropped, added and relabeled triples.
pub fn random_hard_fixture<R: Rng>(rng: &mut R) -> (Document, Document) {
    let n_clusters = rng.gen_range(1..=5);
    let mut token = 0;
    let mut gold_clusters = Vec::new();
    for _ in 0..n_clusters {
        let k = rng.gen_range(1..=3);
        let mentions: BTreeSet<MentionSpan> = (0..k).map(|i| span(token + 2 * i, token + 2 * i + 1)).collect();
        token += 2 * k;
        gold_clusters.push(EntityCluster {
            mentions,
            types: [TYPES[rng.gen_range(0..2)].to_string()].into(),
            entity_id: IDS[rng.gen_range(0..4)].map(String::from),
        });
    }
    let mut gold_triples = Vec::new();
    for _ in 0..rng.gen_range(0..=6) {
        let t = Triple {
            head: rng.gen_range(0..n_clusters),
            relation: RELS[rng.gen_range(0..2)].into(),
            tail: rng.gen_range(0..n_clusters),
        };
        if t.head != t.tail && !gold_triples.contains(&t) {
            gold_triples.push(t);
        }
    }
    let gold = Document {
        id: "g".into(),
        tokens: vec!["w".into(); token + 4],
        clusters: gold_clusters,
        triples: gold_triples,
        annotated: true,
    };

    let mut pred = gold.clone();
    pred.id = "p".into();
    for c in &mut pred.clusters {
        match rng.gen_range(0..10) {
            0 => {
                c.mentions.insert(span(token + 1, token + 2));
            }
            1 if c.mentions.len() > 1 => {
                let first = *c.mentions.iter().next().unwrap();
                c.mentions.remove(&first);
            }
            2 => {
                c.types = [TYPES[rng.gen_range(0..2)].to_string()].into();
            }
            3 | 4 => c.entity_id = IDS[rng.gen_range(0..4)].map(String::from),
            _ => {}
        }
    }
    if pred.clusters.len() > 1 && rng.gen_bool(0.2) {
        let moved = pred.clusters[1].mentions.clone();
        pred.clusters[0].mentions.extend(moved);
    }
    if rng.gen_bool(0.15) {
        // Duplicate cluster content under a second index.
        let copy = pred.clusters[0].clone();
        pred.clusters.push(copy);
    }
    let n = pred.clusters.len();
    pred.triples.retain(|_| rng.gen_bool(0.8));
    for t in &mut pred.triples {
        if rng.gen_bool(0.15) {
            t.relation = RELS[rng.gen_range(0..2)].into();
        }
        if rng.gen_bool(0.1) {
            std::mem::swap(&mut t.head, &mut t.tail);
        }
    }
    for _ in 0..rng.gen_range(0..=2) {
        let (h, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if h != t {
            pred.triples.push(Triple {
                head: h,
                relation: RELS[rng.gen_range(0..2)].into(),
                tail: t,
            });
        }
    }
    if rng.gen_bool(0.2) {
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let clusters = order.iter().map(|&i| pred.clusters[i].clone()).collect();
        pred.clusters = clusters;
        for t in &mut pred.triples {
            t.head = n - 1 - t.head;
            t.tail = n - 1 - t.tail;
        }
    }
    (pred, gold)
}
