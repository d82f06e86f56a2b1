//! Scorers for every subtask and the two end-to-end hard metrics.
//!
//! Each `eval_*` function counts one document; [`Counts`] add up across a
//! corpus and turn into micro precision, recall and F1 at the end.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use docie_autodiff::Graph;
use serde::Serialize;

use crate::clustering::ClusteringMethod;
use crate::document::{Document, EntityCluster, MentionSpan, Triple};
use crate::error::Result;
use crate::model::{Extraction, ForwardOptions, Grouping, Model};
use crate::training::{route_inputs, Phase, Section, TrainingMode};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.predicted);
        let recall = ratio(self.tp, self.gold);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
            tp: self.tp,
            predicted: self.predicted,
            gold: self.gold,
        }
    }

    fn of_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Self {
        Self {
            tp: pred.intersection(gold).count(),
            predicted: pred.len(),
            gold: gold.len(),
        }
    }
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision, recall and F1 with the counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

/// Exact span match.
pub fn eval_md(pred: &[MentionSpan], gold: &[MentionSpan]) -> Counts {
    Counts::of_sets(&pred.iter().copied().collect(), &gold.iter().copied().collect())
}

/// Every mention of a cluster paired with every type of the cluster.
pub fn typed_mentions(doc: &Document) -> Vec<(MentionSpan, String)> {
    doc.clusters
        .iter()
        .flat_map(|c| c.mentions.iter().flat_map(move |m| c.types.iter().map(move |t| (*m, t.clone()))))
        .collect()
}

/// Scored per (span, type) pair, which for single-type schemas is exact span
/// plus exact type.
pub fn eval_ner(pred: &[(MentionSpan, String)], gold: &[(MentionSpan, String)]) -> Counts {
    Counts::of_sets(&pred.iter().cloned().collect(), &gold.iter().cloned().collect())
}

/// Running B-cubed sums: per-mention precision and recall and the number of
/// mentions each was averaged over.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BCubed {
    pub precision_sum: f64,
    pub precision_n: usize,
    pub recall_sum: f64,
    pub recall_n: usize,
}

impl BCubed {
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.precision_n == 0 { 0.0 } else { self.precision_sum / self.precision_n as f64 };
        let r = if self.recall_n == 0 { 0.0 } else { self.recall_sum / self.recall_n as f64 };
        (p, r, f1(p, r))
    }
}

impl AddAssign for BCubed {
    fn add_assign(&mut self, o: BCubed) {
        self.precision_sum += o.precision_sum;
        self.precision_n += o.precision_n;
        self.recall_sum += o.recall_sum;
        self.recall_n += o.recall_n;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CorefCounts {
    /// A predicted cluster counts when its mention set equals a gold cluster's.
    pub hard: Counts,
    pub b_cubed: BCubed,
}

impl AddAssign for CorefCounts {
    fn add_assign(&mut self, o: CorefCounts) {
        self.hard += o.hard;
        self.b_cubed += o.b_cubed;
    }
}

/// Mentions absent from the other side count as singletons there.
fn b_cubed_side(from: &[BTreeSet<MentionSpan>], other: &[BTreeSet<MentionSpan>]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for cluster in from {
        for m in cluster {
            let overlap = other
                .iter()
                .filter(|o| o.contains(m))
                .map(|o| o.intersection(cluster).count())
                .max()
                .unwrap_or(1);
            sum += overlap as f64 / cluster.len() as f64;
            n += 1;
        }
    }
    (sum, n)
}

pub fn eval_coref(pred: &[BTreeSet<MentionSpan>], gold: &[BTreeSet<MentionSpan>]) -> CorefCounts {
    let pred_set: BTreeSet<&BTreeSet<MentionSpan>> = pred.iter().filter(|c| !c.is_empty()).collect();
    let gold_set: BTreeSet<&BTreeSet<MentionSpan>> = gold.iter().filter(|c| !c.is_empty()).collect();
    let (precision_sum, precision_n) = b_cubed_side(pred, gold);
    let (recall_sum, recall_n) = b_cubed_side(gold, pred);
    CorefCounts {
        hard: Counts::of_sets(&pred_set, &gold_set),
        b_cubed: BCubed {
            precision_sum,
            precision_n,
            recall_sum,
            recall_n,
        },
    }
}

/// Mention-level linking over `(predicted, gold)` identifiers. A mention is
/// predicted when it has an id and gold when its gold cluster is linked; NIL
/// on a linked mention is a miss.
pub fn eval_ed(pairs: &[(Option<&str>, Option<&str>)]) -> Counts {
    let mut c = Counts::default();
    for (p, g) in pairs {
        c.predicted += p.is_some() as usize;
        c.gold += g.is_some() as usize;
        c.tp += (p.is_some() && p == g) as usize;
    }
    c
}

/// Exact `(head, relation, tail)` match over gold cluster indices.
pub fn eval_rc(pred: &[Triple], gold: &[Triple]) -> Counts {
    let key = |t: &Triple| (t.head, t.relation.clone(), t.tail);
    Counts::of_sets(&pred.iter().map(key).collect(), &gold.iter().map(key).collect())
}

type ClusterKey<'a> = (&'a BTreeSet<MentionSpan>, &'a BTreeSet<String>, Option<&'a Option<String>>);

fn cluster_key(c: &EntityCluster, with_id: bool) -> ClusterKey<'_> {
    (&c.mentions, &c.types, with_id.then_some(&c.entity_id))
}

fn hard_triples(doc: &Document, with_id: bool) -> BTreeSet<(ClusterKey<'_>, &str, ClusterKey<'_>)> {
    doc.triples
        .iter()
        .filter_map(|t| {
            let h = doc.clusters.get(t.head)?;
            let tl = doc.clusters.get(t.tail)?;
            Some((cluster_key(h, with_id), t.relation.as_str(), cluster_key(tl, with_id)))
        })
        .collect()
}

/// A triple counts when its relation matches and both argument clusters equal
/// a gold cluster in mentions and types.
pub fn eval_re_hard(pred: &Document, gold: &Document) -> Counts {
    Counts::of_sets(&hard_triples(pred, false), &hard_triples(gold, false))
}

/// As [`eval_re_hard`], with the entity identifier also part of cluster
/// equality (NIL equals NIL).
pub fn eval_docie_hard(pred: &Document, gold: &Document) -> Counts {
    Counts::of_sets(&hard_triples(pred, true), &hard_triples(gold, true))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorefReport {
    pub hard: Prf,
    pub b_cubed_precision: f64,
    pub b_cubed_recall: f64,
    pub b_cubed_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct E2eReport {
    pub re_hard: Prf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub docie_hard: Option<Prf>,
}

/// Sections absent from the mode are left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub documents: usize,
    pub truncated_documents: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub md: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub et: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ner: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ed: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coref: Option<CorefReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rc: Option<Prf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e2e: Option<E2eReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(&str, Prf)> = Vec::new();
        let mut push = |name, p: &Option<Prf>| {
            if let Some(p) = p {
                rows.push((name, *p));
            }
        };
        push("MD", &self.md);
        push("ET", &self.et);
        push("NER", &self.ner);
        push("ED", &self.ed);
        push("Coref", &self.coref.as_ref().map(|c| c.hard));
        push("RC", &self.rc);
        if let Some(e) = &self.e2e {
            push("RE hard", &Some(e.re_hard));
            push("DocIE hard", &e.docie_hard);
        }
        let mut out = format!(
            "mode {}, {} documents ({} truncated)\n{:<11}{:>9}{:>9}{:>9}{:>7}{:>7}{:>7}\n",
            self.mode, self.documents, self.truncated_documents, "task", "P", "R", "F1", "tp", "pred", "gold"
        );
        for (name, p) in rows {
            let _ = writeln!(
                out,
                "{name:<11}{:>9.4}{:>9.4}{:>9.4}{:>7}{:>7}{:>7}",
                p.precision, p.recall, p.f1, p.tp, p.predicted, p.gold
            );
        }
        if let Some(c) = &self.coref {
            let _ = writeln!(
                out,
                "{:<11}{:>9.4}{:>9.4}{:>9.4}",
                "Coref B3", c.b_cubed_precision, c.b_cubed_recall, c.b_cubed_f1
            );
        }
        out
    }
}

#[derive(Default)]
struct Totals {
    md: Counts,
    et: Counts,
    ner: Counts,
    ed: Counts,
    coref: CorefCounts,
    rc: Counts,
    re_hard: Counts,
    docie_hard: Counts,
    sections: BTreeSet<Section>,
}

fn span_sets(ex: &Extraction) -> Vec<BTreeSet<MentionSpan>> {
    ex.clusters
        .iter()
        .map(|c| c.iter().map(|&m| ex.mentions[m]).collect())
        .collect()
}

/// Runs the passes the mode asks for on every document and scores them
/// against the (possibly truncated) gold annotation.
pub fn evaluate_model(model: &Model, docs: &[Document], mode: TrainingMode) -> Result<EvalReport> {
    let clustering = &model.config.clustering;
    let entity_link = clustering.method == ClusteringMethod::EntityLink;
    let mut t = Totals::default();
    let mut truncated = 0;
    for doc in docs {
        let mut doc_truncated = false;
        for pass in route_inputs(mode, Phase::Eval, doc)? {
            let needs_links =
                pass.link || (entity_link && pass.sections.iter().any(|s| matches!(s, Section::Coref | Section::Ner | Section::E2e)));
            let opts = ForwardOptions {
                link: needs_links,
                ..model.options(pass.mentions, needs_links)
            };
            let mut g = Graph::new();
            let out = model.forward(&mut g, doc, opts)?;
            doc_truncated |= out.truncated;
            let gold = &out.doc;
            let has = |s| pass.sections.contains(&s);
            t.sections.extend(pass.sections.iter().copied());

            if has(Section::Md) {
                let spans: Vec<MentionSpan> = gold.gold_mentions().into_iter().map(|(s, _)| s).collect();
                t.md += eval_md(&out.mentions, &spans);
            }
            if has(Section::Et) || has(Section::Ed) || has(Section::Rc) {
                let ex = model.decode(&g, &out, Grouping::Gold)?;
                if has(Section::Et) {
                    t.et += eval_ner(&typed_mentions(&ex.to_document(gold)), &typed_mentions(gold));
                }
                if has(Section::Ed) {
                    let pairs: Vec<(Option<&str>, Option<&str>)> = out
                        .mention_cluster
                        .iter()
                        .map(|&c| (ex.cluster_ids[c].as_deref(), gold.clusters[c].entity_id.as_deref()))
                        .collect();
                    t.ed += eval_ed(&pairs);
                }
                if has(Section::Rc) {
                    t.rc += eval_rc(&ex.triples, &gold.triples);
                }
            }
            if has(Section::Coref) || has(Section::Ner) || has(Section::E2e) {
                let ex = model.decode(&g, &out, Grouping::Predict(clustering))?;
                if has(Section::Coref) {
                    let gold_sets: Vec<BTreeSet<MentionSpan>> = gold.clusters.iter().map(|c| c.mentions.clone()).collect();
                    t.coref += eval_coref(&span_sets(&ex), &gold_sets);
                }
                let pred = ex.to_document(gold);
                if has(Section::Ner) {
                    t.ner += eval_ner(&typed_mentions(&pred), &typed_mentions(gold));
                }
                if has(Section::E2e) {
                    t.re_hard += eval_re_hard(&pred, gold);
                    t.docie_hard += eval_docie_hard(&pred, gold);
                }
            }
        }
        truncated += doc_truncated as usize;
    }

    let on = |s: Section, c: Counts| t.sections.contains(&s).then(|| c.prf());
    let (bp, br, bf) = t.coref.b_cubed.prf();
    Ok(EvalReport {
        mode: mode.to_string(),
        documents: docs.len(),
        truncated_documents: truncated,
        md: on(Section::Md, t.md),
        et: on(Section::Et, t.et),
        ner: on(Section::Ner, t.ner),
        ed: on(Section::Ed, t.ed),
        coref: t.sections.contains(&Section::Coref).then(|| CorefReport {
            hard: t.coref.hard.prf(),
            b_cubed_precision: bp,
            b_cubed_recall: br,
            b_cubed_f1: bf,
        }),
        rc: on(Section::Rc, t.rc),
        e2e: t.sections.contains(&Section::E2e).then(|| E2eReport {
            re_hard: t.re_hard.prf(),
            docie_hard: (mode == TrainingMode::DocIe).then(|| t.docie_hard.prf()),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(a: usize, b: usize) -> MentionSpan {
        MentionSpan::new(a, b)
    }

    fn set(spans: &[(usize, usize)]) -> BTreeSet<MentionSpan> {
        spans.iter().map(|&(a, b)| span(a, b)).collect()
    }

    #[test]
    fn md_fixtures() {
        let gold = [span(0, 1), span(2, 3), span(4, 6), span(7, 8)];
        assert_eq!(eval_md(&gold, &gold).prf().f1, 1.0);
        assert_eq!(eval_md(&[span(1, 2)], &gold).prf().f1, 0.0);
        let half = eval_md(&[span(0, 1), span(2, 3), span(4, 5), span(9, 10)], &gold).prf();
        assert_eq!((half.precision, half.recall, half.f1), (0.5, 0.5, 0.5));
        assert_eq!(eval_md(&[], &[]).prf().f1, 0.0);
    }

    #[test]
    fn ner_needs_type() {
        let gold = vec![(span(0, 1), "PER".to_string()), (span(2, 3), "ORG".to_string())];
        let pred = vec![(span(0, 1), "PER".to_string()), (span(2, 3), "LOC".to_string()), (span(5, 6), "LOC".to_string())];
        let c = eval_ner(&pred, &gold);
        assert_eq!(c, Counts { tp: 1, predicted: 3, gold: 2 });
        assert_eq!(eval_ner(&gold, &gold).prf().f1, 1.0);
    }

    #[test]
    fn coref_fixtures() {
        let gold = vec![set(&[(0, 1), (3, 4)]), set(&[(5, 6)]), set(&[(7, 8), (9, 10)])];
        let same = eval_coref(&gold, &gold);
        assert_eq!(same.hard.prf().f1, 1.0);
        assert_eq!(same.b_cubed.prf().2, 1.0);

        let merged = vec![set(&[(0, 1), (3, 4), (5, 6)]), set(&[(7, 8), (9, 10)])];
        let c = eval_coref(&merged, &gold);
        assert_eq!(c.hard, Counts { tp: 1, predicted: 2, gold: 3 });
        // Precision: 3 mentions at 2/3, 1 at 1/3, 2 at 1 -> (2/3*2 + 1/3 + 2) / 5.
        let (p, r, _) = c.b_cubed.prf();
        assert!((p - (4.0 / 3.0 + 1.0 / 3.0 + 2.0) / 5.0).abs() < 1e-12);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn ed_fixture() {
        let c = eval_ed(&[
            (Some("Q1"), Some("Q1")),
            (Some("Q2"), Some("Q1")),
            (None, Some("Q3")),
            (Some("Q4"), None),
            (None, None),
        ]);
        assert_eq!(c, Counts { tp: 1, predicted: 3, gold: 3 });
        let nil = eval_ed(&[(None, Some("Q1")), (None, Some("Q2"))]).prf();
        assert_eq!(nil.recall, 0.0);
    }

    #[test]
    fn rc_is_directed() {
        let t = |h, r: &str, tl| Triple { head: h, relation: r.into(), tail: tl };
        let gold = vec![t(0, "born_in", 1)];
        assert_eq!(eval_rc(&gold, &gold).prf().f1, 1.0);
        assert_eq!(eval_rc(&[t(1, "born_in", 0)], &gold).tp, 0);
    }

    fn cluster(spans: &[(usize, usize)], ty: &str, id: Option<&str>) -> EntityCluster {
        EntityCluster {
            mentions: set(spans),
            types: [ty.to_string()].into(),
            entity_id: id.map(String::from),
        }
    }

    fn doc(clusters: Vec<EntityCluster>, triples: &[(usize, &str, usize)]) -> Document {
        Document {
            id: "d".into(),
            tokens: vec!["x".into(); 12],
            clusters,
            triples: triples
                .iter()
                .map(|&(h, r, t)| Triple { head: h, relation: r.into(), tail: t })
                .collect(),
            annotated: true,
        }
    }

    #[test]
    fn hard_metric_fixtures() {
        let gold = doc(
            vec![
                cluster(&[(0, 1), (4, 5)], "PER", Some("Q1")),
                cluster(&[(2, 3)], "ORG", Some("Q2")),
                cluster(&[(6, 7)], "LOC", Some("Q3")),
            ],
            &[(0, "works_for", 1), (1, "located_in", 2)],
        );
        assert_eq!(eval_re_hard(&gold, &gold).prf().f1, 1.0);
        assert_eq!(eval_docie_hard(&gold, &gold).prf().f1, 1.0);

        // A spurious mention on the head cluster loses every triple on it.
        let mut spurious = gold.clone();
        spurious.clusters[0].mentions.insert(span(9, 10));
        assert_eq!(eval_re_hard(&spurious, &gold), Counts { tp: 1, predicted: 2, gold: 2 });

        let mut relabeled = gold.clone();
        relabeled.triples[0].relation = "founded_by".into();
        assert_eq!(eval_re_hard(&relabeled, &gold).tp, 1);

        // Correct for RE, wrong identifier for DocIE.
        let mut wrong_id = gold.clone();
        wrong_id.clusters[1].entity_id = Some("Q9".into());
        assert_eq!(eval_re_hard(&wrong_id, &gold).prf().f1, 1.0);
        assert_eq!(eval_docie_hard(&wrong_id, &gold).tp, 0);

        // Cluster order does not matter.
        let mut shuffled = gold.clone();
        shuffled.clusters.reverse();
        for t in &mut shuffled.triples {
            t.head = 2 - t.head;
            t.tail = 2 - t.tail;
        }
        assert_eq!(eval_docie_hard(&shuffled, &gold).prf().f1, 1.0);
    }

    #[test]
    fn table_lists_present_sections() {
        let p = Counts { tp: 1, predicted: 2, gold: 2 }.prf();
        let report = EvalReport {
            mode: "re".into(),
            documents: 1,
            truncated_documents: 0,
            md: Some(p),
            et: None,
            ner: None,
            ed: None,
            coref: None,
            rc: Some(p),
            e2e: None,
        };
        let table = report.to_table();
        assert!(table.contains("MD") && table.contains("RC") && !table.contains("ED"));
        assert!(!report.to_json().contains("\"ed\""));
    }
}
