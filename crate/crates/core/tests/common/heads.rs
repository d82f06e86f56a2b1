//! Finite-difference checks of every task head on a linked 8-token document.

use docie_autodiff::gradcheck::check_gradients;
use docie_autodiff::{Graph, NodeId, ParamId, ParamStore};
use docie_core::model::{MentionSource, Model, ModelConfig};
use docie_core::training::{task_losses, LossWeights, Task};

use super::{linked_doc, tiny_config, tiny_model};

const TOLERANCE: f64 = 1e-4;

fn only(task: Task) -> LossWeights {
    let mut w = LossWeights::ZERO;
    match task {
        Task::Md => w.md = 1.0,
        Task::Et => w.et = 1.0,
        Task::Ed => w.ed = 1.0,
        Task::Coref => w.coref = 1.0,
        Task::Rc => w.rc = 1.0,
    }
    w
}

fn term(model: &Model, g: &mut Graph, params: &ParamStore, task: Task) -> docie_autodiff::Result<NodeId> {
    let contract = |e: docie_core::Error| docie_autodiff::Error::Contract(e.to_string());
    let doc = linked_doc();
    let out = model
        .forward_with(params, g, &doc, model.options(MentionSource::Gold, true))
        .map_err(contract)?;
    let terms = task_losses(model, g, &out, &only(task)).map_err(contract)?;
    Ok(terms.get(task).expect("fixture yields every term"))
}

/// Small enough that every checked tensor fits in 8 x 8: the pair heads see
/// two or three concatenated 2-wide pair-encoder rows.
pub fn config() -> ModelConfig {
    let mut c = tiny_config();
    c.encoder.max_seq_len = 8;
    c.rc.dim = 2;
    c
}

/// Lookup tables are indexed by vocabulary, not by a configured width.
fn is_table(name: &str) -> bool {
    name.ends_with(".tokens") || name.ends_with(".positions")
}

pub fn check(prefixes: &[&str], task: Task, max_entries: Option<usize>) {
    let (model, _) = tiny_model(config(), 3);
    let mut store = model.store.clone();
    let ids: Vec<ParamId> = prefixes
        .iter()
        .flat_map(|p| store.ids_with_prefix(p).collect::<Vec<_>>())
        .collect();
    assert!(!ids.is_empty(), "no parameters under {prefixes:?}");
    for &id in &ids {
        let (r, c) = store.tensor(id).dims2();
        assert!(is_table(store.name(id)) || r <= 8 && c <= 8, "{} is [{r}, {c}]", store.name(id));
    }
    let report = check_gradients(&mut store, &ids, max_entries, |g, s| term(&model, g, s, task)).unwrap();
    assert!(
        report.passes(TOLERANCE),
        "{prefixes:?} via {task}: max rel {} at {:?}",
        report.max_rel_error,
        report.worst
    );
    assert!(report.checked > 0);
}

/// Parameter groups checked, the loss term each is checked through and an
/// optional per-tensor entry budget.
pub const HEAD_CASES: [(&[&str], Task, Option<usize>); 8] = [
    (&["md.head."], Task::Md, None),
    (&["et.final."], Task::Et, None),
    (&["et.ed."], Task::Ed, None),
    (&["rc.coarse."], Task::Rc, None),
    (&["rc.final.", "rc.directed."], Task::Rc, None),
    (&["rc.coref.", "rc.symmetric."], Task::Coref, None),
    (&["rc.ed."], Task::Ed, None),
    (&["ed.mention_proj", "ed.relation_proj", "ed.combine."], Task::Ed, None),
];

/// The shared encoders, sampled through every loss term.
pub fn shared_encoders() {
    for task in Task::ALL {
        check(&["encoder.", "rc.input.", "rc.encoder."], task, Some(3));
    }
    check(&["ed.description."], Task::Ed, Some(3));
}
