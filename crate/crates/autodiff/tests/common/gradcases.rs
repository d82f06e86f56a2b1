//! Finite-difference checks of every differentiable primitive, shared by the
//! autodiff tests and the acceptance suite. Each case panics on failure.
#![allow(dead_code)]

use docie_autodiff::gradcheck::check_gradients;
use docie_autodiff::nn::{Linear, TransformerLayer};
use docie_autodiff::{Graph, Init, NodeId, ParamId, ParamStore, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(store: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, r, c, Init::Uniform(1.0), rng).unwrap()
}

/// Reduces any node to a scalar with fixed pseudo-random weights so that every
/// output entry contributes a distinct coefficient.
pub fn project(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let (r, c) = g.shape(x);
    let w: Vec<f64> = (0..r * c).map(|i| ((i as f64) * 0.731 + 0.3).sin()).collect();
    let w = g.constant(r, c, w)?;
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn assert_check<F>(store: &mut ParamStore, f: F)
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let ids: Vec<_> = store.ids().collect();
    let report = check_gradients(store, &ids, None, f).unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

pub fn matmul_add_transpose() {
    let mut r = rng(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (8, 4, 7)] {
        let mut s = ParamStore::new();
        let a = uniform(&mut s, "a", m, k, &mut r);
        let b = uniform(&mut s, "b", k, n, &mut r);
        let c = uniform(&mut s, "c", n, m, &mut r);
        assert_check(&mut s, |g, s| {
            let (a, b, c) = (g.param(s, a), g.param(s, b), g.param(s, c));
            let ab = g.matmul(a, b)?;
            let ct = g.transpose(c);
            let y = g.add(ab, ct)?;
            project(g, y)
        });
    }
}

pub fn broadcast_mul_scale_sub() {
    let mut r = rng(2);
    let mut s = ParamStore::new();
    let a = uniform(&mut s, "a", 4, 6, &mut r);
    let b = uniform(&mut s, "b", 1, 6, &mut r);
    let c = uniform(&mut s, "c", 1, 1, &mut r);
    let d = uniform(&mut s, "d", 4, 6, &mut r);
    assert_check(&mut s, |g, s| {
        let (a, b, c, d) = (g.param(s, a), g.param(s, b), g.param(s, c), g.param(s, d));
        let y = g.add_row(a, b)?;
        let y = g.add_row(y, c)?;
        let y = g.mul(y, d)?;
        let y = g.scale(y, -1.7);
        let y = g.sub(y, a)?;
        project(g, y)
    });
}

pub fn concat_gather_slice_groupmean() {
    let mut r = rng(3);
    let mut s = ParamStore::new();
    let a = uniform(&mut s, "a", 5, 3, &mut r);
    let b = uniform(&mut s, "b", 5, 2, &mut r);
    let c = uniform(&mut s, "c", 2, 5, &mut r);
    assert_check(&mut s, |g, s| {
        let (a, b, c) = (g.param(s, a), g.param(s, b), g.param(s, c));
        let ab = g.concat_cols(&[a, b])?;
        let abc = g.concat_rows(&[ab, c])?;
        let picked = g.gather_rows(abc, &[0, 6, 2, 2, 5])?;
        let sliced = g.slice_cols(picked, 1, 4)?;
        let pooled = g.group_mean(sliced, &[vec![0, 1], vec![], vec![2, 3, 4]])?;
        let elems = g.gather_elems(abc, &[0, 7, 7, 34])?;
        let p1 = project(g, pooled)?;
        let p2 = project(g, elems)?;
        g.add(p1, p2)
    });
}

pub fn embedding_rowdot_bilinear() {
    let mut r = rng(4);
    let mut s = ParamStore::new();
    let table = uniform(&mut s, "table", 6, 4, &mut r);
    let w = uniform(&mut s, "w", 4, 4, &mut r);
    assert_check(&mut s, |g, s| {
        let x = g.embedding(s, table, &[0, 3, 3])?;
        let y = g.embedding(s, table, &[5, 1, 0])?;
        let w = g.param(s, w);
        let bil = g.bilinear(x, w, y)?;
        let dot = g.row_dot(x, y)?;
        let p = g.add(bil, dot)?;
        project(g, p)
    });
}

pub fn layernorm_softmax_activations() {
    let mut r = rng(5);
    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", 4, 7, &mut r);
    let gamma = uniform(&mut s, "gamma", 1, 7, &mut r);
    let beta = uniform(&mut s, "beta", 1, 7, &mut r);
    assert_check(&mut s, |g, s| {
        let (x, gamma, beta) = (g.param(s, x), g.param(s, gamma), g.param(s, beta));
        let ln = g.layer_norm(x, gamma, beta, 1e-5)?;
        let sm = g.softmax(ln);
        let sg = g.sigmoid(x);
        let ge = g.gelu(x);
        let th = g.tanh(ln);
        let mut total = project(g, sm)?;
        for node in [sg, ge, th] {
            let p = project(g, node)?;
            total = g.add(total, p)?;
        }
        Ok(total)
    });
}

pub fn relu_away_from_kink() {
    let mut r = rng(6);
    let mut s = ParamStore::new();
    let vals: Vec<f64> = (0..12)
        .map(|i| {
            let v: f64 = r.gen_range(0.1..1.0);
            if i % 2 == 0 {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = s.insert("x", docie_autodiff::Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
    assert_check(&mut s, |g, s| {
        let x = g.param(s, x);
        let y = g.relu(x);
        project(g, y)
    });
}

pub fn dropout_with_fixed_mask() {
    let mut r = rng(7);
    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", 3, 3, &mut r);
    let mask = vec![0.0, 1.25, 1.25, 1.25, 0.0, 1.25, 1.25, 1.25, 0.0];
    assert_check(&mut s, |g, s| {
        let x = g.param(s, x);
        let y = g.dropout_with_mask(x, mask.clone())?;
        project(g, y)
    });
}

pub fn losses() {
    let mut r = rng(8);
    let mut s = ParamStore::new();
    let z = uniform(&mut s, "z", 5, 3, &mut r);
    let targets: Vec<f64> = (0..15).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let mask: Vec<f64> = (0..15).map(|i| (i % 4 != 1) as u8 as f64).collect();
    assert_check(&mut s, |g, s| {
        let z = g.param(s, z);
        let bce = g.bce_with_logits(z, &targets, Some(&mask))?;
        let ce = g.cross_entropy(z, &[0, 2, 1, 1, 0])?;
        g.add(bce, ce)
    });
}

pub fn attention_block() {
    let mut r = rng(9);
    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", 5, 8, &mut r);
    let layer = TransformerLayer::new(&mut s, "t", 8, 2, 8, 0.1, &mut r).unwrap();
    assert_check(&mut s, |g, s| {
        let x = g.param(s, x);
        let y = layer.forward(g, s, x)?;
        project(g, y)
    });
}

pub fn three_layer_net() {
    let mut r = rng(10);
    let mut s = ParamStore::new();
    let x = uniform(&mut s, "x", 6, 5, &mut r);
    let l1 = Linear::new(&mut s, "l1", 5, 8, true, &mut r).unwrap();
    let l2 = Linear::new(&mut s, "l2", 8, 8, true, &mut r).unwrap();
    let l3 = Linear::new(&mut s, "l3", 8, 3, true, &mut r).unwrap();
    assert_check(&mut s, |g, s| {
        let x = g.param(s, x);
        let h = l1.forward(g, s, x)?;
        let h = g.tanh(h);
        let h = l2.forward(g, s, h)?;
        let h = g.gelu(h);
        let out = l3.forward(g, s, h)?;
        g.cross_entropy(out, &[0, 1, 2, 2, 1, 0])
    });
}

pub const CASES: [(&str, fn()); 10] = [
    ("matmul_add_transpose", matmul_add_transpose),
    ("broadcast_mul_scale_sub", broadcast_mul_scale_sub),
    ("concat_gather_slice_groupmean", concat_gather_slice_groupmean),
    ("embedding_rowdot_bilinear", embedding_rowdot_bilinear),
    ("layernorm_softmax_activations", layernorm_softmax_activations),
    ("relu_away_from_kink", relu_away_from_kink),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("losses", losses),
    ("attention_block", attention_block),
    ("three_layer_net", three_layer_net),
];
