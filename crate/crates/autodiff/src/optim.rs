use crate::tensor::ParamStore;

/// Learning rate under linear decay to zero without warmup. Steps past the
/// end clamp to 0.
pub fn lr_at(step: usize, base_lr: f64, total_steps: usize) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / total_steps as f64)
}

/// Adam moments and schedule position.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub total_steps: usize,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, base_lr: f64, total_steps: usize) -> Self {
        let shapes = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            total_steps,
            step: 0,
            first: shapes(),
            second: shapes(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step, self.base_lr, self.total_steps)
    }
}

/// One bias-corrected Adam update. Parameters without an accumulated gradient
/// are skipped entirely (their moments do not decay). Gradients are cleared.
pub fn adam_step(state: &mut OptimizerState, store: &mut ParamStore) {
    let lr = state.current_lr();
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let tensor = store.tensor_mut(id);
        let Some(grad) = tensor.grad.take() else {
            continue;
        };
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        for (((p, g), m), v) in tensor
            .values_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}
