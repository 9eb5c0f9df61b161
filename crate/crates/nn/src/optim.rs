use crate::params::{ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay; moment buffers are indexed like the store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.kind)).collect();
        for (id, kind) in ids {
            if kind != ParamKind::Trainable {
                continue;
            }
            let grad = store.get(id).grad.data().to_vec();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let value = store.value_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store
            .insert("w", ParamKind::Trainable, Tensor::new(&[1, 2], vec![3.0, -2.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &store);
        let target = Tensor::new(&[1, 2], vec![0.5, 1.5]).unwrap();
        for _ in 0..2000 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let loss = g.mse(wv, &target).unwrap();
            let grads = g.backward(loss).unwrap();
            store.zero_grads();
            store.accumulate(&grads);
            adam.step(&mut store);
        }
        let v = store.value(w).data();
        assert!((v[0] - 0.5).abs() < 1e-3 && (v[1] - 1.5).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamKind::Trainable, Tensor::scalar(1.0)).unwrap();
        let b = store.insert("b", ParamKind::Buffer, Tensor::scalar(7.0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let loss = g.mse(wv, &Tensor::scalar(0.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        store.accumulate(&grads);
        adam.step(&mut store);
        assert!((store.value(w).item() - (1.0 - 1e-4)).abs() < 1e-12);
        assert_eq!(store.value(b).item(), 7.0);
    }
}
