//! Adam with decoupled weight decay, operating on a [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Graph;
use crate::nn::{GraphParams, ParamStore};

/// AdamW optimizer state. Moment buffers are laid out in parameter-store
/// order; the state can be exported and restored for exact training
/// resumption.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Serializable snapshot of the optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        let v = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients accumulated in `g`. Parameters
    /// without a gradient are still decayed.
    pub fn step(&mut self, store: &mut ParamStore, g: &Graph, gp: &GraphParams) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for (idx, var) in gp.vars().iter().enumerate() {
            let n = self.m[idx].len();
            let zero;
            let grad: &[f64] = match g.grad(*var) {
                Some(gr) => gr,
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let param = store.get_mut(crate::nn::ParamId::from_index(idx));
            let data = param.value.data_mut();
            for e in 0..n {
                self.m[idx][e] = self.beta1 * self.m[idx][e] + (1.0 - self.beta1) * grad[e];
                self.v[idx][e] =
                    self.beta2 * self.v[idx][e] + (1.0 - self.beta2) * grad[e] * grad[e];
                let m_hat = self.m[idx][e] / bc1;
                let v_hat = self.v[idx][e] / bc2;
                data[e] -= self.lr
                    * (m_hat / (libm::sqrt(v_hat) + self.eps) + self.weight_decay * data[e]);
            }
        }
    }

    pub fn export_state(&self) -> AdamWState {
        AdamWState { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn restore_state(&mut self, state: AdamWState) {
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(&[0.0, 10.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let gp = store.inject(&mut g);
            let x = gp.var(id);
            let shifted = g.offset(x, -3.0);
            let sq = g.mul(shifted, shifted).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            opt.step(&mut store, &g, &gp);
        }
        for v in store.get(id).value.data() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[1.0]));
        let mut opt = AdamW::new(&store, 0.01, 0.5);
        let mut g = Graph::new();
        let gp = store.inject(&mut g);
        // no backward: gradient is absent, only decay applies
        opt.step(&mut store, &g, &gp);
        let v = store.get(id).value.data()[0];
        assert!((v - (1.0 - 0.01 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip_resumes_exactly() {
        let mut store_a = ParamStore::new();
        let id_a = store_a.add("x", Tensor::vector(&[4.0]));
        let mut opt_a = AdamW::new(&store_a, 0.05, 0.01);

        let run_step = |store: &mut ParamStore, opt: &mut AdamW, id| {
            let mut g = Graph::new();
            let gp = store.inject(&mut g);
            let x = gp.var(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            opt.step(store, &g, &gp);
        };
        for _ in 0..3 {
            run_step(&mut store_a, &mut opt_a, id_a);
        }
        let snapshot_param = store_a.get(id_a).value.clone();
        let snapshot_state = opt_a.export_state();
        run_step(&mut store_a, &mut opt_a, id_a);
        let after_four = store_a.get(id_a).value.data()[0];

        // resume from the snapshot
        let mut store_b = ParamStore::new();
        let id_b = store_b.add("x", snapshot_param);
        let mut opt_b = AdamW::new(&store_b, 0.05, 0.01);
        opt_b.restore_state(snapshot_state);
        run_step(&mut store_b, &mut opt_b, id_b);
        assert_eq!(store_b.get(id_b).value.data()[0], after_four);
    }
}
