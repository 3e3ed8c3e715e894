//! AdamW optimizer with decoupled weight decay, plus an EMA shadow of the
//! parameters used for evaluation checkpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::params::ParamStore;
use crate::numerics::tape::Gradients;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<DenseArray>,
    v: Vec<DenseArray>,
}

impl AdamW {
    /// Defaults used across the repo: β1=0.9, β2=0.999, ε=1e-8, decoupled
    /// weight decay 1e-4.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_hyperparams(store, lr, 0.9, 0.999, 1e-8, 1e-4)
    }

    pub fn with_hyperparams(
        store: &ParamStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let m = store
            .ids()
            .iter()
            .map(|id| DenseArray::zeros(store.value(*id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1, beta2, eps, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over every parameter in the store. Parameters
    /// without a recorded gradient are treated as zero-gradient (they still
    /// feel weight decay, matching the decoupled formulation).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);

        for id in store.ids() {
            let zero;
            let g = match grads.get(id) {
                Some(g) => {
                    g.check_finite(&format!("gradient for {}", store.name(id)))?;
                    g
                }
                None => {
                    zero = DenseArray::zeros(store.value(id).shape());
                    &zero
                }
            };
            if !g.same_shape(store.value(id)) {
                return Err(Error::ShapeMismatch {
                    expected: store.value(id).shape().to_vec(),
                    got: g.shape().to_vec(),
                    context: format!("gradient for {}", store.name(id)),
                });
            }

            let idx = id.index();
            let m = self.m[idx].values_mut();
            let v = self.v[idx].values_mut();
            let p = store.value_mut(id).values_mut();
            for i in 0..p.len() {
                let gi = g.values()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // Decoupled decay: applied directly to the parameter, not
                // folded into the adaptive term.
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaShadow {
    pub decay: f64,
    shadow: ParamStore,
}

impl EmaShadow {
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "EMA decay must be in [0,1), got {decay}"
            )));
        }
        Ok(Self { decay, shadow: store.clone() })
    }

    /// shadow ← decay·shadow + (1−decay)·params
    pub fn update(&mut self, store: &ParamStore) {
        for id in store.ids() {
            let src = store.value(id);
            let dst = self.shadow.value_mut(id);
            for (s, p) in dst.values_mut().iter_mut().zip(src.values()) {
                *s = self.decay * *s + (1.0 - self.decay) * p;
            }
        }
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    /// Copy shadow values into the live store (used when switching to
    /// evaluation weights).
    pub fn apply_to(&self, store: &mut ParamStore) {
        store.copy_values_from(&self.shadow);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::from_vec(vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::with_hyperparams(&store, 0.1, 0.9, 0.999, 1e-8, 0.0);
        let before = store.value(id).clone();
        // Build an empty gradient set via a loss that ignores the parameter.
        let mut tape = Tape::new();
        let c = tape.scalar(0.0);
        let grads = tape.backward(c).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_about_lr() {
        // p=1, g=1, lr=0.1, wd=0: bias-corrected m̂=v̂=1, so the step is
        // lr·1/(1+ε) ≈ 0.1 and p lands at ≈ 0.9.
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::scalar(1.0));
        let mut opt = AdamW::with_hyperparams(&store, 0.1, 0.9, 0.999, 1e-8, 0.0);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let loss = tape.sum_all(p); // d loss / d p = 1
        let grads = tape.backward(loss).unwrap();
        opt.step(&mut store, &grads).unwrap();
        let got = store.value(id).item();
        assert!((got - 0.9).abs() < 1e-6, "expected ≈0.9, got {got}");
    }

    #[test]
    fn constant_gradient_decreases_parameter_monotonically() {
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::scalar(1.0));
        let mut opt = AdamW::with_hyperparams(&store, 0.1, 0.9, 0.999, 1e-8, 0.0);
        let mut prev = store.value(id).item();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let loss = tape.sum_all(p);
            let grads = tape.backward(loss).unwrap();
            opt.step(&mut store, &grads).unwrap();
            let cur = store.value(id).item();
            assert!(cur < prev, "parameter must decrease: {prev} -> {cur}");
            prev = cur;
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_under_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::from_vec(vec![2.0, -3.0]));
        let mut opt = AdamW::with_hyperparams(&store, 0.1, 0.9, 0.999, 1e-8, 0.01);
        let before: Vec<f64> = store.value(id).values().to_vec();
        let mut tape = Tape::new();
        let c = tape.scalar(0.0);
        let grads = tape.backward(c).unwrap();
        opt.step(&mut store, &grads).unwrap();
        for (b, a) in before.iter().zip(store.value(id).values()) {
            assert!(a.abs() < b.abs(), "decay must shrink magnitude: {b} -> {a}");
            assert_eq!(a.signum(), b.signum(), "decay must not flip sign");
        }
    }

    #[test]
    fn ema_basic_arithmetic() {
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::scalar(0.0));
        let mut ema = EmaShadow::new(&store, 0.95).unwrap();
        store.value_mut(id).values_mut()[0] = 1.0;
        ema.update(&store);
        let s = ema.shadow().value(id).item();
        assert!((s - 0.05).abs() < 1e-15, "0.95·0 + 0.05·1 = 0.05, got {s}");
    }

    #[test]
    fn ema_fixed_point_when_shadow_equals_param() {
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::scalar(0.7));
        let mut ema = EmaShadow::new(&store, 0.95).unwrap();
        ema.update(&store);
        assert!((ema.shadow().value(id).item() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_within_one_percent_after_hundred_updates() {
        // Geometric series: after n updates from 0 toward p, the shadow is
        // p·(1 − 0.95^n); 0.95^100 ≈ 0.0059 < 1%.
        let mut store = ParamStore::new();
        let id = store.register("p", DenseArray::scalar(0.0));
        let mut ema = EmaShadow::new(&store, 0.95).unwrap();
        let target = 3.0;
        store.value_mut(id).values_mut()[0] = target;
        for _ in 0..100 {
            ema.update(&store);
        }
        let s = ema.shadow().value(id).item();
        assert!((s - target).abs() / target < 0.01, "shadow {s} not within 1% of {target}");
    }

    #[test]
    fn ema_rejects_decay_outside_range() {
        let store = ParamStore::new();
        assert!(EmaShadow::new(&store, 1.0).is_err());
        assert!(EmaShadow::new(&store, -0.1).is_err());
    }
}
