//! Adam optimizer over a [`VarStore`](crate::layers::VarStore).

use crate::layers::VarStore;
use crate::scalar::Scalar;
use indexmap::IndexMap;
use ndarray::ArrayD;

/// Gradients keyed by parameter name.
pub type GradMap<S> = IndexMap<String, ArrayD<S>>;

/// Standard Adam with bias correction.
pub struct Adam<S: Scalar> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: IndexMap<String, ArrayD<S>>,
    second_moment: IndexMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, store: &mut VarStore<S>, grads: &GradMap<S>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let corr1 = S::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = S::from_f64(1.0 - self.beta2.powi(t));
        let lr = S::from_f64(self.learning_rate);
        let eps = S::from_f64(self.eps);

        for (name, grad) in grads {
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m = m.mapv(|x| x * b1) + grad.mapv(|g| g * (one - b1));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = v.mapv(|x| x * b2) + grad.mapv(|g| g * g * (one - b2));

            let m_hat = m.mapv(|x| x / corr1);
            let v_hat = v.mapv(|x| x / corr2);
            let update = &m_hat / &v_hat.mapv(|x| x.sqrt() + eps);
            let new = store.get(name) - &update.mapv(|u| u * lr);
            store.set(name, new);
        }
    }

    /// Optimizer state as named arrays (for checkpointing).
    pub fn state_arrays(&self) -> Vec<(String, ArrayD<S>)> {
        let mut out = vec![(
            "adam.step".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), S::from_f64(self.step as f64)),
        )];
        for (k, v) in &self.first_moment {
            out.push((format!("adam.m.{k}"), v.clone()));
        }
        for (k, v) in &self.second_moment {
            out.push((format!("adam.v.{k}"), v.clone()));
        }
        out
    }

    /// Restore state written by [`Adam::state_arrays`].
    pub fn load_state(&mut self, arrays: &IndexMap<String, ArrayD<S>>) {
        if let Some(step) = arrays.get("adam.step") {
            self.step = step.iter().next().map(|s| s.to_f64() as u64).unwrap_or(0);
        }
        self.first_moment.clear();
        self.second_moment.clear();
        for (k, v) in arrays {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.first_moment.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.second_moment.insert(name.to_string(), v.clone());
            }
        }
    }
}
