use super::{NnError, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    id: ParamId,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Bias-corrected Adam over the parameters that were trainable at construction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let slots = store
            .ids()
            .filter(|&id| store.get(id).trainable)
            .map(|id| {
                let n = store.get(id).value.len();
                Slot {
                    id,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            config,
            step: 0,
            slots,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Parameters holding optimizer state.
    pub fn tracked(&self) -> Vec<ParamId> {
        self.slots.iter().map(|s| s.id).collect()
    }

    /// Applies one update from the gradients accumulated in `store`.
    ///
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        for slot in &self.slots {
            let p = store.get(slot.id);
            if let Some((index, &value)) = p.grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient {
                    name: p.name.clone(),
                    index,
                    value,
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let p = store.get_mut(slot.id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (i, (w, g)) in p.value.data_mut().iter_mut().zip(&grad).enumerate() {
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
