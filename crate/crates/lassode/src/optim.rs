//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::LassError;
use crate::tape::Gradients;
use crate::tensor::{ParamStore, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        // defaults match the training setup: lr 1e-3, betas (0.9, 0.95), wd 0.05
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
        }
    }
}

#[derive(Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// per-path first/second moment estimates
    moments: BTreeMap<String, (Tensor, Tensor)>,
    pub step_index: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: BTreeMap::new(),
            step_index: 0,
        }
    }

    /// One optimizer step over every trainable parameter that received a
    /// gradient. A NaN gradient aborts the whole step, leaving the store
    /// untouched, and reports the offending path.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), LassError> {
        for (path, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            if let Some(g) = grads.by_path(path) {
                if !g.is_finite() {
                    return Err(LassError::NanGradient {
                        path: path.to_string(),
                    });
                }
            }
        }

        self.step_index += 1;
        let t = self.step_index as i32;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.config.lr;
        let wd = self.config.weight_decay;

        for (path, entry) in store.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let Some(g) = grads.by_path(path) else {
                continue;
            };
            let (m, v) = self.moments.entry(path.to_string()).or_insert_with(|| {
                let (r, c) = entry.tensor.shape();
                (Tensor::zeros(r, c), Tensor::zeros(r, c))
            });
            let theta = entry.tensor.data_mut();
            let gd = g.data();
            for i in 0..theta.len() {
                let mi = b1 * m.data()[i] + (1.0 - b1) * gd[i];
                let vi = b2 * v.data()[i] + (1.0 - b2) * gd[i] * gd[i];
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                theta[i] -= lr * wd * theta[i] + lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::{ParamEntry, ParamStore, Tensor};

    fn grads_for(store: &ParamStore, scale: f64) -> Gradients {
        // builds a loss = scale * sum(theta) so every trainable param gets a
        // constant gradient equal to `scale`
        let mut tape = Tape::new();
        let mut total = None;
        for (path, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let p = tape.param(store, path);
            let s = tape.sum_all(p);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let total = total.unwrap();
        let loss = tape.scale(total, scale);
        tape.backward(loss)
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        // theta=1, lr=0.1, wd=0.05, g=0 -> theta' = 1 - 0.1*0.05 = 0.995
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let grads = grads_for(&store, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
        });
        opt.step(&mut store, &grads).unwrap();
        let got = store.tensor("w").get(0, 0);
        assert!((got - 0.995).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn first_step_moves_by_lr_sign_of_gradient() {
        // wd=0, constant gradient g: step 1 gives
        // mhat = g, vhat = g^2, so delta = -lr * g/(|g|+eps) ~ -lr*sign(g)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        let g = 0.37;
        let grads = grads_for(&store, g);
        let lr = 0.01;
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            betas: (0.9, 0.95),
            weight_decay: 0.0,
        });
        opt.step(&mut store, &grads).unwrap();
        let expected = 2.0 - lr * g / (g.abs() + ADAM_EPS);
        let got = store.tensor("w").get(0, 0);
        assert!(
            (got - expected).abs() < 1e-12,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn non_trainable_tensor_is_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        store.insert_entry(
            "frozen",
            ParamEntry {
                tensor: Tensor::scalar(5.0),
                trainable: false,
                lora_adapter: false,
            },
        );
        let grads = grads_for(&store, 1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.tensor("frozen").get(0, 0), 5.0);
        assert_ne!(store.tensor("w").get(0, 0), 1.0);
    }

    #[test]
    fn nan_gradient_aborts_and_names_path() {
        let mut store = ParamStore::new();
        store.insert("layer/w", Tensor::scalar(1.0));
        let grads = grads_for(&store, f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut store, &grads).unwrap_err();
        assert!(err.to_string().contains("layer/w"));
        // store untouched
        assert_eq!(store.tensor("layer/w").get(0, 0), 1.0);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut store = ParamStore::new();
            store.insert("w", Tensor::from_vec(1, 3, vec![0.5, -0.25, 2.0]));
            let mut opt = AdamW::new(AdamWConfig::default());
            for _ in 0..5 {
                let grads = grads_for(&store, 0.1);
                opt.step(&mut store, &grads).unwrap();
            }
            store.tensor("w").data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
