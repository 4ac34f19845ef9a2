use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DiffError, NdArray, ParamRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerSettings {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: NdArray,
    second: NdArray,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub settings: OptimizerSettings,
    pub step_count: u64,
    moments: IndexMap<String, Moments>,
}

impl OptimizerState {
    /// Allocates moment buffers for every trainable parameter (Adam only).
    pub fn new(settings: OptimizerSettings, registry: &ParamRegistry) -> Self {
        let moments = match settings.kind {
            OptimizerKind::Sgd => IndexMap::new(),
            OptimizerKind::Adam => registry
                .iter()
                .filter(|(_, e)| !e.frozen)
                .map(|(name, e)| {
                    (
                        name.to_string(),
                        Moments {
                            first: NdArray::zeros(e.value.shape()),
                            second: NdArray::zeros(e.value.shape()),
                        },
                    )
                })
                .collect(),
        };
        Self {
            settings,
            step_count: 0,
            moments,
        }
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    pub fn moment_count(&self) -> usize {
        self.moments.len()
    }

    /// Applies one update to every trainable parameter, then zeroes all grads.
    pub fn step(&mut self, registry: &mut ParamRegistry) -> Result<(), DiffError> {
        let s = self.settings.clone();
        if s.kind == OptimizerKind::Adam {
            for (name, entry) in registry.iter() {
                let ok = self
                    .moments
                    .get(name)
                    .is_some_and(|m| m.first.shape() == entry.value.shape());
                if !entry.frozen && !ok {
                    return Err(DiffError::MissingMoment(name.to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - s.beta1.powi(t);
        let bias2 = 1.0 - s.beta2.powi(t);
        for (name, entry) in registry.iter_mut() {
            if entry.frozen {
                continue;
            }
            let params = entry.value.data_mut();
            let grads = entry.grad.data();
            match s.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in params.iter_mut().zip(grads) {
                        *p -= s.learning_rate * (g + s.weight_decay * *p);
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.moments.get_mut(name).expect("checked above");
                    let (first, second) = (m.first.data_mut(), m.second.data_mut());
                    for i in 0..params.len() {
                        let g = grads[i] + s.weight_decay * params[i];
                        first[i] = s.beta1 * first[i] + (1.0 - s.beta1) * g;
                        second[i] = s.beta2 * second[i] + (1.0 - s.beta2) * g * g;
                        let mhat = first[i] / bias1;
                        let vhat = second[i] / bias2;
                        params[i] -= s.learning_rate * mhat / (vhat.sqrt() + s.epsilon);
                    }
                }
            }
        }
        registry.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::diffcore::ModuleTag;

    fn single(value: f64, grad: f64, tag: ModuleTag) -> ParamRegistry {
        let mut r = ParamRegistry::new();
        r.register("w", NdArray::vector(vec![value]), tag).unwrap();
        r.get_mut("w").unwrap().grad = NdArray::vector(vec![grad]);
        r
    }

    #[test]
    fn sgd_single_step() {
        let mut r = single(1.0, 2.0, ModuleTag::Fusion);
        let mut opt = OptimizerState::new(OptimizerSettings::sgd(0.1), &r);
        opt.step(&mut r).unwrap();
        assert!((r.value("w").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(r.get("w").unwrap().grad.item(), 0.0);
    }

    #[test]
    fn frozen_param_bitwise_unchanged() {
        let mut r = single(0.123456789, 5.0, ModuleTag::Decoder);
        r.register("f", NdArray::vector(vec![1.0]), ModuleTag::Fusion).unwrap();
        r.freeze_except(&BTreeSet::from([ModuleTag::Fusion])).unwrap();
        let before = r.value("w").unwrap().data()[0].to_bits();
        let mut opt = OptimizerState::new(OptimizerSettings::default(), &r);
        assert!(!opt.has_moments("w"));
        for _ in 0..5 {
            r.get_mut("w").unwrap().grad = NdArray::vector(vec![5.0]);
            opt.step(&mut r).unwrap();
        }
        assert_eq!(r.value("w").unwrap().data()[0].to_bits(), before);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        let grads = [3.0, -0.5, 1e-4, -7.0];
        let mut r = ParamRegistry::new();
        r.register("w", NdArray::zeros(&[4]), ModuleTag::Fusion).unwrap();
        r.get_mut("w").unwrap().grad = NdArray::vector(grads.to_vec());
        let mut opt = OptimizerState::new(OptimizerSettings::default(), &r);
        opt.step(&mut r).unwrap();
        for (p, g) in r.value("w").unwrap().data().iter().zip(grads) {
            // At t=1 the bias-corrected update is -lr·g/(|g|+eps).
            assert_eq!(p.signum(), -g.signum());
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_moment_is_error() {
        let mut r = single(1.0, 1.0, ModuleTag::Fusion);
        let mut frozen = r.clone();
        frozen.get_mut("w").unwrap().frozen = true;
        let mut opt = OptimizerState::new(OptimizerSettings::default(), &frozen);
        // Unfreezing after allocation leaves the parameter without buffers.
        assert!(matches!(opt.step(&mut r), Err(DiffError::MissingMoment(_))));
        assert_eq!(r.value("w").unwrap().item(), 1.0);
    }
}
