use super::params::{EntryKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::CsdError;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(crate::CsdError::Config(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer moments, indexed like the store's entries.
/// Buffers get empty slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptState {
    pub fn for_store(store: &ParamStore) -> Self {
        let slots = |e: &super::params::Entry| match e.kind {
            EntryKind::Weight => vec![0.0; e.value.numel()],
            EntryKind::Buffer => Vec::new(),
        };
        OptState {
            step: 0,
            m: store.entries().iter().map(slots).collect(),
            v: store.entries().iter().map(slots).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        Optimizer {
            config,
            state: OptState::for_store(store),
        }
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, e) in store.entries_mut().iter_mut().enumerate() {
            if e.kind != EntryKind::Weight {
                continue;
            }
            let grad = &e.grad;
            let w = e.value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(grad) {
                        *wi -= c.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let m = &mut self.state.m[k];
                    let v = &mut self.state.v[k];
                    for i in 0..w.len() {
                        let g = grad[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Shape, Tensor};

    fn one_weight(w: f32, g: f32) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w), EntryKind::Weight);
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = one_weight(1.0, 2.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        Optimizer::new(cfg, &s).step(&mut s);
        assert!((s.entries()[0].value.item() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut s = one_weight(0.37, 0.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            ..Default::default()
        };
        Optimizer::new(cfg, &s).step(&mut s);
        assert_eq!(s.entries()[0].value.item(), 0.37);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // First step: mhat = g, vhat = g², so the update is lr·g/(|g| + eps).
        for g in [1e-3f32, 0.5, 40.0, -7.0] {
            let mut s = one_weight(0.0, g);
            let cfg = OptimizerConfig {
                lr: 0.01,
                ..Default::default()
            };
            Optimizer::new(cfg, &s).step(&mut s);
            let w = s.entries()[0].value.item();
            assert!((w.abs() - 0.01).abs() < 1e-5, "g={g}: step {w}");
            assert_eq!(w.signum(), -g.signum());
        }
    }

    #[test]
    fn buffers_untouched() {
        let mut s = ParamStore::new();
        let id = s.add("rv", Tensor::ones(Shape::new(1, 2, 1, 1)), EntryKind::Buffer);
        s.get_mut(id).grad = vec![5.0, 5.0];
        Optimizer::new(OptimizerConfig::default(), &s).step(&mut s);
        assert_eq!(s.entries()[0].value.data(), &[1.0, 1.0]);
    }
}
