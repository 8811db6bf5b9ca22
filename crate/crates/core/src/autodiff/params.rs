//! Parameter storage and the layer types built on it.

use rand::Rng;

use super::tape::{BnMode, Tape, Var};
use super::tensor::{Shape, Tensor};
use crate::error::{CsdError, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Learnable; receives gradients and optimizer updates.
    Weight,
    /// Running statistics; saved with the model but never trained.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    pub kind: EntryKind,
}

/// Every named tensor of one network, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: EntryKind) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
            kind,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Entry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Weight)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds gradients recorded on `tape` for every bound parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) {
        for &(id, var) in &binding.bound {
            if let Some(g) = tape.grad(var) {
                let entry = &mut self.entries[id.0];
                entry.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Folds training-mode batch statistics into running estimates.
    pub fn apply_bn_updates(&mut self, binding: &Binding) {
        for u in &binding.bn_updates {
            let unbias = if u.count > 1 {
                u.count as f32 / (u.count - 1) as f32
            } else {
                1.0
            };
            let m = u.momentum;
            let rm = self.entries[u.running_mean.0].value.data_mut();
            for (r, &b) in rm.iter_mut().zip(&u.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let rv = self.entries[u.running_var.0].value.data_mut();
            for (r, &b) in rv.iter_mut().zip(&u.var) {
                *r = ((1.0 - m) * *r + m * b * unbias).max(f32::MIN_POSITIVE);
            }
        }
    }

    pub fn all_grads_finite(&self) -> bool {
        self.entries.iter().all(|e| e.grad.iter().all(|g| g.is_finite()))
    }

    /// Bit-level equality of names, kinds and values.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

struct BnUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f32,
    mean: Vec<f32>,
    var: Vec<f32>,
    count: usize,
}

/// Ties a [`ParamStore`] to one tape for one forward pass: each parameter is
/// placed on the tape at most once, and training-mode batch statistics are
/// collected for [`ParamStore::apply_bn_updates`].
pub struct Binding {
    slots: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
    bn_updates: Vec<BnUpdate>,
    pub training: bool,
    /// Parameters enter the tape as constants (frozen networks).
    pub frozen: bool,
}

impl Binding {
    pub fn new(store: &ParamStore, training: bool) -> Self {
        Binding {
            slots: vec![None; store.len()],
            bound: Vec::new(),
            bn_updates: Vec::new(),
            training,
            frozen: false,
        }
    }

    pub fn frozen(store: &ParamStore) -> Self {
        Binding {
            frozen: true,
            ..Binding::new(store, false)
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let entry = store.get(id);
        let learn = entry.kind == EntryKind::Weight && !self.frozen;
        let v = tape.leaf(entry.value.clone(), learn);
        tape.set_label(v, entry.name.clone());
        self.slots[id.0] = Some(v);
        if learn {
            self.bound.push((id, v));
        }
        v
    }

    pub fn bound(&self) -> &[(ParamId, Var)] {
        &self.bound
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (He-normal) and `{name}.bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let w = Tensor::randn(Shape::new(out_ch, in_ch, kernel, kernel), (2.0 / fan_in as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, EntryKind::Weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(1, out_ch, 1, 1)), EntryKind::Weight);
        Conv2d {
            weight,
            bias: Some(bias),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Result<Var> {
        let w = bind.var(tape, store, self.weight);
        let b = self.bias.map(|b| bind.var(tape, store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(s), EntryKind::Weight),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(s), EntryKind::Weight),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(s), EntryKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(s), EntryKind::Buffer),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bind: &mut Binding, x: Var) -> Result<Var> {
        let gamma = bind.var(tape, store, self.gamma);
        let beta = bind.var(tape, store, self.beta);
        if bind.training {
            let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Train { eps: self.eps })?;
            let stats = stats.expect("training mode yields stats");
            bind.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                mean: stats.mean,
                var: stats.var,
                count: stats.count,
            });
            Ok(y)
        } else {
            let mean = store.get(self.running_mean).value.data();
            let var = store.get(self.running_var).value.data();
            if var.iter().any(|&v| v <= 0.0) {
                return Err(CsdError::invalid("batchnorm2d", "running variance must be positive"));
            }
            let (y, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    mean,
                    var,
                    eps: self.eps,
                },
            )?;
            Ok(y)
        }
    }
}
