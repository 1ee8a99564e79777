//! Named parameter storage and the layer building blocks shared by both
//! networks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BatchNormMode, BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// False for running statistics, which are saved but never optimized.
    pub trainable: bool,
}

/// Ordered, uniquely named tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

/// He-normal (fan-in) initialized tensor.
fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    padding: usize,
    volumetric: bool,
}

impl Conv {
    pub(crate) fn weight(&self) -> ParamId {
        self.weight
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl BatchNorm {
    pub(crate) fn gamma(&self) -> ParamId {
        self.gamma
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub(crate) fn weight(&self) -> ParamId {
        self.weight
    }
}

/// Creates parameters in a fixed order from one random stream.
pub(crate) struct Builder<'a, R> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

pub(crate) struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub volumetric: bool,
}

impl<R: Rng> Builder<'_, R> {
    pub fn conv(&mut self, name: &str, s: ConvShape) -> Conv {
        let spatial = if s.volumetric { 3 } else { 2 };
        let mut shape = vec![s.out_ch, s.in_ch];
        shape.extend(std::iter::repeat_n(s.kernel, spatial));
        let fan_in = s.in_ch * s.kernel.pow(spatial as u32);
        let weight = self.store.add(format!("{name}.weight"), he_normal(self.rng, &shape, fan_in), true);
        let bias = s.bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(&[s.out_ch]), true));
        Conv { weight, bias, stride: s.stride, padding: s.padding, volumetric: s.volumetric }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            var: self.store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Dense {
        let w = he_normal(self.rng, &[outputs, inputs], inputs);
        Dense {
            weight: self.store.add(format!("{name}.weight"), w, true),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true),
        }
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// Output of one network forward pass.
#[derive(Debug)]
pub struct NetPass {
    pub logits: Var,
    /// Tape handles of the trainable parameters (training mode only).
    pub bindings: Vec<(ParamId, Var)>,
    pub stats: Vec<StatsUpdate>,
}

/// Binds stored parameters onto a tape for one forward pass.
pub(crate) struct Binder<'s> {
    store: &'s ParamStore,
    training: bool,
    bindings: Vec<(ParamId, Var)>,
    stats: Vec<StatsUpdate>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self { store, training, bindings: Vec::new(), stats: Vec::new() }
    }

    fn param(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        let p = self.store.get(id);
        if self.training && p.trainable {
            let v = tape.leaf(&p.value);
            self.bindings.push((id, v));
            v
        } else {
            tape.constant(&p.value)
        }
    }

    pub fn conv(&mut self, tape: &mut Tape, l: &Conv, x: Var) -> Result<Var> {
        let w = self.param(tape, l.weight);
        let b = l.bias.map(|b| self.param(tape, b));
        if l.volumetric {
            tape.conv3d(x, w, b, l.stride, l.padding)
        } else {
            tape.conv2d(x, w, b, l.stride, l.padding)
        }
    }

    pub fn batch_norm(&mut self, tape: &mut Tape, l: &BatchNorm, x: Var) -> Result<Var> {
        let g = self.param(tape, l.gamma);
        let b = self.param(tape, l.beta);
        let mode = if self.training {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval { mean: self.store.value(l.mean).data(), var: self.store.value(l.var).data() }
        };
        let (y, stats) = tape.batch_norm(x, g, b, mode, BN_EPS)?;
        if let Some(stats) = stats {
            self.stats.push(StatsUpdate { mean: l.mean, var: l.var, stats });
        }
        Ok(y)
    }

    pub fn dense(&mut self, tape: &mut Tape, l: &Dense, x: Var) -> Result<Var> {
        let w = self.param(tape, l.weight);
        let b = self.param(tape, l.bias);
        tape.dense(x, w, b)
    }

    pub fn finish(self, logits: Var) -> NetPass {
        NetPass { logits, bindings: self.bindings, stats: self.stats }
    }
}

/// Folds training-mode batch statistics into the stored running estimates.
pub fn commit_stats(store: &mut ParamStore, updates: &[StatsUpdate]) {
    for u in updates {
        let mut mean = store.value(u.mean).data().to_vec();
        let mut var = store.value(u.var).data().to_vec();
        u.stats.update_running(&mut mean, &mut var, BN_MOMENTUM);
        store.value_mut(u.mean).data_mut().copy_from_slice(&mean);
        store.value_mut(u.var).data_mut().copy_from_slice(&var);
    }
}

/// Checks the rank and channel count of a network input.
pub(crate) fn check_input(x: &Tensor, rank: usize, channels: usize, what: &str) -> Result<()> {
    if x.rank() != rank || x.shape()[1] != channels {
        return Err(Error::Dimension(format!(
            "{what} expects rank-{rank} input with {channels} channels, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}
