//! A small CPU neural-network engine with explicit, layer-wise backprop.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s, so two
//! layers referencing the same id share storage and their gradients
//! accumulate into the same slot. Every op is generic over [`Real`] so the
//! same graph runs in `f32` for training and `f64` for gradient checks.

mod conv;
mod layers;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_chacha::ChaCha8Rng;

pub use conv::{conv2d_backward, conv2d_backward_cols, conv2d_forward, conv2d_forward_keep, ConvGeometry};
pub use layers::{BasicBlock, Layer, LayerFactory, Node, SeqCache, Sequential};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: safetensors::Dtype;
    const BYTES: usize;
    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;
    const BYTES: usize = 4;
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;
    const BYTES: usize = 8;
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[inline]
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub usize);

/// Named trainable parameters plus non-trainable buffers (running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<T>>,
    pub trainable: Vec<bool>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<ArrayD<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.trainable.push(true);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &ArrayD<T> {
        &self.buffers[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Folds batch statistics into the running buffers in order.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, ArrayD<T>, f64)>) {
        for (id, value, momentum) in updates {
            let m: T = cast(momentum);
            let buf = &mut self.buffers[id.0];
            ndarray::Zip::from(buf).and(&value).for_each(|b, &v| {
                *b = (T::one() - m) * *b + m * v;
            });
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            values: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }
}

/// Gradient slots aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub values: Vec<ArrayD<T>>,
}

impl<T: Real> Grads<T> {
    pub fn slot(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Captures the output of one named node and the gradient flowing into it.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    pub target: String,
    pub activation: Option<ArrayD<T>>,
    pub grad: Option<ArrayD<T>>,
}

impl<T> Probe<T> {
    pub fn new(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            activation: None,
            grad: None,
        }
    }
}

/// Per-pass state: parameters, mode, dropout randomness, deferred
/// running-statistic updates and an optional probe.
pub struct Ctx<'a, T> {
    pub params: &'a ParamStore<T>,
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Batch statistics to fold into running buffers: `(buffer, value, momentum)`.
    pub buffer_updates: Vec<(BufferId, ArrayD<T>, f64)>,
    pub probe: Option<Probe<T>>,
    /// Dropout masks are drawn from `rng` only when this is set; gradient
    /// checks turn it off to keep the function deterministic.
    pub dropout: bool,
    /// Train-mode batch norm uses batch statistics when set.
    pub batch_stats: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn eval(params: &'a ParamStore<T>) -> Self {
        Self {
            params,
            train: false,
            rng: None,
            buffer_updates: Vec::new(),
            probe: None,
            dropout: false,
            batch_stats: false,
        }
    }

    pub fn train(params: &'a ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params,
            train: true,
            rng: Some(rng),
            buffer_updates: Vec::new(),
            probe: None,
            dropout: true,
            batch_stats: true,
        }
    }

    pub fn with_probe(mut self, target: impl Into<String>) -> Self {
        self.probe = Some(Probe::new(target));
        self
    }

    pub(crate) fn probe_forward(&mut self, name: &str, out: &ArrayD<T>) {
        if let Some(p) = self.probe.as_mut() {
            if p.target == name {
                p.activation = Some(out.clone());
            }
        }
    }

    pub(crate) fn probe_backward(&mut self, name: &str, grad: &ArrayD<T>) {
        if let Some(p) = self.probe.as_mut() {
            if p.target == name {
                p.grad = Some(grad.clone());
            }
        }
    }
}

pub fn zeros<T: Real>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

