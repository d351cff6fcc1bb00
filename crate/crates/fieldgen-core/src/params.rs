//! Named parameter storage and the layer primitives built on it.
//!
//! Models own [`ParamId`] handles into one shared [`ParamStore`]; a forward
//! pass binds the store onto a tape (each parameter becomes one leaf) and
//! layers look their nodes up through the [`Binding`]. Freezing a component
//! is a predicate on parameter names at bind time.

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::tensor::{NodeId, Result, Scalar, Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<f32>] {
        &self.values
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<f32>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::Dimension(format!(
                "set_value for {}: {:?} vs {:?}",
                self.names[id.0],
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_parameters(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Insert every parameter as a tape leaf. `trainable` decides per name
    /// whether the leaf receives gradients.
    pub fn bind<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        trainable: impl Fn(&str) -> bool,
    ) -> Binding {
        let ids = self
            .names
            .iter()
            .zip(self.values.iter())
            .map(|(name, value)| tape.leaf(value.cast::<S>(), trainable(name)))
            .collect();
        Binding { ids }
    }

    /// Bind with every parameter trainable.
    pub fn bind_all<S: Scalar>(&self, tape: &mut Tape<S>) -> Binding {
        self.bind(tape, |_| true)
    }

    /// Apply gradients from a finished backward pass onto a grad buffer
    /// aligned with the store, for the subset selected by `param_ids`.
    pub fn collect_grads<S: Scalar>(
        &self,
        binding: &Binding,
        grads: &crate::tensor::Gradients<S>,
        param_ids: &[ParamId],
    ) -> Vec<Tensor<f32>> {
        param_ids
            .iter()
            .map(|&pid| {
                grads
                    .get_or_zeros(binding.node(pid), self.values[pid.0].shape())
                    .cast::<f32>()
            })
            .collect()
    }
}

/// Tape leaves for one bound store.
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    /// Assemble a binding from externally created leaves, one per store
    /// entry in registration order (gradient-check harnesses).
    pub fn from_nodes(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| rng::uniform_in(rng, -bound, bound) as f32)
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Dense layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), kaiming_uniform(rng, &[in_dim, out_dim], in_dim));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b }
    }

    /// Zero-initialized head: output is identically zero until trained.
    pub fn init_zero(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.register(format!("{name}.w"), Tensor::zeros(&[in_dim, out_dim]));
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = tape.matmul(x, bind.node(self.w))?;
        tape.add_bias_lastdim(y, bind.node(self.b))
    }
}

/// Convolution layer with per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = store.register(
            format!("{name}.w"),
            kaiming_uniform(rng, &[cout, cin, k, k], fan_in),
        );
        let b = store.register(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        let y = tape.conv2d(x, bind.node(self.w), self.stride, self.pad)?;
        tape.add_bias_channel(y, bind.node(self.b))
    }
}

/// Gain/shift pair for layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId> {
        tape.layer_norm(x, bind.node(self.gamma), bind.node(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_respects_trainable_filter() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "init", &[]);
        let a = store.register("vae.w", kaiming_uniform(&mut r, &[2, 2], 2));
        let b = store.register("dit.w", kaiming_uniform(&mut r, &[2, 2], 2));
        let mut tape = Tape::<f32>::new();
        let bind = store.bind(&mut tape, |name| !name.starts_with("vae."));
        assert!(!tape.requires_grad(bind.node(a)));
        assert!(tape.requires_grad(bind.node(b)));
    }

    #[test]
    fn linear_forward_shape_and_grads() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, "init", &[]);
        let lin = Linear::init(&mut store, &mut r, "l", 3, 2);
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_all(&mut tape);
        let x = tape.constant(Tensor::full(&[4, 3], 0.5));
        let y = lin.forward(&mut tape, &bind, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);
        let loss = tape.mean_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = store.collect_grads(&bind, &grads, &[lin.w, lin.b]);
        assert_eq!(gw[0].shape(), &[3, 2]);
        assert_eq!(gw[1].shape(), &[2]);
        assert!(gw[0].data().iter().any(|&v| v != 0.0));
    }
}
