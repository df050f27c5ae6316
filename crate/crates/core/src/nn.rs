//! Parameter storage and the handful of layers the networks are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named parameter tensors. Order is creation order and is what
/// checkpoints and optimizers key on.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Register every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| graph.leaf(p.value.clone()))
                .collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Replace all values, checking names and shapes line up.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, v)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    v.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}

/// Graph variables for a bound [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape/product agree")
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl Conv3d {
    /// He-normal weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let fan_in = geometry.in_channels * geometry.taps();
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&geometry.weight_shape(), std, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(&[geometry.out_channels]),
        );
        Self {
            weight,
            bias,
            geometry,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.weight), p.var(self.bias), self.geometry)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let groups = if channels.is_multiple_of(4) { 4 } else { 1 };
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.group_norm(x, p.var(self.gamma), p.var(self.beta), self.groups)
    }
}

/// conv → group norm → ReLU
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv3d::new(store, &format!("{name}.conv"), geometry, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), geometry.out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y)?;
        Ok(g.relu(y))
    }
}

/// `relu(x + norm(conv(relu(norm(conv(x))))))`, channel count preserved.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub conv: Conv3d,
    pub norm: GroupNorm,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        debug_assert_eq!(geometry.in_channels, geometry.out_channels);
        debug_assert_eq!(geometry.stride, [1, 1, 1]);
        Self {
            first: ConvBlock::new(store, &format!("{name}.a"), geometry, rng),
            conv: Conv3d::new(store, &format!("{name}.b.conv"), geometry, rng),
            norm: GroupNorm::new(store, &format!("{name}.b.norm"), geometry.out_channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.first.forward(g, p, x)?;
        let y = self.conv.forward(g, p, y)?;
        let y = self.norm.forward(g, p, y)?;
        let y = g.add(x, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                normal_tensor(&[outputs, inputs], std, rng),
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}
