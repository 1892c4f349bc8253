//! Group-equivariant layers over feature maps laid out `[B, C, |G|, H, W]`.
//!
//! Only one base copy of every filter is a parameter. The transformed copies
//! are materialized on each forward pass through a fixed linear map, so the
//! gradient of the orbit flows back onto the base copy.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{kernel_map, KernelMap, SymmetryGroup};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::{BatchNormMode, LinearMap, RunningStats, Scalar, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How the final symmetry pooling summarizes the group axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
}

/// Maps base weights `[Cout, Cin, Gin, k, k]` to the full orbit
/// `[Cout·|G|, Cin·Gin, k, k]`. `Gin` is 1 for lifting layers and `|G|` for
/// group convolutions, where block `(o, g, i, h)` is `g` applied to base
/// slice `(o, i, index(g⁻¹h))`.
#[derive(Debug, Clone)]
pub struct OrbitExpansion {
    cout: usize,
    cin: usize,
    group_in: usize,
    k: usize,
    maps: Vec<KernelMap>,
    relative: Vec<Vec<usize>>,
}

impl OrbitExpansion {
    pub fn new(group: &SymmetryGroup, cout: usize, cin: usize, k: usize, lifting: bool) -> Result<Self> {
        let maps = group
            .elements()
            .iter()
            .map(|g| kernel_map(g, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(OrbitExpansion {
            cout,
            cin,
            group_in: if lifting { 1 } else { group.order() },
            k,
            maps,
            relative: group.relative_index_table(),
        })
    }

    fn order(&self) -> usize {
        self.maps.len()
    }

    fn base_slice(&self, o: usize, i: usize, g: usize, h: usize) -> usize {
        let hb = if self.group_in == 1 { 0 } else { self.relative[g][h] };
        ((o * self.cin + i) * self.group_in + hb) * self.k * self.k
    }

    fn out_slice(&self, o: usize, g: usize, i: usize, h: usize) -> usize {
        let cols = self.cin * self.group_in;
        (((o * self.order() + g) * cols) + i * self.group_in + h) * self.k * self.k
    }
}

impl<T: Scalar> LinearMap<T> for OrbitExpansion {
    fn in_len(&self) -> usize {
        self.cout * self.cin * self.group_in * self.k * self.k
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.cout * self.order(), self.cin * self.group_in, self.k, self.k]
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let kk = self.k * self.k;
        for o in 0..self.cout {
            for (g, map) in self.maps.iter().enumerate() {
                for i in 0..self.cin {
                    for h in 0..self.group_in {
                        let src = &x[self.base_slice(o, i, g, h)..][..kk];
                        let dst = &mut y[self.out_slice(o, g, i, h)..][..kk];
                        map.apply(src, dst);
                    }
                }
            }
        }
    }

    fn apply_transpose(&self, dy: &[T], dx: &mut [T]) {
        let kk = self.k * self.k;
        for o in 0..self.cout {
            for (g, map) in self.maps.iter().enumerate() {
                for i in 0..self.cin {
                    for h in 0..self.group_in {
                        let src = &dy[self.out_slice(o, g, i, h)..][..kk];
                        let dst = &mut dx[self.base_slice(o, i, g, h)..][..kk];
                        map.apply_transpose_add(src, dst);
                    }
                }
            }
        }
    }
}

/// Repeats each of `channels` biases across the group axis.
#[derive(Debug, Clone)]
pub struct RepeatOverGroup {
    channels: usize,
    order: usize,
}

impl<T: Scalar> LinearMap<T> for RepeatOverGroup {
    fn in_len(&self) -> usize {
        self.channels
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.channels * self.order]
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        for (o, &v) in x.iter().enumerate() {
            y[o * self.order..(o + 1) * self.order].fill(v);
        }
    }

    fn apply_transpose(&self, dy: &[T], dx: &mut [T]) {
        for (o, d) in dx.iter_mut().enumerate() {
            *d += dy[o * self.order..(o + 1) * self.order].iter().copied().sum();
        }
    }
}

fn kaiming_uniform<T: Scalar, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
    }
    Ok(())
}

/// Shared machinery of the lifting and group convolutions.
#[derive(Debug, Clone)]
struct OrbitConv {
    group: Arc<SymmetryGroup>,
    cin: usize,
    cout: usize,
    k: usize,
    weight: ParamId,
    bias: ParamId,
    expansion: Arc<OrbitExpansion>,
    bias_repeat: Arc<RepeatOverGroup>,
}

impl OrbitConv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        store: &mut ParamStore<T>,
        group: Arc<SymmetryGroup>,
        cin: usize,
        cout: usize,
        k: usize,
        lifting: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_kernel(k)?;
        let gin = if lifting { 1 } else { group.order() };
        let fan_in = cin * gin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(vec![cout, cin, gin, k, k], fan_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]), true);
        let expansion = Arc::new(OrbitExpansion::new(&group, cout, cin, k, lifting)?);
        let bias_repeat = Arc::new(RepeatOverGroup {
            channels: cout,
            order: group.order(),
        });
        Ok(OrbitConv {
            group,
            cin,
            cout,
            k,
            weight,
            bias,
            expansion,
            bias_repeat,
        })
    }

    /// `x` is `[B, Cin·Gin, H, W]`; returns `[B, Cout, |G|, H, W]`.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let w = tape.linear_map(params.var(self.weight), self.expansion.clone())?;
        let b = tape.linear_map(params.var(self.bias), self.bias_repeat.clone())?;
        let y = tape.conv2d(x, w, Some(b), (self.k - 1) / 2)?;
        let s = tape.value(y).shape().to_vec();
        tape.reshape(y, [s[0], self.cout, self.group.order(), s[2], s[3]])
    }

    fn param_count(&self) -> usize {
        let gin = self.expansion.group_in;
        self.cout * self.cin * gin * self.k * self.k + self.cout
    }
}

/// First equivariant layer: plain image `[B, Cin, H, W]` to a group feature
/// map, convolving with every transformed copy of each base filter.
#[derive(Debug, Clone)]
pub struct LiftingConvLayer {
    inner: OrbitConv,
}

impl LiftingConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        store: &mut ParamStore<T>,
        group: Arc<SymmetryGroup>,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LiftingConvLayer {
            inner: OrbitConv::new(name, store, group, cin, cout, k, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape("lift", format!("expected square [B, C, H, W], got {s:?}")));
        }
        self.inner.forward(tape, params, x)
    }

    pub fn weight(&self) -> ParamId {
        self.inner.weight
    }

    pub fn bias(&self) -> ParamId {
        self.inner.bias
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Convolution between group feature maps.
#[derive(Debug, Clone)]
pub struct GroupConvLayer {
    inner: OrbitConv,
}

impl GroupConvLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        store: &mut ParamStore<T>,
        group: Arc<SymmetryGroup>,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GroupConvLayer {
            inner: OrbitConv::new(name, store, group, cin, cout, k, false, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        let order = self.inner.group.order();
        if s.len() != 5 || s[2] != order {
            return Err(Error::GroupMismatch(
                format!("input group axis {s:?}"),
                format!("layer group {} of order {order}", self.inner.group.kind()),
            ));
        }
        if s[1] != self.inner.cin {
            return Err(Error::shape("gconv", format!("input has {} channels, layer expects {}", s[1], self.inner.cin)));
        }
        let flat = tape.reshape(x, [s[0], s[1] * s[2], s[3], s[4]])?;
        self.inner.forward(tape, params, flat)
    }

    pub fn weight(&self) -> ParamId {
        self.inner.weight
    }

    pub fn bias(&self) -> ParamId {
        self.inner.bias
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Batch normalization whose statistics and affine parameters are shared
/// along the group axis.
#[derive(Debug, Clone)]
pub struct GroupBatchNorm {
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

/// Running-statistics update produced by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub id: ParamId,
    pub value: Vec<T>,
}

impl GroupBatchNorm {
    pub fn new<T: Scalar>(name: &str, store: &mut ParamStore<T>, channels: usize) -> Self {
        GroupBatchNorm {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], T::one()), false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        store: &ParamStore<T>,
        x: Var,
        mode: BatchNormMode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let running = RunningStats {
            mean: store.get(self.running_mean).data().to_vec(),
            var: store.get(self.running_var).data().to_vec(),
        };
        let (y, new) = tape.batchnorm(
            x,
            params.var(self.gamma),
            params.var(self.beta),
            &running,
            mode,
            self.eps,
            self.momentum,
        )?;
        if let Some(new) = new {
            updates.push(StatUpdate {
                id: self.running_mean,
                value: new.mean,
            });
            updates.push(StatUpdate {
                id: self.running_var,
                value: new.var,
            });
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Pointwise ReLU; commutes with any permutation of pixels or group slots.
pub fn group_relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.relu(x)
}

/// Symmetry pooling over the group axis: `[B, C, |G|, H, W] -> [B, C, H, W]`.
pub fn group_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => tape.group_max(x),
        PoolMode::Mean => tape.group_mean(x),
    }
}

/// Ordinary convolution on `[B, C, H, W]` tensors (used for the class
/// projection).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    k: usize,
    cin: usize,
    cout: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2dLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        store: &mut ParamStore<T>,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_kernel(k)?;
        Ok(Conv2dLayer {
            k,
            cin,
            cout,
            weight: store.add(
                format!("{name}.weight"),
                kaiming_uniform(vec![cout, cin, k, k], cin * k * k, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout]), true),
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, x: Var) -> Result<Var> {
        tape.conv2d(x, params.var(self.weight), Some(params.var(self.bias)), (self.k - 1) / 2)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}
