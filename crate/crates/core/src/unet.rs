//! Vanilla and group-equivariant U-Nets.
//!
//! Layout (filter counts `f0..f9` per preset):
//!
//! ```text
//! conv1  lift(in -> f0)                 conv/BN/ReLU
//! conv2  gconv(f0 -> f1)                ── skip to U4
//! D1..D4 maxpool ×½, gconv(-> f2..f5)   D1..D3 skip to U3..U1; D4 is the bottleneck
//! U1..U4 bilinear ×2, gconv(-> f), concat skip, gconv(f + skip -> f)
//! group max-pool (equivariant families only), 1×1 projection to n_classes
//! ```
//!
//! The vanilla family is the same network over the trivial group.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{GroupKind, SymmetryGroup};
use crate::layers::{
    group_pool, group_relu, Conv2dLayer, GroupBatchNorm, GroupConvLayer, LiftingConvLayer, PoolMode, StatUpdate,
};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{BatchNormMode, Scalar, Tape, Tensor, Var};

pub const BLOCK_NAMES: [&str; 10] = ["conv1", "conv2", "D1", "D2", "D3", "D4", "U1", "U2", "U3", "U4"];

/// Widths at λ = 1, used only when a model is built from an explicit λ.
/// Dividing by 1.65 reproduces the large vanilla preset.
pub const REFERENCE_WIDTHS: [f64; 10] = [85.8, 85.8, 171.6, 339.9, 676.5, 1353.0, 676.5, 339.9, 171.6, 85.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Small,
    Large,
}

impl ModelSize {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelSize::Small => "small",
            ModelSize::Large => "large",
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(ModelSize::Small),
            "large" => Ok(ModelSize::Large),
            other => Err(Error::InvalidArgument(format!("unknown model size '{other}'"))),
        }
    }
}

/// Per-block filter counts of the six presets.
pub fn preset_filters(family: GroupKind, size: ModelSize) -> [usize; 10] {
    use GroupKind::*;
    use ModelSize::*;
    match (family, size) {
        (Trivial, Small) => [12, 12, 22, 44, 86, 172, 86, 44, 22, 12],
        (Trivial, Large) => [52, 52, 104, 206, 410, 820, 410, 206, 104, 52],
        (C4, Small) => [4, 4, 6, 12, 24, 46, 24, 12, 6, 4],
        (C4, Large) => [14, 14, 28, 56, 112, 222, 112, 56, 28, 14],
        (C8 | D4, Small) => [4, 4, 6, 10, 18, 34, 18, 10, 6, 4],
        (C8 | D4, Large) => [10, 10, 20, 40, 78, 154, 78, 40, 20, 10],
    }
}

pub fn preset_lambda(family: GroupKind, size: ModelSize) -> Option<f64> {
    match (family, size) {
        (GroupKind::Trivial, ModelSize::Small) => Some(6.0),
        (GroupKind::Trivial, ModelSize::Large) => Some(1.65),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub family: GroupKind,
    pub size: ModelSize,
    /// Width divisor; `None` when the filter counts are pinned by a preset.
    pub lambda: Option<f64>,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub input_hw: usize,
    #[serde(default)]
    pub pooling: PoolMode,
    pub filters: [usize; 10],
}

impl ArchConfig {
    pub fn preset(family: GroupKind, size: ModelSize) -> Self {
        ArchConfig {
            family,
            size,
            lambda: preset_lambda(family, size),
            kernel_size: if family == GroupKind::Trivial { 3 } else { 9 },
            in_channels: 3,
            n_classes: 1,
            input_hw: 224,
            pooling: PoolMode::Max,
            filters: preset_filters(family, size),
        }
    }

    /// Widths `round(REFERENCE_WIDTHS / λ)` instead of a preset table.
    pub fn with_lambda(family: GroupKind, size: ModelSize, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
        }
        let mut cfg = Self::preset(family, size);
        cfg.lambda = Some(lambda);
        for (f, w) in cfg.filters.iter_mut().zip(REFERENCE_WIDTHS) {
            *f = ((w / lambda).round() as usize).max(1);
        }
        Ok(cfg)
    }

    pub fn input_hw(mut self, hw: usize) -> Self {
        self.input_hw = hw;
        self
    }

    pub fn n_classes(mut self, c: usize) -> Self {
        self.n_classes = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_hw == 0 || self.input_hw % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not a positive multiple of 16",
                self.input_hw
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.n_classes == 0 || self.in_channels == 0 || self.filters.contains(&0) {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidArgument(format!("λ must be positive, got {l}")));
            }
        }
        Ok(())
    }

    pub fn cell_name(&self) -> String {
        format!("{}-{}", self.family, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Lift,
    Group,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kind: ConvKind,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub batchnorm: bool,
}

impl ConvSpec {
    /// Trainable scalars: base weights, bias and batchnorm affine.
    pub fn param_count(&self, group_order: usize) -> usize {
        let gin = if self.kind == ConvKind::Group { group_order } else { 1 };
        let bn = if self.batchnorm { 2 * self.cout } else { 0 };
        self.cout * self.cin * gin * self.k * self.k + self.cout + bn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Downsampling factor relative to the input.
    pub scale: usize,
    pub convs: Vec<ConvSpec>,
    /// Encoder block whose output is concatenated after the first conv.
    pub skip_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub family: GroupKind,
    pub group_order: usize,
    pub blocks: Vec<BlockSpec>,
    pub group_pool: bool,
    /// 1×1 convolution to the class logits.
    pub projection: Option<ConvSpec>,
}

impl ModelDescriptor {
    pub fn from_config(cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.filters;
        let k = cfg.kernel_size;
        let conv = |kind, cin, cout| ConvSpec {
            kind,
            cin,
            cout,
            k,
            batchnorm: true,
        };
        let mut blocks = vec![
            BlockSpec {
                name: "conv1".into(),
                scale: 1,
                convs: vec![conv(ConvKind::Lift, cfg.in_channels, f[0])],
                skip_from: None,
            },
            BlockSpec {
                name: "conv2".into(),
                scale: 1,
                convs: vec![conv(ConvKind::Group, f[0], f[1])],
                skip_from: None,
            },
        ];
        for i in 0..4 {
            blocks.push(BlockSpec {
                name: BLOCK_NAMES[2 + i].into(),
                scale: 1 << (i + 1),
                convs: vec![conv(ConvKind::Group, f[1 + i], f[2 + i])],
                skip_from: None,
            });
        }
        // U1 pairs with D3, ..., U4 with conv2
        for i in 0..4 {
            let skip_block = 4 - i;
            let skip_ch = f[skip_block];
            let out = f[6 + i];
            blocks.push(BlockSpec {
                name: BLOCK_NAMES[6 + i].into(),
                scale: 1 << (3 - i),
                convs: vec![
                    conv(ConvKind::Group, f[5 + i], out),
                    conv(ConvKind::Group, out + skip_ch, out),
                ],
                skip_from: Some(BLOCK_NAMES[skip_block].into()),
            });
        }
        let order = cfg.family.order();
        Ok(ModelDescriptor {
            family: cfg.family,
            group_order: order,
            blocks,
            group_pool: order > 1,
            projection: Some(ConvSpec {
                kind: ConvKind::Plain,
                cin: f[9],
                cout: cfg.n_classes,
                k: 1,
                batchnorm: false,
            }),
        })
    }

    /// A descriptor with no layers.
    pub fn empty(family: GroupKind) -> Self {
        ModelDescriptor {
            family,
            group_order: family.order(),
            blocks: Vec::new(),
            group_pool: false,
            projection: None,
        }
    }

    /// Output width of each block, in block order.
    pub fn filters(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| b.convs.last().map_or(0, |c| c.cout))
            .collect()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.convs)
            .chain(self.projection.as_ref())
            .map(|c| c.param_count(self.group_order))
            .sum()
    }
}

#[derive(Debug, Clone)]
enum StageConv {
    Lift(LiftingConvLayer),
    Group(GroupConvLayer),
}

#[derive(Debug, Clone)]
struct Stage {
    conv: StageConv,
    bn: GroupBatchNorm,
}

#[derive(Debug, Clone)]
struct Block {
    stages: Vec<Stage>,
    skip: Option<usize>,
}

/// A built U-Net with its parameters.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: ArchConfig,
    descriptor: ModelDescriptor,
    group: Arc<SymmetryGroup>,
    store: ParamStore<T>,
    blocks: Vec<Block>,
    projection: Conv2dLayer,
}

impl<T: Scalar> UNet<T> {
    /// Build and initialize (Kaiming-uniform weights, zero biases) from a seed.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let descriptor = ModelDescriptor::from_config(&config)?;
        let group = Arc::new(SymmetryGroup::new(config.family));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(descriptor.blocks.len());
        for spec in &descriptor.blocks {
            let mut stages = Vec::new();
            for (j, c) in spec.convs.iter().enumerate() {
                let name = format!("{}.{}", spec.name, j);
                let conv = match c.kind {
                    ConvKind::Lift => StageConv::Lift(LiftingConvLayer::new(
                        &name,
                        &mut store,
                        group.clone(),
                        c.cin,
                        c.cout,
                        c.k,
                        &mut rng,
                    )?),
                    ConvKind::Group => StageConv::Group(GroupConvLayer::new(
                        &name,
                        &mut store,
                        group.clone(),
                        c.cin,
                        c.cout,
                        c.k,
                        &mut rng,
                    )?),
                    ConvKind::Plain => unreachable!("plain convs only in the projection"),
                };
                let bn = GroupBatchNorm::new(&format!("{name}.bn"), &mut store, c.cout);
                stages.push(Stage { conv, bn });
            }
            let skip = spec
                .skip_from
                .as_ref()
                .map(|s| BLOCK_NAMES.iter().position(|n| n == s).expect("known block"));
            blocks.push(Block { stages, skip });
        }
        let p = descriptor.projection.as_ref().expect("built descriptors project to classes");
        let projection = Conv2dLayer::new("projection", &mut store, p.cin, p.cout, p.k, &mut rng)?;
        Ok(UNet {
            config,
            descriptor,
            group,
            store,
            blocks,
            projection,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    pub fn group(&self) -> &SymmetryGroup {
        &self.group
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable scalars (base weights, biases, batchnorm affine).
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Zero the class projection so every logit is 0.
    pub fn zero_projection(&mut self) {
        let w = self.projection.weight();
        self.store.get_mut(w).data_mut().fill(T::zero());
    }

    /// Same network and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            descriptor: self.descriptor.clone(),
            group: self.group.clone(),
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            projection: self.projection.clone(),
        }
    }

    /// Replace every stored tensor; names and shapes must match exactly.
    pub fn load_store(&mut self, store: ParamStore<T>) -> Result<()> {
        if store.len() != self.store.len() {
            return Err(Error::LengthMismatch(format!(
                "{} tensors, model has {}",
                store.len(),
                self.store.len()
            )));
        }
        for (a, b) in store.entries().iter().zip(self.store.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::LengthMismatch(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    fn stage_forward(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        stage: &Stage,
        x: Var,
        mode: BatchNormMode,
        updates: &mut Vec<StatUpdate<T>>,
    ) -> Result<Var> {
        let h = match &stage.conv {
            StageConv::Lift(l) => l.forward(tape, params, x)?,
            StageConv::Group(g) => g.forward(tape, params, x)?,
        };
        let h = stage.bn.forward(tape, params, &self.store, h, mode, updates)?;
        group_relu(tape, h)
    }

    /// Apply a 4-d spatial op to a `[B, C, G, H, W]` map.
    fn spatial(
        tape: &mut Tape<T>,
        x: Var,
        op: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, [s[0], s[1] * s[2], s[3], s[4]])?;
        let y = op(tape, flat)?;
        let t = tape.value(y).shape().to_vec();
        tape.reshape(y, [s[0], s[1], s[2], t[2], t[3]])
    }

    /// Logits `[B, n_classes, H, W]` for `x: [B, in_channels, H, W]`, plus
    /// the running-statistics updates a train-mode pass produces.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &Bindings,
        x: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Vec<StatUpdate<T>>)> {
        let s = tape.value(x).shape();
        let hw = self.config.input_hw;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != hw || s[3] != hw {
            return Err(Error::shape(
                "forward_segmentation",
                format!("expected [B, {}, {hw}, {hw}], got {s:?}", self.config.in_channels),
            ));
        }
        let mut updates = Vec::new();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (bi, block) in self.blocks.iter().enumerate() {
            if (2..6).contains(&bi) {
                h = Self::spatial(tape, h, |t, v| t.maxpool2(v))?;
            }
            if bi >= 6 {
                h = Self::spatial(tape, h, |t, v| t.upsample2(v))?;
            }
            for (si, stage) in block.stages.iter().enumerate() {
                h = self.stage_forward(tape, params, stage, h, mode, &mut updates)?;
                if si == 0 {
                    if let Some(skip) = block.skip {
                        h = tape.concat_channels(h, outputs[skip])?;
                    }
                }
            }
            outputs.push(h);
        }
        let pooled = if self.descriptor.group_pool {
            group_pool(tape, h, self.config.pooling)?
        } else {
            let s = tape.value(h).shape().to_vec();
            tape.reshape(h, [s[0], s[1], s[3], s[4]])?
        };
        let logits = self.projection.forward(tape, params, pooled)?;
        Ok((logits, updates))
    }

    pub fn apply_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            self.store.get_mut(u.id).data_mut().copy_from_slice(&u.value);
        }
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, _) = self.forward(&mut tape, &params, xv, BatchNormMode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_reproduce_filter_table() {
        let d = ModelDescriptor::from_config(&ArchConfig::preset(GroupKind::Trivial, ModelSize::Small)).unwrap();
        assert_eq!(d.filters(), vec![12, 12, 22, 44, 86, 172, 86, 44, 22, 12]);
        let d = ModelDescriptor::from_config(&ArchConfig::preset(GroupKind::C4, ModelSize::Large)).unwrap();
        assert_eq!(d.filters(), vec![14, 14, 28, 56, 112, 222, 112, 56, 28, 14]);
        for fam in [GroupKind::C8, GroupKind::D4] {
            let d = ModelDescriptor::from_config(&ArchConfig::preset(fam, ModelSize::Small)).unwrap();
            assert_eq!(d.filters(), vec![4, 4, 6, 10, 18, 34, 18, 10, 6, 4]);
        }
    }

    #[test]
    fn empty_descriptor_has_no_parameters() {
        assert_eq!(ModelDescriptor::empty(GroupKind::C4).param_count(), 0);
    }

    #[test]
    fn input_size_must_divide_by_16() {
        let cfg = ArchConfig::preset(GroupKind::C4, ModelSize::Small).input_hw(40);
        assert!(ModelDescriptor::from_config(&cfg).is_err());
        assert!(UNet::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn lambda_165_gives_large_vanilla_widths() {
        let cfg = ArchConfig::with_lambda(GroupKind::Trivial, ModelSize::Large, 1.65).unwrap();
        assert_eq!(cfg.filters, preset_filters(GroupKind::Trivial, ModelSize::Large));
        assert!(ArchConfig::with_lambda(GroupKind::Trivial, ModelSize::Large, 0.0).is_err());
    }

    #[test]
    fn skip_topology_pairs_matching_scales() {
        let d = ModelDescriptor::from_config(&ArchConfig::preset(GroupKind::C4, ModelSize::Small)).unwrap();
        let scale = |name: &str| d.blocks.iter().find(|b| b.name == name).unwrap().scale;
        for b in d.blocks.iter().filter(|b| b.skip_from.is_some()) {
            assert_eq!(b.scale, scale(b.skip_from.as_deref().unwrap()), "{}", b.name);
        }
    }

    #[test]
    fn wrong_input_size_rejected() {
        let cfg = ArchConfig::preset(GroupKind::Trivial, ModelSize::Small).input_hw(32);
        let net = UNet::<f32>::new(cfg, 0).unwrap();
        assert!(net.predict(&Tensor::zeros([1, 3, 16, 16])).is_err());
    }
}
