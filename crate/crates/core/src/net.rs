//! Small convolutional classifier with named insertion slots for augmentors.

use std::collections::BTreeSet;
use std::path::Path;

use ndcore::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentorConfig, Mode, Noise};
use crate::error::{DsuError, Result};

pub const MAX_SLOT: usize = 5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    /// 2x2 average pooling with stride 2.
    Avg2,
    /// Mean over all spatial positions; yields `[B,C]`.
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Block {
    /// Same-padded convolution (`pad = kernel / 2`).
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    Pool {
        kind: PoolKind,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
    /// Named insertion position.
    Slot {
        id: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub blocks: Vec<Block>,
    pub insert_positions: Vec<usize>,
    pub num_classes: usize,
    /// Batch normalization after every convolution.
    pub batch_norm: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::backbone(&[16, 32, 64, 64], 4, 32)
    }
}

impl NetworkSpec {
    /// Stem convolution, average pool, then one 3x3 conv block per entry of
    /// `widths` (the first at stride 1, the rest at stride 2), global average
    /// pool and a linear head. Slots sit after the stem, after the pool and
    /// after every block, so four widths give slots 0 through 5.
    pub fn backbone(widths: &[usize], num_classes: usize, image_size: usize) -> Self {
        let strides: Vec<usize> = (0..widths.len()).map(|i| if i == 0 { 1 } else { 2 }).collect();
        Self::backbone_strided(widths, &strides, num_classes, image_size)
    }

    /// [`Self::backbone`] with an explicit stride per block. Missing
    /// entries default to 1.
    pub fn backbone_strided(widths: &[usize], strides: &[usize], num_classes: usize, image_size: usize) -> Self {
        let stem = widths.first().copied().unwrap_or(16);
        let mut blocks = vec![
            Block::Conv {
                out_channels: stem,
                kernel: 3,
                stride: 1,
            },
            Block::Relu,
            Block::Slot { id: 0 },
            Block::Pool { kind: PoolKind::Avg2 },
            Block::Slot { id: 1 },
        ];
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(Block::Conv {
                out_channels: w,
                kernel: 3,
                stride: strides.get(i).copied().unwrap_or(1),
            });
            blocks.push(Block::Relu);
            blocks.push(Block::Slot { id: i + 2 });
        }
        blocks.push(Block::Pool {
            kind: PoolKind::GlobalAvg,
        });
        blocks.push(Block::Linear {
            out_features: num_classes,
        });
        let insert_positions = (0..widths.len() + 2).collect();
        Self {
            in_channels: 3,
            image_size,
            blocks,
            insert_positions,
            num_classes,
            batch_norm: false,
        }
    }

    pub fn with_positions(mut self, positions: &[usize]) -> Self {
        self.insert_positions = positions.to_vec();
        self
    }

    pub fn slots(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Slot { id } => Some(*id),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        plan(self).map(|_| ())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(plan(self)?.1.iter().map(|p| p.shape.iter().product::<usize>()).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamRole {
    ConvWeight,
    LinearWeight,
    Bias,
    BnScale,
}

#[derive(Debug, Clone)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    role: ParamRole,
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    BatchNorm { scale: usize, shift: usize, running: usize },
    Relu,
    AvgPool2,
    GlobalAvg,
    Flatten,
    Linear { w: usize, b: usize },
    Slot(usize),
}

fn invalid(reason: String) -> DsuError {
    DsuError::Config(format!("network: {reason}"))
}

/// Shape inference over the spec; yields the executable layer list and the
/// parameter inventory in storage order.
fn plan(spec: &NetworkSpec) -> Result<(Vec<Layer>, Vec<ParamInfo>, usize)> {
    if spec.in_channels == 0 || spec.image_size == 0 || spec.num_classes == 0 {
        return Err(invalid("in_channels, image_size and num_classes must be positive".into()));
    }
    let mut layers = Vec::new();
    let mut params: Vec<ParamInfo> = Vec::new();
    let mut shape = vec![spec.in_channels, spec.image_size, spec.image_size];
    let mut slots = BTreeSet::new();
    let mut bn_count = 0;
    let push = |params: &mut Vec<ParamInfo>, name: String, shape: Vec<usize>, fan_in: usize, role| {
        params.push(ParamInfo {
            name,
            shape,
            fan_in,
            role,
        });
        params.len() - 1
    };
    for (i, block) in spec.blocks.iter().enumerate() {
        match *block {
            Block::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                if shape.len() != 3 {
                    return Err(invalid(format!("block {i}: conv needs a spatial input")));
                }
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(invalid(format!("block {i}: conv sizes must be positive")));
                }
                let pad = kernel / 2;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(invalid(format!("block {i}: kernel {kernel} exceeds padded input {h}x{w}")));
                }
                let fan_in = c * kernel * kernel;
                let wi = push(
                    &mut params,
                    format!("conv{i}.weight"),
                    vec![out_channels, c, kernel, kernel],
                    fan_in,
                    ParamRole::ConvWeight,
                );
                let bi = push(&mut params, format!("conv{i}.bias"), vec![out_channels], fan_in, ParamRole::Bias);
                layers.push(Layer::Conv {
                    w: wi,
                    b: bi,
                    stride,
                    pad,
                });
                shape = vec![
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ];
                if spec.batch_norm {
                    let scale = push(&mut params, format!("bn{i}.scale"), vec![out_channels], 1, ParamRole::BnScale);
                    let shift = push(&mut params, format!("bn{i}.shift"), vec![out_channels], 1, ParamRole::Bias);
                    layers.push(Layer::BatchNorm {
                        scale,
                        shift,
                        running: bn_count,
                    });
                    bn_count += 1;
                }
            }
            Block::Relu => layers.push(Layer::Relu),
            Block::Pool { kind } => {
                if shape.len() != 3 {
                    return Err(invalid(format!("block {i}: pooling needs a spatial input")));
                }
                match kind {
                    PoolKind::Avg2 => {
                        if shape[1] < 2 || shape[2] < 2 {
                            return Err(invalid(format!("block {i}: cannot halve {}x{}", shape[1], shape[2])));
                        }
                        shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                        layers.push(Layer::AvgPool2);
                    }
                    PoolKind::GlobalAvg => {
                        shape = vec![shape[0]];
                        layers.push(Layer::GlobalAvg);
                    }
                }
            }
            Block::Flatten => {
                shape = vec![shape.iter().product()];
                layers.push(Layer::Flatten);
            }
            Block::Linear { out_features } => {
                if shape.len() != 1 {
                    return Err(invalid(format!("block {i}: linear needs a flat input")));
                }
                if out_features == 0 {
                    return Err(invalid(format!("block {i}: linear width must be positive")));
                }
                let fan_in = shape[0];
                let wi = push(
                    &mut params,
                    format!("linear{i}.weight"),
                    vec![out_features, fan_in],
                    fan_in,
                    ParamRole::LinearWeight,
                );
                let bi = push(&mut params, format!("linear{i}.bias"), vec![out_features], fan_in, ParamRole::Bias);
                layers.push(Layer::Linear { w: wi, b: bi });
                shape = vec![out_features];
            }
            Block::Slot { id } => {
                if id > MAX_SLOT {
                    return Err(invalid(format!("slot {id} outside 0..={MAX_SLOT}")));
                }
                if shape.len() != 3 {
                    return Err(invalid(format!("slot {id} must sit on a spatial activation")));
                }
                if !slots.insert(id) {
                    return Err(invalid(format!("slot {id} declared twice")));
                }
                layers.push(Layer::Slot(id));
            }
        }
    }
    if shape != [spec.num_classes] {
        return Err(invalid(format!(
            "output shape {shape:?} does not match num_classes {}",
            spec.num_classes
        )));
    }
    for p in &spec.insert_positions {
        if !slots.contains(p) {
            return Err(invalid(format!("insert position {p} is not a slot of the network")));
        }
    }
    Ok((layers, params, bn_count))
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub spec: NetworkSpec,
    pub init_seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    pub running: Vec<RunningStats<T>>,
}

/// Fan-in scaled Gaussian weights (He for convolutions, LeCun for linear
/// layers), zero biases, unit batch-norm scales.
pub fn build<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Params<T>> {
    let (_, infos, bn) = plan(spec)?;
    let mut rng = augment::Rng::new(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for info in infos {
        let n: usize = info.shape.iter().product();
        let data: Vec<f64> = match info.role {
            ParamRole::ConvWeight => {
                let std = (2.0 / info.fan_in as f64).sqrt();
                rng.normals(n).into_iter().map(|v| v * std).collect()
            }
            ParamRole::LinearWeight => {
                let std = (1.0 / info.fan_in as f64).sqrt();
                rng.normals(n).into_iter().map(|v| v * std).collect()
            }
            ParamRole::Bias => vec![0.0; n],
            ParamRole::BnScale => vec![1.0; n],
        };
        names.push(info.name);
        tensors.push(Tensor::from_f64(&info.shape, &data)?);
    }
    let (layers, _, _) = plan(spec)?;
    let running = layers
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm { scale, .. } => Some(*scale),
            _ => None,
        })
        .map(|scale| {
            let c = tensors[scale].shape().to_vec();
            Ok(RunningStats {
                mean: Tensor::zeros(&c)?,
                var: Tensor::ones(&c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(running.len(), bn);
    Ok(Params {
        spec: spec.clone(),
        init_seed: seed,
        names,
        tensors,
        running,
    })
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Var,
    /// One per entry of [`Params::tensors`], in the same order.
    pub params: Vec<Var>,
    /// Activation leaving each slot (after any augmentation), in network order.
    pub taps: Vec<(usize, Var)>,
    /// Batch statistics of each batch-norm layer (train mode only).
    pub bn_batch: Vec<RunningStats<T>>,
}

#[allow(clippy::too_many_arguments)]
fn forward_layers<T: Scalar>(
    g: &mut Graph<T>,
    params: &Params<T>,
    layers: &[Layer],
    x: Var,
    pv: Vec<Var>,
    mode: Mode,
    aug: &AugmentorConfig,
    noise: &mut Noise,
) -> Result<Forward<T>> {
    let mut taps = Vec::new();
    let mut bn_batch = Vec::new();
    let mut h = x;
    for layer in layers {
        h = match *layer {
            Layer::Conv { w, b, stride, pad } => g.conv2d(h, pv[w], Some(pv[b]), stride, pad)?,
            Layer::BatchNorm { scale, shift, running } => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let m = g.mean(h, &[0, 2, 3])?;
                        let v = g.variance(h, &[0, 2, 3])?;
                        bn_batch.push(RunningStats {
                            mean: g.value(m).clone(),
                            var: g.value(v).clone(),
                        });
                        (m, v)
                    }
                    Mode::Eval => {
                        let r = &params.running[running];
                        (g.constant(r.mean.clone()), g.constant(r.var.clone()))
                    }
                };
                let centered = g.sub(h, mean)?;
                let shifted = g.add_scalar(var, T::from_f64(BN_EPS))?;
                let std = g.sqrt(shifted)?;
                let normed = g.div(centered, std)?;
                let scaled = g.mul(normed, pv[scale])?;
                g.add(scaled, pv[shift])?
            }
            Layer::Relu => g.relu(h)?,
            Layer::AvgPool2 => g.avg_pool2(h)?,
            Layer::GlobalAvg => g.mean(h, &[2, 3])?,
            Layer::Flatten => {
                let s = g.shape(h).to_vec();
                g.reshape(h, &[s[0], s[1..].iter().product()])?
            }
            Layer::Linear { w, b } => g.linear(h, pv[w], Some(pv[b]))?,
            Layer::Slot(id) => {
                let out = if params.spec.insert_positions.contains(&id) {
                    augment::apply_var(g, h, aug, mode, noise)?.out
                } else {
                    h
                };
                taps.push((id, out));
                out
            }
        };
    }
    Ok(Forward {
        logits: h,
        params: pv,
        taps,
        bn_batch,
    })
}

impl<T: Scalar> Params<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: r.mean.cast(),
                    var: r.var.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 4 || shape[1] != s.in_channels || shape[2] != s.image_size || shape[3] != s.image_size {
            return Err(DsuError::Input(format!(
                "network expects [B,{},{},{}], got {shape:?}",
                s.in_channels, s.image_size, s.image_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass of `x` on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        aug: &AugmentorConfig,
        noise: &mut Noise,
    ) -> Result<Forward<T>> {
        let pv: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        self.forward_graph_with(g, x, pv, mode, aug, noise)
    }

    /// [`Self::forward_graph`] reading the weights from `pv` (one variable
    /// per entry of [`Self::tensors`]) instead of fresh leaves.
    pub fn forward_graph_with(
        &self,
        g: &mut Graph<T>,
        x: Var,
        pv: Vec<Var>,
        mode: Mode,
        aug: &AugmentorConfig,
        noise: &mut Noise,
    ) -> Result<Forward<T>> {
        self.check_input(g.shape(x))?;
        if pv.len() != self.tensors.len() {
            return Err(DsuError::Input(format!(
                "{} parameter variables for {} tensors",
                pv.len(),
                self.tensors.len()
            )));
        }
        for (v, t) in pv.iter().zip(&self.tensors) {
            if g.shape(*v) != t.shape() {
                return Err(DsuError::Input(format!(
                    "parameter variable shape {:?}, expected {:?}",
                    g.shape(*v),
                    t.shape()
                )));
            }
        }
        let (layers, _, _) = plan(&self.spec)?;
        forward_layers(g, self, &layers, x, pv, mode, aug, noise)
    }

    /// Logits `[B, num_classes]` without recording gradients.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, aug: &AugmentorConfig, noise: &mut Noise) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let f = self.forward_graph(&mut g, xv, mode, aug, noise)?;
        Ok(g.value(f.logits).clone())
    }

    /// Eval-mode forward returning the logits and the activation at each slot.
    pub fn eval_taps(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, Tensor<T>)>)> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let mut noise = Noise::live(augment::Rng::new(0));
        let f = self.forward_graph(&mut g, xv, Mode::Eval, &AugmentorConfig::default(), &mut noise)?;
        let taps = f.taps.iter().map(|(id, v)| (*id, g.value(*v).clone())).collect();
        Ok((g.value(f.logits).clone(), taps))
    }

    /// Exponential moving update of the batch-norm running statistics.
    pub fn update_running(&mut self, batch: &[RunningStats<T>]) -> Result<()> {
        if batch.len() != self.running.len() {
            return Err(DsuError::Input(format!(
                "{} batch-norm statistics for {} layers",
                batch.len(),
                self.running.len()
            )));
        }
        let m = BN_MOMENTUM;
        for (r, b) in self.running.iter_mut().zip(batch) {
            for (dst, src) in r
                .mean
                .data_mut()
                .iter_mut()
                .zip(b.mean.data())
                .chain(r.var.data_mut().iter_mut().zip(b.var.data()))
            {
                *dst = T::from_f64((1.0 - m) * dst.as_f64() + m * src.as_f64());
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (all tensors, little-endian, concatenated) and
    /// `<stem>.json` (spec, seed and per-tensor names, shapes and offsets).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        let all = self
            .names
            .iter()
            .cloned()
            .zip(self.tensors.iter())
            .chain(self.running.iter().enumerate().flat_map(|(i, r)| {
                [(format!("running{i}.mean"), &r.mean), (format!("running{i}.var"), &r.var)]
            }));
        for (name, t) in all {
            entries.push(CheckpointEntry {
                name,
                shape: t.shape().to_vec(),
                offset: bytes.len(),
            });
            bytes.extend(t.to_le_bytes());
        }
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            init_seed: self.init_seed,
            dtype: T::DTYPE,
            entries,
        };
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        std::fs::write(&bin, bytes).map_err(|e| DsuError::io(&bin, e))?;
        std::fs::write(&json, serde_json::to_vec_pretty(&manifest)?).map_err(|e| DsuError::io(&json, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bin = stem.with_extension("bin");
        let json = stem.with_extension("json");
        let text = std::fs::read(&json).map_err(|e| DsuError::io(&json, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        if manifest.dtype != T::DTYPE {
            return Err(DsuError::Input(format!(
                "checkpoint holds {:?}, requested {:?}",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let bytes = std::fs::read(&bin).map_err(|e| DsuError::io(&bin, e))?;
        let mut fresh = build::<T>(&manifest.spec, manifest.init_seed)?;
        let width = T::DTYPE.size_of();
        let read = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let e = manifest
                .entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| DsuError::Input(format!("checkpoint lacks `{name}`")))?;
            if e.shape != shape {
                return Err(DsuError::Input(format!("`{name}` has shape {:?}, expected {shape:?}", e.shape)));
            }
            let len = shape.iter().product::<usize>() * width;
            let chunk = bytes
                .get(e.offset..e.offset + len)
                .ok_or_else(|| DsuError::Input(format!("checkpoint data truncated at `{name}`")))?;
            Ok(Tensor::from_le_bytes(shape, chunk)?)
        };
        for (name, t) in fresh.names.iter().zip(fresh.tensors.iter_mut()) {
            *t = read(name, t.shape())?;
        }
        for (i, r) in fresh.running.iter_mut().enumerate() {
            r.mean = read(&format!("running{i}.mean"), r.mean.shape())?;
            r.var = read(&format!("running{i}.var"), r.var.shape())?;
        }
        Ok(fresh)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    spec: NetworkSpec,
    init_seed: u64,
    dtype: ndcore::DType,
    entries: Vec<CheckpointEntry>,
}
