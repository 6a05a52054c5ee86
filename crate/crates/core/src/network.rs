//! The staged detection network and its model file.
//!
//! ```text
//! image ─ trunk convs ─┬─ pool5 ─┬─ fc6 ─ fc7 ──────────────┐
//!                      │         └─ fc6_t ─ fc7_t ─ W8_t ──┐ │   (t = 1..T)
//!                      └─ conv6_k ─ defpool ─ conv7_k ─ GAP ┤ │   (k = 3, 5, 9)
//!                                                           └─┴─ head ─ + ─ scores
//! ```
//!
//! The head is one linear layer over `[fc7, GAP(conv7_k)...]`; each stage
//! branch adds `W8_t · fc7_t` to the scores. Stage tensors are all zero
//! until the trainer activates the stage, and `W8_t` stays zero at
//! activation, so activating a stage never changes the network's output.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::defpool::{DefPoolBank, Winner};
use crate::layers::{global_avg_pool, global_avg_pool_backward, relu, relu_backward, ConvLayer, FcLayer, LossKind, MaxPoolLayer};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrunkLayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefBranchConfig {
    pub enabled: bool,
    /// Odd part-filter sizes, one branch each.
    pub part_filter_sizes: Vec<usize>,
    /// Channels of each part detection map.
    pub part_channels: usize,
    pub radius: usize,
    pub stride: usize,
    pub num_basis: usize,
    /// One `(c, d)` set for all channels of a branch instead of one per channel.
    pub share_params: bool,
    pub basis_frozen: bool,
    /// Output channels of the 1x1 conv after def-pooling.
    pub out_channels: usize,
}

impl Default for DefBranchConfig {
    fn default() -> Self {
        DefBranchConfig {
            enabled: true,
            part_filter_sizes: vec![3, 5, 9],
            part_channels: 16,
            radius: 1,
            stride: 2,
            num_basis: 1,
            share_params: false,
            basis_frozen: false,
            out_channels: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input: InputShape,
    /// Must end with a max-pool (the pool5 analogue); the part branch reads
    /// that pool's input.
    pub trunk: Vec<TrunkLayerSpec>,
    pub fc_width: usize,
    pub num_classes: usize,
    pub def_branch: DefBranchConfig,
    /// Number of stage branches `T`.
    pub stages: usize,
    pub loss: LossKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: InputShape {
                channels: 3,
                height: 16,
                width: 16,
            },
            trunk: vec![
                TrunkLayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayerSpec::Relu,
                TrunkLayerSpec::MaxPool { kernel: 2, stride: 2 },
                TrunkLayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                TrunkLayerSpec::Relu,
                TrunkLayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
            fc_width: 64,
            num_classes: 4,
            def_branch: DefBranchConfig::default(),
            stages: 0,
            loss: LossKind::hinge(),
        }
    }
}

impl NetworkConfig {
    /// Trunk-only classifier: no part branch, no stage branches.
    pub fn plain(mut self) -> Self {
        self.def_branch.enabled = false;
        self.stages = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.fc_width == 0 {
            return Err(Error::invalid("fc_width must be positive"));
        }
        if !matches!(self.trunk.last(), Some(TrunkLayerSpec::MaxPool { .. })) {
            return Err(Error::invalid("trunk must end with a max-pool layer"));
        }
        if self.def_branch.enabled {
            let d = &self.def_branch;
            if d.part_filter_sizes.is_empty() || d.part_filter_sizes.iter().any(|k| k % 2 == 0) {
                return Err(Error::invalid(format!(
                    "part filter sizes must be odd and non-empty, got {:?}",
                    d.part_filter_sizes
                )));
            }
            if d.part_channels == 0 || d.out_channels == 0 || d.num_basis == 0 || d.stride == 0 {
                return Err(Error::invalid("part branch sizes must be positive"));
            }
        }
        self.shapes().map(|_| ())
    }

    /// Shape after each trunk layer, starting with the input.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        let mut shapes = vec![[channels, height, width]];
        for (i, spec) in self.trunk.iter().enumerate() {
            let [c, h, w] = *shapes.last().expect("non-empty");
            let layer = format!("trunk[{i}]");
            let next = match *spec {
                TrunkLayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if out_channels == 0 || stride == 0 || kernel % 2 == 0 {
                        return Err(Error::Geometry {
                            layer,
                            reason: "conv needs positive channels/stride and an odd kernel".into(),
                        });
                    }
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(Error::Geometry {
                            layer,
                            reason: format!("kernel {kernel} exceeds padded input {ph}x{pw}"),
                        });
                    }
                    [out_channels, (ph - kernel) / stride + 1, (pw - kernel) / stride + 1]
                }
                TrunkLayerSpec::Relu => [c, h, w],
                TrunkLayerSpec::MaxPool { kernel, stride } => {
                    let (oh, ow) = MaxPoolLayer::valid(kernel, stride).output_dims(h, w).map_err(|e| Error::Geometry {
                        layer: layer.clone(),
                        reason: e.to_string(),
                    })?;
                    [c, oh, ow]
                }
            };
            shapes.push(next);
        }
        if self.def_branch.enabled {
            let [_, h, w] = shapes[shapes.len() - 2];
            let s = self.def_branch.stride;
            if h / s == 0 || w / s == 0 {
                return Err(Error::Geometry {
                    layer: "def_branch.defpool".into(),
                    reason: format!("part map {h}x{w} too small for stride {s}"),
                });
            }
        }
        Ok(shapes)
    }

    fn pool5_dim(&self) -> Result<usize> {
        let s = self.shapes()?;
        Ok(s.last().expect("non-empty").iter().product())
    }

    fn tap_shape(&self) -> Result<[usize; 3]> {
        let s = self.shapes()?;
        Ok(s[s.len() - 2])
    }

    /// Length of the head's input (the penultimate feature).
    pub fn feature_dim(&self) -> usize {
        let def = if self.def_branch.enabled {
            self.def_branch.part_filter_sizes.len() * self.def_branch.out_channels
        } else {
            0
        };
        self.fc_width + def
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrunkLayer {
    Conv(ConvLayer),
    Relu,
    MaxPool(MaxPoolLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartBranch {
    pub filter_size: usize,
    pub conv6: ConvLayer,
    pub pool: DefPoolBank,
    pub conv7: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageBranch {
    pub fc6: FcLayer,
    pub fc7: FcLayer,
    /// `[K, fc_width]`, no bias (the head's bias is shared).
    pub out: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub schedule: String,
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Trunk, fc6/fc7, part branch and head (`Θ`).
    Base,
    /// Stage branch `t` (1-based).
    Stage(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Subject to weight decay (weights only; not biases or def-pool params).
    pub decay: bool,
    /// Never updated (a frozen def-pool basis).
    pub fixed: bool,
    /// Final classifier layer; reinitialised when the label set changes.
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagedNetwork {
    pub config: NetworkConfig,
    pub trunk: Vec<TrunkLayer>,
    pub fc6: FcLayer,
    pub fc7: FcLayer,
    pub parts: Vec<PartBranch>,
    pub head: FcLayer,
    pub stages: Vec<StageBranch>,
    pub metadata: TrainingMetadata,
}

/// Intermediates kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    trunk_inputs: Vec<Tensor>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    pool5: Vec<f64>,
    fc6_pre: Vec<f64>,
    fc6_out: Vec<f64>,
    fc7_pre: Vec<f64>,
    parts: Vec<PartCache>,
    stages: Vec<StageCache>,
    /// Input of the head: `[fc7, GAP(conv7_k)...]`.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone)]
struct PartCache {
    part_map: Tensor,
    winners: Vec<Winner>,
    pooled: Tensor,
    conv7_pre: Tensor,
}

#[derive(Debug, Clone)]
struct StageCache {
    fc6_pre: Vec<f64>,
    fc6_out: Vec<f64>,
    fc7_pre: Vec<f64>,
    fc7_out: Vec<f64>,
}

fn glorot(rng: &mut rng::Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-s..s)).collect()).expect("glorot shape")
}

fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

fn relu_vec_backward(pre: &[f64], up: &[f64]) -> Vec<f64> {
    pre.iter().zip(up).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect()
}

/// Initial deformation basis: a quadratic bowl first, then signed linear
/// ramps along rows and columns.
fn initial_basis(n: usize, radius: usize) -> Vec<f64> {
    let s = 2 * radius + 1;
    let r = radius.max(1) as f64;
    let mut out = Vec::with_capacity(n * s * s);
    for k in 0..n {
        for i in 0..s {
            for j in 0..s {
                let (di, dj) = (i as f64 - radius as f64, j as f64 - radius as f64);
                out.push(match k % 3 {
                    0 => (di * di + dj * dj) / (r * r),
                    1 => di / r,
                    _ => dj / r,
                });
            }
        }
    }
    out
}

impl StagedNetwork {
    /// Builds a network with seeded Glorot-uniform weights, zero biases and
    /// all stage tensors set to exactly zero.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes()?;
        let mut rng = rng::rng_for(seed, "network.init");
        let mut trunk = Vec::with_capacity(config.trunk.len());
        for (i, spec) in config.trunk.iter().enumerate() {
            trunk.push(match *spec {
                TrunkLayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let cin = shapes[i][0];
                    let w = glorot(
                        &mut rng,
                        &[out_channels, cin, kernel, kernel],
                        cin * kernel * kernel,
                        out_channels * kernel * kernel,
                    );
                    TrunkLayer::Conv(ConvLayer::new(w, Tensor::zeros(&[out_channels]), stride, padding)?)
                }
                TrunkLayerSpec::Relu => TrunkLayer::Relu,
                TrunkLayerSpec::MaxPool { kernel, stride } => TrunkLayer::MaxPool(MaxPoolLayer::valid(kernel, stride)),
            });
        }
        let p5 = config.pool5_dim()?;
        let f = config.fc_width;
        let fc6 = FcLayer::new(glorot(&mut rng, &[f, p5], p5, f), Tensor::zeros(&[f]))?;
        let fc7 = FcLayer::new(glorot(&mut rng, &[f, f], f, f), Tensor::zeros(&[f]))?;
        let mut parts = Vec::new();
        if config.def_branch.enabled {
            let d = &config.def_branch;
            let [tc, _, _] = config.tap_shape()?;
            let groups = if d.share_params { 1 } else { d.part_channels };
            let s = 2 * d.radius + 1;
            for &k in &d.part_filter_sizes {
                let mut conv6 = ConvLayer::same(tc, d.part_channels, k)?;
                conv6.weights = glorot(&mut rng, conv6.weights.shape(), tc * k * k, d.part_channels * k * k);
                let mut coeffs = vec![0.0; groups * d.num_basis];
                for g in 0..groups {
                    coeffs[g * d.num_basis] = 0.1;
                }
                let basis: Vec<f64> = (0..groups).flat_map(|_| initial_basis(d.num_basis, d.radius)).collect();
                let pool = DefPoolBank {
                    radius: d.radius,
                    stride_y: d.stride,
                    stride_x: d.stride,
                    coeffs: Tensor::new(vec![groups, d.num_basis], coeffs)?,
                    basis: Tensor::new(vec![groups, d.num_basis, s, s], basis)?,
                    basis_frozen: d.basis_frozen,
                };
                let mut conv7 = ConvLayer::same(d.part_channels, d.out_channels, 1)?;
                conv7.weights = glorot(&mut rng, conv7.weights.shape(), d.part_channels, d.out_channels);
                parts.push(PartBranch {
                    filter_size: k,
                    conv6,
                    pool,
                    conv7,
                });
            }
        }
        let fd = config.feature_dim();
        let k = config.num_classes;
        let head = FcLayer::new(glorot(&mut rng, &[k, fd], fd, k), Tensor::zeros(&[k]))?;
        let stages = (0..config.stages)
            .map(|_| StageBranch {
                fc6: FcLayer::zeros(p5, f),
                fc7: FcLayer::zeros(f, f),
                out: Tensor::zeros(&[k, f]),
            })
            .collect();
        Ok(StagedNetwork {
            config: config.clone(),
            trunk,
            fc6,
            fc7,
            parts,
            head,
            stages,
            metadata: TrainingMetadata {
                seed,
                schedule: String::new(),
            },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Randomises `W6_t` and `W7_t` of stage `t` (1-based) with the build
    /// scheme, seeded by `seed` and `t`. `W8_t` and the biases are left as
    /// they are.
    pub fn randomize_stage(&mut self, t: usize, seed: u64) -> Result<()> {
        if t == 0 || t > self.stages.len() {
            return Err(Error::invalid(format!(
                "stage {t} out of range (network has {} stages)",
                self.stages.len()
            )));
        }
        let mut rng = rng::rng_indexed(seed, "network.stage", t as u64);
        let st = &mut self.stages[t - 1];
        let (f, p5) = (st.fc6.out_dim(), st.fc6.in_dim());
        st.fc6.weights = glorot(&mut rng, &[f, p5], p5, f);
        st.fc7.weights = glorot(&mut rng, &[f, f], f, f);
        Ok(())
    }

    /// Replaces the final classifier with a freshly initialised one for
    /// `num_classes` outputs. Stage output layers are resized to zero.
    pub fn reset_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let mut rng = rng::rng_for(seed, "network.head");
        let fd = self.config.feature_dim();
        self.head = FcLayer::new(glorot(&mut rng, &[num_classes, fd], fd, num_classes), Tensor::zeros(&[num_classes]))?;
        let f = self.config.fc_width;
        for st in &mut self.stages {
            st.out = Tensor::zeros(&[num_classes, f]);
        }
        self.config.num_classes = num_classes;
        Ok(())
    }

    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let InputShape { channels, height, width } = self.config.input;
        image.ensure_shape(&[channels, height, width])?;
        let mut x = image.clone();
        let mut trunk_inputs = Vec::with_capacity(self.trunk.len());
        let mut pool_argmax = Vec::with_capacity(self.trunk.len());
        for layer in &self.trunk {
            let next = match layer {
                TrunkLayer::Conv(c) => {
                    pool_argmax.push(None);
                    c.forward(&x)?
                }
                TrunkLayer::Relu => {
                    pool_argmax.push(None);
                    relu(&x)
                }
                TrunkLayer::MaxPool(p) => {
                    let out = p.forward(&x)?;
                    pool_argmax.push(Some(out.argmax));
                    out.output
                }
            };
            trunk_inputs.push(std::mem::replace(&mut x, next));
        }
        let pool5 = x.into_data();
        let fc6_pre = self.fc6.forward(&pool5)?;
        let fc6_out = relu_vec(&fc6_pre);
        let fc7_pre = self.fc7.forward(&fc6_out)?;
        let mut feature = relu_vec(&fc7_pre);

        let tap = trunk_inputs.last().expect("trunk ends with a pool");
        let mut parts = Vec::with_capacity(self.parts.len());
        for br in &self.parts {
            let part_map = br.conv6.forward(tap)?;
            let pooled = br.pool.forward(&part_map)?;
            let conv7_pre = br.conv7.forward(&pooled.output)?;
            feature.extend(global_avg_pool(&relu(&conv7_pre))?);
            parts.push(PartCache {
                part_map,
                winners: pooled.winners,
                pooled: pooled.output,
                conv7_pre,
            });
        }
        let mut scores = self.head.forward(&feature)?;
        let f = self.config.fc_width;
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let s6 = st.fc6.forward(&pool5)?;
            let s6o = relu_vec(&s6);
            let s7 = st.fc7.forward(&s6o)?;
            let s7o = relu_vec(&s7);
            let w = st.out.data();
            for (k, s) in scores.iter_mut().enumerate() {
                *s += w[k * f..(k + 1) * f].iter().zip(&s7o).map(|(a, b)| a * b).sum::<f64>();
            }
            stages.push(StageCache {
                fc6_pre: s6,
                fc6_out: s6o,
                fc7_pre: s7,
                fc7_out: s7o,
            });
        }
        let scores = Tensor::from_vec(scores);
        scores.check_finite("scores")?;
        Ok((
            scores,
            ForwardCache {
                trunk_inputs,
                pool_argmax,
                pool5,
                fc6_pre,
                fc6_out,
                fc7_pre,
                parts,
                stages,
                feature,
            },
        ))
    }

    /// Scores and penultimate feature, without keeping the cache.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (s, cache) = self.forward(image)?;
        Ok((s, cache.feature))
    }

    /// Gradients of `dscores · scores` with respect to every parameter, in
    /// [`StagedNetwork::param_infos`] order. A frozen basis gets a zero
    /// gradient.
    pub fn backward(&self, cache: &ForwardCache, dscores: &[f64]) -> Result<Vec<Tensor>> {
        let k = self.num_classes();
        if dscores.len() != k {
            return Err(Error::invalid(format!("expected {k} score gradients, got {}", dscores.len())));
        }
        let f = self.config.fc_width;
        let head_g = self.head.backward(&cache.feature, dscores)?;
        let dfeat = head_g.input.data();

        // stage branches
        let mut dpool5 = vec![0.0; cache.pool5.len()];
        let mut stage_grads = Vec::with_capacity(self.stages.len());
        for (st, sc) in self.stages.iter().zip(&cache.stages) {
            let w = st.out.data();
            let mut dout = vec![0.0; k * f];
            let mut d7 = vec![0.0; f];
            for c in 0..k {
                let g = dscores[c];
                for j in 0..f {
                    dout[c * f + j] = g * sc.fc7_out[j];
                    d7[j] += g * w[c * f + j];
                }
            }
            let d7 = relu_vec_backward(&sc.fc7_pre, &d7);
            let g7 = st.fc7.backward(&sc.fc6_out, &d7)?;
            let d6 = relu_vec_backward(&sc.fc6_pre, g7.input.data());
            let g6 = st.fc6.backward(&cache.pool5, &d6)?;
            for (a, b) in dpool5.iter_mut().zip(g6.input.data()) {
                *a += b;
            }
            stage_grads.push([g6.weights, g6.bias, g7.weights, g7.bias, Tensor::new(vec![k, f], dout)?]);
        }

        // part branches
        let tap_shape = cache.trunk_inputs.last().expect("tap").shape().to_vec();
        let mut dtap = Tensor::zeros(&tap_shape);
        let mut part_grads = Vec::with_capacity(self.parts.len());
        let oc = self.config.def_branch.out_channels;
        for (b, (br, pc)) in self.parts.iter().zip(&cache.parts).enumerate() {
            let dgap = &dfeat[f + b * oc..f + (b + 1) * oc];
            let d7 = global_avg_pool_backward(pc.conv7_pre.shape(), dgap)?;
            let d7 = relu_backward(&pc.conv7_pre, &d7)?;
            let g7 = br.conv7.backward(&pc.pooled, &d7)?;
            let gp = br.pool.backward(pc.part_map.shape(), &pc.winners, &g7.input)?;
            let g6 = br.conv6.backward(cache.trunk_inputs.last().expect("tap"), &gp.input)?;
            dtap.add_assign(&g6.input)?;
            let dbasis = gp.basis.unwrap_or_else(|| Tensor::zeros(br.pool.basis.shape()));
            part_grads.push([g6.weights, g6.bias, gp.coeffs, dbasis, g7.weights, g7.bias]);
        }

        // fc7 / fc6
        let d7 = relu_vec_backward(&cache.fc7_pre, &dfeat[..f]);
        let g7 = self.fc7.backward(&cache.fc6_out, &d7)?;
        let d6 = relu_vec_backward(&cache.fc6_pre, g7.input.data());
        let g6 = self.fc6.backward(&cache.pool5, &d6)?;
        for (a, b) in dpool5.iter_mut().zip(g6.input.data()) {
            *a += b;
        }

        // trunk, walking backwards
        let mut trunk_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; self.trunk.len()];
        let out_shape = {
            let shapes = self.config.shapes()?;
            shapes.last().expect("non-empty").to_vec()
        };
        let mut dx = Tensor::new(out_shape, dpool5)?;
        for (i, layer) in self.trunk.iter().enumerate().rev() {
            let input = &cache.trunk_inputs[i];
            dx = match layer {
                TrunkLayer::Conv(c) => {
                    let g = c.backward(input, &dx)?;
                    trunk_grads[i] = Some((g.weights, g.bias));
                    g.input
                }
                TrunkLayer::Relu => relu_backward(input, &dx)?,
                TrunkLayer::MaxPool(_) => {
                    let argmax = cache.pool_argmax[i].as_ref().expect("pool argmax cached");
                    MaxPoolLayer::backward(input.shape(), argmax, &dx)?
                }
            };
            if i == self.trunk.len() - 1 && !self.parts.is_empty() {
                dx.add_assign(&dtap)?;
            }
        }

        let mut grads = Vec::new();
        for (w, b) in trunk_grads.into_iter().flatten() {
            grads.push(w);
            grads.push(b);
        }
        grads.extend([g6.weights, g6.bias, g7.weights, g7.bias]);
        for pg in part_grads {
            grads.extend(pg);
        }
        grads.extend([head_g.weights, head_g.bias]);
        for sg in stage_grads {
            grads.extend(sg);
        }
        Ok(grads)
    }

    /// Metadata for every parameter tensor, in canonical order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let info = |name: String, group, decay, fixed, head| ParamInfo {
            name,
            group,
            decay,
            fixed,
            head,
        };
        let mut v = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            if let TrunkLayer::Conv(_) = l {
                v.push(info(format!("trunk.{i}.weight"), ParamGroup::Base, true, false, false));
                v.push(info(format!("trunk.{i}.bias"), ParamGroup::Base, false, false, false));
            }
        }
        for n in ["fc6", "fc7"] {
            v.push(info(format!("{n}.weight"), ParamGroup::Base, true, false, false));
            v.push(info(format!("{n}.bias"), ParamGroup::Base, false, false, false));
        }
        for p in &self.parts {
            let k = p.filter_size;
            v.push(info(format!("part{k}.conv6.weight"), ParamGroup::Base, true, false, false));
            v.push(info(format!("part{k}.conv6.bias"), ParamGroup::Base, false, false, false));
            v.push(info(format!("part{k}.defpool.coeffs"), ParamGroup::Base, false, false, false));
            v.push(info(
                format!("part{k}.defpool.basis"),
                ParamGroup::Base,
                false,
                p.pool.basis_frozen,
                false,
            ));
            v.push(info(format!("part{k}.conv7.weight"), ParamGroup::Base, true, false, false));
            v.push(info(format!("part{k}.conv7.bias"), ParamGroup::Base, false, false, false));
        }
        v.push(info("head.weight".into(), ParamGroup::Base, true, false, true));
        v.push(info("head.bias".into(), ParamGroup::Base, false, false, true));
        for t in 1..=self.stages.len() {
            let g = ParamGroup::Stage(t);
            v.push(info(format!("stage{t}.fc6.weight"), g, true, false, false));
            v.push(info(format!("stage{t}.fc6.bias"), g, false, false, false));
            v.push(info(format!("stage{t}.fc7.weight"), g, true, false, false));
            v.push(info(format!("stage{t}.fc7.bias"), g, false, false, false));
            v.push(info(format!("stage{t}.out.weight"), g, true, false, true));
        }
        v
    }

    /// Every parameter tensor, in canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.trunk {
            if let TrunkLayer::Conv(c) = l {
                v.push(&c.weights);
                v.push(&c.bias);
            }
        }
        v.extend([&self.fc6.weights, &self.fc6.bias, &self.fc7.weights, &self.fc7.bias]);
        for p in &self.parts {
            v.extend([
                &p.conv6.weights,
                &p.conv6.bias,
                &p.pool.coeffs,
                &p.pool.basis,
                &p.conv7.weights,
                &p.conv7.bias,
            ]);
        }
        v.extend([&self.head.weights, &self.head.bias]);
        for s in &self.stages {
            v.extend([&s.fc6.weights, &s.fc6.bias, &s.fc7.weights, &s.fc7.bias, &s.out]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.trunk {
            if let TrunkLayer::Conv(c) = l {
                v.push(&mut c.weights);
                v.push(&mut c.bias);
            }
        }
        v.extend([&mut self.fc6.weights, &mut self.fc6.bias, &mut self.fc7.weights, &mut self.fc7.bias]);
        for p in &mut self.parts {
            v.extend([
                &mut p.conv6.weights,
                &mut p.conv6.bias,
                &mut p.pool.coeffs,
                &mut p.pool.basis,
                &mut p.conv7.weights,
                &mut p.conv7.bias,
            ]);
        }
        v.extend([&mut self.head.weights, &mut self.head.bias]);
        for s in &mut self.stages {
            v.extend([&mut s.fc6.weights, &mut s.fc6.bias, &mut s.fc7.weights, &mut s.fc7.bias, &mut s.out]);
        }
        v
    }

    /// Named copies of all parameters.
    pub fn named_params(&self) -> BTreeMap<String, Tensor> {
        self.param_infos()
            .into_iter()
            .zip(self.params())
            .map(|(i, t)| (i.name, t.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.named_params(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::malformed("model file", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::malformed("model file", e))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::malformed("model file", "missing numeric 'version'"))?;
        if version != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::malformed("model file", e))?;
        let mut net = StagedNetwork::build(&file.config, 0)?;
        net.metadata = file.metadata;
        let infos = net.param_infos();
        if file.tensors.len() != infos.len() {
            return Err(Error::malformed(
                "model file",
                format!("expected {} tensors, found {}", infos.len(), file.tensors.len()),
            ));
        }
        for (info, slot) in infos.iter().zip(net.params_mut()) {
            let t = file
                .tensors
                .get(&info.name)
                .ok_or_else(|| Error::malformed("model file", format!("missing tensor '{}'", info.name)))?;
            if t.shape() != slot.shape() {
                return Err(Error::malformed(
                    "model file",
                    format!("tensor '{}' has shape {:?}, expected {:?}", info.name, t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        StagedNetwork::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    config: NetworkConfig,
    #[serde(default)]
    metadata: TrainingMetadata,
    tensors: BTreeMap<String, Tensor>,
}
