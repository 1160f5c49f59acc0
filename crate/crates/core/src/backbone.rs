//! Plain conv/ReLU feature extractor with a global-average-pool + linear head.
//!
//! The same stage list serves both branches. The global branch runs every
//! stage and the head; the local branch runs stages `[0, split_index)` on the
//! whole image (the stem), ROI-pools each proposal from that map, then runs
//! stages `[split_index, n)` and global average pooling per proposal (the tail).

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LgError, Result};
use crate::tensor_autodiff::{ConvSpec, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stage_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    /// First stage of the tail; ROI pooling happens on the output of stage `split_index - 1`.
    pub split_index: usize,
    pub final_channels: usize,
    pub num_attributes: usize,
}

/// Named architectures used by the training configs and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Strides [2,2,2]: a 64x64 image gives an 8x8 final map.
    Standard,
    /// Last stage at stride 1 with dilation 2: final map doubled to 16x16.
    HighRes,
    /// Last stage at stride 1 without dilation.
    HighResUndilated,
}

impl BackboneVariant {
    pub fn config(self, num_attributes: usize) -> BackboneConfig {
        let (strides, dilations) = match self {
            BackboneVariant::Standard => (vec![2, 2, 2], vec![1, 1, 1]),
            BackboneVariant::HighRes => (vec![2, 2, 1], vec![1, 1, 2]),
            BackboneVariant::HighResUndilated => (vec![2, 2, 1], vec![1, 1, 1]),
        };
        BackboneConfig {
            input_channels: 3,
            stage_channels: vec![8, 16, 32],
            strides,
            dilations,
            kernel_size: 3,
            split_index: 2,
            final_channels: 32,
            num_attributes,
        }
    }
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Checks the structural invariants. `split_index == num_stages` is
    /// accepted and means the tail is global average pooling only.
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 {
            return Err(LgError::Config("backbone needs at least one stage".into()));
        }
        if self.strides.len() != n || self.dilations.len() != n {
            return Err(LgError::Config(format!(
                "stage_channels, strides and dilations must have equal lengths ({}, {}, {})",
                n,
                self.strides.len(),
                self.dilations.len()
            )));
        }
        if self.split_index == 0 || self.split_index > n {
            return Err(LgError::Config(format!(
                "split_index {} must lie in 1..={}",
                self.split_index, n
            )));
        }
        if self.final_channels != self.stage_channels[n - 1] {
            return Err(LgError::Config(format!(
                "final_channels {} differs from last stage width {}",
                self.final_channels,
                self.stage_channels[n - 1]
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(LgError::Config("kernel_size must be odd".into()));
        }
        if self.num_attributes == 0 || self.input_channels == 0 {
            return Err(LgError::Config("num_attributes and input_channels must be >= 1".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(LgError::Config("stage widths must be >= 1".into()));
        }
        for i in 0..n {
            self.stage_spec(i).validate()?;
        }
        Ok(())
    }

    /// Convolution geometry of stage `i`, zero-padded so stride 1 preserves extent.
    pub fn stage_spec(&self, i: usize) -> ConvSpec {
        let in_channels = if i == 0 {
            self.input_channels
        } else {
            self.stage_channels[i - 1]
        };
        ConvSpec {
            in_channels,
            out_channels: self.stage_channels[i],
            kernel_h: self.kernel_size,
            kernel_w: self.kernel_size,
            stride: self.strides[i],
            dilation: self.dilations[i],
            padding: self.dilations[i] * (self.kernel_size - 1) / 2,
        }
    }

    /// Spatial extent after running `stages` on an `h x w` input.
    pub fn extent_after(&self, h: usize, w: usize, stages: Range<usize>) -> Option<(usize, usize)> {
        stages.fold(Some((h, w)), |hw, i| {
            let (h, w) = hw?;
            self.stage_spec(i).output_hw(h, w)
        })
    }

    pub fn final_extent(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.extent_after(h, w, 0..self.num_stages())
    }

    pub fn stem_channels(&self) -> usize {
        self.stage_channels[self.split_index - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Convolution stages shared in shape by both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn zeros(config: &BackboneConfig) -> Self {
        let layers = (0..config.num_stages())
            .map(|i| {
                let s = config.stage_spec(i);
                ConvLayer {
                    kernels: Tensor::zeros(&[s.out_channels, s.in_channels, s.kernel_h, s.kernel_w]),
                    bias: Tensor::zeros(&[s.out_channels]),
                }
            })
            .collect();
        ConvStack { layers }
    }

    /// He-normal kernels, zero biases.
    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let mut stack = ConvStack::zeros(config);
        for (i, layer) in stack.layers.iter_mut().enumerate() {
            let s = config.stage_spec(i);
            let fan_in = (s.in_channels * s.kernel_h * s.kernel_w) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            for v in layer.kernels.data_mut() {
                *v = normal.sample(rng);
            }
        }
        stack
    }

    pub fn check_shapes(&self, config: &BackboneConfig) -> Result<()> {
        let expect = ConvStack::zeros(config);
        if self.layers.len() != expect.layers.len() {
            return Err(LgError::shape(
                "ConvStack",
                format!("{} layers, config needs {}", self.layers.len(), expect.layers.len()),
            ));
        }
        for (i, (a, b)) in self.layers.iter().zip(&expect.layers).enumerate() {
            if a.kernels.shape() != b.kernels.shape() || a.bias.shape() != b.bias.shape() {
                return Err(LgError::shape(
                    "ConvStack",
                    format!(
                        "stage {i}: kernels {:?} / bias {:?}, expected {:?} / {:?}",
                        a.kernels.shape(),
                        a.bias.shape(),
                        b.kernels.shape(),
                        b.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<StackNodes> {
        let layers = self
            .layers
            .iter()
            .map(|l| Ok((g.leaf(l.kernels.clone(), trainable)?, g.leaf(l.bias.clone(), trainable)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(StackNodes { layers })
    }
}

/// Graph handles for the kernels and biases of each stage.
#[derive(Debug, Clone)]
pub struct StackNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Global-branch parameters: conv stages plus the linear head `fc_w[a,k]`, `fc_b[a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub stack: ConvStack,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl BackboneParams {
    pub fn zeros(config: &BackboneConfig) -> Self {
        BackboneParams {
            stack: ConvStack::zeros(config),
            fc_w: Tensor::zeros(&[config.num_attributes, config.final_channels]),
            fc_b: Tensor::zeros(&[config.num_attributes]),
        }
    }

    pub fn init<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let stack = ConvStack::init(config, rng);
        let normal = Normal::new(0.0, (1.0 / config.final_channels as f64).sqrt()).expect("positive std");
        let mut fc_w = Tensor::zeros(&[config.num_attributes, config.final_channels]);
        for v in fc_w.data_mut() {
            *v = normal.sample(rng);
        }
        BackboneParams {
            stack,
            fc_w,
            fc_b: Tensor::zeros(&[config.num_attributes]),
        }
    }

    pub fn check_shapes(&self, config: &BackboneConfig) -> Result<()> {
        self.stack.check_shapes(config)?;
        let (a, k) = (config.num_attributes, config.final_channels);
        if self.fc_w.shape() != [a, k] || self.fc_b.shape() != [a] {
            return Err(LgError::shape(
                "BackboneParams",
                format!(
                    "head {:?} / {:?}, expected [{a}, {k}] / [{a}]",
                    self.fc_w.shape(),
                    self.fc_b.shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> Result<(StackNodes, HeadNodes)> {
        let stack = self.stack.register(g, trainable)?;
        let head = HeadNodes {
            weight: g.leaf(self.fc_w.clone(), trainable)?,
            bias: g.leaf(self.fc_b.clone(), trainable)?,
        };
        Ok((stack, head))
    }

    /// Forgoes the tape bookkeeping of training: returns the final feature map and logits.
    pub fn infer(&self, config: &BackboneConfig, image: &Tensor) -> Result<GlobalOutput> {
        let mut g = Graph::new();
        let (stack, head) = self.register(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let (f, l) = forward_global(&mut g, config, &stack, &head, x)?;
        Ok(GlobalOutput {
            featmap: g.value(f).clone(),
            logits: g.value(l).data().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalOutput {
    pub featmap: Tensor,
    pub logits: Vec<f64>,
}

/// Conv + ReLU for each stage in `stages`.
pub fn run_stages(
    g: &mut Graph,
    config: &BackboneConfig,
    stack: &StackNodes,
    input: NodeId,
    stages: Range<usize>,
) -> Result<NodeId> {
    let mut x = input;
    for i in stages {
        let (k, b) = stack.layers[i];
        x = g.conv2d(x, k, b, config.stage_spec(i))?;
        x = g.relu(x)?;
    }
    Ok(x)
}

fn check_image(g: &Graph, config: &BackboneConfig, image: NodeId) -> Result<()> {
    let shape = g.value(image).shape();
    if shape.len() != 3 || shape[0] != config.input_channels {
        return Err(LgError::shape(
            "backbone",
            format!("image shape {:?}, expected [{}, H, W]", shape, config.input_channels),
        ));
    }
    Ok(())
}

/// All stages, then `logits = fc_w * GAP(featmap) + fc_b`.
pub fn forward_global(
    g: &mut Graph,
    config: &BackboneConfig,
    stack: &StackNodes,
    head: &HeadNodes,
    image: NodeId,
) -> Result<(NodeId, NodeId)> {
    check_image(g, config, image)?;
    let featmap = run_stages(g, config, stack, image, 0..config.num_stages())?;
    let pooled = g.global_avg_pool(featmap)?;
    let logits = g.affine(pooled, head.weight, head.bias)?;
    Ok((featmap, logits))
}

/// Stages `[0, split_index)` on the whole image.
pub fn forward_local_stem(
    g: &mut Graph,
    config: &BackboneConfig,
    stack: &StackNodes,
    image: NodeId,
) -> Result<NodeId> {
    check_image(g, config, image)?;
    run_stages(g, config, stack, image, 0..config.split_index)
}

/// Stages `[split_index, n)` on an ROI-pooled map, then GAP to a `k`-vector.
pub fn forward_local_tail(
    g: &mut Graph,
    config: &BackboneConfig,
    stack: &StackNodes,
    pooled: NodeId,
) -> Result<NodeId> {
    let shape = g.value(pooled).shape();
    if shape.len() != 3 || shape[0] != config.stem_channels() {
        return Err(LgError::shape(
            "forward_local_tail",
            format!("pooled shape {:?}, expected [{}, h, w]", shape, config.stem_channels()),
        ));
    }
    let x = run_stages(g, config, stack, pooled, config.split_index..config.num_stages())?;
    g.global_avg_pool(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input_channels: 3,
            stage_channels: vec![4, 4, 4],
            strides: vec![2, 1, 2],
            dilations: vec![1, 2, 1],
            kernel_size: 3,
            split_index: 2,
            final_channels: 4,
            num_attributes: 2,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneVariant::Standard.config(8);
        c.validate().unwrap();
        c.split_index = 0;
        assert!(c.validate().is_err());
        c.split_index = 4;
        assert!(c.validate().is_err());
        let mut c = BackboneVariant::Standard.config(8);
        c.final_channels = 16;
        assert!(c.validate().is_err());
        let mut c = BackboneVariant::Standard.config(8);
        c.strides.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_zero_params_gives_head_bias() {
        let config = BackboneVariant::Standard.config(3);
        let mut params = BackboneParams::zeros(&config);
        params.fc_b = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let out = params.infer(&config, &Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(out.logits, vec![0.5, -1.0, 2.0]);

        let mut g = Graph::new();
        let (stack, _) = params.register(&mut g, false).unwrap();
        let x = g.constant(Tensor::zeros(&[3, 32, 32])).unwrap();
        let stem = forward_local_stem(&mut g, &config, &stack, x).unwrap();
        assert!(g.value(stem).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extents_follow_formula() {
        let c = BackboneVariant::Standard.config(8);
        assert_eq!(c.extent_after(64, 64, 0..c.split_index), Some((16, 16)));
        assert_eq!(c.final_extent(64, 64), Some((8, 8)));
        assert_eq!(c.final_extent(32, 32), Some((4, 4)));
        let params = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let (stack, _) = params.register(&mut g, false).unwrap();
        let x = g.constant(random_image(&mut rng, 64, 48)).unwrap();
        let stem = forward_local_stem(&mut g, &c, &stack, x).unwrap();
        assert_eq!(g.value(stem).shape(), &[16, 16, 12]);
    }

    #[test]
    fn dilated_stride_one_doubles_final_extent() {
        let std = BackboneVariant::Standard.config(8);
        let hi = BackboneVariant::HighRes.config(8);
        for side in [32usize, 48, 64, 96] {
            let (a, _) = std.final_extent(side, side).unwrap();
            let (b, _) = hi.final_extent(side, side).unwrap();
            assert_eq!(b, 2 * a, "side {side}");
        }
    }

    #[test]
    fn split_at_last_stage_equals_global_featmap() {
        let mut c = tiny();
        c.split_index = 3;
        let params = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(5));
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(6), 12, 12);
        let global = params.infer(&c, &img).unwrap();
        let mut g = Graph::new();
        let (stack, _) = params.register(&mut g, false).unwrap();
        let x = g.constant(img).unwrap();
        let stem = forward_local_stem(&mut g, &c, &stack, x).unwrap();
        assert_eq!(g.value(stem), &global.featmap);
    }

    #[test]
    fn stem_then_tail_composes_to_global() {
        let c = tiny();
        let params = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(2));
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(3), 16, 12);
        let global = params.infer(&c, &img).unwrap();
        let mut g = Graph::new();
        let (stack, _) = params.register(&mut g, false).unwrap();
        let x = g.constant(img).unwrap();
        let stem = forward_local_stem(&mut g, &c, &stack, x).unwrap();
        let full = run_stages(&mut g, &c, &stack, stem, c.split_index..c.num_stages()).unwrap();
        for (a, b) in g.value(full).data().iter().zip(global.featmap.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        // the tail's GAP vector is the GAP of the global feature map
        let v = forward_local_tail(&mut g, &c, &stack, stem).unwrap();
        let (_, hh, ww) = (global.featmap.shape()[0], global.featmap.shape()[1], global.featmap.shape()[2]);
        for ch in 0..c.final_channels {
            let mean = global.featmap.channel(ch).iter().sum::<f64>() / (hh * ww) as f64;
            assert!((g.value(v).data()[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_tail_maps_constant_input_to_constant_vector() {
        let c = tiny();
        let mut stack = ConvStack::zeros(&c);
        for layer in &mut stack.layers[c.split_index..] {
            let (o, i) = (layer.kernels.shape()[0], layer.kernels.shape()[1]);
            for ch in 0..o.min(i) {
                // center tap of a 3x3 kernel
                layer.kernels.data_mut()[(ch * i + ch) * 9 + 4] = 1.0;
            }
        }
        let mut g = Graph::new();
        let nodes = stack.register(&mut g, false).unwrap();
        let pooled = g.constant(Tensor::full(&[4, 3, 3], 0.75)).unwrap();
        let v = forward_local_tail(&mut g, &c, &nodes, pooled).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.75));
    }

    #[test]
    fn identical_inputs_give_identical_tail_vectors() {
        let c = tiny();
        let params = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(9));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pooled = Tensor::new(vec![4, 3, 3], (0..36).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut g = Graph::new();
        let (stack, _) = params.register(&mut g, false).unwrap();
        let a = g.constant(pooled.clone()).unwrap();
        let b = g.constant(pooled).unwrap();
        let va = forward_local_tail(&mut g, &c, &stack, a).unwrap();
        let vb = forward_local_tail(&mut g, &c, &stack, b).unwrap();
        assert_eq!(g.value(va), g.value(vb));
    }

    #[test]
    fn tail_gradient_check() {
        let c = tiny();
        let params = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pooled = Tensor::new(vec![4, 3, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let layer = params.stack.layers[2].clone();
        let coeffs = Tensor::vector(vec![0.3, -1.2, 0.8, 0.5]);
        let err = check_gradients(
            |g, p| {
                // only the tail stage is read
                let stack = StackNodes {
                    layers: vec![(p[0], p[1]); 3],
                };
                let v = forward_local_tail(g, &c, &stack, p[2])?;
                g.dot_const(v, &coeffs)
            },
            &[layer.kernels, layer.bias, pooled],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn inference_is_deterministic() {
        let c = BackboneVariant::Standard.config(4);
        let a = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(42));
        let b = BackboneParams::init(&c, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        let img = random_image(&mut ChaCha8Rng::seed_from_u64(1), 32, 32);
        let la = a.infer(&c, &img).unwrap().logits;
        let lb = b.infer(&c, &img).unwrap().logits;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb));
    }

    #[test]
    fn wrong_image_channels_rejected() {
        let c = BackboneVariant::Standard.config(4);
        let p = BackboneParams::zeros(&c);
        assert!(p.infer(&c, &Tensor::zeros(&[1, 32, 32])).is_err());
    }
}
