//! Bottleneck residual backbones and adapter attachment.
//!
//! A backbone is a stem convolution followed by stages of bottleneck blocks
//! (1×1 reduce → K×K → 1×1 expand, identity or strided-1×1 shortcut), global
//! average pooling and a linear head. All parameters carry hierarchical
//! names (`stage.<s>.block.<b>.<layer>`); batch norm always runs in frozen
//! inference mode on its stored running statistics.
//!
//! Adapters attach per block under one of four schemes that differ in which
//! host representation `h` they modulate and which input `z` they read:
//!
//! * `ConvParallel` — z = input of the block's K×K conv, h = that conv's
//!   output (after its batch norm); adapter channels C_mid → C_mid.
//! * `ConvSequential` — z = h = the K×K conv's output.
//! * `ResidualParallel` — z = the block input, h = the convolutional branch
//!   output before the shortcut addition; channels C_in → C_out.
//! * `ResidualSequential` — z = h = the branch output, still before the
//!   shortcut addition, so the identity path is never modulated.
//!
//! In the parallel schemes a strided host path is mirrored by giving the
//! adapter's down-projection the same stride, keeping Δh and h spatially
//! aligned.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::adapter::{adapter_forward, AdapterConfig, ConvAdapter, Nonlinearity};
use crate::error::{Error, Result};
use crate::ops::same_padding;
use crate::params::{kaiming_uniform, seeded_rng, Parameter, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor, TensorOf};

/// Epsilon of every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

/// Channel plan of one stage: `num_blocks` bottlenecks, the first taking
/// `c_in` at `stride`, the rest mapping `c_out -> c_out` at stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub num_blocks: usize,
    pub stride: usize,
}

/// Backbone architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    /// K of the middle convolution in every block (odd).
    pub kernel_size: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub nonlinearity: Nonlinearity,
}

impl BackboneConfig {
    pub fn new(stages: Vec<StageConfig>, num_classes: usize, input_channels: usize) -> Self {
        BackboneConfig {
            stages,
            kernel_size: 3,
            num_classes,
            input_channels,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    /// The default desk-scale backbone: three stages of two blocks with
    /// channels (16,8,32) / (32,16,64) / (64,32,128), small enough for CPU
    /// finite-difference checks.
    pub fn desk_default(num_classes: usize, input_channels: usize) -> Self {
        Self::new(
            vec![
                StageConfig { c_in: 16, c_mid: 8, c_out: 32, num_blocks: 2, stride: 1 },
                StageConfig { c_in: 32, c_mid: 16, c_out: 64, num_blocks: 2, stride: 2 },
                StageConfig { c_in: 64, c_mid: 32, c_out: 128, num_blocks: 2, stride: 2 },
            ],
            num_classes,
            input_channels,
        )
    }

    /// A single-block toy configuration for shape and gradient tests.
    pub fn tiny(num_classes: usize, input_channels: usize) -> Self {
        Self::new(
            vec![StageConfig { c_in: 8, c_mid: 4, c_out: 8, num_blocks: 1, stride: 1 }],
            num_classes,
            input_channels,
        )
    }

    /// Stage layout of ResNet-50, used for parameter accounting only.
    pub fn resnet50_shape(num_classes: usize) -> Self {
        Self::new(
            vec![
                StageConfig { c_in: 64, c_mid: 64, c_out: 256, num_blocks: 3, stride: 1 },
                StageConfig { c_in: 256, c_mid: 128, c_out: 512, num_blocks: 4, stride: 2 },
                StageConfig { c_in: 512, c_mid: 256, c_out: 1024, num_blocks: 6, stride: 2 },
                StageConfig { c_in: 1024, c_mid: 512, c_out: 2048, num_blocks: 3, stride: 2 },
            ],
            num_classes,
            3,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(alloc::format!(
                "backbone kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Config(
                "num_classes and input_channels must be positive".into(),
            ));
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.num_blocks == 0 || stage.c_in == 0 || stage.c_mid == 0 || stage.c_out == 0 {
                return Err(Error::Config(alloc::format!(
                    "stage {s} has a zero extent"
                )));
            }
            if stage.stride == 0 {
                return Err(Error::Config(alloc::format!("stage {s} has stride 0")));
            }
            if s > 0 && stage.c_in != self.stages[s - 1].c_out {
                return Err(Error::Config(alloc::format!(
                    "inconsistent channel chain: stage {s} expects C_in={} but stage {} ends at C_out={}",
                    stage.c_in,
                    s - 1,
                    self.stages[s - 1].c_out
                )));
            }
        }
        Ok(())
    }

    /// Flattened per-block geometry in forward order.
    pub fn blocks(&self) -> Vec<BlockDims> {
        let mut out = Vec::new();
        let mut global = 0;
        for (s, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.num_blocks {
                let c_in = if b == 0 { stage.c_in } else { stage.c_out };
                let stride = if b == 0 { stage.stride } else { 1 };
                out.push(BlockDims {
                    stage: s,
                    block: b,
                    global,
                    c_in,
                    c_mid: stage.c_mid,
                    c_out: stage.c_out,
                    stride,
                });
                global += 1;
            }
        }
        out
    }

    /// Channel count entering global average pooling.
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map(|s| s.c_out).unwrap_or(0)
    }
}

/// Geometry of a single bottleneck block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub stage: usize,
    pub block: usize,
    pub global: usize,
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl BlockDims {
    pub fn has_downsample(&self) -> bool {
        self.stride != 1 || self.c_in != self.c_out
    }

    pub fn prefix(&self) -> String {
        alloc::format!("stage.{}.block.{}", self.stage, self.block)
    }
}

/// Where and how adapters attach (the four adapting schemes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachScheme {
    ConvParallel,
    ConvSequential,
    ResidualParallel,
    ResidualSequential,
}

impl AttachScheme {
    pub const ALL: [AttachScheme; 4] = [
        AttachScheme::ConvParallel,
        AttachScheme::ConvSequential,
        AttachScheme::ResidualParallel,
        AttachScheme::ResidualSequential,
    ];

    /// Adapter (C_in, C_out, stride) for a block under this scheme.
    pub fn site_dims(&self, dims: &BlockDims) -> (usize, usize, usize) {
        match self {
            AttachScheme::ConvParallel => (dims.c_mid, dims.c_mid, dims.stride),
            AttachScheme::ConvSequential => (dims.c_mid, dims.c_mid, 1),
            AttachScheme::ResidualParallel => (dims.c_in, dims.c_out, dims.stride),
            AttachScheme::ResidualSequential => (dims.c_out, dims.c_out, 1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttachScheme::ConvParallel => "conv_parallel",
            AttachScheme::ConvSequential => "conv_sequential",
            AttachScheme::ResidualParallel => "residual_parallel",
            AttachScheme::ResidualSequential => "residual_sequential",
        }
    }
}

/// Parameter indices of one attached adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSite {
    pub block: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub w_down: usize,
    pub w_up: usize,
    pub alpha: usize,
}

/// Result of one forward pass: the logit node, the pooled penultimate
/// features, and the tape leaf of every parameter (by parameter index).
pub struct ForwardOut {
    pub logits: Var,
    pub pooled: Var,
    pub bound: Vec<Var>,
}

/// Common interface of plain and adapted backbones.
pub trait Model {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn config(&self) -> &BackboneConfig;
    fn is_adapted(&self) -> bool;

    /// Runs the network, optionally substituting the tensor of one parameter
    /// (used by the finite-difference oracle to probe at tape precision).
    fn forward_with<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor,
        override_param: Option<(usize, &[E])>,
    ) -> Result<ForwardOut>;

    fn forward<E: Elem>(&self, tape: &mut Tape<E>, input: &Tensor) -> Result<ForwardOut> {
        self.forward_with(tape, input, None)
    }
}

/// A backbone with frozen-capable named parameters.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
}

/// Deterministically initializes a backbone from a seed. Convolutions get
/// Kaiming-uniform weights, batch norms identity affine with (0, 1) running
/// statistics, and the head starts at zero so probes are seed-stable.
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    config.validate()?;
    let mut rng = seeded_rng(seed, 0);
    let mut params = ParamSet::new();
    let k = config.kernel_size;

    let mut add_conv = |params: &mut ParamSet, name: String, c_out: usize, c_in: usize, kh: usize| -> Result<()> {
        let w = kaiming_uniform(vec![c_out, c_in, kh, kh], c_in * kh * kh, &mut rng);
        params.insert(Parameter::new(name, w, true))?;
        Ok(())
    };
    fn add_bn(params: &mut ParamSet, prefix: &str, c: usize) -> Result<()> {
        params.insert(Parameter::new(
            alloc::format!("{prefix}.gamma"),
            Tensor::filled(vec![c], 1.0),
            true,
        ))?;
        params.insert(Parameter::new(
            alloc::format!("{prefix}.beta"),
            Tensor::zeros(vec![c]),
            true,
        ))?;
        params.insert(Parameter::new(
            alloc::format!("{prefix}.running_mean"),
            Tensor::zeros(vec![c]),
            false,
        ))?;
        params.insert(Parameter::new(
            alloc::format!("{prefix}.running_var"),
            Tensor::filled(vec![c], 1.0),
            false,
        ))?;
        Ok(())
    }

    let stem_out = config.stages[0].c_in;
    add_conv(&mut params, "stem.conv.weight".into(), stem_out, config.input_channels, k)?;
    add_bn(&mut params, "stem.bn", stem_out)?;

    for dims in config.blocks() {
        let p = dims.prefix();
        add_conv(&mut params, alloc::format!("{p}.conv1.weight"), dims.c_mid, dims.c_in, 1)?;
        add_bn(&mut params, &alloc::format!("{p}.bn1"), dims.c_mid)?;
        add_conv(&mut params, alloc::format!("{p}.conv2.weight"), dims.c_mid, dims.c_mid, k)?;
        add_bn(&mut params, &alloc::format!("{p}.bn2"), dims.c_mid)?;
        add_conv(&mut params, alloc::format!("{p}.conv3.weight"), dims.c_out, dims.c_mid, 1)?;
        add_bn(&mut params, &alloc::format!("{p}.bn3"), dims.c_out)?;
        if dims.has_downsample() {
            add_conv(
                &mut params,
                alloc::format!("{p}.downsample.conv.weight"),
                dims.c_out,
                dims.c_in,
                1,
            )?;
            add_bn(&mut params, &alloc::format!("{p}.downsample.bn"), dims.c_out)?;
        }
    }

    let feat = config.feature_dim();
    params.insert(Parameter::new(
        "head.weight",
        Tensor::zeros(vec![config.num_classes, feat]),
        true,
    ))?;
    params.insert(Parameter::new(
        "head.bias",
        Tensor::zeros(vec![config.num_classes]),
        true,
    ))?;

    Ok(Backbone {
        config: config.clone(),
        params,
    })
}

impl Model for Backbone {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn config(&self) -> &BackboneConfig {
        &self.config
    }
    fn is_adapted(&self) -> bool {
        false
    }
    fn forward_with<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor,
        override_param: Option<(usize, &[E])>,
    ) -> Result<ForwardOut> {
        forward_net(&self.params, &self.config, None, tape, input, override_param)
    }
}

/// A backbone plus one adapter per residual block and a trainable head.
#[derive(Debug, Clone)]
pub struct AdaptedModel {
    pub config: BackboneConfig,
    pub scheme: AttachScheme,
    pub adapter_config: AdapterConfig,
    pub params: ParamSet,
    pub sites: Vec<AdapterSite>,
}

/// Attaches one Conv-Adapter to every residual block of `backbone`.
///
/// Fails loudly (naming the block) when a block's adapter input channels are
/// not divisible by γ; silent rounding would corrupt parameter counts.
pub fn attach_adapters(
    backbone: Backbone,
    scheme: AttachScheme,
    config: &AdapterConfig,
    seed: u64,
) -> Result<AdaptedModel> {
    config.validate()?;
    let mut rng = seeded_rng(seed, 1);
    let Backbone {
        config: bb_config,
        mut params,
    } = backbone;
    let mut sites = Vec::new();
    for dims in bb_config.blocks() {
        let (c_in, c_out, stride) = scheme.site_dims(&dims);
        if c_in % config.gamma != 0 {
            return Err(Error::Config(alloc::format!(
                "{} adapter at stage {} block {}: C_in={} not divisible by gamma={}",
                scheme.name(),
                dims.stage,
                dims.block,
                c_in,
                config.gamma
            )));
        }
        let adapter = ConvAdapter::new(
            *config,
            c_in,
            c_out,
            stride,
            &alloc::format!("adapter.{}", dims.global),
            &mut rng,
        )?;
        let [w_down, w_up, alpha] = adapter.into_parameters();
        let w_down = params.insert(w_down)?;
        let w_up = params.insert(w_up)?;
        let alpha = params.insert(alpha)?;
        sites.push(AdapterSite {
            block: dims.global,
            c_in,
            c_out,
            stride,
            w_down,
            w_up,
            alpha,
        });
    }
    Ok(AdaptedModel {
        config: bb_config,
        scheme,
        adapter_config: *config,
        params,
        sites,
    })
}

impl Model for AdaptedModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn config(&self) -> &BackboneConfig {
        &self.config
    }
    fn is_adapted(&self) -> bool {
        true
    }
    fn forward_with<E: Elem>(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor,
        override_param: Option<(usize, &[E])>,
    ) -> Result<ForwardOut> {
        forward_net(
            &self.params,
            &self.config,
            Some((self.scheme, &self.sites, &self.adapter_config)),
            tape,
            input,
            override_param,
        )
    }
}

fn apply_act<E: Elem>(tape: &mut Tape<E>, v: Var, nl: Nonlinearity) -> Result<Var> {
    match nl {
        Nonlinearity::Relu => tape.relu(v),
        Nonlinearity::Gelu => tape.gelu(v),
    }
}

fn forward_net<E: Elem>(
    params: &ParamSet,
    config: &BackboneConfig,
    adapters: Option<(AttachScheme, &[AdapterSite], &AdapterConfig)>,
    tape: &mut Tape<E>,
    input: &Tensor,
    override_param: Option<(usize, &[E])>,
) -> Result<ForwardOut> {
    if input.rank() != 4 || input.shape()[1] != config.input_channels {
        return Err(Error::Shape {
            op: "forward",
            detail: alloc::format!(
                "expected [N,{},H,W] batch, got {:?}",
                config.input_channels,
                input.shape()
            ),
        });
    }

    let mut bound = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let var = match override_param {
            Some((idx, data)) if idx == i => {
                let t = TensorOf::new(p.tensor.shape().to_vec(), data.to_vec())?;
                tape.leaf_native(t, p.trainable)
            }
            _ => tape.leaf(&p.tensor, p.trainable),
        };
        bound.push(var);
    }
    let get = |name: &str| -> Result<Var> {
        params
            .index_of(name)
            .map(|i| bound[i])
            .ok_or_else(|| Error::Config(alloc::format!("missing parameter {name}")))
    };
    let bn = |tape: &mut Tape<E>, x: Var, prefix: &str| -> Result<Var> {
        tape.batch_norm(
            x,
            get(&alloc::format!("{prefix}.gamma"))?,
            get(&alloc::format!("{prefix}.beta"))?,
            get(&alloc::format!("{prefix}.running_mean"))?,
            get(&alloc::format!("{prefix}.running_var"))?,
            BN_EPS,
        )
    };

    let k = config.kernel_size;
    let pad = same_padding(k)?;
    let nl = config.nonlinearity;

    let x = tape.leaf(input, false);
    let stem = tape.conv2d(x, get("stem.conv.weight")?, None, 1, pad, 1)?;
    let stem = bn(tape, stem, "stem.bn")?;
    let mut cur = apply_act(tape, stem, nl)?;

    for dims in config.blocks() {
        let p = dims.prefix();
        let block_in = cur;
        let site = adapters
            .as_ref()
            .map(|(scheme, sites, acfg)| (*scheme, &sites[dims.global], *acfg));

        let c1 = tape.conv2d(block_in, get(&alloc::format!("{p}.conv1.weight"))?, None, 1, 0, 1)?;
        let c1 = bn(tape, c1, &alloc::format!("{p}.bn1"))?;
        let z_conv = apply_act(tape, c1, nl)?;

        let c2 = tape.conv2d(
            z_conv,
            get(&alloc::format!("{p}.conv2.weight"))?,
            None,
            dims.stride,
            pad,
            1,
        )?;
        let mut h2 = bn(tape, c2, &alloc::format!("{p}.bn2"))?;
        if let Some((scheme, s, acfg)) = site {
            let z = match scheme {
                AttachScheme::ConvParallel => Some(z_conv),
                AttachScheme::ConvSequential => Some(h2),
                _ => None,
            };
            if let Some(z) = z {
                let delta = adapter_forward(tape, z, bound[s.w_down], bound[s.w_up], acfg, s.stride)?;
                h2 = tape.modulate(h2, delta, bound[s.alpha])?;
            }
        }
        let a2 = apply_act(tape, h2, nl)?;

        let c3 = tape.conv2d(a2, get(&alloc::format!("{p}.conv3.weight"))?, None, 1, 0, 1)?;
        let mut h3 = bn(tape, c3, &alloc::format!("{p}.bn3"))?;
        if let Some((scheme, s, acfg)) = site {
            let z = match scheme {
                AttachScheme::ResidualParallel => Some(block_in),
                AttachScheme::ResidualSequential => Some(h3),
                _ => None,
            };
            if let Some(z) = z {
                let delta = adapter_forward(tape, z, bound[s.w_down], bound[s.w_up], acfg, s.stride)?;
                h3 = tape.modulate(h3, delta, bound[s.alpha])?;
            }
        }

        let shortcut = if dims.has_downsample() {
            let d = tape.conv2d(
                block_in,
                get(&alloc::format!("{p}.downsample.conv.weight"))?,
                None,
                dims.stride,
                0,
                1,
            )?;
            bn(tape, d, &alloc::format!("{p}.downsample.bn"))?
        } else {
            block_in
        };
        let summed = tape.add(h3, shortcut)?;
        cur = apply_act(tape, summed, nl)?;
    }

    let pooled = tape.global_avg_pool(cur)?;
    let logits = tape.linear(pooled, get("head.weight")?, get("head.bias")?)?;
    Ok(ForwardOut {
        logits,
        pooled,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::InitScheme;
    use crate::params::seeded_rng;
    use rand::Rng;

    fn random_batch(n: usize, c: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed, 7);
        let data = (0..n * c * hw * hw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![n, c, hw, hw], data).unwrap()
    }

    #[test]
    fn toy_forward_has_logit_shape() {
        let cfg = BackboneConfig::tiny(5, 3);
        let model = build_backbone(&cfg, 0).unwrap();
        let mut tape: Tape = Tape::inference();
        let out = model.forward(&mut tape, &random_batch(1, 3, 16, 0)).unwrap();
        assert_eq!(tape.shape(out.logits), &[1, 5]);
        assert!(tape.value(out.logits).all_finite());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = BackboneConfig::desk_default(4, 1);
        let a = build_backbone(&cfg, 42).unwrap();
        let b = build_backbone(&cfg, 42).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor, pb.tensor);
        }
        let c = build_backbone(&cfg, 43).unwrap();
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.tensor != y.tensor));
    }

    #[test]
    fn strided_stages_halve_spatial_extents() {
        // 16x16 input through strides (1, 2, 2): final feature map is 4x4,
        // checked indirectly through a probe on the conv arithmetic.
        let cfg = BackboneConfig::desk_default(2, 1);
        let model = build_backbone(&cfg, 1).unwrap();
        let mut tape: Tape = Tape::inference();
        let out = model.forward(&mut tape, &random_batch(2, 1, 16, 1)).unwrap();
        assert_eq!(tape.shape(out.pooled), &[2, 128]);
        assert_eq!(tape.shape(out.logits), &[2, 2]);
    }

    #[test]
    fn channel_chain_mismatch_is_rejected() {
        let mut cfg = BackboneConfig::desk_default(4, 3);
        cfg.stages[1].c_in = 48;
        assert!(matches!(build_backbone(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_up_adapters_preserve_logits_bit_for_bit() {
        let cfg = BackboneConfig::desk_default(4, 3);
        let backbone = build_backbone(&cfg, 5).unwrap();
        for scheme in AttachScheme::ALL {
            let adapted = attach_adapters(
                backbone.clone(),
                scheme,
                &AdapterConfig::new(2, 3),
                11,
            )
            .unwrap();
            for trial in 0..5 {
                let batch = random_batch(1, 3, 16, 100 + trial);
                let mut t1: Tape = Tape::inference();
                let base = backbone.forward(&mut t1, &batch).unwrap();
                let mut t2: Tape = Tape::inference();
                let plus = adapted.forward(&mut t2, &batch).unwrap();
                assert_eq!(
                    t1.value(base.logits).data(),
                    t2.value(plus.logits).data(),
                    "{} diverged at init",
                    scheme.name()
                );
            }
        }
    }

    #[test]
    fn alpha_zero_preserves_argmax() {
        let cfg = BackboneConfig::desk_default(4, 3);
        let backbone = build_backbone(&cfg, 6).unwrap();
        let mut acfg = AdapterConfig::new(1, 3);
        acfg.init_scheme = InitScheme::KaimingBoth;
        acfg.alpha_init = 0.0;
        let adapted = attach_adapters(backbone.clone(), AttachScheme::ConvParallel, &acfg, 3).unwrap();
        let batch = random_batch(2, 3, 16, 9);
        let mut t1: Tape = Tape::inference();
        let base = backbone.forward(&mut t1, &batch).unwrap();
        let mut t2: Tape = Tape::inference();
        let plus = adapted.forward(&mut t2, &batch).unwrap();
        assert_eq!(t1.value(base.logits).data(), t2.value(plus.logits).data());
    }

    #[test]
    fn attach_rejects_indivisible_blocks_by_name() {
        let cfg = BackboneConfig::desk_default(4, 3);
        let backbone = build_backbone(&cfg, 0).unwrap();
        // Stage 0 has C_mid=8; gamma=16 cannot divide it.
        let err = attach_adapters(
            backbone,
            AttachScheme::ConvParallel,
            &AdapterConfig::new(16, 3),
            0,
        )
        .unwrap_err();
        match err {
            Error::Config(msg) => {
                assert!(msg.contains("stage 0 block 0"), "got: {msg}");
            }
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn residual_parallel_uses_block_channels() {
        let cfg = BackboneConfig::desk_default(4, 3);
        let backbone = build_backbone(&cfg, 0).unwrap();
        let adapted = attach_adapters(
            backbone,
            AttachScheme::ResidualParallel,
            &AdapterConfig::new(2, 3),
            0,
        )
        .unwrap();
        let first = &adapted.sites[0];
        assert_eq!((first.c_in, first.c_out), (16, 32));
        let w_down = &adapted.params.at(first.w_down).tensor;
        assert_eq!(w_down.shape(), &[8, 2, 3, 3]);
        let w_up = &adapted.params.at(first.w_up).tensor;
        assert_eq!(w_up.shape(), &[32, 8, 1, 1]);
    }
}
