//! The Conv-Adapter bottleneck module.
//!
//! An adapter computes an additive feature modulation
//! `Δh = W_up ⊗ f(W_down ⊗̂ z)` — a grouped K×K down-projection into a
//! channel bottleneck, a nonlinearity, and a 1×1 up-projection — which is
//! composed into the host feature map as `h + α ⊙ Δh` with a learnable
//! per-channel scale `α`. Spatial extents are preserved via same-padding.
//!
//! The down-projection is a grouped convolution with `C_in/γ` groups of
//! input width `γ`: its weight is `[C_in/γ, γ, K, K]`, so its parameter
//! count is exactly `K·K·C_in`, and at `γ = 1` it degenerates to a true
//! depthwise convolution.

use alloc::vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::same_padding;
use crate::params::{kaiming_uniform, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::{Elem, Tensor};

/// Activation between the adapter's two convolutions. The host backbone's
/// own nonlinearity should be used: ReLU for ResNet-style stacks, GELU for
/// ConvNeXt-style ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Gelu,
}

/// Weight initialization for a fresh adapter.
///
/// `ZeroUp` (Kaiming-uniform `w_down`, zero `w_up`) makes the adapted model
/// exactly reproduce the frozen backbone before the first optimizer step.
/// `KaimingBoth` initializes both projections randomly, which is the variant
/// under which the α-initialization ablation is meaningful at step zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    KaimingBoth,
    ZeroUp,
}

/// Hyper-parameters of a Conv-Adapter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    /// Channel compression factor γ; the bottleneck width is `C_in/γ`.
    pub gamma: usize,
    /// Down-projection kernel size K (odd).
    pub kernel_size: usize,
    pub nonlinearity: Nonlinearity,
    pub init_scheme: InitScheme,
    /// Initial value of every entry of the scaling vector α.
    pub alpha_init: f32,
}

impl AdapterConfig {
    pub fn new(gamma: usize, kernel_size: usize) -> Self {
        AdapterConfig {
            gamma,
            kernel_size,
            nonlinearity: Nonlinearity::Relu,
            init_scheme: InitScheme::ZeroUp,
            alpha_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::Config("compression factor gamma must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(alloc::format!(
                "adapter kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Trainable parameter count of one adapter:
/// `K·K·C_in + (C_in/γ)·C_out + C_out`.
///
/// The final `C_out` term is the scaling vector α, which is trainable even
/// though idealized per-block accounting often omits it; pass
/// `include_alpha = false` to [`adapter_param_count_opts`] for the α-free
/// figure.
pub fn adapter_param_count(config: &AdapterConfig, c_in: usize, c_out: usize) -> Result<usize> {
    adapter_param_count_opts(config, c_in, c_out, true)
}

/// As [`adapter_param_count`], with α optionally excluded.
pub fn adapter_param_count_opts(
    config: &AdapterConfig,
    c_in: usize,
    c_out: usize,
    include_alpha: bool,
) -> Result<usize> {
    config.validate()?;
    if c_in % config.gamma != 0 {
        return Err(Error::Config(alloc::format!(
            "C_in={c_in} is not divisible by gamma={}",
            config.gamma
        )));
    }
    let k = config.kernel_size;
    let down = k * k * c_in;
    let up = (c_in / config.gamma) * c_out;
    Ok(down + up + if include_alpha { c_out } else { 0 })
}

/// A constructed Conv-Adapter: its three trainable parameters plus the
/// geometry it was built for.
#[derive(Debug, Clone)]
pub struct ConvAdapter {
    pub w_down: Parameter,
    pub w_up: Parameter,
    pub alpha: Parameter,
    pub config: AdapterConfig,
    pub c_in: usize,
    pub c_out: usize,
    /// Stride of the down-projection. 1 except when attached in parallel to
    /// a strided host path, where it must match so Δh and h agree spatially.
    pub stride: usize,
}

impl ConvAdapter {
    /// Builds an adapter with parameters named `{prefix}.w_down`,
    /// `{prefix}.w_up`, `{prefix}.alpha`.
    pub fn new(
        config: AdapterConfig,
        c_in: usize,
        c_out: usize,
        stride: usize,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if c_in % config.gamma != 0 {
            return Err(Error::Config(alloc::format!(
                "adapter at {prefix}: C_in={c_in} is not divisible by gamma={}",
                config.gamma
            )));
        }
        let k = config.kernel_size;
        let bottleneck = c_in / config.gamma;
        let w_down_shape = vec![bottleneck, config.gamma, k, k];
        let w_up_shape = vec![c_out, bottleneck, 1, 1];
        let w_down = kaiming_uniform(w_down_shape, config.gamma * k * k, rng);
        let w_up = match config.init_scheme {
            InitScheme::ZeroUp => Tensor::zeros(w_up_shape),
            InitScheme::KaimingBoth => kaiming_uniform(w_up_shape, bottleneck, rng),
        };
        let alpha = Tensor::filled(vec![c_out], config.alpha_init);
        Ok(ConvAdapter {
            w_down: Parameter::new(alloc::format!("{prefix}.w_down"), w_down, true),
            w_up: Parameter::new(alloc::format!("{prefix}.w_up"), w_up, true),
            alpha: Parameter::new(alloc::format!("{prefix}.alpha"), alpha, true),
            config,
            c_in,
            c_out,
            stride,
        })
    }

    /// Moves the three parameters out, in serialization order.
    pub fn into_parameters(self) -> [Parameter; 3] {
        [self.w_down, self.w_up, self.alpha]
    }

    /// Runs the adapter on `z` with freshly bound leaves. Standalone entry
    /// point; attached models bind adapter parameters through their own
    /// parameter set and call [`adapter_forward`] directly.
    pub fn forward<E: Elem>(&self, tape: &mut Tape<E>, z: Var) -> Result<Var> {
        let w_down = tape.leaf(&self.w_down.tensor, self.w_down.trainable);
        let w_up = tape.leaf(&self.w_up.tensor, self.w_up.trainable);
        adapter_forward(tape, z, w_down, w_up, &self.config, self.stride)
    }
}

/// Computes `Δh = W_up ⊗ f(W_down ⊗̂ z)`.
///
/// `z` must have the channel count the adapter was shaped for; spatial
/// extents are preserved (same-padding) except that `stride > 1` downsamples
/// exactly like the adapted host path.
pub fn adapter_forward<E: Elem>(
    tape: &mut Tape<E>,
    z: Var,
    w_down: Var,
    w_up: Var,
    config: &AdapterConfig,
    stride: usize,
) -> Result<Var> {
    let zshape = tape.shape(z);
    if zshape.len() != 4 {
        return Err(Error::Shape {
            op: "adapter_forward",
            detail: alloc::format!("expected NCHW input, got {zshape:?}"),
        });
    }
    let c_in = zshape[1];
    let wd_shape = tape.shape(w_down);
    let expected_groups = wd_shape[0];
    if c_in % config.gamma != 0 || c_in / config.gamma != expected_groups {
        return Err(Error::Shape {
            op: "adapter_forward",
            detail: alloc::format!(
                "input channels {c_in} do not match adapter w_down {wd_shape:?} with gamma={}",
                config.gamma
            ),
        });
    }
    let pad = same_padding(config.kernel_size)?;
    let groups = c_in / config.gamma;
    let mid = tape.conv2d(z, w_down, None, stride, pad, groups)?;
    let activated = match config.nonlinearity {
        Nonlinearity::Relu => tape.relu(mid)?,
        Nonlinearity::Gelu => tape.gelu(mid)?,
    };
    tape.conv2d(activated, w_up, None, 1, 0, 1)
}

/// Eq-style modulation `h + α ⊙ Δh`; thin alias over the tape primitive.
pub fn apply_modulation<E: Elem>(
    tape: &mut Tape<E>,
    h: Var,
    delta_h: Var,
    alpha: Var,
) -> Result<Var> {
    tape.modulate(h, delta_h, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    #[test]
    fn zero_up_projection_gives_zero_delta() {
        let cfg = AdapterConfig::new(2, 3);
        let mut rng = seeded_rng(1, 0);
        let adapter = ConvAdapter::new(cfg, 4, 8, 1, "adapter.0", &mut rng).unwrap();
        let mut tape: Tape = Tape::new();
        let mut z = Tensor::zeros(vec![1, 4, 5, 5]);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let zv = tape.leaf(&z, false);
        let out = adapter.forward(&mut tape, zv).unwrap();
        assert_eq!(tape.shape(out), &[1, 8, 5, 5]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_pipeline_matches_hand_value() {
        // C_in=C_out=gamma=1, K=1, w_down=[1], w_up=[1], relu, z=[[-2,3]].
        let mut cfg = AdapterConfig::new(1, 1);
        cfg.init_scheme = InitScheme::KaimingBoth;
        let mut rng = seeded_rng(0, 0);
        let mut adapter = ConvAdapter::new(cfg, 1, 1, 1, "a", &mut rng).unwrap();
        adapter.w_down.tensor = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        adapter.w_up.tensor = Tensor::filled(vec![1, 1, 1, 1], 1.0);
        let mut tape: Tape = Tape::new();
        let z = tape.leaf(
            &Tensor::new(vec![1, 1, 1, 2], vec![-2.0, 3.0]).unwrap(),
            false,
        );
        let out = adapter.forward(&mut tape, z).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 3.0]);
    }

    #[test]
    fn param_count_closed_form_examples() {
        // C_in=64, C_out=64, gamma=4, K=3 -> 576 + 1024 + 64.
        let cfg = AdapterConfig::new(4, 3);
        assert_eq!(adapter_param_count(&cfg, 64, 64).unwrap(), 1664);
        // Degenerate maximal compression: gamma=C_in, K=1, C_out=1.
        let cfg = AdapterConfig::new(16, 1);
        assert_eq!(adapter_param_count(&cfg, 16, 1).unwrap(), 16 + 1 + 1);
        // Alpha-free figure matches the two-term form.
        let cfg = AdapterConfig::new(2, 5);
        assert_eq!(
            adapter_param_count_opts(&cfg, 8, 12, false).unwrap(),
            5 * 5 * 8 + 4 * 12
        );
    }

    #[test]
    fn param_count_rejects_indivisible_channels() {
        let cfg = AdapterConfig::new(3, 3);
        assert!(matches!(
            adapter_param_count(&cfg, 8, 8),
            Err(Error::Config(_))
        ));
        let mut rng = seeded_rng(0, 0);
        assert!(ConvAdapter::new(cfg, 8, 8, 1, "a", &mut rng).is_err());
    }

    #[test]
    fn enumerated_elements_match_closed_form() {
        for gamma in [1usize, 2, 4, 8] {
            for k in [1usize, 3, 5, 7] {
                for c in [8usize, 16, 64] {
                    let cfg = AdapterConfig::new(gamma, k);
                    let mut rng = seeded_rng(3, 0);
                    let a = ConvAdapter::new(cfg, c, 2 * c, 1, "a", &mut rng).unwrap();
                    let enumerated = a.w_down.tensor.numel()
                        + a.w_up.tensor.numel()
                        + a.alpha.tensor.numel();
                    assert_eq!(enumerated, adapter_param_count(&cfg, c, 2 * c).unwrap());
                }
            }
        }
    }

    #[test]
    fn alpha_initialized_to_configured_value() {
        let mut cfg = AdapterConfig::new(1, 3);
        cfg.alpha_init = 0.25;
        let mut rng = seeded_rng(9, 0);
        let a = ConvAdapter::new(cfg, 6, 6, 1, "a", &mut rng).unwrap();
        assert!(a.alpha.tensor.data().iter().all(|&v| v == 0.25));
        assert_eq!(a.alpha.tensor.numel(), 6);
    }
}
