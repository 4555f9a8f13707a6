//! Potts-model segmentation by Lie splitting.
//!
//! Each splitting step first advances the linear part explicitly,
//!
//! ```text
//! u_half = u - tau F + tau lambda_eps (W_lap * u) + tau (W_n * u + b_n)      (DB-I)
//! u_half = u + tau lambda_eps (W_lap * u) + tau G_n([u, f])                  (DB-II)
//! ```
//!
//! then applies the double-well activation `Q_gamma(Sig(.))` or
//! `Q_gamma(Proj(.))`. A DN-I network shares one learned region force `F(f)`
//! across all blocks; a DN-II network gives every block its own operator
//! `G_n`. Both start from `u0 = Q_gamma(Sig(W_0 * f + b_0))` and end with
//! `Sig(W_M * u_M + b_M)`. All solver-path convolutions are periodic.
//!
//! The classical solver runs the same DB-I step with no control
//! (`W_n = 0`, `b_n = 0`) and the Chan-Vese force.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doublewell::{
    activate, activate_adjoint, activate_adjoint_with, activate_with, potts_relaxed_energy, proj01, sigmoid,
    Activation, DoubleWellParams, EnergyReport,
};
use crate::error::{Error, Result};
use crate::field::{
    concat_channels, conv2d, conv2d_adjoint, conv2d_input_grad, laplacian_stencil, luminance,
    split_channels, BoundaryMode, Field, Kernel,
};
use crate::params::{visit_kernel, visit_kernel_mut, ParamSet};
use crate::unet::{build_unet_with, unet_backward, unet_forward, UNetConfig, UNetParams, UNetTape};

const SOLVER_MODE: BoundaryMode = BoundaryMode::Periodic;

/// Grid spacing of the discrete Laplacian.
pub const GRID_SPACING: f64 = 1.0;

fn laplacian() -> Kernel {
    laplacian_stencil(GRID_SPACING).expect("unit grid spacing is valid")
}

// ---------------------------------------------------------------------------
// Chan-Vese region force

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyRegionFallback {
    /// Use the global mean of the image for an empty region.
    #[default]
    GlobalMean,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanVeseParams {
    pub alpha_cv: f64,
    /// Region means are re-estimated during the first `max_outer` steps and
    /// frozen afterwards.
    pub max_outer: usize,
    pub empty_region_fallback: EmptyRegionFallback,
}

impl Default for ChanVeseParams {
    fn default() -> Self {
        Self {
            alpha_cv: 1.0,
            max_outer: 1000,
            empty_region_fallback: EmptyRegionFallback::GlobalMean,
        }
    }
}

impl ChanVeseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cv > 0.0) || !self.alpha_cv.is_finite() {
            return Err(Error::Config(format!(
                "alpha_cv must be positive, got {}",
                self.alpha_cv
            )));
        }
        Ok(())
    }
}

/// Mean intensities `(r0, r1)` of `{u < 0.5}` and `{u >= 0.5}`.
pub fn chan_vese_means(f: &Field, u: &Field, cv: &ChanVeseParams) -> Result<(f64, f64)> {
    let lum = luminance(f);
    region_means(&lum, u, cv)
}

fn region_means(lum: &Field, u: &Field, cv: &ChanVeseParams) -> Result<(f64, f64)> {
    u.expect_single_channel("chan_vese_force")?;
    if !lum.same_spatial(u) {
        return Err(Error::Shape(format!(
            "chan_vese_force: image {:?} and segmentation {:?} differ",
            lum.shape(),
            u.shape()
        )));
    }
    // Sums of deviations from one pixel keep constant regions exact.
    let base = lum.data()[0];
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
    for (&fv, &uv) in lum.data().iter().zip(u.data()) {
        let fv = fv - base;
        if uv >= 0.5 {
            s1 += fv;
            n1 += 1;
        } else {
            s0 += fv;
            n0 += 1;
        }
    }
    let fallback = |region: &str| match cv.empty_region_fallback {
        EmptyRegionFallback::GlobalMean => Ok(lum.mean()),
        EmptyRegionFallback::Error => Err(Error::DegeneratePartition(format!(
            "the {region} region is empty"
        ))),
    };
    let r0 = if n0 > 0 { base + s0 / n0 as f64 } else { fallback("background")? };
    let r1 = if n1 > 0 { base + s1 / n1 as f64 } else { fallback("foreground")? };
    Ok((r0, r1))
}

fn force_from_means(lum: &Field, r0: f64, r1: f64, alpha_cv: f64) -> Field {
    lum.map(|v| ((v - r1) * (v - r1) - (v - r0) * (v - r0)) / alpha_cv)
}

/// `F = ((f - r1)^2 - (f - r0)^2) / alpha_cv` with region means taken from
/// the current partition `{u >= 0.5}`. Multi-channel images are reduced to
/// their channel mean first.
pub fn chan_vese_force(f: &Field, u: &Field, cv: &ChanVeseParams) -> Result<Field> {
    cv.validate()?;
    let lum = luminance(f);
    let (r0, r1) = region_means(&lum, u, cv)?;
    Ok(force_from_means(&lum, r0, r1, cv.alpha_cv))
}

// ---------------------------------------------------------------------------
// Blocks

/// Linear substep of a DB-I block. `control` holds `W_n` (1→1) and its bias `b_n`.
fn dbi_half(u: &Field, force: &Field, control: &Kernel, scheme: &DoubleWellParams, lap: &Kernel) -> Result<Field> {
    u.expect_single_channel("dbi_step")?;
    u.expect_same_shape(force, "dbi_step")?;
    let tau = scheme.tau;
    let mut half = u.clone();
    half.add_scaled(force, -tau)?;
    if scheme.lambda_eps != 0.0 {
        half.add_scaled(&conv2d(u, lap, SOLVER_MODE)?, tau * scheme.lambda_eps)?;
    }
    half.add_scaled(&conv2d(u, control, SOLVER_MODE)?, tau)?;
    Ok(half)
}

/// One DB-I block: linear substep followed by the double-well activation.
pub fn dbi_step(u: &Field, force: &Field, control: &Kernel, scheme: &DoubleWellParams) -> Result<Field> {
    check_control(control)?;
    let half = dbi_half(u, force, control, scheme, &laplacian())?;
    Ok(activate(&half, scheme))
}

fn check_control(control: &Kernel) -> Result<()> {
    if control.in_channels() != 1 || control.out_channels() != 1 {
        return Err(Error::Config(format!(
            "control kernel must map 1 channel to 1, got {}→{}",
            control.in_channels(),
            control.out_channels()
        )));
    }
    Ok(())
}

fn dbii_half(
    u: &Field,
    f: &Field,
    g: &UNetParams,
    scheme: &DoubleWellParams,
    lap: &Kernel,
) -> Result<(Field, UNetTape)> {
    u.expect_single_channel("dbii_step")?;
    let input = concat_channels(u, f)?;
    let (g_out, tape) = unet_forward(g, &input)?;
    if g_out.channels() != 1 {
        return Err(Error::Config(format!(
            "block operator must produce 1 channel, got {}",
            g_out.channels()
        )));
    }
    let mut half = u.clone();
    if scheme.lambda_eps != 0.0 {
        half.add_scaled(&conv2d(u, lap, SOLVER_MODE)?, scheme.tau * scheme.lambda_eps)?;
    }
    half.add_scaled(&g_out, scheme.tau)?;
    Ok((half, tape))
}

/// One DB-II block with its own operator `G_n` acting on `[u, f]`.
pub fn dbii_step(u: &Field, f: &Field, g: &UNetParams, scheme: &DoubleWellParams) -> Result<Field> {
    let (half, _) = dbii_half(u, f, g, scheme, &laplacian())?;
    Ok(activate(&half, scheme))
}

/// `u0 = Q_gamma(Sig(W_0 * f + b_0))`, always in the sigmoid form.
pub fn init_u0(f: &Field, input_layer: &Kernel, scheme: &DoubleWellParams) -> Result<Field> {
    let z = conv2d(f, input_layer, SOLVER_MODE)?;
    Ok(activate_with(&z, Activation::QgammaSig, scheme.alpha, scheme.gamma))
}

/// `1` where `pred >= 0.5`, else `0`.
pub fn threshold(pred: &Field) -> Field {
    pred.map(|p| if p >= 0.5 { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Networks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dn1,
    Dn2,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dn1 => "dn1",
            ModelKind::Dn2 => "dn2",
        })
    }
}

/// Everything needed to rebuild a model's tensor layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Channels `D` of the input image.
    pub image_channels: usize,
    /// Number of splitting blocks `M`.
    pub blocks: usize,
    /// UNet channel vector of the region force (DN-I) or of every block (DN-II).
    pub channels: Vec<usize>,
    pub scheme: DoubleWellParams,
    /// Support of `W_0` and `W_M`.
    pub io_kernel_size: usize,
    /// Support of the DN-I control kernels `W_n`.
    pub control_kernel_size: usize,
    pub unet_kernel_size: usize,
}

impl ModelConfig {
    /// Defaults used in the published experiments.
    pub fn full_dn1(image_channels: usize) -> Self {
        Self {
            kind: ModelKind::Dn1,
            image_channels,
            blocks: 10,
            channels: vec![128, 128, 128, 128, 256],
            scheme: DoubleWellParams::default(),
            io_kernel_size: 3,
            control_kernel_size: 3,
            unet_kernel_size: 3,
        }
    }

    pub fn full_dn2(image_channels: usize) -> Self {
        Self {
            kind: ModelKind::Dn2,
            image_channels,
            blocks: 3,
            channels: vec![64, 64, 64, 128, 128],
            scheme: DoubleWellParams {
                tau: 0.5,
                ..DoubleWellParams::default()
            },
            io_kernel_size: 3,
            control_kernel_size: 3,
            unet_kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if self.blocks == 0 {
            return Err(Error::Config("a network needs at least one block".into()));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        for (name, k) in [
            ("io_kernel_size", self.io_kernel_size),
            ("control_kernel_size", self.control_kernel_size),
            ("unet_kernel_size", self.unet_kernel_size),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        self.unet_config().validate()
    }

    pub fn unet_config(&self) -> UNetConfig {
        let in_channels = match self.kind {
            ModelKind::Dn1 => self.image_channels,
            ModelKind::Dn2 => self.image_channels + 1,
        };
        UNetConfig {
            channels: self.channels.clone(),
            in_channels,
            out_channels: 1,
            kernel_size: self.unet_kernel_size,
        }
    }

    /// Height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        self.unet_config().divisor()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnIParams {
    pub input_layer: Kernel,
    pub region_net: UNetParams,
    /// `W_n` with `b_n` stored as the kernel bias.
    pub blocks: Vec<Kernel>,
    pub output_layer: Kernel,
    pub scheme: DoubleWellParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnIIParams {
    pub input_layer: Kernel,
    pub blocks: Vec<UNetParams>,
    pub output_layer: Kernel,
    pub scheme: DoubleWellParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    DnI(DnIParams),
    DnII(DnIIParams),
}

/// Activation record of one network evaluation.
#[derive(Debug, Clone)]
pub struct DnTape {
    kind: ModelKind,
    image: Field,
    /// `W_0 * f + b_0`
    z0: Field,
    /// `u^0 .. u^M`
    states: Vec<Field>,
    /// Pre-activation of every block.
    halves: Vec<Field>,
    /// DN-I: the region net; DN-II: one per block.
    unet_tapes: Vec<UNetTape>,
    force: Option<Field>,
    /// `Sig(W_M * u^M + b_M)`
    pred: Field,
}

impl DnTape {
    pub fn pred(&self) -> &Field {
        &self.pred
    }

    /// `u^0 .. u^M`
    pub fn states(&self) -> &[Field] {
        &self.states
    }

    /// The learned region force of a DN-I evaluation.
    pub fn force(&self) -> Option<&Field> {
        self.force.as_ref()
    }
}

/// Output of [`Model::backward_detailed`].
#[derive(Debug, Clone)]
pub struct DnGradients {
    pub params: Model,
    /// DN-I only: the gradient each block sends into the shared region force.
    pub force_grads: Vec<Field>,
}

/// Gain of the initial input and output taps.
pub const TAP_GAIN: f64 = 6.0;

/// Centre-tap kernel computing `TAP_GAIN * (mean channel - 0.5)`. Random
/// input and output layers let the first updates push the region force
/// toward saturation, after which every state sits at 0 and learning stalls.
fn threshold_tap(k: usize, cin: usize) -> Result<Kernel> {
    let mut kernel = Kernel::zeros(k, k, cin, 1)?;
    let centre = (k / 2) * k + k / 2;
    for c in 0..cin {
        kernel.weights_mut()[c * k * k + centre] = TAP_GAIN / cin as f64;
    }
    kernel.bias_mut()[0] = -0.5 * TAP_GAIN;
    Ok(kernel)
}

impl Model {
    /// All-zero tensors of the layout described by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let io = cfg.io_kernel_size;
        let input_layer = Kernel::zeros(io, io, cfg.image_channels, 1)?;
        let output_layer = Kernel::zeros(io, io, 1, 1)?;
        let unet = cfg.unet_config();
        Ok(match cfg.kind {
            ModelKind::Dn1 => {
                let ck = cfg.control_kernel_size;
                Model::DnI(DnIParams {
                    input_layer,
                    region_net: UNetParams::zeros(&unet)?,
                    blocks: (0..cfg.blocks)
                        .map(|_| Kernel::zeros(ck, ck, 1, 1))
                        .collect::<Result<_>>()?,
                    output_layer,
                    scheme: cfg.scheme,
                })
            }
            ModelKind::Dn2 => Model::DnII(DnIIParams {
                input_layer,
                blocks: (0..cfg.blocks)
                    .map(|_| UNetParams::zeros(&unet))
                    .collect::<Result<_>>()?,
                output_layer,
                scheme: cfg.scheme,
            }),
        })
    }

    /// Seeded initialization.
    ///
    /// `W_0`, `W_M` and every UNet layer are fan-in uniform; UNet biases start
    /// at zero. DN-I control kernels start at zero. Under the sigmoid
    /// activation the additive block bias (`b_n` for DN-I, the head bias of
    /// each `G_n` for DN-II) starts at `-0.5 / tau`, so that an untrained block
    /// computes `Sig(u_half - 0.5)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let io = cfg.io_kernel_size;
        let shift = match cfg.scheme.activation {
            Activation::QgammaSig => -0.5 / cfg.scheme.tau,
            Activation::QgammaProj => 0.0,
        };
        let unet = cfg.unet_config();
        match &mut model {
            Model::DnI(p) => {
                p.input_layer = threshold_tap(io, cfg.image_channels)?;
                p.region_net = build_unet_with(&unet, &mut rng)?;
                for b in &mut p.blocks {
                    b.bias_mut()[0] = shift;
                }
                p.output_layer = threshold_tap(io, 1)?;
            }
            Model::DnII(p) => {
                p.input_layer = threshold_tap(io, cfg.image_channels)?;
                for g in &mut p.blocks {
                    *g = build_unet_with(&unet, &mut rng)?;
                    let head = g.layers_mut().last_mut().expect("UNet has a head");
                    head.bias_mut()[0] = shift;
                }
                p.output_layer = threshold_tap(io, 1)?;
            }
        }
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::DnI(_) => ModelKind::Dn1,
            Model::DnII(_) => ModelKind::Dn2,
        }
    }

    pub fn scheme(&self) -> &DoubleWellParams {
        match self {
            Model::DnI(p) => &p.scheme,
            Model::DnII(p) => &p.scheme,
        }
    }

    pub fn scheme_mut(&mut self) -> &mut DoubleWellParams {
        match self {
            Model::DnI(p) => &mut p.scheme,
            Model::DnII(p) => &mut p.scheme,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::DnI(p) => ModelConfig {
                kind: ModelKind::Dn1,
                image_channels: p.input_layer.in_channels(),
                blocks: p.blocks.len(),
                channels: p.region_net.config().channels.clone(),
                scheme: p.scheme,
                io_kernel_size: p.input_layer.k_height(),
                control_kernel_size: p.blocks[0].k_height(),
                unet_kernel_size: p.region_net.config().kernel_size,
            },
            Model::DnII(p) => ModelConfig {
                kind: ModelKind::Dn2,
                image_channels: p.input_layer.in_channels(),
                blocks: p.blocks.len(),
                channels: p.blocks[0].config().channels.clone(),
                scheme: p.scheme,
                io_kernel_size: p.input_layer.k_height(),
                control_kernel_size: 3,
                unet_kernel_size: p.blocks[0].config().kernel_size,
            },
        }
    }

    /// Model of the same layout with every tensor zero.
    pub fn zeros_like(&self) -> Model {
        match self {
            Model::DnI(p) => Model::DnI(DnIParams {
                input_layer: p.input_layer.zeros_like(),
                region_net: p.region_net.zeros_like(),
                blocks: p.blocks.iter().map(Kernel::zeros_like).collect(),
                output_layer: p.output_layer.zeros_like(),
                scheme: p.scheme,
            }),
            Model::DnII(p) => Model::DnII(DnIIParams {
                input_layer: p.input_layer.zeros_like(),
                blocks: p.blocks.iter().map(UNetParams::zeros_like).collect(),
                output_layer: p.output_layer.zeros_like(),
                scheme: p.scheme,
            }),
        }
    }

    pub fn image_channels(&self) -> usize {
        match self {
            Model::DnI(p) => p.input_layer.in_channels(),
            Model::DnII(p) => p.input_layer.in_channels(),
        }
    }

    pub fn divisor(&self) -> usize {
        match self {
            Model::DnI(p) => p.region_net.config().divisor(),
            Model::DnII(p) => p.blocks[0].config().divisor(),
        }
    }

    /// Fails with a message naming the required divisibility.
    pub fn check_input(&self, f: &Field) -> Result<()> {
        let (h, w, c) = f.shape();
        if c != self.image_channels() {
            return Err(Error::Shape(format!(
                "model expects {}-channel images, got {c}",
                self.image_channels()
            )));
        }
        let d = self.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "image is {h}x{w}; height and width must be divisible by {d}"
            )));
        }
        Ok(())
    }

    /// Soft prediction in `(0, 1)`.
    pub fn predict(&self, f: &Field) -> Result<Field> {
        Ok(self.forward(f)?.0)
    }

    pub fn forward(&self, f: &Field) -> Result<(Field, DnTape)> {
        self.check_input(f)?;
        let lap = laplacian();
        let (input_layer, output_layer, scheme) = match self {
            Model::DnI(p) => (&p.input_layer, &p.output_layer, &p.scheme),
            Model::DnII(p) => (&p.input_layer, &p.output_layer, &p.scheme),
        };
        let z0 = conv2d(f, input_layer, SOLVER_MODE)?;
        let mut u = activate_with(&z0, Activation::QgammaSig, scheme.alpha, scheme.gamma);
        let mut states = vec![u.clone()];
        let mut halves = Vec::new();
        let mut unet_tapes = Vec::new();
        let mut force = None;
        match self {
            Model::DnI(p) => {
                let (region, tape) = unet_forward(&p.region_net, f)?;
                unet_tapes.push(tape);
                for control in &p.blocks {
                    let half = dbi_half(&u, &region, control, scheme, &lap)?;
                    u = activate(&half, scheme);
                    halves.push(half);
                    states.push(u.clone());
                }
                force = Some(region);
            }
            Model::DnII(p) => {
                for g in &p.blocks {
                    let (half, tape) = dbii_half(&u, f, g, scheme, &lap)?;
                    u = activate(&half, scheme);
                    halves.push(half);
                    unet_tapes.push(tape);
                    states.push(u.clone());
                }
            }
        }
        let pred = conv2d(&u, output_layer, SOLVER_MODE)?.map(sigmoid);
        let tape = DnTape {
            kind: self.kind(),
            image: f.clone(),
            z0,
            states,
            halves,
            unet_tapes,
            force,
            pred: pred.clone(),
        };
        Ok((pred, tape))
    }

    /// Gradients of `<pred, upstream>` with respect to every tensor.
    pub fn backward(&self, tape: &DnTape, upstream: &Field) -> Result<Model> {
        Ok(self.backward_detailed(tape, upstream)?.params)
    }

    pub fn backward_detailed(&self, tape: &DnTape, upstream: &Field) -> Result<DnGradients> {
        let blocks = match self {
            Model::DnI(p) => p.blocks.len(),
            Model::DnII(p) => p.blocks.len(),
        };
        if tape.kind != self.kind() || tape.halves.len() != blocks {
            return Err(Error::Usage("tape does not belong to this model".into()));
        }
        if !upstream.same_shape(&tape.pred) {
            return Err(Error::Usage(format!(
                "upstream shape {:?} does not match prediction {:?}",
                upstream.shape(),
                tape.pred.shape()
            )));
        }
        let lap = laplacian();
        let mut grads = self.zeros_like();
        let scheme = *self.scheme();
        let u_last = tape.states.last().expect("states hold u^0..u^M");

        // pred = Sig(z_M)
        let g_z = upstream.zip_map(&tape.pred, |g, p| g * p * (1.0 - p))?;
        let output_layer = match self {
            Model::DnI(p) => &p.output_layer,
            Model::DnII(p) => &p.output_layer,
        };
        let (g_out_k, mut g_u) = conv2d_adjoint(&g_z, u_last, output_layer, SOLVER_MODE)?;
        let mut force_grads = Vec::new();

        match (self, &mut grads) {
            (Model::DnI(p), Model::DnI(gp)) => {
                gp.output_layer = g_out_k;
                let mut g_force = Field::zeros(g_u.height(), g_u.width(), 1);
                for n in (0..blocks).rev() {
                    let g_half = activate_adjoint(&g_u, &tape.halves[n], &scheme)?;
                    let u_n = &tape.states[n];
                    let (gk, g_ctrl_in) = conv2d_adjoint(&g_half, u_n, &p.blocks[n], SOLVER_MODE)?;
                    gp.blocks[n] = gk;
                    gp.blocks[n].weights_mut().iter_mut().for_each(|v| *v *= scheme.tau);
                    gp.blocks[n].bias_mut().iter_mut().for_each(|v| *v *= scheme.tau);

                    let mut next = g_half.clone();
                    if scheme.lambda_eps != 0.0 {
                        next.add_scaled(
                            &conv2d_input_grad(&g_half, &lap, SOLVER_MODE)?,
                            scheme.tau * scheme.lambda_eps,
                        )?;
                    }
                    next.add_scaled(&g_ctrl_in, scheme.tau)?;
                    let mut fg = g_half;
                    fg.scale(-scheme.tau);
                    g_force.add_scaled(&fg, 1.0)?;
                    force_grads.push(fg);
                    g_u = next;
                }
                force_grads.reverse();
                let (g_region, _) = unet_backward(&p.region_net, &tape.unet_tapes[0], &g_force)?;
                gp.region_net = g_region;
                let g_z0 =
                    activate_adjoint_with(&g_u, &tape.z0, Activation::QgammaSig, scheme.alpha, scheme.gamma)?;
                gp.input_layer = conv2d_adjoint(&g_z0, &tape.image, &p.input_layer, SOLVER_MODE)?.0;
            }
            (Model::DnII(p), Model::DnII(gp)) => {
                gp.output_layer = g_out_k;
                for n in (0..blocks).rev() {
                    let g_half = activate_adjoint(&g_u, &tape.halves[n], &scheme)?;
                    let mut g_g = g_half.clone();
                    g_g.scale(scheme.tau);
                    let (g_block, g_in) = unet_backward(&p.blocks[n], &tape.unet_tapes[n], &g_g)?;
                    gp.blocks[n] = g_block;
                    let (g_u_from_g, _) = split_channels(&g_in, 1)?;

                    let mut next = g_half.clone();
                    if scheme.lambda_eps != 0.0 {
                        next.add_scaled(
                            &conv2d_input_grad(&g_half, &lap, SOLVER_MODE)?,
                            scheme.tau * scheme.lambda_eps,
                        )?;
                    }
                    next.add_scaled(&g_u_from_g, 1.0)?;
                    g_u = next;
                }
                let g_z0 =
                    activate_adjoint_with(&g_u, &tape.z0, Activation::QgammaSig, scheme.alpha, scheme.gamma)?;
                gp.input_layer = conv2d_adjoint(&g_z0, &tape.image, &p.input_layer, SOLVER_MODE)?.0;
            }
            _ => unreachable!("zeros_like preserves the model kind"),
        }
        Ok(DnGradients {
            params: grads,
            force_grads,
        })
    }

    /// `self += scale * other` over every tensor.
    pub fn add_scaled(&mut self, other: &Model, scale: f64) -> Result<()> {
        let flat = other.flatten();
        let mut mine = self.flatten();
        if flat.len() != mine.len() {
            return Err(Error::Shape("model layouts differ".into()));
        }
        for (a, b) in mine.iter_mut().zip(flat) {
            *a += scale * b;
        }
        self.load_flat(&mine)
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Model::DnI(p) => {
                visit_kernel("input", &p.input_layer, f);
                p.region_net.visit(&mut |name, shape, v| f(&format!("region.{name}"), shape, v));
                for (n, b) in p.blocks.iter().enumerate() {
                    visit_kernel(&format!("block{n}.control"), b, f);
                }
                visit_kernel("output", &p.output_layer, f);
            }
            Model::DnII(p) => {
                visit_kernel("input", &p.input_layer, f);
                for (n, g) in p.blocks.iter().enumerate() {
                    g.visit(&mut |name, shape, v| f(&format!("block{n}.{name}"), shape, v));
                }
                visit_kernel("output", &p.output_layer, f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Model::DnI(p) => {
                visit_kernel_mut("input", &mut p.input_layer, f);
                p.region_net.visit_mut(&mut |name, v| f(&format!("region.{name}"), v));
                for (n, b) in p.blocks.iter_mut().enumerate() {
                    visit_kernel_mut(&format!("block{n}.control"), b, f);
                }
                visit_kernel_mut("output", &mut p.output_layer, f);
            }
            Model::DnII(p) => {
                visit_kernel_mut("input", &mut p.input_layer, f);
                for (n, g) in p.blocks.iter_mut().enumerate() {
                    g.visit_mut(&mut |name, v| f(&format!("block{n}.{name}"), v));
                }
                visit_kernel_mut("output", &mut p.output_layer, f);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Classical solver

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalConfig {
    /// The activation is forced to `QgammaProj`.
    pub scheme: DoubleWellParams,
    pub cv: ChanVeseParams,
    pub steps: usize,
}

impl Default for ClassicalConfig {
    fn default() -> Self {
        Self {
            scheme: DoubleWellParams {
                activation: Activation::QgammaProj,
                ..DoubleWellParams::default()
            },
            cv: ChanVeseParams::default(),
            steps: 100,
        }
    }
}

/// Result of [`classical_solve`].
#[derive(Debug, Clone)]
pub struct ClassicalOutcome {
    pub u: Field,
    /// Energy of the initial state followed by one entry per step.
    pub energy_trace: Vec<EnergyReport>,
}

/// Initial phase field: the clamped luminance. A constant image carries no
/// region information and starts at the barrier value 0.5 instead.
pub fn classical_init(f: &Field) -> Field {
    let lum = luminance(f);
    let (lo, hi) = lum.min_max();
    if hi == lo {
        return Field::filled(lum.height(), lum.width(), 1, 0.5);
    }
    lum.map(proj01)
}

/// Double-well Chan-Vese segmentation without learned components.
pub fn classical_solve(f: &Field, cfg: &ClassicalConfig) -> Result<ClassicalOutcome> {
    classical_solve_from(f, &classical_init(f), cfg)
}

/// [`classical_solve`] from a caller-supplied initial state.
pub fn classical_solve_from(f: &Field, u0: &Field, cfg: &ClassicalConfig) -> Result<ClassicalOutcome> {
    if cfg.steps == 0 {
        return Err(Error::Config("the classical solver needs at least one step".into()));
    }
    cfg.cv.validate()?;
    let scheme = DoubleWellParams {
        activation: Activation::QgammaProj,
        ..cfg.scheme
    };
    scheme.validate()?;
    let (lambda, eps) = scheme.lambda_and_eps()?;
    let lum = luminance(f);
    u0.expect_single_channel("classical_solve")?;
    if !u0.same_spatial(&lum) {
        return Err(Error::Shape("initial state and image sizes differ".into()));
    }
    let lap = laplacian();
    let no_control = Kernel::zeros(1, 1, 1, 1)?;

    let mut u = u0.clone();
    let mut means = region_means(&lum, &u, &cfg.cv)?;
    let mut force = force_from_means(&lum, means.0, means.1, cfg.cv.alpha_cv);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(potts_relaxed_energy(&u, &force, lambda, eps)?);
    for step in 0..cfg.steps {
        let half = dbi_half(&u, &force, &no_control, &scheme, &lap)?;
        u = activate(&half, &scheme);
        if step + 1 < cfg.cv.max_outer {
            means = region_means(&lum, &u, &cfg.cv)?;
        }
        force = force_from_means(&lum, means.0, means.1, cfg.cv.alpha_cv);
        trace.push(potts_relaxed_energy(&u, &force, lambda, eps)?);
    }
    Ok(ClassicalOutcome { u, energy_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::fan_in_uniform;
    use rand::Rng;

    fn random_field(seed: u64, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
    }

    fn proj_scheme() -> DoubleWellParams {
        DoubleWellParams {
            activation: Activation::QgammaProj,
            ..DoubleWellParams::default()
        }
    }

    #[test]
    fn constant_image_has_zero_force() {
        let f = Field::filled(6, 6, 1, 0.4);
        let u = random_field(1, 6, 6, 1, 0.0, 1.0);
        let force = chan_vese_force(&f, &u, &ChanVeseParams::default()).unwrap();
        assert!(force.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_level_image_force() {
        let f = Field::from_fn(4, 8, 1, |_, x, _| if x >= 4 { 1.0 } else { 0.0 });
        let u = f.clone();
        let force = chan_vese_force(&f, &u, &ChanVeseParams::default()).unwrap();
        for x in 0..8 {
            let expected = if x >= 4 { -1.0 } else { 1.0 };
            assert_eq!(force.get(2, x, 0), expected);
        }
        let swapped = chan_vese_force(&f, &u.map(|v| 1.0 - v), &ChanVeseParams::default()).unwrap();
        assert_eq!(swapped, force.map(|v| -v));
    }

    #[test]
    fn empty_region_fallbacks() {
        let f = random_field(2, 4, 4, 1, 0.0, 1.0);
        let all_fg = Field::filled(4, 4, 1, 1.0);
        let cv = ChanVeseParams {
            empty_region_fallback: EmptyRegionFallback::Error,
            ..Default::default()
        };
        assert!(matches!(
            chan_vese_force(&f, &all_fg, &cv),
            Err(Error::DegeneratePartition(_))
        ));
        let (r0, r1) = chan_vese_means(&f, &all_fg, &ChanVeseParams::default()).unwrap();
        assert_eq!(r0, f.mean());
        assert_eq!(r1, f.mean());
    }

    #[test]
    fn dbi_fixed_points() {
        let control = Kernel::zeros(3, 3, 1, 1).unwrap();
        let zero = Field::zeros(5, 5, 1);
        for c in [0.5, 1.0] {
            let out = dbi_step(&Field::filled(5, 5, 1, c), &zero, &control, &proj_scheme()).unwrap();
            assert!(out.data().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn dbii_fixed_points() {
        let g = UNetParams::zeros(&UNetConfig::new(vec![2], 2, 1).unwrap()).unwrap();
        let f = random_field(3, 4, 4, 1, 0.0, 1.0);
        for c in [0.5, 1.0] {
            let out = dbii_step(&Field::filled(4, 4, 1, c), &f, &g, &proj_scheme()).unwrap();
            assert!(out.data().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn init_u0_examples() {
        let scheme = DoubleWellParams::default();
        let f = random_field(4, 4, 4, 1, 0.0, 1.0);
        let u0 = init_u0(&f, &Kernel::zeros(3, 3, 1, 1).unwrap(), &scheme).unwrap();
        assert!(u0.data().iter().all(|&v| v == 0.5));

        let mut k = Kernel::zeros(3, 3, 1, 1).unwrap();
        k.bias_mut()[0] = 10.0;
        let u0 = init_u0(&f, &k, &scheme).unwrap();
        assert!(u0.data().iter().all(|&v| v > 0.999 && v == u0.data()[0]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = fan_in_uniform(&mut rng, 3, 1, 1).unwrap();
        let mut neg = k.clone();
        neg.weights_mut().iter_mut().for_each(|v| *v = -*v);
        neg.bias_mut()[0] = -k.bias()[0];
        let a = init_u0(&f, &k, &scheme).unwrap();
        let b = init_u0(&f, &neg, &scheme).unwrap();
        assert!(a.zip_map(&b, |x, y| x + y - 1.0).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn threshold_rule() {
        assert!(threshold(&Field::filled(2, 2, 1, 0.5)).data().iter().all(|&v| v == 1.0));
        assert!(threshold(&Field::filled(2, 2, 1, 0.49)).data().iter().all(|&v| v == 0.0));
        let x = random_field(6, 5, 5, 1, 0.0, 1.0);
        assert_eq!(threshold(&threshold(&x)), threshold(&x));
    }

    fn tiny_config(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            image_channels: 1,
            blocks: 2,
            channels: vec![2],
            scheme: DoubleWellParams::default(),
            io_kernel_size: 3,
            control_kernel_size: 3,
            unet_kernel_size: 3,
        }
    }

    #[test]
    fn zero_models_predict_one_half() {
        for kind in [ModelKind::Dn1, ModelKind::Dn2] {
            let mut cfg = tiny_config(kind);
            cfg.scheme.activation = Activation::QgammaProj;
            let m = Model::zeros(&cfg).unwrap();
            let f = random_field(7, 8, 8, 1, 0.0, 1.0);
            let pred = m.predict(&f).unwrap();
            assert!(pred.data().iter().all(|&v| v == 0.5), "{kind:?}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        for kind in [ModelKind::Dn1, ModelKind::Dn2] {
            let m = Model::build(&tiny_config(kind), 3).unwrap();
            let f = random_field(8, 8, 8, 1, 0.0, 1.0);
            assert_eq!(m.predict(&f).unwrap(), m.predict(&f).unwrap());
        }
    }

    #[test]
    fn block_states_stay_in_unit_interval_with_proj() {
        for kind in [ModelKind::Dn1, ModelKind::Dn2] {
            let mut cfg = tiny_config(kind);
            cfg.scheme.activation = Activation::QgammaProj;
            let m = Model::build(&cfg, 9).unwrap();
            let f = random_field(9, 8, 8, 1, -2.0, 2.0);
            let (_, tape) = m.forward(&f).unwrap();
            for u in tape.states() {
                assert!(u.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn divisibility_is_checked() {
        let mut cfg = tiny_config(ModelKind::Dn1);
        cfg.channels = vec![2, 2];
        let m = Model::zeros(&cfg).unwrap();
        let err = m.predict(&Field::zeros(6, 8, 1)).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn dn1_param_count_identity() {
        let cfg = ModelConfig::full_dn1(3);
        let m = Model::zeros(&cfg).unwrap();
        let expected = crate::unet::param_count(&cfg.unet_config()) + (9 * 3 + 1) + 10 * (9 + 1) + (9 + 1);
        assert_eq!(m.param_len(), expected);
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let a = Model::build(&tiny_config(ModelKind::Dn1), 0).unwrap();
        let b = Model::build(&tiny_config(ModelKind::Dn2), 0).unwrap();
        let f = random_field(1, 8, 8, 1, 0.0, 1.0);
        let (_, tape) = a.forward(&f).unwrap();
        assert!(matches!(b.backward(&tape, &Field::zeros(8, 8, 1)), Err(Error::Usage(_))));
        assert!(matches!(a.backward(&tape, &Field::zeros(4, 8, 1)), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for kind in [ModelKind::Dn1, ModelKind::Dn2] {
            let m = Model::build(&tiny_config(kind), 1).unwrap();
            let f = random_field(2, 8, 8, 1, 0.0, 1.0);
            let (_, tape) = m.forward(&f).unwrap();
            let g = m.backward(&tape, &Field::zeros(8, 8, 1)).unwrap();
            assert!(g.flatten().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn classical_constant_image_is_stationary() {
        let f = Field::filled(8, 8, 1, 0.3);
        let out = classical_solve(&f, &ClassicalConfig::default()).unwrap();
        assert!(out.u.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.energy_trace.len(), 101);
    }

    #[test]
    fn classical_init_clamps_luminance() {
        let f = Field::from_vec(1, 3, 2, vec![-0.4, 0.5, 1.0, 0.0, 0.5, 2.0]).unwrap();
        assert_eq!(classical_init(&f).data(), &[0.0, 0.5, 1.0]);
        assert!(classical_init(&Field::filled(2, 2, 3, 0.9)).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn classical_label_symmetry() {
        let cfg = ClassicalConfig {
            steps: 20,
            ..Default::default()
        };
        let f = random_field(12, 16, 16, 1, 0.0, 1.0);
        let u0 = classical_init(&f);
        let flipped_f = f.map(|v| 1.0 - v);
        let a = classical_solve_from(&f, &u0, &cfg).unwrap();
        let b = classical_solve_from(&flipped_f, &u0.map(|v| 1.0 - v), &cfg).unwrap();
        let diff = a.u.zip_map(&b.u, |x, y| x + y - 1.0).unwrap();
        assert!(diff.data().iter().all(|v| v.abs() <= 1e-10));
    }
}
