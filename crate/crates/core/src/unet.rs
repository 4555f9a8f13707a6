//! Configurable encoder-decoder ("UNet class") operator.
//!
//! A channel vector `c = [c_1, ..., c_S]` fixes the architecture:
//!
//! * encoder level `s`: conv(→c_s)+ReLU, conv(c_s→c_s)+ReLU, keep as skip, 2x2 average pool
//! * bottleneck: conv(c_S→2c_S)+ReLU, conv(2c_S→2c_S)+ReLU
//! * decoder level `s` (coarse to fine): nearest upsample, concatenate
//!   `[upsampled, skip_s]`, conv(→c_s)+ReLU, conv(c_s→c_s)+ReLU
//! * head: linear 1x1 conv to `out_channels`
//!
//! All convolutions zero-pad. Tensors are listed in the order
//! `enc1.conv1, enc1.conv2, ..., encS.conv2, bottleneck.conv1,
//! bottleneck.conv2, decS.conv1, ..., dec1.conv2, head`, each as
//! `<layer>.weight` then `<layer>.bias`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    concat_channels, conv2d, conv2d_input_grad, conv2d_kernel_grad, downsample_avg2,
    downsample_avg2_adjoint, split_channels, upsample_nn2, upsample_nn2_adjoint, BoundaryMode,
    Field, Kernel,
};
use crate::params::{fan_in_uniform, visit_kernel, visit_kernel_mut, ParamSet};

const MODE: BoundaryMode = BoundaryMode::ZeroPad;

fn default_kernel_size() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

/// Shape of one convolution in the canonical layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

impl UNetConfig {
    pub fn new(channels: Vec<usize>, in_channels: usize, out_channels: usize) -> Result<Self> {
        let cfg = Self {
            channels,
            in_channels,
            out_channels,
            kernel_size: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("UNet channel vector must have at least one level".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "UNet channel counts must be positive, got {:?}",
                self.channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("UNet in/out channel counts must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "UNet kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Number of resolution levels `S` (excluding the bottleneck).
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Input height and width must be multiples of this (`2^S`).
    pub fn divisor(&self) -> usize {
        1 << self.levels()
    }

    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        if c != self.in_channels {
            return Err(Error::Config(format!(
                "UNet expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let mut size = (h, w);
        for level in 1..=self.levels() {
            if !size.0.is_multiple_of(2) || !size.1.is_multiple_of(2) {
                return Err(Error::Shape(format!(
                    "input {h}x{w} cannot be pooled at level {level}: {}x{} is odd \
                     (height and width must be divisible by {})",
                    size.0,
                    size.1,
                    self.divisor()
                )));
            }
            size = (size.0 / 2, size.1 / 2);
        }
        Ok(())
    }

    /// Canonical layer list.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let k = self.kernel_size;
        let spec = |name: String, i, o, k| LayerSpec {
            name,
            in_channels: i,
            out_channels: o,
            kernel_size: k,
        };
        let s_max = self.levels();
        let mut out = Vec::with_capacity(4 * s_max + 3);
        let mut prev = self.in_channels;
        for (s, &c) in self.channels.iter().enumerate() {
            out.push(spec(format!("enc{}.conv1", s + 1), prev, c, k));
            out.push(spec(format!("enc{}.conv2", s + 1), c, c, k));
            prev = c;
        }
        let bottom = 2 * self.channels[s_max - 1];
        out.push(spec("bottleneck.conv1".into(), prev, bottom, k));
        out.push(spec("bottleneck.conv2".into(), bottom, bottom, k));
        let mut below = bottom;
        for s in (0..s_max).rev() {
            let c = self.channels[s];
            out.push(spec(format!("dec{}.conv1", s + 1), below + c, c, k));
            out.push(spec(format!("dec{}.conv2", s + 1), c, c, k));
            below = c;
        }
        out.push(spec("head".into(), below, self.out_channels, 1));
        out
    }

    fn enc(&self, s: usize, j: usize) -> usize {
        2 * s + j
    }

    fn bottleneck(&self, j: usize) -> usize {
        2 * self.levels() + j
    }

    fn dec(&self, s: usize, j: usize) -> usize {
        2 * self.levels() + 2 + 2 * (self.levels() - 1 - s) + j
    }

    fn head(&self) -> usize {
        4 * self.levels() + 2
    }
}

/// Exact number of weights plus biases.
pub fn param_count(config: &UNetConfig) -> usize {
    config
        .layer_specs()
        .iter()
        .map(|l| l.kernel_size * l.kernel_size * l.in_channels * l.out_channels + l.out_channels)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    config: UNetConfig,
    layers: Vec<Kernel>,
    names: Vec<String>,
}

impl UNetParams {
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.layer_specs();
        let layers = specs
            .iter()
            .map(|l| Kernel::zeros(l.kernel_size, l.kernel_size, l.in_channels, l.out_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
            names: specs.into_iter().map(|l| l.name).collect(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Kernel] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Kernel] {
        &mut self.layers
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(Kernel::zeros_like).collect(),
            names: self.names.clone(),
        }
    }

    pub fn add_scaled(&mut self, other: &UNetParams, scale: f64) {
        assert_eq!(self.config, other.config, "UNet configuration mismatch");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, scale);
        }
    }
}

impl ParamSet for UNetParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (name, k) in self.names.iter().zip(&self.layers) {
            visit_kernel(name, k, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (name, k) in self.names.iter().zip(self.layers.iter_mut()) {
            visit_kernel_mut(name, k, f);
        }
    }
}

/// Seeded fan-in uniform initialization; biases start at zero.
pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<UNetParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_unet_with(config, &mut rng)
}

pub(crate) fn build_unet_with<R: rand::Rng>(config: &UNetConfig, rng: &mut R) -> Result<UNetParams> {
    let mut params = UNetParams::zeros(config)?;
    for (spec, layer) in config.layer_specs().iter().zip(params.layers.iter_mut()) {
        *layer = fan_in_uniform(rng, spec.kernel_size, spec.in_channels, spec.out_channels)?;
    }
    Ok(params)
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct UNetTape {
    config: UNetConfig,
    input_shape: (usize, usize, usize),
    /// Input of every layer, canonical order.
    layer_inputs: Vec<Field>,
    /// Output of every layer after its activation (the head is linear).
    layer_outputs: Vec<Field>,
}

impl UNetTape {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn output(&self) -> &Field {
        self.layer_outputs.last().expect("tape always records the head")
    }
}

fn relu_in_place(f: &mut Field) {
    f.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Forward evaluation recording an activation tape.
pub fn unet_forward(params: &UNetParams, input: &Field) -> Result<(Field, UNetTape)> {
    let cfg = &params.config;
    let (h, w, c) = input.shape();
    cfg.check_input(h, w, c)?;
    let n_layers = params.layers.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut layer_outputs = Vec::with_capacity(n_layers);

    let mut run = |idx: usize, x: Field, relu: bool| -> Result<Field> {
        let mut y = conv2d(&x, &params.layers[idx], MODE)?;
        if relu {
            relu_in_place(&mut y);
        }
        layer_inputs.push(x);
        layer_outputs.push(y.clone());
        Ok(y)
    };

    let mut x = input.clone();
    let mut skips = Vec::with_capacity(cfg.levels());
    for s in 0..cfg.levels() {
        x = run(cfg.enc(s, 0), x, true)?;
        x = run(cfg.enc(s, 1), x, true)?;
        let pooled = downsample_avg2(&x)?;
        skips.push(x);
        x = pooled;
    }
    x = run(cfg.bottleneck(0), x, true)?;
    x = run(cfg.bottleneck(1), x, true)?;
    for s in (0..cfg.levels()).rev() {
        let merged = concat_channels(&upsample_nn2(&x), &skips[s])?;
        x = run(cfg.dec(s, 0), merged, true)?;
        x = run(cfg.dec(s, 1), x, true)?;
    }
    let out = run(cfg.head(), x, false)?;
    Ok((
        out.clone(),
        UNetTape {
            config: cfg.clone(),
            input_shape: input.shape(),
            layer_inputs,
            layer_outputs,
        },
    ))
}

/// Gradients of `<output, upstream>` with respect to every parameter and the input.
pub fn unet_backward(params: &UNetParams, tape: &UNetTape, upstream: &Field) -> Result<(UNetParams, Field)> {
    let cfg = &params.config;
    if tape.config != *cfg || tape.layer_inputs.len() != params.layers.len() {
        return Err(Error::Usage(
            "UNet tape was recorded with a different configuration".into(),
        ));
    }
    if upstream.shape() != tape.output().shape() {
        return Err(Error::Usage(format!(
            "upstream shape {:?} does not match recorded output {:?}",
            upstream.shape(),
            tape.output().shape()
        )));
    }
    let mut grads = params.zeros_like();

    // Pulls `g` back through layer `idx`, applying the ReLU mask first.
    let mut back = |idx: usize, mut g: Field, relu: bool| -> Result<Field> {
        if relu {
            let out = &tape.layer_outputs[idx];
            for (gv, &ov) in g.data_mut().iter_mut().zip(out.data()) {
                if ov <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let k = &params.layers[idx];
        grads.layers[idx] = conv2d_kernel_grad(&g, &tape.layer_inputs[idx], k, MODE)?;
        conv2d_input_grad(&g, k, MODE)
    };

    let mut g = back(cfg.head(), upstream.clone(), false)?;
    let mut skip_grads: Vec<Option<Field>> = vec![None; cfg.levels()];
    for s in 0..cfg.levels() {
        g = back(cfg.dec(s, 1), g, true)?;
        g = back(cfg.dec(s, 0), g, true)?;
        let below = g.channels() - cfg.channels[s];
        let (g_up, g_skip) = split_channels(&g, below)?;
        skip_grads[s] = Some(g_skip);
        g = upsample_nn2_adjoint(&g_up)?;
    }
    g = back(cfg.bottleneck(1), g, true)?;
    g = back(cfg.bottleneck(0), g, true)?;
    for s in (0..cfg.levels()).rev() {
        g = downsample_avg2_adjoint(&g);
        let skip = skip_grads[s].take().expect("every decoder level records a skip gradient");
        g.add_scaled(&skip, 1.0)?;
        g = back(cfg.enc(s, 1), g, true)?;
        g = back(cfg.enc(s, 0), g, true)?;
    }
    Ok((grads, g))
}
