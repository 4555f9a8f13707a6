//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::doublewell::DoubleWellParams;
use crate::error::Result;
use crate::field::Field;
use crate::params::ParamSet;
use crate::potts::{Model, ModelConfig, ModelKind};

/// Gradients smaller than this in magnitude are compared absolutely. Central
/// differences with a 1e-6 step carry about 1e-10 of rounding noise at unit
/// loss scale.
pub const DEFAULT_FLOOR: f64 = 1e-3;

/// Central-difference step used by the end-to-end check. Larger steps cross
/// ReLU kinks of the UNet operators.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Pass threshold of the end-to-end check.
pub const TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` in every entry
/// of `params`.
pub fn check_all<P, L>(params: &P, analytic: &P, loss: L, step: f64, floor: f64) -> Result<GradcheckReport>
where
    P: ParamSet + Clone,
    L: FnMut(&P) -> Result<f64>,
{
    let n = params.param_len();
    check_indices(params, analytic, loss, step, floor, 0..n)
}

/// As [`check_all`] but only for the given flat indices.
pub fn check_indices<P, L, I>(
    params: &P,
    analytic: &P,
    mut loss: L,
    step: f64,
    floor: f64,
    indices: I,
) -> Result<GradcheckReport>
where
    P: ParamSet + Clone,
    L: FnMut(&P) -> Result<f64>,
    I: IntoIterator<Item = usize>,
{
    let base = params.flatten();
    let grad = analytic.flatten();
    let manifest = params.manifest();
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut theta = base.clone();
    for i in indices {
        theta[i] = base[i] + step;
        probe.load_flat(&theta)?;
        let plus = loss(&probe)?;
        theta[i] = base[i] - step;
        probe.load_flat(&theta)?;
        let minus = loss(&probe)?;
        theta[i] = base[i];
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(grad[i], numeric, floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            let t = manifest
                .iter()
                .find(|t| i >= t.offset && i < t.offset + t.len)
                .expect("index lies in some tensor");
            report.max_rel_err = err;
            report.worst = format!("{}[{}]", t.name, i - t.offset);
            report.analytic = grad[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Adds uniform noise on `[-scale, scale]` to every entry, moving
/// zero-initialized biases off ReLU kinks.
pub fn jitter<P: ParamSet>(params: &mut P, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x += rng.gen_range(-scale..=scale)));
}

/// 16x16 single-channel images, `c = [2]`, two blocks.
pub fn tiny_config(kind: ModelKind) -> ModelConfig {
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

/// End-to-end check of `<pred, w>` for a seeded tiny model and image.
/// `corrupt` negates the analytic gradient of the input layer.
pub fn end_to_end(kind: ModelKind, seed: u64, step: f64, corrupt: bool) -> Result<GradcheckReport> {
    let mut model = Model::build(&tiny_config(kind), seed)?;
    jitter(&mut model, seed ^ 0x5eed, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let f = Field::from_fn(16, 16, 1, |_, _, _| rng.gen_range(0.0..1.0));
    let w = Field::from_fn(16, 16, 1, |_, _, _| rng.gen_range(-1.0..1.0));
    let (_, tape) = model.forward(&f)?;
    let mut grad = model.backward(&tape, &w)?;
    if corrupt {
        let mut first = true;
        grad.visit_mut(&mut |_, v| {
            if first {
                v.iter_mut().for_each(|x| *x = -*x);
                first = false;
            }
        });
    }
    check_all(&model, &grad, |m| m.predict(&f)?.dot(&w), step, DEFAULT_FLOOR)
}
