//! Double-well potential, Ginzburg-Landau energies, and the fixed-point
//! activation family used after every splitting step.
//!
//! The nonlinear substep minimizes, pointwise,
//! `1/2 (v - u_half)^2 + (alpha/2) v^2 (1 - v)^2`, whose optimality condition
//! `(1 + alpha) v - u_half + alpha (2v^3 - 3v^2) = 0` is solved by a few
//! iterations of the map `v <- (u_half - alpha (2v^3 - 3v^2)) / (1 + alpha)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

/// Which squashing map precedes the fixed-point iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `Q_gamma(sigmoid(a))`
    #[default]
    QgammaSig,
    /// `Q_gamma(clamp(a, 0, 1))`
    QgammaProj,
}

/// Time step, diffusion and fixed-point settings of one splitting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWellParams {
    pub tau: f64,
    /// The product `lambda * eps`, i.e. the diffusion coefficient.
    pub lambda_eps: f64,
    /// `2 tau lambda / eps`
    pub alpha: f64,
    pub gamma: u32,
    pub activation: Activation,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda_eps: 1.0,
            alpha: 15.0,
            gamma: 3,
            activation: Activation::QgammaSig,
        }
    }
}

impl DoubleWellParams {
    pub fn new(tau: f64, lambda_eps: f64, alpha: f64, gamma: u32, activation: Activation) -> Result<Self> {
        let p = Self {
            tau,
            lambda_eps,
            alpha,
            gamma,
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_eps >= 0.0) || !self.lambda_eps.is_finite() {
            return Err(Error::Config(format!(
                "lambda_eps must be non-negative, got {}",
                self.lambda_eps
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Recovers `(lambda, eps)` from `lambda*eps` and `alpha = 2 tau lambda / eps`.
    /// Only meaningful when both are positive.
    pub fn lambda_and_eps(&self) -> Result<(f64, f64)> {
        if !(self.lambda_eps > 0.0 && self.alpha > 0.0) {
            return Err(Error::Config(
                "lambda and eps are only defined when lambda_eps > 0 and alpha > 0".into(),
            ));
        }
        let ratio = self.alpha / (2.0 * self.tau);
        Ok(((self.lambda_eps * ratio).sqrt(), (self.lambda_eps / ratio).sqrt()))
    }
}

/// Terms of the relaxed Potts energy `sum F u + lambda L_eps(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyReport {
    pub region_term: f64,
    /// `lambda * (eps/2) * sum |grad u|^2 h^2`
    pub gl_gradient_term: f64,
    /// `lambda * (1/eps) * sum W(u) h^2`
    pub double_well_term: f64,
    pub total: f64,
}

/// `v^2 (1 - v)^2`
#[inline]
pub fn double_well(v: f64) -> f64 {
    let w = v * (1.0 - v);
    w * w
}

fn gradient_sq_sum(u: &Field, h: f64) -> f64 {
    let (rows, cols, _) = u.shape();
    let d = u.data();
    let mut s = 0.0;
    for y in 0..rows {
        let yn = (y + 1) % rows;
        for x in 0..cols {
            let xn = (x + 1) % cols;
            let c = d[y * cols + x];
            let gx = (d[y * cols + xn] - c) / h;
            let gy = (d[yn * cols + x] - c) / h;
            s += gx * gx + gy * gy;
        }
    }
    s
}

fn check_eps_h(eps: f64, h: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("grid spacing must be positive, got {h}")));
    }
    Ok(())
}

/// Discrete Ginzburg-Landau functional with periodic forward differences:
/// `(eps/2) sum |grad u|^2 h^2 + (1/eps) sum u^2 (1-u)^2 h^2`.
pub fn gl_energy(u: &Field, eps: f64, h: f64) -> Result<f64> {
    u.expect_single_channel("gl_energy")?;
    check_eps_h(eps, h)?;
    let area = h * h;
    let grad = gradient_sq_sum(u, h);
    let well: f64 = u.data().iter().map(|&v| double_well(v)).sum();
    Ok(0.5 * eps * grad * area + well * area / eps)
}

/// Relaxed Potts energy on a unit-spaced grid.
pub fn potts_relaxed_energy(u: &Field, force: &Field, lambda: f64, eps: f64) -> Result<EnergyReport> {
    u.expect_single_channel("potts_relaxed_energy")?;
    u.expect_same_shape(force, "potts_relaxed_energy")?;
    check_eps_h(eps, 1.0)?;
    let region_term = u.dot(force)?;
    let gl_gradient_term = lambda * 0.5 * eps * gradient_sq_sum(u, 1.0);
    let double_well_term = lambda * u.data().iter().map(|&v| double_well(v)).sum::<f64>() / eps;
    Ok(EnergyReport {
        region_term,
        gl_gradient_term,
        double_well_term,
        total: region_term + gl_gradient_term + double_well_term,
    })
}

/// One iteration of the backward-Euler fixed-point map.
#[inline]
pub fn fixed_point_step(v: f64, u_half: f64, alpha: f64) -> f64 {
    (u_half - alpha * (2.0 * v * v * v - 3.0 * v * v)) / (1.0 + alpha)
}

/// `gamma` fixed-point iterations started from `v = u_half`.
#[inline]
pub fn q_gamma_scalar(u_half: f64, alpha: f64, gamma: u32) -> f64 {
    let mut v = u_half;
    for _ in 0..gamma {
        v = fixed_point_step(v, u_half, alpha);
    }
    v
}

/// `Q_gamma` applied pointwise.
pub fn q_gamma(u_half: &Field, alpha: f64, gamma: u32) -> Field {
    u_half.map(|a| q_gamma_scalar(a, alpha, gamma))
}

/// `(Q_gamma(a), dQ_gamma/da)` by forward-mode differentiation of the iteration.
#[inline]
pub fn q_gamma_with_derivative(u_half: f64, alpha: f64, gamma: u32) -> (f64, f64) {
    let inv = 1.0 / (1.0 + alpha);
    let mut v = u_half;
    let mut dv = 1.0;
    for _ in 0..gamma {
        // d/dv of the map is -alpha (6v^2 - 6v) / (1 + alpha)
        let dmap_dv = -alpha * (6.0 * v * v - 6.0 * v) * inv;
        dv = inv + dmap_dv * dv;
        v = fixed_point_step(v, u_half, alpha);
    }
    (v, dv)
}

/// Iterates the fixed-point map until successive iterates differ by less
/// than `tol`. Returns `None` if `max_iter` is exhausted first.
pub fn converge_fixed_point(u_half: f64, alpha: f64, tol: f64, max_iter: usize) -> Option<f64> {
    let mut v = u_half;
    for _ in 0..max_iter {
        let next = fixed_point_step(v, u_half, alpha);
        if !next.is_finite() {
            return None;
        }
        if (next - v).abs() < tol {
            return Some(next);
        }
        v = next;
    }
    None
}

/// Clamp to `[0, 1]`; identical to `ReLU(1 - ReLU(1 - a))`.
#[inline]
pub fn proj01(a: f64) -> f64 {
    a.clamp(0.0, 1.0)
}

/// Logistic function, evaluated without overflow for large `|a|`.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn squash(a: f64, kind: Activation) -> (f64, f64) {
    match kind {
        Activation::QgammaSig => {
            let s = sigmoid(a);
            (s, s * (1.0 - s))
        }
        Activation::QgammaProj => {
            let d = if a > 0.0 && a < 1.0 { 1.0 } else { 0.0 };
            (proj01(a), d)
        }
    }
}

/// Pointwise `Q_gamma(Sig(a))` or `Q_gamma(Proj(a))`.
pub fn activate(u_half: &Field, params: &DoubleWellParams) -> Field {
    activate_with(u_half, params.activation, params.alpha, params.gamma)
}

pub(crate) fn activate_with(u_half: &Field, kind: Activation, alpha: f64, gamma: u32) -> Field {
    u_half.map(|a| q_gamma_scalar(squash(a, kind).0, alpha, gamma))
}

/// Pullback of `upstream` through [`activate`] at `u_half`.
pub fn activate_adjoint(upstream: &Field, u_half: &Field, params: &DoubleWellParams) -> Result<Field> {
    activate_adjoint_with(upstream, u_half, params.activation, params.alpha, params.gamma)
}

pub(crate) fn activate_adjoint_with(
    upstream: &Field,
    u_half: &Field,
    kind: Activation,
    alpha: f64,
    gamma: u32,
) -> Result<Field> {
    upstream.zip_map(u_half, |g, a| {
        let (s, ds) = squash(a, kind);
        if ds == 0.0 {
            return 0.0;
        }
        let (_, dq) = q_gamma_with_derivative(s, alpha, gamma);
        g * dq * ds
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn relu(a: f64) -> f64 {
        a.max(0.0)
    }

    #[test]
    fn double_well_values() {
        assert_eq!(double_well(0.0), 0.0);
        assert_eq!(double_well(1.0), 0.0);
        assert_eq!(double_well(0.5), 0.0625);
        for v in [-1.3, 0.1, 0.25, 0.7, 2.0] {
            assert!((double_well(v) - double_well(1.0 - v)).abs() <= 1e-12 * double_well(v).max(1.0));
        }
    }

    #[test]
    fn gl_energy_examples() {
        assert_eq!(gl_energy(&Field::filled(5, 7, 1, 1.0), 0.3, 1.0).unwrap(), 0.0);
        let e = gl_energy(&Field::filled(6, 4, 1, 0.5), 1.0, 1.0).unwrap();
        assert!((e - 24.0 * 0.0625).abs() < 1e-12);

        let u = Field::from_fn(6, 5, 1, |y, x, _| ((y * 7 + x * 3) % 5) as f64 / 4.0);
        let flipped = u.map(|v| 1.0 - v);
        let a = gl_energy(&u, 0.4, 1.0).unwrap();
        let b = gl_energy(&flipped, 0.4, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);

        assert!(matches!(gl_energy(&Field::zeros(3, 3, 2), 1.0, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn potts_energy_examples() {
        let zero = potts_relaxed_energy(&Field::filled(4, 4, 1, 1.0), &Field::zeros(4, 4, 1), 2.0, 0.5)
            .unwrap();
        assert_eq!(zero.total, 0.0);
        let r = potts_relaxed_energy(&Field::filled(3, 5, 1, 1.0), &Field::filled(3, 5, 1, 1.0), 2.0, 0.5)
            .unwrap();
        assert_eq!(r.region_term, 15.0);
        assert!(potts_relaxed_energy(&Field::zeros(3, 3, 1), &Field::zeros(3, 4, 1), 1.0, 1.0).is_err());
    }

    #[test]
    fn potts_energy_matches_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u = Field::from_fn(8, 8, 1, |_, _, _| rng.gen_range(0.0..1.0));
        let f = Field::from_fn(8, 8, 1, |_, _, _| rng.gen_range(-1.0..1.0));
        let (lambda, eps) = (1.7, 0.3);
        let mut region = 0.0;
        let mut grad = 0.0;
        let mut well = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let c = u.get(y, x, 0);
                region += f.get(y, x, 0) * c;
                let dx = u.get(y, (x + 1) % 8, 0) - c;
                let dy = u.get((y + 1) % 8, x, 0) - c;
                grad += dx * dx + dy * dy;
                well += c * c * (1.0 - c) * (1.0 - c);
            }
        }
        let expected = region + lambda * (eps / 2.0 * grad + well / eps);
        let r = potts_relaxed_energy(&u, &f, lambda, eps).unwrap();
        assert!((r.total - expected).abs() < 1e-12);
        assert!((r.region_term - region).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_step_examples() {
        for alpha in [0.0, 1.0, 15.0, 100.0] {
            assert_eq!(fixed_point_step(0.5, 0.5, alpha), 0.5);
            assert_eq!(fixed_point_step(0.0, 0.0, alpha), 0.0);
            assert_eq!(fixed_point_step(1.0, 1.0, alpha), 1.0);
        }
        // (0.8 + 15 * 0.896) / 16
        assert!((fixed_point_step(0.8, 0.8, 15.0) - 0.89).abs() < 1e-12);
    }

    #[test]
    fn q_gamma_examples() {
        let f = Field::from_vec(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        for gamma in [0, 1, 3, 10] {
            for alpha in [0.5, 15.0] {
                assert_eq!(q_gamma(&f, alpha, gamma), f);
            }
        }
        assert!((q_gamma_scalar(0.8, 15.0, 1) - 0.89).abs() < 1e-12);
        assert_eq!(q_gamma_scalar(0.37, 15.0, 0), 0.37);
    }

    #[test]
    fn proj_and_sigmoid() {
        assert_eq!(proj01(-0.3), 0.0);
        assert_eq!(proj01(1.7), 1.0);
        assert_eq!(proj01(0.4), 0.4);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn activate_examples() {
        let mut p = DoubleWellParams {
            activation: Activation::QgammaProj,
            ..Default::default()
        };
        assert!(activate(&Field::filled(3, 3, 1, 0.5), &p).data().iter().all(|&v| v == 0.5));
        p.activation = Activation::QgammaSig;
        assert!(activate(&Field::zeros(3, 3, 1), &p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn activate_adjoint_examples() {
        let mut p = DoubleWellParams {
            activation: Activation::QgammaProj,
            ..Default::default()
        };
        let one = Field::filled(1, 1, 1, 1.0);
        let g = activate_adjoint(&one, &Field::filled(1, 1, 1, -5.0), &p).unwrap();
        assert_eq!(g.data()[0], 0.0);
        for edge in [0.0, 1.0] {
            let g = activate_adjoint(&one, &Field::filled(1, 1, 1, edge), &p).unwrap();
            assert_eq!(g.data()[0], 0.0);
        }
        p.activation = Activation::QgammaSig;
        p.gamma = 0;
        let g = activate_adjoint(&one, &Field::zeros(1, 1, 1), &p).unwrap();
        assert_eq!(g.data()[0], 0.25);
    }

    #[test]
    fn activate_adjoint_matches_finite_differences() {
        let points = [-2.3, -0.4, 0.05, 0.2, 0.33, 0.61, 0.77, 0.93, 1.4, 3.0];
        for kind in [Activation::QgammaSig, Activation::QgammaProj] {
            for gamma in [0, 1, 3] {
                let p = DoubleWellParams {
                    activation: kind,
                    gamma,
                    ..Default::default()
                };
                let u = Field::from_vec(1, points.len(), 1, points.to_vec()).unwrap();
                let g = activate_adjoint(&Field::filled(1, points.len(), 1, 1.0), &u, &p).unwrap();
                let step = 1e-6;
                for (i, &a) in points.iter().enumerate() {
                    if kind == Activation::QgammaProj && !(a > step && a < 1.0 - step) {
                        continue;
                    }
                    let f = |a: f64| activate(&Field::filled(1, 1, 1, a), &p).data()[0];
                    let fd = (f(a + step) - f(a - step)) / (2.0 * step);
                    let an = g.data()[i];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel <= 1e-6, "{kind:?} gamma {gamma} at {a}: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn lambda_eps_recovery() {
        let p = DoubleWellParams::default();
        let (l, e) = p.lambda_and_eps().unwrap();
        assert!((l * e - 1.0).abs() < 1e-12);
        assert!((2.0 * p.tau * l / e - 15.0).abs() < 1e-12);
    }

    #[test]
    fn params_validation() {
        assert!(DoubleWellParams::new(0.0, 1.0, 15.0, 3, Activation::QgammaSig).is_err());
        assert!(DoubleWellParams::new(0.2, -1.0, 15.0, 3, Activation::QgammaSig).is_err());
        assert!(DoubleWellParams::new(0.2, 1.0, -0.1, 3, Activation::QgammaSig).is_err());
        assert!(DoubleWellParams::new(0.2, 0.0, 0.0, 0, Activation::QgammaProj).is_ok());
    }

    proptest! {
        #[test]
        fn proj_is_two_layer_relu(a in -10.0f64..10.0) {
            prop_assert!((proj01(a) - relu(1.0 - relu(1.0 - a))).abs() <= 1e-15);
        }

        #[test]
        fn sigmoid_symmetry(a in -50.0f64..50.0) {
            prop_assert!((sigmoid(-a) - (1.0 - sigmoid(a))).abs() < 1e-15);
        }

        #[test]
        fn q_gamma_symmetry(u in 0.0f64..1.0, alpha in 0.0f64..30.0, gamma in 0u32..8) {
            let a = q_gamma_scalar(1.0 - u, alpha, gamma);
            let b = 1.0 - q_gamma_scalar(u, alpha, gamma);
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn q_gamma_proj_stays_in_unit_interval(a in -1e3f64..1e3, alpha in 0.0f64..50.0, gamma in 0u32..10) {
            let p = DoubleWellParams { alpha, gamma, activation: Activation::QgammaProj, ..Default::default() };
            let v = activate(&Field::filled(1, 1, 1, a), &p).data()[0];
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn one_iteration_drifts_toward_the_nearer_well(u in 0.001f64..0.999, alpha in 0.1f64..30.0) {
            prop_assume!((u - 0.5).abs() > 1e-3);
            let v = q_gamma_scalar(u, alpha, 1);
            if u < 0.5 {
                prop_assert!(v < u);
            } else {
                prop_assert!(v > u);
            }
        }

        #[test]
        fn converged_point_solves_the_proximal_problem(u in 0.0f64..=1.0) {
            let alpha = 15.0;
            let v = converge_fixed_point(u, alpha, 1e-12, 1_000_000).expect("converges");
            let residual = (1.0 + alpha) * v - u + alpha * (2.0 * v * v * v - 3.0 * v * v);
            prop_assert!(residual.abs() <= 1e-10);
            let objective = 0.5 * (v - u).powi(2) + 0.5 * alpha * double_well(v);
            prop_assert!(objective <= 0.5 * alpha * double_well(u) + 1e-12);
        }
    }
}
