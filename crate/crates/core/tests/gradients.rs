use dwnet::field::Field;
use dwnet::gradcheck::{check_all, end_to_end, jitter, DEFAULT_FLOOR, DEFAULT_STEP, TOLERANCE};
use dwnet::potts::ModelKind;
use dwnet::unet::{build_unet, unet_backward, unet_forward, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(seed: u64, h: usize, w: usize, c: usize) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn unet_report(h: usize, seed: u64) -> dwnet::gradcheck::GradcheckReport {
    let cfg = UNetConfig::new(vec![2], 1, 1).unwrap();
    let mut params = build_unet(&cfg, seed).unwrap();
    jitter(&mut params, seed + 100, 0.1);
    let x = random_field(seed + 1, h, h, 1);
    let w = random_field(seed + 2, h, h, 1);
    let (_, tape) = unet_forward(&params, &x).unwrap();
    let (grad, _) = unet_backward(&params, &tape, &w).unwrap();
    check_all(&params, &grad, |p| unet_forward(p, &x)?.0.dot(&w), 1e-6, DEFAULT_FLOOR).unwrap()
}

#[test]
fn unet_gradients_match_finite_differences() {
    let report = unet_report(8, 11);
    assert_eq!(report.checked, 433);
    assert!(report.max_rel_err <= 1e-6, "{report:?}");
}

#[test]
fn unet_gradients_on_16x16() {
    let report = unet_report(16, 3);
    assert!(report.max_rel_err <= 1e-6, "{report:?}");
}

#[test]
fn dn1_gradients_match_finite_differences() {
    for seed in 0..3 {
        let r = end_to_end(ModelKind::Dn1, seed, DEFAULT_STEP, false).unwrap();
        assert!(r.max_rel_err <= TOLERANCE, "seed {seed}: {r:?}");
    }
}

#[test]
fn dn2_gradients_match_finite_differences() {
    for seed in 0..3 {
        let r = end_to_end(ModelKind::Dn2, seed, DEFAULT_STEP, false).unwrap();
        assert!(r.max_rel_err <= TOLERANCE, "seed {seed}: {r:?}");
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let r = end_to_end(ModelKind::Dn1, 0, DEFAULT_STEP, true).unwrap();
    assert!(r.max_rel_err > 1.0, "{r:?}");
    assert!(r.worst.starts_with("input."), "{r:?}");
}

#[test]
fn dn1_region_gradient_is_sum_of_block_contributions() {
    use dwnet::params::ParamSet;
    use dwnet::potts::{Model, Model::DnI};
    let mut model = Model::build(&dwnet::gradcheck::tiny_config(ModelKind::Dn1), 7).unwrap();
    jitter(&mut model, 8, 0.1);
    let f = random_field(9, 16, 16, 1).map(|v| 0.5 + 0.5 * v);
    let w = random_field(10, 16, 16, 1);
    let (_, tape) = model.forward(&f).unwrap();
    let detailed = model.backward_detailed(&tape, &w).unwrap();
    assert_eq!(detailed.force_grads.len(), 2);
    let (DnI(p), DnI(g)) = (&model, &detailed.params) else { panic!("dn1 expected") };
    let (_, region_tape) = unet_forward(&p.region_net, &f).unwrap();
    let mut sum = p.region_net.zeros_like();
    for fg in &detailed.force_grads {
        let (part, _) = unet_backward(&p.region_net, &region_tape, fg).unwrap();
        sum.add_scaled(&part, 1.0);
        assert!(part.flatten().iter().any(|v| v.abs() > 1e-8));
    }
    let diff = sum
        .flatten()
        .iter()
        .zip(g.region_net.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn gradients_hold_for_other_iteration_counts_and_proj() {
    use dwnet::doublewell::Activation;
    use dwnet::gradcheck::tiny_config;
    use dwnet::potts::Model;
    for kind in [ModelKind::Dn1, ModelKind::Dn2] {
        for (gamma, activation) in [(0, Activation::QgammaSig), (1, Activation::QgammaSig), (3, Activation::QgammaProj)] {
            let mut cfg = tiny_config(kind);
            cfg.scheme.gamma = gamma;
            cfg.scheme.activation = activation;
            let mut model = Model::build(&cfg, 21).unwrap();
            jitter(&mut model, 22, 0.1);
            let f = random_field(23, 16, 16, 1).map(|v| 0.5 + 0.5 * v);
            let w = random_field(24, 16, 16, 1);
            let (_, tape) = model.forward(&f).unwrap();
            let grad = model.backward(&tape, &w).unwrap();
            let r = check_all(&model, &grad, |m| m.predict(&f)?.dot(&w), DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
            assert!(r.max_rel_err <= TOLERANCE, "{kind} gamma {gamma} {activation:?}: {r:?}");
        }
    }
}
