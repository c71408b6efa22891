mod support;

use alone::trainer::{
    adam_step, backward, forward_batch, full_loss, Gradients, TrainerConfig, TrainerState,
};
use alone::{AloneModel, FilterBank, FilterConfig, FilterKind};
use ndarray::{array, Array1};
use support::*;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut worst_overall = 0.0f64;
    for seed in 0..40 {
        for kind in [FilterKind::BinaryMask, FilterKind::RealVector] {
            for train_base in [true, false] {
                let inst = kink_safe_instance(seed, kind, train_base, 1e-3);
                let (worst, checked) = gradient_check(&inst, 1e-6, GRAD_FLOOR);
                assert!(checked > 0);
                assert!(worst <= 1e-5, "seed {seed} {kind:?} train_base={train_base}: {worst}");
                worst_overall = worst_overall.max(worst);
            }
        }
    }
    println!("worst relative error {worst_overall:e}");
}

#[test]
fn gradient_check_sees_a_wrong_gradient() {
    // The harness must be able to fail: perturb one analytic coordinate.
    let inst = kink_safe_instance(3, FilterKind::RealVector, true, 1e-3);
    let g = analytic_gradients(&inst);
    let n = numeric_gradient(&inst, Tensor::W2, 0, 1e-6);
    assert!(relative_error(g.w2.as_slice().unwrap()[0] * 1.001 + 1e-3, n, 1e-8) > 1e-5);
}

#[test]
fn dropout_gradients_match_with_fixed_mask() {
    // With a fixed dropout mask the loss is smooth in the parameters; verify
    // the masked backward against differences of the masked batch loss.
    let inst = kink_safe_instance(11, FilterKind::RealVector, true, 1e-3);
    let mut rng = alone::SeededRng::new(5);
    let cache = forward_batch(&inst.model, &inst.bank, &inst.batch, 0.4, Some(&mut rng)).unwrap();
    let g = backward(&inst.model, &inst.bank, &inst.targets, &inst.batch, &cache).unwrap();
    let mask = cache.dropout.clone().unwrap();
    let masked_loss = |model: &AloneModel| {
        let c = forward_batch(model, &inst.bank, &inst.batch, 0.0, None).unwrap();
        let h = c.pre.mapv(|p| p.max(0.0)) * &mask;
        let y = h.dot(&model.w2().t());
        let e = inst.targets.matrix().select(ndarray::Axis(0), &inst.batch);
        (&y - &e).mapv(|d| d * d).sum() / inst.batch.len() as f64
    };
    for i in 0..inst.model.w1().len() {
        let eval = |delta: f64| {
            let mut m = inst.model.clone();
            m.params_mut().1.as_slice_mut().unwrap()[i] += delta;
            masked_loss(&m)
        };
        let n = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        let a = g.w1.as_slice().unwrap()[i];
        assert!(relative_error(a, n, GRAD_FLOOR) <= 1e-5, "W1[{i}]: {a} vs {n}");
    }
}

#[test]
fn small_step_gradient_descent_never_increases_loss() {
    for seed in 0..5 {
        let inst = kink_safe_instance(100 + seed, FilterKind::BinaryMask, true, 1e-3);
        let mut model = inst.model.clone();
        let all: Vec<usize> = (0..inst.targets.len()).collect();
        let mut prev = full_loss(&model, &inst.bank, &inst.targets).unwrap();
        for _ in 0..100 {
            let cache = forward_batch(&model, &inst.bank, &all, 0.0, None).unwrap();
            let g = backward(&model, &inst.bank, &inst.targets, &all, &cache).unwrap();
            let (base, w1, w2) = model.params_mut();
            w1.scaled_add(-1e-4, &g.w1);
            w2.scaled_add(-1e-4, &g.w2);
            base.scaled_add(-1e-4, g.base.as_ref().unwrap());
            let loss = full_loss(&model, &inst.bank, &inst.targets).unwrap();
            assert!(loss <= prev + 1e-15 * prev, "seed {seed}: {prev} -> {loss}");
            prev = loss;
        }
    }
}

/// Reference Adam in the arrangement PyTorch documents:
/// `p -= (lr / bc1) * m / (sqrt(v) / sqrt(bc2) + eps)`.
fn reference_adam(grad: impl Fn(&[f64; 2]) -> [f64; 2], steps: usize) -> Vec<[f64; 2]> {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let mut p = [0.3, -0.7];
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let mut trace = Vec::new();
    for t in 1..=steps {
        let g = grad(&p);
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let bc1 = 1.0 - f64::powi(b1, t as i32);
            let bc2 = 1.0 - f64::powi(b2, t as i32);
            let denom = v[i].sqrt() / bc2.sqrt() + eps;
            p[i] -= (lr / bc1) * m[i] / denom;
        }
        trace.push(p);
    }
    trace
}

#[test]
fn adam_matches_reference_trace_on_quadratic() {
    // f(a, b) = 3 (a − 1)² + 0.5 (b + 2)², with a = W1[0,0] and b = W2[0,0].
    let grad = |p: &[f64; 2]| [6.0 * (p[0] - 1.0), p[1] + 2.0];
    let cfg = FilterConfig {
        d_o: 1,
        c: 1,
        m: 1,
        kind: FilterKind::RealVector,
        p_o: 0.5,
        seed: 0,
    };
    let _bank = FilterBank::from_parts(cfg, vec![1.0], vec![0]).unwrap();
    let mut model =
        AloneModel::from_parts(array![1.0], array![[0.3]], array![[-0.7]], cfg, vocab(1), false).unwrap();
    let mut state = TrainerState::new(&model);
    let tc = TrainerConfig::default();
    let expected = reference_adam(grad, 10);
    for step in expected {
        let p = [model.w1()[[0, 0]], model.w2()[[0, 0]]];
        let g = grad(&p);
        let grads = Gradients {
            w1: array![[g[0]]],
            w2: array![[g[1]]],
            base: None,
        };
        adam_step(&mut state, &mut model, &grads, &tc).unwrap();
        let got = [model.w1()[[0, 0]], model.w2()[[0, 0]]];
        for i in 0..2 {
            assert!(((got[i] - step[i]) / step[i]).abs() <= 1e-12, "{got:?} vs {step:?}");
        }
    }
    assert_eq!(state.step, 10);
    assert_eq!(model.base(), &Array1::from(vec![1.0]));
}

