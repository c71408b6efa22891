//! Shared fixtures and oracles for the integration tests.

#![allow(dead_code)]

use alone::trainer::{backward, forward_batch, reconstruction_loss, Gradients};
use alone::{
    build_filter_bank, AloneModel, FilterBank, FilterConfig, FilterKind, SeededRng,
    TargetEmbeddingTable,
};
use ndarray::Array2;

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Targets with iid standard-normal entries.
pub fn gaussian_targets(v: usize, d_e: usize, seed: u64) -> TargetEmbeddingTable {
    let mut rng = SeededRng::new(seed);
    let e = Array2::from_shape_fn((v, d_e), |_| rng.standard_normal());
    TargetEmbeddingTable::new(vocab(v), e).unwrap()
}

pub struct Instance {
    pub model: AloneModel,
    pub bank: FilterBank,
    pub targets: TargetEmbeddingTable,
    pub batch: Vec<usize>,
}

/// A small random instance whose pre-activations all sit at least `margin`
/// away from the ReLU kink. Draws are redone until that holds.
pub fn kink_safe_instance(seed: u64, kind: FilterKind, train_base: bool, margin: f64) -> Instance {
    let mut rng = SeededRng::new(seed);
    loop {
        let d_o = 1 + rng.index(8);
        let d_inter = 1 + rng.index(8);
        let d_e = 1 + rng.index(8);
        let v = 3 + rng.index(10);
        let cfg = FilterConfig {
            d_o,
            c: 2 + rng.index(4),
            m: 1 + rng.index(4),
            kind,
            p_o: 0.3,
            seed: rng.next_u64(),
        };
        let bank = build_filter_bank(cfg, v).unwrap();
        let model = AloneModel::new(cfg, vocab(v), d_inter, d_e, rng.next_u64(), train_base).unwrap();
        let targets = gaussian_targets(v, d_e, rng.next_u64());
        let batch: Vec<usize> = (0..1 + rng.index(6)).map(|_| rng.index(v)).collect();
        let cache = forward_batch(&model, &bank, &batch, 0.0, None).unwrap();
        if cache.pre.iter().all(|p| p.abs() >= margin) {
            return Instance {
                model,
                bank,
                targets,
                batch,
            };
        }
    }
}

pub fn analytic_gradients(inst: &Instance) -> Gradients {
    let cache = forward_batch(&inst.model, &inst.bank, &inst.batch, 0.0, None).unwrap();
    backward(&inst.model, &inst.bank, &inst.targets, &inst.batch, &cache).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tensor {
    Base,
    W1,
    W2,
}

fn loss_with(inst: &Instance, tensor: Tensor, element: usize, delta: f64) -> f64 {
    let mut model = inst.model.clone();
    {
        let (base, w1, w2) = model.params_mut();
        match tensor {
            Tensor::Base => base[element] += delta,
            Tensor::W1 => w1.as_slice_mut().unwrap()[element] += delta,
            Tensor::W2 => w2.as_slice_mut().unwrap()[element] += delta,
        }
    }
    reconstruction_loss(&model, &inst.bank, &inst.targets, &inst.batch).unwrap()
}

/// Central difference `(L(θ+h) − L(θ−h)) / 2h` of the per-word loss path.
pub fn numeric_gradient(inst: &Instance, tensor: Tensor, element: usize, step: f64) -> f64 {
    (loss_with(inst, tensor, element, step) - loss_with(inst, tensor, element, -step)) / (2.0 * step)
}

/// Denominator floor for gradient relative errors. A central difference with
/// step 1e-6 on an O(1) loss carries ~1e-10 of rounding noise, so relative
/// accuracy of 1e-5 is only resolvable for gradients of magnitude ~1e-4 and up.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error over every trainable coordinate of the instance.
/// Returns `(worst, coordinates checked)`.
pub fn gradient_check(inst: &Instance, step: f64, floor: f64) -> (f64, usize) {
    let g = analytic_gradients(inst);
    assert_eq!(g.base.is_some(), inst.model.train_base());
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut check = |tensor: Tensor, values: &[f64]| {
        for (i, &a) in values.iter().enumerate() {
            let n = numeric_gradient(inst, tensor, i, step);
            worst = worst.max(relative_error(a, n, floor));
            checked += 1;
        }
    };
    check(Tensor::W2, g.w2.as_slice().unwrap());
    check(Tensor::W1, g.w1.as_slice().unwrap());
    if let Some(b) = &g.base {
        check(Tensor::Base, b.as_slice().unwrap());
    }
    (worst, checked)
}

/// Prints one line per acceptance criterion and fails the test on a miss.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "[criterion {id}] {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}
