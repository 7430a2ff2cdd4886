//! Finite-difference checks of every hand-written backward pass, reusable
//! from tests and from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::{
    cosine_backward, cosine_forward, grad_check, linear_backward, linear_forward, masked_softmax, norm, relu_backward,
    relu_forward, softmax_backward, GradCheckReport, Matrix, Param,
};
use crate::model::{pair_backward, pair_loss, LossConfig, NamModel, PairExample, Partition, Phase, sns_loss_grad};
use crate::views::{Catalog, DenseVector, DirectViewTable, ItemIdx, ViewId, ViewKind, ViewRegistry};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// A registry of `items` items with one random view per entry of `dims`.
/// View 0 is a CF view and omits the items listed in `cold`; the others are
/// dense views.
pub fn random_registry<R: Rng>(rng: &mut R, dims: &[usize], items: usize, cold: &[usize]) -> ViewRegistry {
    let ids: Vec<String> = (0..items).map(|k| k.to_string()).collect();
    let tables = dims
        .iter()
        .enumerate()
        .map(|(h, &d)| {
            let kind = if h == 0 { ViewKind::Cf } else { ViewKind::Dense };
            let mut t = DirectViewTable::new(ViewId::new(format!("v{h}"), kind), d);
            for (k, id) in ids.iter().enumerate() {
                if h == 0 && cold.contains(&k) {
                    continue;
                }
                let v = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                t.insert(id.clone(), DenseVector::new(v).expect("finite")).expect("fresh id");
            }
            t
        })
        .collect();
    ViewRegistry::new(Catalog::new(ids), tables).expect("consistent by construction")
}

/// Randomizes `w`, `b` and the temperatures so their gradients are generic.
pub fn randomize_scalars<R: Rng>(model: &mut NamModel, rng: &mut R) {
    for t in &mut model.towers {
        t.scale = Param::scalar(rng.gen_range(0.5..2.0));
        t.offset = Param::scalar(rng.gen_range(-0.5..0.5));
        t.temperature = Param::scalar(rng.gen_range(0.5..2.0));
    }
}

/// False when finite differences around the model would cross a ReLU kink or
/// hit a near-zero embedding, where the loss is not differentiable.
pub fn is_smooth_at(model: &NamModel, registry: &ViewRegistry, items: &[ItemIdx], margin: f64) -> bool {
    items.iter().all(|&item| {
        (0..model.num_views()).all(|h| {
            let Some(x) = registry.vector(h, item) else {
                return true;
            };
            let tower = &model.towers[h];
            let kinks = [&tower.context, &tower.target]
                .iter()
                .all(|e| e.kink_margin(x.as_slice()).is_ok_and(|m| m > margin));
            let norms = [
                model.embed_context(h, x.as_slice()),
                model.embed_target(h, x.as_slice()),
                model.embed_attention(h, x.as_slice()),
            ]
            .iter()
            .all(|v| v.as_ref().is_ok_and(|v| norm(v) > margin));
            kinks && norms
        })
    })
}

/// Analytic gradient of one example's loss against central differences over
/// every parameter. `corrupt` scales the analytic gradient, which a correct
/// checker must catch.
pub fn check_example(
    model: &NamModel,
    registry: &ViewRegistry,
    example: &PairExample,
    phase: Phase,
    config: &LossConfig,
    corrupt: Option<f64>,
) -> GradCheckReport {
    let enabled = vec![true; registry.num_views()];
    let mut with_grads = model.clone();
    with_grads.zero_grad();
    pair_backward(&mut with_grads, registry, example, phase, config, &enabled, 1.0).expect("valid example");
    let mut analytic = with_grads.flat_grads();
    if let Some(f) = corrupt {
        analytic.iter_mut().for_each(|g| *g *= f);
    }
    let mut probe = model.clone();
    grad_check(
        |p| {
            probe.set_flat_params(p);
            pair_loss(&probe, registry, example, phase, config, &enabled).expect("valid example")
        },
        &model.flat_params(),
        &analytic,
        FD_STEP,
        FD_TOLERANCE,
    )
}

/// One random smooth configuration with three views (`z_h ∈ {3, 5}`),
/// `z_t = z_a = 4` and two negatives, as `(model, registry, example)`.
pub fn random_gradient_case(seed: u64, cold_cf: bool) -> (NamModel, ViewRegistry, PairExample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let dims: Vec<usize> = (0..3).map(|_| if rng.gen_bool(0.5) { 3 } else { 5 }).collect();
        let cold: Vec<usize> = if cold_cf { vec![rng.gen_range(0..4)] } else { vec![] };
        let registry = random_registry(&mut rng, &dims, 6, &cold);
        let mut model = NamModel::new(&registry, 4, 4, rng.gen()).expect("valid sizes");
        randomize_scalars(&mut model, &mut rng);
        let example = PairExample {
            context: ItemIdx(0),
            target: ItemIdx(1),
            negatives: vec![ItemIdx(2), ItemIdx(3)],
        };
        let items = [ItemIdx(0), ItemIdx(1), ItemIdx(2), ItemIdx(3)];
        if is_smooth_at(&model, &registry, &items, 1e-2) {
            return (model, registry, example);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTestOptions {
    pub seed: u64,
    pub cases: usize,
    /// Scale analytic gradients by this factor before comparing.
    pub corrupt_backward: Option<f64>,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        SelfTestOptions {
            seed: 0,
            cases: 20,
            corrupt_backward: None,
        }
    }
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn run_op<F>(name: &'static str, cases: usize, mut one: F) -> OpCheck
where
    F: FnMut(usize) -> GradCheckReport,
{
    let mut max = 0.0f64;
    let mut passed = true;
    for k in 0..cases {
        let r = one(k);
        max = max.max(r.max_rel_error);
        passed &= r.passed();
    }
    OpCheck {
        name,
        cases,
        max_rel_error: max,
        passed,
    }
}

/// Gradient checks of each primitive and of the full phase-one and phase-two
/// losses, plus the attention simplex invariant.
pub fn selftest(options: &SelfTestOptions) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let c = options.corrupt_backward.unwrap_or(1.0);
    let scaled = |v: Vec<f64>| v.into_iter().map(|g| g * c).collect::<Vec<_>>();
    let n = options.cases;
    let mut out = Vec::new();

    out.push(run_op("linear", n, |_| {
        let (rows, cols) = (3, 4);
        let w = Matrix::from_vec(rows, cols, random_vec(&mut rng, rows * cols)).expect("sized");
        let b = random_vec(&mut rng, rows);
        let x = random_vec(&mut rng, cols);
        let up = random_vec(&mut rng, rows);
        let (dw, db, dx) = linear_backward(&w, &b, &x, &up).expect("sized");
        let point: Vec<f64> = w.as_slice().iter().chain(&b).chain(&x).copied().collect();
        let analytic: Vec<f64> = dw.as_slice().iter().chain(&db).chain(&dx).copied().collect();
        grad_check(
            |p| {
                let w = Matrix::from_vec(rows, cols, p[..rows * cols].to_vec()).expect("sized");
                let y = linear_forward(&w, &p[rows * cols..rows * cols + rows], &p[rows * cols + rows..]).expect("sized");
                y.iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            &point,
            &scaled(analytic),
            FD_STEP,
            FD_TOLERANCE,
        )
    }));

    out.push(run_op("relu", n, |_| {
        let x: Vec<f64> = random_vec(&mut rng, 6)
            .into_iter()
            .map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v })
            .collect();
        let up = random_vec(&mut rng, 6);
        let analytic = relu_backward(&x, &up);
        grad_check(
            |p| relu_forward(p).iter().zip(&up).map(|(a, b)| a * b).sum(),
            &x,
            &scaled(analytic),
            FD_STEP,
            FD_TOLERANCE,
        )
    }));

    out.push(run_op("cosine", n, |_| {
        let u = random_vec(&mut rng, 5);
        let v = random_vec(&mut rng, 5);
        let (du, dv) = cosine_backward(&u, &v, 1.0).expect("sized");
        let point: Vec<f64> = u.iter().chain(&v).copied().collect();
        grad_check(
            |p| cosine_forward(&p[..5], &p[5..]).expect("sized"),
            &point,
            &scaled(du.into_iter().chain(dv).collect()),
            FD_STEP,
            FD_TOLERANCE,
        )
    }));

    out.push(run_op("masked_softmax", n, |_| {
        let logits = random_vec(&mut rng, 4);
        let mut mask: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let up = random_vec(&mut rng, 4);
        let probs = masked_softmax(&logits, &mask).expect("one view active");
        let analytic = softmax_backward(&probs, &up);
        grad_check(
            |p| {
                masked_softmax(p, &mask)
                    .expect("one view active")
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &logits,
            &scaled(analytic),
            FD_STEP,
            FD_TOLERANCE,
        )
    }));

    out.push(run_op("sns_loss", n, |k| {
        let partition = if k % 2 == 0 { Partition::NegativesOnly } else { Partition::WithPositive };
        let scores = random_vec(&mut rng, 4);
        let (_, dpos, dnegs) = sns_loss_grad(scores[0], &scores[1..], partition).expect("non-empty");
        grad_check(
            |p| sns_loss_grad(p[0], &p[1..], partition).expect("non-empty").0,
            &scores,
            &scaled(std::iter::once(dpos).chain(dnegs).collect()),
            FD_STEP,
            FD_TOLERANCE,
        )
    }));

    let case_seed = rng.gen::<u64>();
    out.push(run_op("phase1_loss", n, |k| {
        let (model, reg, ex) = random_gradient_case(case_seed.wrapping_add(k as u64), k % 3 == 0);
        check_example(&model, &reg, &ex, Phase::One, &LossConfig::default(), options.corrupt_backward)
    }));
    out.push(run_op("phase2_loss", n, |k| {
        let (model, reg, ex) = random_gradient_case(case_seed.wrapping_add(1000 + k as u64), k % 3 == 0);
        let config = LossConfig {
            stop_gradient_psi: false,
            view_temperature: k % 2 == 1,
            ..LossConfig::default()
        };
        check_example(&model, &reg, &ex, Phase::Two, &config, options.corrupt_backward)
    }));

    let mut simplex_ok = true;
    let mut worst = 0.0f64;
    for _ in 0..n * 50 {
        let logits: Vec<f64> = random_vec(&mut rng, 5).into_iter().map(|v| 3.0 * v).collect();
        let mut mask: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.5)).collect();
        mask[rng.gen_range(0..5)] = true;
        let a = masked_softmax(&logits, &mask).expect("one view active");
        let sum: f64 = a.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        simplex_ok &= a.iter().zip(&mask).all(|(&x, &m)| if m { x >= 0.0 } else { x == 0.0 });
    }
    out.push(OpCheck {
        name: "attention_simplex",
        cases: n * 50,
        max_rel_error: worst,
        passed: simplex_ok && worst <= 1e-12,
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let report = selftest(&SelfTestOptions { cases: 5, ..SelfTestOptions::default() });
        for op in &report {
            assert!(op.passed, "{op:?}");
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let report = selftest(&SelfTestOptions {
            cases: 3,
            corrupt_backward: Some(1.01),
            ..SelfTestOptions::default()
        });
        for op in report.iter().filter(|o| o.name != "attention_simplex") {
            assert!(!op.passed, "{} should fail under corruption", op.name);
        }
    }
}
