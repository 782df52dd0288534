//! Finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` with central finite differences at
/// step `eps` and returns the worst relative error over all parameter
/// entries: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// `f` must be deterministic: it is re-evaluated twice per parameter entry.
/// The perturbed evaluations run on untracked tensors, so no graph is built
/// for them.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let tracked: Vec<Tensor> = params.iter().map(|p| p.detach().tracked()).collect();
    let loss = f(&tracked);
    assert_eq!(loss.numel(), 1, "finite_diff_check requires a scalar-valued f");
    loss.backward().expect("backward on freshly built graph");

    let mut worst = 0.0f64;
    for (pi, p) in tracked.iter().enumerate() {
        let analytic = p
            .grad()
            .unwrap_or_else(|| alloc::vec![0.0; p.numel()]);
        for e in 0..p.numel() {
            let plus = eval_perturbed(&f, &tracked, pi, e, eps);
            let minus = eval_perturbed(&f, &tracked, pi, e, -eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = math::abs(analytic[e]).max(math::abs(numeric)).max(1e-8);
            let rel = math::abs(analytic[e] - numeric) / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

fn eval_perturbed<F>(f: &F, params: &[Tensor], pi: usize, entry: usize, delta: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let perturbed: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == pi {
                let mut data = p.data().to_vec();
                data[entry] += delta;
                Tensor::from_vec(p.shape(), data).expect("same shape")
            } else {
                p.detach()
            }
        })
        .collect();
    f(&perturbed).item()
}
