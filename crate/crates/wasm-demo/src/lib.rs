//! Browser bindings for three small views of the steering math: a 2-D
//! Cayley rotation, the coherence barrier on a two-token vocabulary, and
//! the Steering F1 metric.

use antipasto::adapter::cayley;
use antipasto::evalharness::steering_f1 as f1_parts;
use antipasto::losses::{coherence_barrier, tv_budget, LossConfig};
use antipasto::Tensor;
use wasm_bindgen::prelude::*;

fn loss_cfg(kappa: f64, beta: f64, lambda: f64, tau: f64) -> LossConfig {
    LossConfig {
        kappa,
        beta,
        lambda,
        tau,
        ..Default::default()
    }
}

/// `[r00, r01, r10, r11, angle, ‖RᵀR − I‖]` for the generator
/// `[[0, a], [−a, 0]]` at coefficient `alpha`; empty on invalid input.
#[wasm_bindgen]
pub fn cayley_rotation(a: f64, alpha: f64, theta_max: f64) -> Vec<f64> {
    let Ok(gen) = Tensor::matrix(2, 2, vec![0.0, a, -a, 0.0]) else {
        return vec![];
    };
    let Ok(r) = cayley(&gen, alpha, theta_max) else {
        return vec![];
    };
    let residual = r
        .t_matmul(&r)
        .and_then(|m| m.sub(&Tensor::eye(2)))
        .map(|m| m.frobenius_norm())
        .unwrap_or(f64::NAN);
    let d = r.data();
    vec![d[0], d[1], d[2], d[3], d[2].atan2(d[0]), residual]
}

/// Rotation angle at `n` evenly spaced coefficients in `[−1, 1]`.
#[wasm_bindgen]
pub fn cayley_angle_sweep(a: f64, theta_max: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let alpha = if n > 1 { -1.0 + 2.0 * i as f64 / (n - 1) as f64 } else { 0.0 };
            cayley_rotation(a, alpha, theta_max).get(4).copied().unwrap_or(f64::NAN)
        })
        .collect()
}

/// Coherence barrier for a two-token vocabulary with reference `(p_ref,
/// 1 − p_ref)` as the steered probability of the first token sweeps
/// `[0, 1]` in `n` points. Returns `[tv_0, b_0, tv_1, b_1, …]`.
#[wasm_bindgen]
pub fn coherence_curve(p_ref: f64, kappa: f64, beta: f64, lambda: f64, tau: f64, n: usize) -> Vec<f64> {
    let cfg = loss_cfg(kappa, beta, lambda, tau);
    if cfg.validate().is_err() || !(0.0..=1.0).contains(&p_ref) {
        return vec![];
    }
    let Ok(reference) = Tensor::matrix(1, 2, vec![p_ref, 1.0 - p_ref]) else {
        return vec![];
    };
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let q = if n > 1 { i as f64 / (n - 1) as f64 } else { p_ref };
        let Ok(steered) = Tensor::matrix(1, 2, vec![q, 1.0 - q]) else {
            return vec![];
        };
        match coherence_barrier(&reference, &steered, &cfg) {
            Ok((b, tv)) => out.extend([tv[0], b]),
            Err(_) => return vec![],
        }
    }
    out
}

/// TV budget `κ√(H + β)` of the two-token reference.
#[wasm_bindgen]
pub fn coherence_budget(p_ref: f64, kappa: f64, beta: f64) -> f64 {
    let h = [p_ref, 1.0 - p_ref].iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    tv_budget(h, &loss_cfg(kappa, beta, 1.0, 0.5))
}

/// `[net_correct, precision, recall, F1]`; empty when `targets` is not
/// positive.
#[wasm_bindgen]
pub fn steering_f1(correct: f64, wrong: f64, arbitrary: f64, targets: f64, pmass_ratio: f64) -> Vec<f64> {
    match f1_parts(correct, wrong, arbitrary, targets, pmass_ratio) {
        Ok(p) => vec![p.net_correct, p.precision, p.recall, p.f1],
        Err(_) => vec![],
    }
}
