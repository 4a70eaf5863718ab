//! Training objective on the model's raw outputs, with analytic gradients.
//!
//! All loss math runs in `f64` regardless of the network's scalar type; the
//! per-sample outputs are tiny, so the conversion is free.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::evidential::DirichletParams;
use crate::model::ModelOutput;

const PROB_FLOOR: f64 = 1e-12;

/// One head's target: one-hot when the true lane count fits in `M`
/// classes, all-zero ("overflow") otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTarget {
    pub y: Vec<f64>,
    pub overflow: bool,
}

impl HeadTarget {
    pub fn new(label: usize, classes: usize) -> Self {
        let mut y = vec![0.0; classes];
        let overflow = label >= classes;
        if !overflow {
            y[label] = 1.0;
        }
        Self { y, overflow }
    }

    pub fn mass(&self) -> f64 {
        self.y.iter().sum()
    }
}

pub fn make_targets(label_left: usize, label_right: usize, classes: usize) -> (HeadTarget, HeadTarget) {
    (
        HeadTarget::new(label_left, classes),
        HeadTarget::new(label_right, classes),
    )
}

/// Ground-truth vanishing point `(u, v)` and vanishing-line normal `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VplTarget {
    pub vp: [f64; 2],
    pub vl: [f64; 2],
}

/// `−Σ y_m ln p_m` with `p` floored at 1e-12.
pub fn ml_loss(target: &HeadTarget, p: &[f64]) -> f64 {
    target
        .y
        .iter()
        .zip(p)
        .filter(|(y, _)| **y != 0.0)
        .map(|(y, p)| -y * p.max(PROB_FLOOR).ln())
        .sum()
}

/// Trigamma ψ₁(x) for x > 0: recurrence up to x ≥ 10, then the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + Σ B_{2k}/x^{2k+1}
    let series =
        inv2 * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))));
    acc + inv + 0.5 * inv2 + inv * series
}

/// `KL[Dir(α) ‖ Dir(1)]` in closed form.
pub fn kld_to_uniform(alpha: &DirichletParams) -> f64 {
    let a = alpha.alpha();
    if a.iter().all(|&x| x == 1.0) {
        return 0.0;
    }
    let s: f64 = a.iter().sum();
    let psi_s = digamma(s);
    let m = a.len() as f64;
    let value = ln_gamma(s) - ln_gamma(m) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>()
        + a.iter().map(|&x| (x - 1.0) * (digamma(x) - psi_s)).sum::<f64>();
    value.max(0.0)
}

/// `∂KL/∂α_k = (α_k − 1)·ψ₁(α_k) − ψ₁(Σα)·Σ(α_m − 1)`.
pub fn kld_to_uniform_grad(alpha: &DirichletParams) -> Vec<f64> {
    let a = alpha.alpha();
    let s: f64 = a.iter().sum();
    let excess: f64 = a.iter().map(|x| x - 1.0).sum();
    let t_s = trigamma(s);
    a.iter().map(|&x| (x - 1.0) * trigamma(x) - t_s * excess).collect()
}

/// `(1 − Σy)·KL[Dir(α) ‖ Dir(1)]`.
pub fn kld_loss(target: &HeadTarget, alpha: &DirichletParams) -> f64 {
    let factor = 1.0 - target.mass();
    if factor == 0.0 {
        0.0
    } else {
        factor * kld_to_uniform(alpha)
    }
}

/// `‖p̂ − p‖² + (1 − ℓ̂·ℓ)`.
pub fn geometric_loss(vp_hat: [f64; 2], vl_hat: [f64; 2], vp_gt: [f64; 2], vl_gt: [f64; 2]) -> f64 {
    let du = vp_hat[0] - vp_gt[0];
    let dv = vp_hat[1] - vp_gt[1];
    du * du + dv * dv + (1.0 - (vl_hat[0] * vl_gt[0] + vl_hat[1] * vl_gt[1]))
}

/// Schedule weight `min(1, 2·iter/maxiter)`.
pub fn loss_weight(iter: usize, maxiter: usize) -> f64 {
    assert!(maxiter > 0, "maxiter must be positive");
    (2.0 * iter as f64 / maxiter as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ml_left: f64,
    pub ml_right: f64,
    pub kld_left: f64,
    pub kld_right: f64,
    pub geometric: f64,
    /// Whether the geometric term was skipped (degenerate line or disabled).
    pub geometric_skipped: bool,
    pub w: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted terms whose sum is `total`:
    /// `[ml_left, ml_right, w·kld_left, w·kld_right, (1−w)·geometric]`.
    pub fn weighted_terms(&self) -> [f64; 5] {
        [
            self.ml_left,
            self.ml_right,
            self.w * self.kld_left,
            self.w * self.kld_right,
            (1.0 - self.w) * self.geometric,
        ]
    }

    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.ml_left += scale * other.ml_left;
        self.ml_right += scale * other.ml_right;
        self.kld_left += scale * other.kld_left;
        self.kld_right += scale * other.kld_right;
        self.geometric += scale * other.geometric;
        self.total += scale * other.total;
        self.w = other.w;
    }
}

/// Gradient of the per-sample loss with respect to every model output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub e_left: Vec<f64>,
    pub e_right: Vec<f64>,
    pub vp: [f64; 2],
    pub vl_raw: [f64; 2],
}

fn head_terms(e: &[f64], target: &HeadTarget, w: f64) -> (f64, f64, Vec<f64>) {
    let alpha = DirichletParams::from_alpha(e.iter().map(|x| x + 1.0).collect())
        .expect("evidence is non-negative by construction");
    let a = alpha.alpha();
    let s = alpha.strength();
    let mass = target.mass();
    let ml = ml_loss(target, &a.iter().map(|x| x / s).collect::<Vec<_>>());
    let mut grad: Vec<f64> = a
        .iter()
        .zip(&target.y)
        .map(|(&ak, &yk)| {
            let floored = ak / s < PROB_FLOOR;
            let own = if floored { 0.0 } else { -yk / ak };
            own + mass / s
        })
        .collect();
    let factor = 1.0 - mass;
    let kld = if factor == 0.0 {
        0.0
    } else {
        factor * kld_to_uniform(&alpha)
    };
    if factor != 0.0 && w != 0.0 {
        for (g, k) in grad.iter_mut().zip(kld_to_uniform_grad(&alpha)) {
            *g += w * factor * k;
        }
    }
    (ml, kld, grad)
}

/// Per-sample total loss at schedule weight `w`, with its gradient.
///
/// `use_geometric = false` drops the geometric term entirely (the no-VPL
/// ablation); a degenerate line flag on `out` drops it for this sample.
pub fn total_loss_weighted(
    out: &ModelOutput,
    targets: &(HeadTarget, HeadTarget),
    gt: &VplTarget,
    w: f64,
    use_geometric: bool,
) -> (LossBreakdown, OutputGrad) {
    let (ml_left, kld_left, g_left) = head_terms(&out.e_left, &targets.0, w);
    let (ml_right, kld_right, g_right) = head_terms(&out.e_right, &targets.1, w);

    let skip = !use_geometric || out.vl_degenerate;
    let (geometric, d_vp, d_vl) = if skip {
        (0.0, [0.0; 2], [0.0; 2])
    } else {
        let g = geometric_loss(out.vp_hat, out.vl_hat, gt.vp, gt.vl);
        let scale = 1.0 - w;
        let d_vp = [
            scale * 2.0 * (out.vp_hat[0] - gt.vp[0]),
            scale * 2.0 * (out.vp_hat[1] - gt.vp[1]),
        ];
        // d(−v̂·ℓ)/dr with v̂ = r/‖r‖ is −(ℓ − (v̂·ℓ)v̂)/‖r‖.
        let norm = out.vl_raw[0].hypot(out.vl_raw[1]);
        let dot = out.vl_hat[0] * gt.vl[0] + out.vl_hat[1] * gt.vl[1];
        let d_vl = [
            -scale * (gt.vl[0] - dot * out.vl_hat[0]) / norm,
            -scale * (gt.vl[1] - dot * out.vl_hat[1]) / norm,
        ];
        (g, d_vp, d_vl)
    };

    let mut b = LossBreakdown {
        ml_left,
        ml_right,
        kld_left,
        kld_right,
        geometric,
        geometric_skipped: skip,
        w,
        total: 0.0,
    };
    b.total = b.weighted_terms().iter().sum();
    let grad = OutputGrad {
        e_left: g_left,
        e_right: g_right,
        vp: d_vp,
        vl_raw: d_vl,
    };
    (b, grad)
}

/// `Σ_i [L_ml + w·L_kld] + (1 − w)·L_g` with `w = loss_weight(iter, maxiter)`.
pub fn total_loss(
    out: &ModelOutput,
    targets: &(HeadTarget, HeadTarget),
    gt: &VplTarget,
    iter: usize,
    maxiter: usize,
) -> (f64, LossBreakdown) {
    let (b, _) = total_loss_weighted(out, targets, gt, loss_weight(iter, maxiter), true);
    (b.total, b)
}
