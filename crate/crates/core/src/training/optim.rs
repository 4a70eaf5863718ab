use serde::{Deserialize, Serialize};

use crate::nn::ParamLayout;

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at `max_steps`.
pub fn lr_schedule(step: usize, base_lr: f64, warmup_steps: usize, max_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if max_steps <= warmup_steps {
        return base_lr;
    }
    let t = (step.min(max_steps) - warmup_steps) as f64 / (max_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: AdamState {
                t: 0,
                m: vec![0.0; len],
                v: vec![0.0; len],
            },
        }
    }

    pub fn step(&mut self, layout: &ParamLayout, params: &mut [f32], grads: &[f32], lr: f64) {
        let st = &mut self.state;
        st.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(st.t as i32);
        let c2 = 1.0 - self.beta2.powi(st.t as i32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        let decay = (lr * self.weight_decay) as f32;
        for spec in layout.specs() {
            let r = spec.offset..spec.offset + spec.len;
            for i in r {
                let g = grads[i];
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                if spec.decay {
                    params[i] -= decay * params[i];
                }
                params[i] -= step * st.m[i] / ((st.v[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let (lr, w, m) = (3e-4, 100, 1000);
        assert_eq!(lr_schedule(0, lr, w, m), 0.0);
        assert_eq!(lr_schedule(w, lr, w, m), lr);
        assert!(lr_schedule(m, lr, w, m).abs() <= 1e-12 * lr);
        assert!((lr_schedule(550, lr, w, m) - lr / 2.0).abs() < 1e-15);
        assert!((lr_schedule(50, lr, w, m) - lr / 2.0).abs() < 1e-18);
        for s in w..m {
            assert!(lr_schedule(s + 1, lr, w, m) <= lr_schedule(s, lr, w, m));
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
        let mut small = vec![0.1f32];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    #[test]
    fn first_step_moves_by_lr_and_decays_weights_only() {
        let mut layout = ParamLayout::default();
        layout.add("w", &[1], true);
        layout.add("b", &[1], false);
        let mut p = vec![1.0f32, 1.0];
        let mut opt = AdamW::new(2, 0.1);
        opt.step(&layout, &mut p, &[0.5, 0.5], 0.01);
        // Bias-corrected first step is lr·sign(g); the weight also decays by lr·wd.
        assert!((p[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-6);
        assert!((p[1] - (1.0 - 0.01)).abs() < 1e-6);
    }
}
