use crate::error::{Error, Result};
use crate::numcore::ParamSet;

/// Global L2 norm over every array jointly.
pub fn global_norm(grads: &ParamSet) -> f64 {
    grads.l2_norm_squared().sqrt()
}

/// Rescales `grads` to norm `clip_norm` when their joint L2 norm exceeds it.
pub fn clip_gradients(grads: &ParamSet, clip_norm: f64) -> Result<ParamSet> {
    if !(clip_norm > 0.0) {
        return Err(Error::Config(format!("clip_norm must be > 0, got {clip_norm}")));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = global_norm(grads);
    if norm <= clip_norm {
        return Ok(grads.clone());
    }
    let mut out = grads.clone();
    for (_, t) in out.entries_mut() {
        for v in t.data_mut() {
            *v = *v * clip_norm / norm;
        }
    }
    Ok(out)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(like: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with step size `lr` in place.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        if params.shapes() != grads.shapes() || self.m.shapes() != grads.shapes() {
            return Err(Error::Shape("optimizer state and gradient layouts differ".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let grads: Vec<&[f64]> = grads.iter().map(|(_, t)| t.data()).collect();
        for ((((_, p), (_, m)), (_, v)), g) in params
            .entries_mut()
            .zip(self.m.entries_mut())
            .zip(self.v.entries_mut())
            .zip(grads)
        {
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g)
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }
}
