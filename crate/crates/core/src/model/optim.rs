use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::scalar::Scalar;
use super::tape::{Gradients, ParamStore};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay:
///
/// ```text
/// p ← p · (1 − lr·wd)
/// m ← β1·m + (1 − β1)·g;   v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1ᵗ)) / (sqrt(v / (1 − β2ᵗ)) + eps)
/// ```
///
/// A parameter with no gradient slot is treated as having a zero gradient,
/// so its moments still decay and weight decay still applies.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<(), ModelError> {
        let cfg = &self.config;
        if !(cfg.lr > 0.0) {
            return Err(ModelError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if grads.slots().len() != params.len() || self.m.len() != params.len() {
            return Err(ModelError::Shape("gradient buffer does not match parameters".into()));
        }
        for (id, name, _) in params.iter() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(ModelError::NanGradient(name.to_string()));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).map(Matrix::data);
            let p = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1t * m[j] + one_b1 * gj;
                v[j] = b2t * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
