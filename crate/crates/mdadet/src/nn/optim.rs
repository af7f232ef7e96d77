//! Optimizers and learning-rate schedules.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with per-parameter state aligned to a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, params: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .iter()
            .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
            .collect();
        let v = match kind {
            OptimKind::Adam { .. } => zeros.clone(),
            OptimKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            t: 0,
            m: zeros,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) {
        self.t += 1;
        match self.kind {
            OptimKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, g) in grads.iter().enumerate() {
                    let m = &mut self.m[i];
                    let v = &mut self.v[i];
                    ndarray::Zip::from(params.at_mut(i))
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let mhat = *m / bc1;
                            let vhat = *v / bc2;
                            *p -= lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
            OptimKind::Sgd { momentum } => {
                for (i, g) in grads.iter().enumerate() {
                    let buf = &mut self.m[i];
                    ndarray::Zip::from(params.at_mut(i))
                        .and(buf)
                        .and(g)
                        .for_each(|p, b, &g| {
                            *b = momentum * *b + g;
                            *p -= lr * *b;
                        });
                }
            }
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Flat state for checkpointing: step count then m then v, in store order.
    pub fn state_flat(&self) -> Vec<f64> {
        let mut out = vec![self.t as f64];
        for a in &self.m {
            out.extend(a.iter().copied());
        }
        for a in &self.v {
            out.extend(a.iter().copied());
        }
        out
    }

    pub fn load_state_flat(&mut self, flat: &[f64]) -> crate::error::Result<()> {
        let need: usize =
            1 + self.m.iter().map(|a| a.len()).sum::<usize>() + self.v.iter().map(|a| a.len()).sum::<usize>();
        if flat.len() != need {
            return Err(crate::error::Error::Load(format!(
                "optimizer state length {} does not match expected {}",
                flat.len(),
                need
            )));
        }
        self.t = flat[0] as u64;
        let mut off = 1;
        for a in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in a.iter_mut() {
                *x = flat[off];
                off += 1;
            }
        }
        Ok(())
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for a in grads.iter_mut() {
            a.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Piecewise-constant schedule: `base` multiplied by `factor` once the
/// iteration reaches each decay point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub decays: Vec<LrDecay>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LrDecay {
    pub at_iter: u64,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            decays: Vec::new(),
        }
    }

    pub fn at(&self, iter: u64) -> f64 {
        let mut lr = self.base;
        for d in &self.decays {
            if iter >= d.at_iter {
                lr *= d.factor;
            }
        }
        lr
    }
}
