use super::ModelParams;
use crate::error::{ensure_arg, Error, Result};

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − lr·v`. Velocity
/// buffers persist across steps.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64) -> Result<Self> {
        ensure_arg!(
            (0.0..1.0).contains(&momentum),
            "momentum must lie in [0, 1), got {momentum}"
        );
        Ok(Self {
            momentum,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update. `grads` holds one buffer per parameter tensor.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        ensure_arg!(lr > 0.0 && lr.is_finite(), "learning rate must be positive, got {lr}");
        ensure_arg!(
            grads.len() == self.velocity.len(),
            "expected {} gradient buffers, got {}",
            self.velocity.len(),
            grads.len()
        );
        for (i, g) in grads.iter().enumerate() {
            ensure_arg!(g.len() == self.velocity[i].len(), "gradient {i} has wrong length");
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter tensor {i} at offset {bad}"
                )));
            }
        }
        for ((t, v), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// `θ_teacher ← decay·θ_teacher + (1 − decay)·θ_student` for every scalar.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<()> {
    ensure_arg!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1), got {decay}");
    ensure_arg!(teacher.same_shape(student), "teacher and student shapes differ");
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
