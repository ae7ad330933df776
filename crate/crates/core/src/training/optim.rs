use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::decays;
use crate::tensor::{NdArray, ParamTree, Real};

/// Adam with decoupled weight decay; leaves where [`decays`] is false skip the decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    step: i32,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl AdamW {
    pub fn new(beta1: Real, beta2: Real, eps: Real, weight_decay: Real) -> Self {
        AdamW { beta1, beta2, eps, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update with the per-leaf learning rate `lr(path)`.
    pub fn step(
        &mut self,
        params: &mut ParamTree,
        grads: &BTreeMap<String, NdArray>,
        lr: impl Fn(&str) -> Real,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (path, value) in params.values_mut() {
            let g = grads.get(path).ok_or_else(|| Error::Structure {
                path: path.to_string(),
                detail: "no gradient for parameter".into(),
            })?;
            let n = value.len();
            let m = self.m.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(path.to_string()).or_insert_with(|| vec![0.0; n]);
            let rate = lr(path);
            let wd = if decays(path) { self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= rate * wd * *w;
                *w -= rate * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `teacher <- beta * teacher + (1 - beta) * student`, leaf by leaf.
pub fn ema_update(teacher: &mut ParamTree, student: &ParamTree, beta: Real) -> Result<()> {
    teacher.check_same_structure(student)?;
    for ((_, t), (_, s)) in teacher.values_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }
    Ok(())
}

/// Mean-teacher warm-up: the effective decay never exceeds `1 - 1/(t + 1)`,
/// so early teachers track the student closely.
pub fn ema_beta_at(step: usize, beta: Real) -> Real {
    beta.min(1.0 - 1.0 / (step as Real + 1.0))
}
