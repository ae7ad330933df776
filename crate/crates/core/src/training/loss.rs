use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Predictions};
use crate::tensor::{Graph, NdArray, Real, Var};

/// The four loss terms, the consistency weight and their combination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_c: Real,
    pub l_f: Real,
    pub l_mt_c: Real,
    pub l_mt_f: Real,
    pub alpha: Real,
    pub l_total: Real,
}

impl LossBreakdown {
    /// `0.5 L_c + L_f + alpha (L_MT_c + L_MT_f)` from the logged terms.
    pub fn recombine(&self) -> Real {
        0.5 * self.l_c + self.l_f + self.alpha * (self.l_mt_c + self.l_mt_f)
    }
}

/// Supervision available for one clip; frame targets are at output resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub clip: Option<NdArray>,
    pub frame: Option<NdArray>,
}

/// Batch-level normalizers: every term is a mean over its own elements.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossScale {
    /// Clip-label elements: clips with clip labels times classes.
    pub clip_elems: usize,
    /// Frame-label elements: strong clips times steps times classes.
    pub frame_elems: usize,
    /// Consistency elements at clip and frame level over all clips.
    pub mt_clip_elems: usize,
    pub mt_frame_elems: usize,
}

impl LossScale {
    pub fn for_batch(targets: &[Targets], steps: usize, classes: usize) -> Self {
        let clip = targets.iter().filter(|t| t.clip.is_some()).count();
        let frame = targets.iter().filter(|t| t.frame.is_some()).count();
        LossScale {
            clip_elems: clip * classes,
            frame_elems: frame * steps * classes,
            mt_clip_elems: targets.len() * classes,
            mt_frame_elems: targets.len() * steps * classes,
        }
    }
}

fn inv(n: usize) -> Real {
    if n == 0 {
        0.0
    } else {
        1.0 / n as Real
    }
}

/// One clip's share of the batch objective, as a graph scalar, plus its
/// `[L_c, L_f, L_MT_c, L_MT_f]` contributions.
pub fn clip_objective(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &Targets,
    teacher: &Predictions,
    scale: &LossScale,
    alpha: Real,
) -> Result<(Var, [Real; 4])> {
    let mut terms: Vec<Var> = Vec::with_capacity(4);
    let mut parts = [0.0; 4];
    if let Some(t) = &targets.clip {
        let v = g.bce_sum(out.clip_probs, t, inv(scale.clip_elems))?;
        parts[0] = g.value(v).data()[0];
        terms.push(g.scale(v, 0.5));
    }
    if let Some(t) = &targets.frame {
        let v = g.bce_sum(out.frame_probs, t, inv(scale.frame_elems))?;
        parts[1] = g.value(v).data()[0];
        terms.push(v);
    }
    let mc = g.sq_err_sum(out.clip_probs, &teacher.clip_probs, inv(scale.mt_clip_elems))?;
    let mf = g.sq_err_sum(out.frame_probs, &teacher.frame_probs, inv(scale.mt_frame_elems))?;
    parts[2] = g.value(mc).data()[0];
    parts[3] = g.value(mf).data()[0];
    let mt = g.add(mc, mf)?;
    terms.push(g.scale(mt, alpha));
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, parts))
}

fn bce(p: &NdArray, y: &NdArray) -> Result<Real> {
    if p.shape() != y.shape() {
        return Err(Error::Input(format!("prediction shape {:?} vs label shape {:?}", p.shape(), y.shape())));
    }
    Ok(p.data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let q = p.clamp(crate::tensor::BCE_EPS, 1.0 - crate::tensor::BCE_EPS);
            -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum())
}

fn sq(p: &NdArray, t: &NdArray) -> Result<Real> {
    if p.shape() != t.shape() {
        return Err(Error::Input(format!("student shape {:?} vs teacher shape {:?}", p.shape(), t.shape())));
    }
    Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// The batch objective computed directly from posteriors.
pub fn total_loss(student: &[Predictions], teacher: &[Predictions], targets: &[Targets], alpha: Real) -> Result<LossBreakdown> {
    if student.len() != teacher.len() || student.len() != targets.len() || student.is_empty() {
        return Err(Error::Input(format!(
            "{} student, {} teacher and {} target entries",
            student.len(),
            teacher.len(),
            targets.len()
        )));
    }
    let (steps, classes) = (student[0].frame_probs.shape()[0], student[0].frame_probs.shape()[1]);
    let s = LossScale::for_batch(targets, steps, classes);
    let mut b = LossBreakdown { alpha, ..Default::default() };
    for ((p, t), y) in student.iter().zip(teacher).zip(targets) {
        if let Some(c) = &y.clip {
            b.l_c += bce(&p.clip_probs, c)? * inv(s.clip_elems);
        }
        if let Some(f) = &y.frame {
            b.l_f += bce(&p.frame_probs, f)? * inv(s.frame_elems);
        }
        b.l_mt_c += sq(&p.clip_probs, &t.clip_probs)? * inv(s.mt_clip_elems);
        b.l_mt_f += sq(&p.frame_probs, &t.frame_probs)? * inv(s.mt_frame_elems);
    }
    b.l_total = b.recombine();
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(frame: Vec<Real>, clip: Vec<Real>) -> Predictions {
        Predictions {
            frame_probs: NdArray::new(vec![frame.len(), 1], frame).unwrap(),
            clip_probs: NdArray::vector(clip),
            seconds_per_step: 0.1,
        }
    }

    #[test]
    fn arithmetic_of_the_combination() {
        let b = LossBreakdown { l_c: 0.4, l_f: 0.6, alpha: 0.0, l_mt_c: 3.0, l_mt_f: 1.0, l_total: 0.0 };
        assert!((b.recombine() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_nets_have_no_consistency_loss() {
        let p = vec![preds(vec![0.2, 0.7], vec![0.6])];
        let t = vec![Targets { clip: Some(NdArray::vector(vec![1.0])), frame: None }];
        let b = total_loss(&p, &p, &t, 1.0).unwrap();
        assert_eq!((b.l_mt_c, b.l_mt_f), (0.0, 0.0));
        assert!(b.l_c > 0.0);
    }

    #[test]
    fn perfect_predictions_near_zero() {
        let p = vec![preds(vec![1.0, 0.0], vec![1.0])];
        let t = vec![Targets {
            clip: Some(NdArray::vector(vec![1.0])),
            frame: Some(NdArray::new(vec![2, 1], vec![1.0, 0.0]).unwrap()),
        }];
        let b = total_loss(&p, &p, &t, 2.0).unwrap();
        assert!(b.l_c < 1e-6 && b.l_f < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let p = vec![preds(vec![0.5, 0.5], vec![0.5])];
        let t = vec![Targets { clip: Some(NdArray::vector(vec![1.0, 0.0])), frame: None }];
        assert!(matches!(total_loss(&p, &p, &t, 0.0), Err(Error::Input(_))));
    }
}
