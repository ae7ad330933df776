use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{NdArray, Real};
use super::graph::{Graph, Var};
use super::params::{Bound, ParamTree};
use crate::error::{Error, Result};

/// Which parameter coordinates a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub path: String,
    pub index: usize,
    pub analytic: Real,
    pub numeric: Real,
    pub rel_error: Real,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub checks: Vec<CoordCheck>,
}

/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, point: &ParamTree) -> Result<Real>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = point.bind(&mut g, false);
    let out = f(&mut g, &bound)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Evaluation(format!("gradient check needs a scalar, got {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is not finite ({v})")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with the given step, returning the worst relative error.
pub fn grad_check<F>(f: F, point: &ParamTree, step: Real, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    evaluate(&f, point)?;
    let mut g = Graph::new();
    let bound = point.bind(&mut g, true);
    let root = f(&mut g, &bound)?;
    let grads = g.backward(root)?;
    let analytic = bound.collect(&g, &grads);

    let all: Vec<(String, usize)> =
        point.iter().flat_map(|(p, v)| (0..v.len()).map(move |i| (p.to_string(), i))).collect();
    let chosen: Vec<(String, usize)> = match coords {
        Coords::All => all,
        Coords::Sample { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count).map(|_| all[rng.random_range(0..all.len())].clone()).collect()
        }
    };

    let mut checks = Vec::with_capacity(chosen.len());
    let mut worst: Real = 0.0;
    for (path, index) in chosen {
        let base = point.get(&path).expect("path from the same tree");
        let perturbed = |delta: Real| -> Result<Real> {
            let mut data = base.data().to_vec();
            data[index] += delta;
            let mut t = point.clone();
            t.set(&path, NdArray::new(base.shape().to_vec(), data)?)?;
            evaluate(&f, &t)
        };
        let numeric = (perturbed(step)? - perturbed(-step)?) / (2.0 * step);
        let a = analytic[&path].data()[index];
        let rel = relative_error(a, numeric);
        worst = worst.max(rel);
        checks.push(CoordCheck { path, index, analytic: a, numeric, rel_error: rel });
    }
    Ok(GradCheckReport { max_rel_error: worst, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut point = ParamTree::new();
        point.insert("x", NdArray::scalar(3.0)).unwrap();
        let report = grad_check(
            |g, p| {
                let x = p.get("x")?;
                g.mul(x, x)
            },
            &point,
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert_eq!(report.checks[0].analytic, 6.0);
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }

    #[test]
    fn sum_of_sigmoid_at_zero() {
        let mut point = ParamTree::new();
        point.insert("x", NdArray::zeros(&[4])).unwrap();
        let report = grad_check(
            |g, p| {
                let s = g.sigmoid(p.get("x")?);
                Ok(g.sum_all(s))
            },
            &point,
            1e-5,
            Coords::All,
        )
        .unwrap();
        for c in &report.checks {
            assert_eq!(c.analytic, 0.25);
        }
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_value_is_evaluation_error() {
        let mut point = ParamTree::new();
        point.insert("x", NdArray::scalar(0.0)).unwrap();
        let err = grad_check(
            |g, p| {
                let x = p.get("x")?;
                g.div(x, x)
            },
            &point,
            1e-5,
            Coords::All,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut point = ParamTree::new();
        point.insert("x", NdArray::scalar(1.0)).unwrap();
        assert!(grad_check(|g, p| Ok(g.sum_all(p.get("x")?)), &point, 0.0, Coords::All).is_err());
    }
}
