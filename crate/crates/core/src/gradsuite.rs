//! Finite-difference checks of every differentiable primitive and of the
//! whole model loss, as run by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{AstSed, ModelConfig, Predictions};
use crate::tensor::{grad_check, mhsa, Bound, Coords, Graph, MhsaParams, NdArray, ParamTree, Real, Var};
use crate::training::{clip_objective, LossScale, Targets};

/// Finite-difference step used by both suites.
pub const STEP: Real = 1e-5;

/// Worst relative error seen for one primitive over all sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: Real,
}

#[derive(Clone, Copy)]
enum Draw {
    Normal,
    /// Uniform in [0.5, 2], for denominators.
    Positive,
    /// Uniform in [0.05, 0.95], for probabilities.
    Prob,
}

type Body = fn(&mut Graph, &Bound) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<(&'static str, Vec<usize>, Draw)>,
    body: Body,
}

/// Reduces any output to a scalar with fixed, non-uniform weights so that
/// every output element contributes a distinct gradient.
pub fn readout(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<Real> = (0..n).map(|i| ((i * 7919 % 23) as Real - 11.0) / 7.0 + 0.3).collect();
    let w = g.constant(NdArray::new(shape, w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn x(p: &Bound) -> Result<Var> {
    p.get("x")
}

fn y(p: &Bound) -> Result<Var> {
    p.get("y")
}

fn cases() -> Vec<Case> {
    use Draw::*;
    let s = |v: &[usize]| v.to_vec();
    let c = |name, inputs: Vec<(&'static str, Vec<usize>, Draw)>, body: Body| Case { name, inputs, body };
    vec![
        c("add", vec![("x", s(&[3, 4]), Normal), ("y", s(&[3, 4]), Normal)], |g, p| {
            let v = g.add(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c("sub", vec![("x", s(&[3, 4]), Normal), ("y", s(&[3, 4]), Normal)], |g, p| {
            let v = g.sub(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c("mul", vec![("x", s(&[3, 4]), Normal), ("y", s(&[3, 4]), Normal)], |g, p| {
            let v = g.mul(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c("div", vec![("x", s(&[3, 4]), Normal), ("y", s(&[3, 4]), Positive)], |g, p| {
            let v = g.div(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c("add_row", vec![("x", s(&[3, 4]), Normal), ("y", s(&[4]), Normal)], |g, p| {
            let v = g.add_row(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c("scale", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let v = g.scale(x(p)?, 1.7);
            readout(g, v)
        }),
        c("matmul", vec![("x", s(&[3, 4]), Normal), ("y", s(&[4, 5]), Normal)], |g, p| {
            let v = g.matmul(x(p)?, y(p)?)?;
            readout(g, v)
        }),
        c(
            "linear",
            vec![("x", s(&[3, 4]), Normal), ("y", s(&[4, 5]), Normal), ("b", s(&[5]), Normal)],
            |g, p| {
                let v = g.linear(x(p)?, y(p)?, p.get("b")?)?;
                readout(g, v)
            },
        ),
        c("bmm", vec![("x", s(&[2, 3, 4]), Normal), ("y", s(&[2, 4, 5]), Normal)], |g, p| {
            let v = g.bmm(x(p)?, y(p)?, false)?;
            readout(g, v)
        }),
        c("bmm_transposed", vec![("x", s(&[2, 3, 4]), Normal), ("y", s(&[2, 5, 4]), Normal)], |g, p| {
            let v = g.bmm(x(p)?, y(p)?, true)?;
            readout(g, v)
        }),
        c("permute", vec![("x", s(&[2, 3, 4]), Normal)], |g, p| {
            let v = g.permute(x(p)?, &[2, 0, 1])?;
            readout(g, v)
        }),
        c("reshape", vec![("x", s(&[2, 6]), Normal)], |g, p| {
            let v = g.reshape(x(p)?, &[3, 4])?;
            readout(g, v)
        }),
        c(
            "layer_norm",
            vec![("x", s(&[3, 5]), Normal), ("y", s(&[5]), Normal), ("b", s(&[5]), Normal)],
            |g, p| {
                let v = g.layer_norm(x(p)?, y(p)?, p.get("b")?, 1e-6)?;
                readout(g, v)
            },
        ),
        c("softmax_last", vec![("x", s(&[3, 5]), Normal)], |g, p| {
            let v = g.softmax_last(x(p)?);
            readout(g, v)
        }),
        c("sigmoid", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let v = g.sigmoid(x(p)?);
            readout(g, v)
        }),
        c("tanh", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let v = g.tanh(x(p)?);
            readout(g, v)
        }),
        c("gelu", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let v = g.gelu(x(p)?);
            readout(g, v)
        }),
        c("sum_all", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let xv = x(p)?;
            let sq = g.mul(xv, xv)?;
            Ok(g.sum_all(sq))
        }),
        c("mean_axis0", vec![("x", s(&[4, 3]), Normal)], |g, p| {
            let v = g.mean_axis0(x(p)?);
            readout(g, v)
        }),
        c("max_axis0", vec![("x", s(&[4, 3]), Normal)], |g, p| {
            let v = g.max_axis0(x(p)?);
            readout(g, v)
        }),
        c("gather_rows", vec![("x", s(&[4, 3]), Normal)], |g, p| {
            let v = g.gather_rows(x(p)?, &[2, 0, 2, 3])?;
            readout(g, v)
        }),
        c("concat0", vec![("x", s(&[2, 3]), Normal), ("y", s(&[3, 3]), Normal)], |g, p| {
            let v = g.concat0(&[x(p)?, y(p)?])?;
            readout(g, v)
        }),
        c("concat_last", vec![("x", s(&[3, 2]), Normal), ("y", s(&[3, 4]), Normal)], |g, p| {
            let v = g.concat_last(&[x(p)?, y(p)?])?;
            readout(g, v)
        }),
        c("slice_last", vec![("x", s(&[3, 6]), Normal)], |g, p| {
            let v = g.slice_last(x(p)?, 1, 3)?;
            readout(g, v)
        }),
        c("slice_axis0", vec![("x", s(&[5, 2]), Normal)], |g, p| {
            let v = g.slice_axis0(x(p)?, 1, 3)?;
            readout(g, v)
        }),
        c("bce_sum", vec![("x", s(&[3, 4]), Prob)], |g, p| {
            let t = NdArray::new(vec![3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as Real * 0.8 + 0.1).collect())?;
            g.bce_sum(x(p)?, &t, 0.7)
        }),
        c("sq_err_sum", vec![("x", s(&[3, 4]), Normal)], |g, p| {
            let t = NdArray::new(vec![3, 4], (0..12).map(|i| i as Real / 12.0).collect())?;
            g.sq_err_sum(x(p)?, &t, 0.7)
        }),
        c(
            "mhsa",
            vec![
                ("x", s(&[5, 8]), Normal),
                ("qkv.w", s(&[8, 24]), Normal),
                ("q.b", s(&[8]), Normal),
                ("v.b", s(&[8]), Normal),
                ("out.w", s(&[8, 8]), Normal),
                ("out.b", s(&[8]), Normal),
            ],
            |g, p| {
                // A key bias shifts every score in a row equally, so softmax
                // removes it and its gradient is exactly zero; keep it fixed.
                let k_b = g.constant(NdArray::zeros(&[8]));
                let qkv_b = g.concat_last(&[p.get("q.b")?, k_b, p.get("v.b")?])?;
                let params = MhsaParams {
                    qkv_w: p.get("qkv.w")?,
                    qkv_b,
                    out_w: p.get("out.w")?,
                    out_b: p.get("out.b")?,
                };
                let v = mhsa(g, x(p)?, 2, &params)?;
                readout(g, v)
            },
        ),
    ]
}

fn draw(shape: &[usize], d: Draw, rng: &mut ChaCha8Rng) -> Result<NdArray> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match d {
            Draw::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                z as Real
            }
            Draw::Positive => rng.random_range(0.5..2.0),
            Draw::Prob => rng.random_range(0.05..0.95),
        })
        .collect();
    NdArray::new(shape.to_vec(), data)
}

/// Names of every primitive covered by [`primitive_suite`].
pub fn primitive_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Checks each primitive at `points` random inputs, all coordinates.
pub fn primitive_suite(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut worst: Real = 0.0;
        for _ in 0..points {
            let mut tree = ParamTree::new();
            for (name, shape, d) in &case.inputs {
                tree.insert(*name, draw(shape, *d, &mut rng)?)?;
            }
            let report = grad_check(case.body, &tree, STEP, Coords::All)?;
            if std::env::var("GS_DEBUG").is_ok() {
                for c in report.checks.iter().filter(|c| c.rel_error > 1e-4) {
                    eprintln!("{} {:?}", case.name, c);
                }
            }
            worst = worst.max(report.max_rel_error);
        }
        out.push(SuiteEntry { name: case.name, max_rel_error: worst });
    }
    Ok(out)
}

/// A small model with the full topology, cheap enough for finite differences.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        mel_bins: 32,
        frames: 48,
        clip_duration: 0.5,
        patch_height: 16,
        patch_width: 16,
        stride_freq: 8,
        stride_time: 8,
        embed_dim: 16,
        pte_depth: 1,
        pte_heads: 2,
        fte_depth: 1,
        fte_heads: 2,
        upsample_ratio: 3,
        num_classes: 3,
        gru_hidden: 8,
        ..ModelConfig::toy()
    }
}

/// Gradient check of the training objective of one clip with respect to
/// `coords` randomly chosen parameter coordinates.
pub fn model_suite(cfg: &ModelConfig, coords: usize, seed: u64) -> Result<Real> {
    let model = AstSed::new(cfg.clone())?;
    let params = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let spec = draw(&[cfg.mel_bins, cfg.frames], Draw::Normal, &mut rng)?.map(|v| 0.5 * v);
    let (l, k) = (cfg.output_steps(), cfg.num_classes);
    let frame_t = NdArray::new(vec![l, k], (0..l * k).map(|_| rng.random_range(0..2) as Real).collect())?;
    let clip_t = NdArray::new(vec![k], (0..k).map(|_| rng.random_range(0..2) as Real).collect())?;
    let teacher = Predictions {
        frame_probs: draw(&[l, k], Draw::Prob, &mut rng)?,
        clip_probs: draw(&[k], Draw::Prob, &mut rng)?,
        seconds_per_step: cfg.seconds_per_step(),
    };
    let targets = Targets { clip: Some(clip_t), frame: Some(frame_t) };
    let scale = LossScale::for_batch(std::slice::from_ref(&targets), l, k);
    let f = |g: &mut Graph, p: &Bound| -> Result<Var> {
        let out = model.forward(g, p, &spec)?;
        Ok(clip_objective(g, &out, &targets, &teacher, &scale, 1.3)?.0)
    };
    Ok(grad_check(f, &params, STEP, Coords::Sample { count: coords, seed })?.max_rel_error)
}
