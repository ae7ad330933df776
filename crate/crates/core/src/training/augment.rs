use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::tensor::{NdArray, Real};

/// Per-augmentation application probabilities and ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mixup: Real,
    pub time_shift: Real,
    pub time_mask: Real,
    pub filter_augment: Real,
    pub mixup_beta: Real,
    pub mask_max_fraction: Real,
    pub filter_db: Real,
    pub filter_segments: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mixup: 0.5,
            time_shift: 0.5,
            time_mask: 0.5,
            filter_augment: 0.5,
            mixup_beta: 0.5,
            mask_max_fraction: 0.1,
            filter_db: 6.0,
            filter_segments: (2, 4),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { mixup: 0.0, time_shift: 0.0, time_mask: 0.0, filter_augment: 0.0, ..Self::default() }
    }
}

/// Features plus whatever labels travel with them. Frame labels are `[T, K]`
/// at input frame resolution so that time edits apply to both alike.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub spec: NdArray,
    pub norm_scale: Real,
    pub frame: Option<NdArray>,
    pub clip: Option<NdArray>,
}

fn mix_opt(a: &Option<NdArray>, b: &Option<NdArray>, lambda: Real) -> Option<NdArray> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.zip_map(y, |u, v| lambda * u + (1.0 - lambda) * v)),
        (x, _) => x.clone(),
    }
}

/// Convex combination `lambda * a + (1 - lambda) * b` of features and labels.
pub fn mixup(a: &Sample, b: &Sample, lambda: Real) -> Sample {
    if lambda == 1.0 {
        return a.clone();
    }
    Sample {
        spec: a.spec.zip_map(&b.spec, |u, v| lambda * u + (1.0 - lambda) * v),
        norm_scale: lambda * a.norm_scale + (1.0 - lambda) * b.norm_scale,
        frame: mix_opt(&a.frame, &b.frame, lambda),
        clip: mix_opt(&a.clip, &b.clip, lambda),
    }
}

fn roll_rows(x: &NdArray, offset: usize) -> NdArray {
    let (t, k) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; t * k];
    for i in 0..t {
        let j = (i + offset) % t;
        out[j * k..(j + 1) * k].copy_from_slice(&x.data()[i * k..(i + 1) * k]);
    }
    NdArray::new(vec![t, k], out).expect("same shape")
}

/// Circular shift along time by `offset` frames, applied to frame labels too.
pub fn time_shift(s: &Sample, offset: usize) -> Sample {
    let (m, t) = (s.spec.shape()[0], s.spec.shape()[1]);
    let mut spec = vec![0.0; m * t];
    for r in 0..m {
        for i in 0..t {
            spec[r * t + (i + offset) % t] = s.spec.data()[r * t + i];
        }
    }
    Sample {
        spec: NdArray::new(vec![m, t], spec).expect("same shape"),
        norm_scale: s.norm_scale,
        frame: s.frame.as_ref().map(|f| roll_rows(f, offset)),
        clip: s.clip.clone(),
    }
}

/// Zeros frames `start..start + len`; labels are untouched.
pub fn time_mask(s: &Sample, start: usize, len: usize) -> Sample {
    let (m, t) = (s.spec.shape()[0], s.spec.shape()[1]);
    let mut spec = s.spec.clone();
    let d = spec.data_mut();
    for r in 0..m {
        for i in start.min(t)..(start + len).min(t) {
            d[r * t + i] = 0.0;
        }
    }
    Sample { spec, ..s.clone() }
}

/// Adds a per-band gain given in dB of power, converted to the normalized
/// log scale of the features.
pub fn filter_augment(s: &Sample, gains_db: &[Real]) -> Sample {
    let (m, t) = (s.spec.shape()[0], s.spec.shape()[1]);
    let mut spec = s.spec.clone();
    let d = spec.data_mut();
    let per_db = std::f64::consts::LN_10 as Real / 10.0 * s.norm_scale;
    for r in 0..m {
        let add = gains_db[r] * per_db;
        d[r * t..(r + 1) * t].iter_mut().for_each(|v| *v += add);
    }
    Sample { spec, ..s.clone() }
}

/// Piecewise-linear gain curve over `bins` with `segments` pieces and knot
/// gains uniform in `±max_db`.
pub fn random_filter(bins: usize, segments: usize, max_db: Real, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let segments = segments.clamp(1, bins.max(2) - 1);
    let mut knots: Vec<usize> = vec![0, bins - 1];
    while knots.len() < segments + 1 {
        let k = rng.random_range(1..bins - 1);
        if !knots.contains(&k) {
            knots.push(k);
        }
    }
    knots.sort_unstable();
    let gains: Vec<Real> = knots.iter().map(|_| rng.random_range(-max_db..=max_db)).collect();
    (0..bins)
        .map(|b| {
            let i = knots.windows(2).position(|w| b >= w[0] && b <= w[1]).unwrap_or(0);
            let (k0, k1) = (knots[i], knots[i + 1]);
            let u = if k1 == k0 { 0.0 } else { (b - k0) as Real / (k1 - k0) as Real };
            gains[i] * (1.0 - u) + gains[i + 1] * u
        })
        .collect()
}

/// Augments one source group; MixUp partners come from the same group.
pub fn augment_group(group: &[Sample], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let beta = Beta::new(cfg.mixup_beta, cfg.mixup_beta).ok();
    group
        .iter()
        .map(|s| {
            let mut out = s.clone();
            if rng.random_bool(cfg.mixup.clamp(0.0, 1.0)) {
                let partner = &group[rng.random_range(0..group.len())];
                let lambda: Real = beta.as_ref().map_or(0.5, |b| b.sample(rng) as Real);
                out = mixup(&out, partner, lambda);
            }
            let t = out.spec.shape()[1];
            if rng.random_bool(cfg.time_shift.clamp(0.0, 1.0)) {
                out = time_shift(&out, rng.random_range(0..t));
            }
            if rng.random_bool(cfg.time_mask.clamp(0.0, 1.0)) {
                let max = ((cfg.mask_max_fraction * t as Real) as usize).max(1);
                let len = rng.random_range(1..=max);
                let start = rng.random_range(0..=t - len);
                out = time_mask(&out, start, len);
            }
            if rng.random_bool(cfg.filter_augment.clamp(0.0, 1.0)) {
                let (lo, hi) = cfg.filter_segments;
                let segs = rng.random_range(lo..=hi.max(lo));
                let gains = random_filter(out.spec.shape()[0], segs, cfg.filter_db, rng);
                out = filter_augment(&out, &gains);
            }
            out
        })
        .collect()
}
