//! Structural invariants of the encoder and decoder stages.

use ast_sed::gradsuite::small_model_config;
use ast_sed::model::{linear_softmax_pool, load_checkpoint, save_checkpoint, AstSed, EncoderKind, ModelConfig, TokenGrid};
use ast_sed::tensor::{trunc_normal, Graph, NdArray, ParamTree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const F: usize = 4;
const T: usize = 6;

fn model(encoder: EncoderKind) -> (AstSed, ParamTree) {
    let m = AstSed::new(ModelConfig { encoder, ..small_model_config() }).unwrap();
    let mut p = m.init_params(3).unwrap();
    // Larger weights than the init so every block does visible work.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let paths: Vec<String> = p.paths().map(String::from).collect();
    for path in paths {
        let shape = p.get(&path).unwrap().shape().to_vec();
        p.set(&path, trunc_normal(&shape, 0.4, &mut rng)).unwrap();
    }
    (m, p)
}

fn random_grid(seed: u64) -> NdArray {
    let dim = small_model_config().embed_dim;
    trunc_normal(&[F, T, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// FTE frame sequence `[T, C]` for a given `[F, T, C]` grid.
fn fte(m: &AstSed, p: &ParamTree, grid: &NdArray) -> NdArray {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let var = g.constant(grid.clone());
    let dim = grid.shape()[2];
    let out = m.fte_forward(&mut g, &b, TokenGrid { var, freq: F, time: T, dim }).unwrap();
    g.value(out.var).clone()
}

fn column(x: &NdArray, t: usize) -> &[f64] {
    let c = x.shape()[1];
    &x.data()[t * c..(t + 1) * c]
}

#[test]
fn fte_output_at_a_time_step_sees_only_that_column() {
    let (m, p) = model(EncoderKind::Fte);
    let grid = random_grid(1);
    let base = fte(&m, &p, &grid);
    let dim = grid.shape()[2];
    let changed_t = 2;
    let mut data = grid.data().to_vec();
    for f in 0..F {
        for c in 0..dim {
            data[(f * T + changed_t) * dim + c] += 0.7 + c as f64 * 0.1;
        }
    }
    let moved = fte(&m, &p, &NdArray::new(grid.shape().to_vec(), data).unwrap());
    for t in 0..T {
        if t == changed_t {
            assert_ne!(column(&base, t), column(&moved, t));
        } else {
            assert_eq!(column(&base, t), column(&moved, t), "column {t} changed");
        }
    }
}

#[test]
fn fte_commutes_with_time_shifts() {
    let (m, p) = model(EncoderKind::Fte);
    let grid = random_grid(2);
    let dim = grid.shape()[2];
    let shift = 2;
    let mut data = vec![0.0; grid.len()];
    for f in 0..F {
        for t in 0..T {
            let src = (f * T + t) * dim;
            let dst = (f * T + (t + shift) % T) * dim;
            data[dst..dst + dim].copy_from_slice(&grid.data()[src..src + dim]);
        }
    }
    let (a, b) = (fte(&m, &p, &grid), fte(&m, &p, &NdArray::new(grid.shape().to_vec(), data).unwrap()));
    for t in 0..T {
        for (x, y) in column(&a, t).iter().zip(column(&b, (t + shift) % T)) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
}

#[test]
fn mean_pool_ignores_frequency_order_exactly() {
    let (m, _) = model(EncoderKind::MeanPool);
    let grid = random_grid(3);
    let dim = grid.shape()[2];
    let perm = [2, 0, 3, 1];
    let mut data = vec![0.0; grid.len()];
    for (dst, &src) in perm.iter().enumerate() {
        let n = T * dim;
        data[dst * n..(dst + 1) * n].copy_from_slice(&grid.data()[src * n..(src + 1) * n]);
    }
    let pool = |x: NdArray| {
        let mut g = Graph::new();
        let var = g.constant(x);
        let s = m.mean_pool_frequency(&mut g, TokenGrid { var, freq: F, time: T, dim });
        g.value(s.var).clone()
    };
    assert_eq!(pool(grid.clone()), pool(NdArray::new(grid.shape().to_vec(), data).unwrap()));
}

#[test]
fn nni_repeats_each_step_bit_exactly() {
    let (m, _) = model(EncoderKind::Fte);
    let x = trunc_normal(&[T, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    for n in [1, 2, 3, 10] {
        let mut g = Graph::new();
        let var = g.constant(x.clone());
        let seq = ast_sed::model::FrameSequence { var, len: T, seconds_per_step: 0.1 };
        let up = m.nni(&mut g, seq, n).unwrap();
        assert_eq!(up.len, T * n);
        assert!((up.seconds_per_step - 0.1 / n as f64).abs() < 1e-15);
        let y = g.value(up.var);
        for i in 0..T * n {
            assert_eq!(column(y, i), column(&x, i / n));
        }
    }
    let mut g = Graph::new();
    let var = g.constant(x);
    assert!(m.nni(&mut g, ast_sed::model::FrameSequence { var, len: T, seconds_per_step: 0.1 }, 0).is_err());
}

fn gru_out(m: &AstSed, p: &ParamTree, x: &NdArray) -> NdArray {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let var = g.constant(x.clone());
    let seq = ast_sed::model::FrameSequence { var, len: x.shape()[0], seconds_per_step: 0.1 };
    let o = m.bigru_forward(&mut g, &b, seq).unwrap();
    g.value(o.var).clone()
}

#[test]
fn bigru_halves_look_in_opposite_directions() {
    let (m, p) = model(EncoderKind::Fte);
    let h = m.config().gru_hidden;
    let dim = m.config().embed_dim;
    let x = trunc_normal(&[8, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let base = gru_out(&m, &p, &x);
    assert_eq!(base.shape(), &[8, 2 * h]);
    let k = 4;
    let mut data = x.data().to_vec();
    data[k * dim] += 1.0;
    let moved = gru_out(&m, &p, &NdArray::new(vec![8, dim], data).unwrap());
    for t in 0..8 {
        let (a, b) = (column(&base, t), column(&moved, t));
        // Forward half depends on steps <= t, backward half on steps >= t.
        assert_eq!(t < k, a[..h] == b[..h], "forward half at {t}");
        assert_eq!(t > k, a[h..] == b[h..], "backward half at {t}");
    }
}

#[test]
fn bigru_with_zero_weights_outputs_zero() {
    let (m, mut p) = model(EncoderKind::Fte);
    let paths: Vec<String> = p.paths().filter(|k| k.starts_with("gru.")).map(String::from).collect();
    for path in paths {
        let shape = p.get(&path).unwrap().shape().to_vec();
        p.set(&path, NdArray::zeros(&shape)).unwrap();
    }
    let x = trunc_normal(&[5, m.config().embed_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    assert!(gru_out(&m, &p, &x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_softmax_pooling_examples() {
    assert_eq!(linear_softmax_pool(&[0.0, 0.0]), 0.0);
    assert!((linear_softmax_pool(&[0.5, 0.5]) - 0.5).abs() < 1e-15);
    assert!((linear_softmax_pool(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    assert!((linear_softmax_pool(&[0.2, 0.6]) - 0.5).abs() < 1e-15);
}

#[test]
fn prediction_shapes_follow_the_upsampling_ratio() {
    for (encoder, ur) in [(EncoderKind::Fte, 1), (EncoderKind::MeanPool, 3)] {
        let cfg = ModelConfig { encoder, upsample_ratio: ur, ..small_model_config() };
        let m = AstSed::new(cfg.clone()).unwrap();
        let p = m.init_params(0).unwrap();
        let spec = trunc_normal(&[cfg.mel_bins, cfg.frames], 0.5, &mut ChaCha8Rng::seed_from_u64(8));
        let out = m.predict_with(&p, &spec, ast_sed::model::FrameSource::Configured).unwrap();
        assert_eq!(out.frame_probs.shape(), &[cfg.time_patches() * ur, cfg.num_classes]);
        assert_eq!(out.clip_probs.shape(), &[cfg.num_classes]);
        assert!(out.frame_probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn checkpoint_mismatch_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = small_model_config();
    let p = AstSed::new(cfg.clone()).unwrap().init_params(1).unwrap();
    save_checkpoint(&path, &p, &cfg).unwrap();
    assert_eq!(load_checkpoint(&path, &cfg).unwrap(), p);
    let other = ModelConfig { gru_hidden: 4, ..cfg };
    let err = load_checkpoint(&path, &other).unwrap_err();
    assert!(err.to_string().contains("gru_hidden"), "{err}");
    assert_eq!(err.exit_code(), 2);
}
