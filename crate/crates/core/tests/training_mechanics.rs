//! Mean-teacher bookkeeping on a tiny corpus: loss recombination, EMA and
//! the gradient-free teacher.

mod common;

use ast_sed::model::{AstSed, ModelConfig};
use ast_sed::tensor::ParamTree;
use ast_sed::training::{ema_update, train, AugmentConfig, TrainOptions, TrainSchedule};

fn quick_options() -> TrainOptions {
    TrainOptions {
        schedule: TrainSchedule { epochs: 2, constant_lr_epochs: 1, ..TrainSchedule::toy() },
        validate: false,
        ..TrainOptions::default()
    }
}

fn small_toy() -> ModelConfig {
    ModelConfig { embed_dim: 16, pte_depth: 1, fte_depth: 1, pte_heads: 2, fte_heads: 2, gru_hidden: 8, upsample_ratio: 2, ..ModelConfig::toy() }
}

#[test]
fn logged_terms_recombine_and_teacher_stays_gradient_free() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::tiny_corpus(dir.path());
    let out = train(&corpus, &small_toy(), &quick_options()).unwrap();
    assert_eq!(out.epochs.len(), 2);
    assert!(!out.iterations.is_empty());
    for row in &out.iterations {
        let l = &row.loss;
        assert!((l.recombine() - l.l_total).abs() <= 1e-12, "iteration {}: {} vs {}", row.iteration, l.recombine(), l.l_total);
    }
    assert!(!out.teacher.has_grads());
    assert_ne!(out.teacher, out.student);
    // Alpha ramps up from a small value.
    let first = out.iterations.first().unwrap().loss.alpha;
    let last = out.iterations.last().unwrap().loss.alpha;
    assert!(first < last);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::tiny_corpus(dir.path());
    let opts = TrainOptions { schedule: TrainSchedule { epochs: 1, constant_lr_epochs: 1, ..TrainSchedule::toy() }, ..quick_options() };
    let a = train(&corpus, &small_toy(), &opts).unwrap();
    let b = train(&corpus, &small_toy(), &opts).unwrap();
    assert_eq!(a.student, b.student);
    assert_eq!(a.iterations_tsv(), b.iterations_tsv());
    let no_aug = TrainOptions { augment: AugmentConfig::none(), ..opts };
    assert_ne!(train(&corpus, &small_toy(), &no_aug).unwrap().student, a.student);
}

#[test]
fn ema_matches_its_closed_form() {
    let m = AstSed::new(small_toy()).unwrap();
    let t0 = m.init_params(1).unwrap();
    let s = m.init_params(2).unwrap();
    let beta: f64 = 0.9;
    let n = 25;
    let mut t = t0.clone();
    for _ in 0..n {
        ema_update(&mut t, &s, beta).unwrap();
    }
    let w = beta.powi(n);
    for ((path, got), ((_, a), (_, b))) in t.iter().zip(t0.iter().zip(s.iter())) {
        for ((g, x), y) in got.data().iter().zip(a.data()).zip(b.data()) {
            assert!((g - (w * x + (1.0 - w) * y)).abs() <= 1e-12, "{path}");
        }
    }
    let mut wrong = ParamTree::new();
    wrong.insert("x", ast_sed::tensor::NdArray::zeros(&[1])).unwrap();
    assert!(ema_update(&mut wrong, &s, beta).is_err());
}
