use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::datagen::{derive_seed, Split};
use crate::dataset::{Clip, Corpus};
use crate::error::{Error, Result};
use crate::model::{AstSed, ModelConfig};
use crate::parallel;
use crate::tensor::{Graph, NdArray, ParamTree, Real};

/// Clip-tagging pretraining of the patch embedding and patch-wise transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: Real,
    pub batch: usize,
    pub weight_decay: Real,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 40, lr: 3e-3, batch: 12, weight_decay: 1e-4 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pretrain.epochs, pretrain.batch and pretrain.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Backbone plus the temporary tagging head.
    pub params: ParamTree,
    /// Mean tagging BCE per epoch.
    pub epoch_losses: Vec<Real>,
    /// Macro F1 at threshold 0.5 on held-out validation clips.
    pub val_macro_f1: Option<Real>,
}

/// Macro-averaged clip-level F1 of tagging outputs at `threshold`.
pub fn tagging_macro_f1(model: &AstSed, params: &ParamTree, clips: &[Clip], classes: &[String], threshold: Real) -> Result<Real> {
    let probs = parallel::try_map_indexed(clips.len(), |i| model.predict_tags(params, &clips[i].spec))?;
    let k = classes.len();
    let mut f1s = Vec::with_capacity(k);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (clip, p) in clips.iter().zip(&probs) {
            let truth = clip.clip_targets(classes).map_or(false, |t| t.data()[c] > 0.5);
            let hit = p.data()[c] > threshold;
            match (hit, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0 {
            f1s.push(2.0 * tp as Real / (2 * tp + fp + fn_) as Real);
        }
    }
    Ok(if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<Real>() / f1s.len() as Real })
}

/// Trains backbone and tagging head on every clip with clip-level labels
/// (strong clips contribute the classes of their events).
pub fn pretrain_at(corpus: &Corpus, cfg: &ModelConfig, pc: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    pc.validate()?;
    corpus.check_model(cfg)?;
    let model = AstSed::new(cfg.clone())?;
    let classes = &corpus.classes;
    let pool: Vec<(&NdArray, NdArray)> = [Split::StrongReal, Split::StrongSynth, Split::Weak]
        .iter()
        .flat_map(|&s| corpus.split(s))
        .filter_map(|c| c.clip_targets(classes).map(|t| (&c.spec, t)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Input("pretraining needs weak or strong clips".into()));
    }
    let mut params = model.init_tagging_params(seed)?;
    let mut opt = AdamW::new(0.9, 0.999, 1e-8, pc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 300, 0));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut epoch_losses = Vec::with_capacity(pc.epochs);
    let k = classes.len();
    for epoch in 0..pc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(pc.batch).enumerate() {
            let w = 1.0 / (chunk.len() * k) as Real;
            let p_ref = &params;
            let results = parallel::try_map_indexed(chunk.len(), |i| -> Result<_> {
                let (spec, target) = &pool[chunk[i]];
                let mut g = Graph::new();
                let bound = p_ref.bind(&mut g, true);
                let probs = model.tagging_forward(&mut g, &bound, spec)?;
                let loss = g.bce_sum(probs, target, w)?;
                let v = g.value(loss).data()[0];
                let grads = g.backward(loss)?;
                Ok((bound.collect(&g, &grads), v))
            })?;
            let mut grads: BTreeMap<String, NdArray> = BTreeMap::new();
            let mut loss = 0.0;
            for (gi, v) in results {
                loss += v;
                for (key, val) in gi {
                    match grads.get_mut(&key) {
                        Some(a) => a.add_assign(&val),
                        None => {
                            grads.insert(key, val);
                        }
                    }
                }
            }
            if !loss.is_finite() || !grads.values().all(NdArray::all_finite) {
                return Err(Error::Numerical(format!(
                    "non-finite tagging loss at epoch {epoch}, batch index {b}"
                )));
            }
            opt.step(&mut params, &grads, |_| pc.lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as Real;
        log::info!("pretrain epoch {epoch}: tagging loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let val = corpus.split(Split::Validation);
    let val_macro_f1 = if val.is_empty() { None } else { Some(tagging_macro_f1(&model, &params, val, classes, 0.5)?) };
    Ok(PretrainOutcome { params, epoch_losses, val_macro_f1 })
}
