use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment_group, AugmentConfig, Sample};
use super::loss::{clip_objective, LossBreakdown, LossScale, Targets};
use super::optim::{ema_beta_at, ema_update, AdamW};
use super::schedule::{alpha_ramp, BatchSpec, TrainSchedule};
use crate::datagen::{derive_seed, Split};
use crate::dataset::{rasterize, to_output_steps, Clip, Corpus};
use crate::error::{Error, Result};
use crate::eval::{decode_all, decode_sweep, eb_f1, infer, psds, DecodeConfig, MatchConfig, PsdsConfig};
use crate::model::{is_backbone_path, load_backbone_into, save_checkpoint, AstSed, ModelConfig};
use crate::parallel;
use crate::tensor::{Graph, NdArray, ParamTree, Real};

/// Training sources in batch order.
pub const SOURCES: [Split; 4] = [Split::StrongReal, Split::StrongSynth, Split::Weak, Split::Unlabeled];

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub schedule: TrainSchedule,
    pub batch: BatchSpec,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Pretrained backbone checkpoint used to initialize the student.
    pub backbone: Option<PathBuf>,
    pub decode: DecodeConfig,
    pub matching: MatchConfig,
    pub psds: PsdsConfig,
    /// Score the validation split after every epoch.
    pub validate: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            schedule: TrainSchedule::toy(),
            batch: BatchSpec::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            backbone: None,
            decode: DecodeConfig::default(),
            matching: MatchConfig::default(),
            psds: PsdsConfig::default(),
            validate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRow {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    /// Means over the epoch's iterations.
    pub loss: LossBreakdown,
    pub lr_backbone: Real,
    pub lr_new: Real,
    pub val_f1: Option<Real>,
    pub val_psds: Option<Real>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: ParamTree,
    pub teacher: ParamTree,
    pub epochs: Vec<EpochRow>,
    pub iterations: Vec<IterationRow>,
}

/// Cycles through a source in reshuffled passes.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Cycler { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn base_sample(c: &Clip, classes: &[String], frames: usize, corpus: &Corpus) -> Sample {
    Sample {
        spec: c.spec.clone(),
        norm_scale: c.norm_scale,
        frame: c.events.as_ref().map(|e| rasterize(e, classes, frames, &corpus.frontend)),
        clip: c.clip_targets(classes),
    }
}

/// Iterations per epoch: enough for the largest source (relative to its
/// batch share) to be seen once.
pub fn iterations_per_epoch(sizes: [usize; 4], batch: &BatchSpec) -> usize {
    sizes
        .iter()
        .zip(batch.counts())
        .filter(|(n, b)| **n > 0 && *b > 0)
        .map(|(n, b)| n.div_ceil(b))
        .max()
        .unwrap_or(0)
}

/// Mean-teacher fine-tuning of the sound event detection model.
pub fn train(corpus: &Corpus, cfg: &ModelConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    opts.schedule.validate()?;
    opts.batch.validate()?;
    opts.decode.validate(corpus.classes.len())?;
    opts.matching.validate()?;
    opts.psds.validate()?;
    corpus.check_model(cfg)?;
    let model = AstSed::new(cfg.clone())?;
    let classes = &corpus.classes;
    let sched = &opts.schedule;

    let mut student = model.init_params(opts.seed)?;
    if let Some(path) = &opts.backbone {
        let n = load_backbone_into(path, cfg, &mut student)?;
        log::info!("initialized {n} backbone leaves from {}", path.display());
    }
    let mut teacher = student.clone();

    let pools: Vec<Vec<Sample>> = SOURCES
        .iter()
        .map(|&s| corpus.split(s).iter().map(|c| base_sample(c, classes, cfg.frames, corpus)).collect())
        .collect();
    let names: Vec<Vec<&str>> = SOURCES.iter().map(|&s| corpus.split(s).iter().map(|c| c.name.as_str()).collect()).collect();
    let sizes = [pools[0].len(), pools[1].len(), pools[2].len(), pools[3].len()];
    for (i, (&n, b)) in sizes.iter().zip(opts.batch.counts()).enumerate() {
        if n == 0 && b > 0 {
            log::warn!("source {} is empty; its batch share is dropped", SOURCES[i]);
        }
    }
    let per_epoch = iterations_per_epoch(sizes, &opts.batch);
    if per_epoch == 0 {
        return Err(Error::Input("no training clips for the configured batch".into()));
    }
    let total_iters = per_epoch * sched.epochs;
    let rampup = sched.rampup_for(total_iters);
    let mut cyclers: Vec<Cycler> =
        (0..4).map(|s| Cycler::new(sizes[s], derive_seed(opts.seed, 100 + s as u64, 0))).collect();

    let mut opt = AdamW::new(sched.adam_beta1, sched.adam_beta2, sched.adam_eps, sched.weight_decay);
    let steps = cfg.output_steps();
    let mut iterations = Vec::with_capacity(total_iters);
    let mut epochs = Vec::with_capacity(sched.epochs);
    let val = corpus.split(Split::Validation);

    for epoch in 0..sched.epochs {
        let factor = sched.lr_factor(epoch);
        let (lr_b, lr_n) = (sched.lr_backbone * factor, sched.lr_new * factor);
        let mut acc = LossBreakdown::default();
        for b_idx in 0..per_epoch {
            let it = epoch * per_epoch + b_idx;
            let alpha = alpha_ramp(it, rampup, sched.alpha_max);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 200, it as u64));
            let mut batch: Vec<Sample> = Vec::with_capacity(opts.batch.total());
            let mut batch_names: Vec<&str> = Vec::new();
            for (s, &k) in opts.batch.counts().iter().enumerate() {
                let idx = cyclers[s].take(k);
                let group: Vec<Sample> = idx.iter().map(|&i| pools[s][i].clone()).collect();
                batch_names.extend(idx.iter().map(|&i| names[s][i]));
                if !group.is_empty() {
                    batch.extend(augment_group(&group, &opts.augment, &mut rng));
                }
            }
            let targets: Vec<Targets> = batch
                .iter()
                .map(|s| Targets {
                    clip: s.clip.clone(),
                    frame: s.frame.as_ref().map(|f| to_output_steps(f, cfg, &corpus.frontend)),
                })
                .collect();
            let scale = LossScale::for_batch(&targets, steps, classes.len());
            let teacher_ref = &teacher;
            let teacher_preds = parallel::try_map_indexed(batch.len(), |i| {
                model.predict_with(teacher_ref, &batch[i].spec, crate::model::FrameSource::Configured)
            })?;
            let student_ref = &student;
            let results = parallel::try_map_indexed(batch.len(), |i| -> Result<_> {
                let mut g = Graph::new();
                let bound = student_ref.bind(&mut g, true);
                let out = model.forward(&mut g, &bound, &batch[i].spec)?;
                let (root, parts) = clip_objective(&mut g, &out, &targets[i], &teacher_preds[i], &scale, alpha)?;
                let total = g.value(root).data()[0];
                let grads = g.backward(root)?;
                Ok((bound.collect(&g, &grads), parts, total))
            })?;

            let mut loss = LossBreakdown { alpha, ..Default::default() };
            let mut grads: BTreeMap<String, NdArray> = BTreeMap::new();
            for (gi, parts, total) in results {
                loss.l_c += parts[0];
                loss.l_f += parts[1];
                loss.l_mt_c += parts[2];
                loss.l_mt_f += parts[3];
                loss.l_total += total;
                for (k, v) in gi {
                    match grads.get_mut(&k) {
                        Some(a) => a.add_assign(&v),
                        None => {
                            grads.insert(k, v);
                        }
                    }
                }
            }
            let finite = [loss.l_c, loss.l_f, loss.l_mt_c, loss.l_mt_f, loss.l_total].iter().all(|v| v.is_finite())
                && grads.values().all(NdArray::all_finite);
            if !finite {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at iteration {it} (epoch {epoch}, batch index {b_idx}); clips: {}",
                    batch_names.join(",")
                )));
            }
            student.set_grads(grads)?;
            let grads = student.take_grads();
            opt.step(&mut student, &grads, |p| if is_backbone_path(p) { lr_b } else { lr_n })?;
            ema_update(&mut teacher, &student, ema_beta_at(it, sched.ema_beta))?;
            if teacher.has_grads() {
                return Err(Error::Structure { path: "teacher".into(), detail: "teacher received gradients".into() });
            }
            acc.l_c += loss.l_c;
            acc.l_f += loss.l_f;
            acc.l_mt_c += loss.l_mt_c;
            acc.l_mt_f += loss.l_mt_f;
            acc.alpha += loss.alpha;
            acc.l_total += loss.l_total;
            iterations.push(IterationRow { iteration: it, epoch, loss });
        }
        let n = per_epoch as Real;
        let mean = LossBreakdown {
            l_c: acc.l_c / n,
            l_f: acc.l_f / n,
            l_mt_c: acc.l_mt_c / n,
            l_mt_f: acc.l_mt_f / n,
            alpha: acc.alpha / n,
            l_total: acc.l_total / n,
        };
        let (val_f1, val_psds) = if opts.validate && !val.is_empty() {
            let preds = infer(&model, &student, val)?;
            let refs = corpus.refs(Split::Validation);
            let ests = decode_all(&preds, val, classes, &opts.decode)?;
            let sweep = decode_sweep(&preds, val, classes, &opts.decode, &opts.psds.thresholds)?;
            let f1 = eb_f1(&refs, &ests, classes, &opts.matching).f1;
            let ps = psds(&sweep, &refs, classes, corpus.seconds(Split::Validation), &opts.psds).map(|r| r.score).ok();
            (Some(f1), ps)
        } else {
            (None, None)
        };
        log::info!(
            "epoch {epoch}: L_total {:.4} L_c {:.4} L_f {:.4} val EB-F1 {}",
            mean.l_total,
            mean.l_c,
            mean.l_f,
            val_f1.map_or("-".into(), |v| format!("{v:.4}"))
        );
        epochs.push(EpochRow { epoch, loss: mean, lr_backbone: lr_b, lr_new: lr_n, val_f1, val_psds });
    }
    Ok(TrainOutcome { student, teacher, epochs, iterations })
}

fn opt_cell(v: Option<Real>) -> String {
    v.map_or_else(|| "N/A".into(), |x| format!("{x:.6}"))
}

impl TrainOutcome {
    pub fn metrics_tsv(&self) -> String {
        let mut out = String::from("epoch\tL_c\tL_f\tL_MT_c\tL_MT_f\talpha\tlr_backbone\tlr_new\tval_EB-F1\tval_PSDS1\n");
        for r in &self.epochs {
            let l = &r.loss;
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.6e}\t{}\t{}",
                r.epoch,
                l.l_c,
                l.l_f,
                l.l_mt_c,
                l.l_mt_f,
                l.alpha,
                r.lr_backbone,
                r.lr_new,
                opt_cell(r.val_f1),
                opt_cell(r.val_psds)
            )
            .unwrap();
        }
        out
    }

    /// Per-iteration terms at full precision.
    pub fn iterations_tsv(&self) -> String {
        let mut out = String::from("iteration\tepoch\tL_c\tL_f\tL_MT_c\tL_MT_f\talpha\tL_total\n");
        for r in &self.iterations {
            let l = &r.loss;
            writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", r.iteration, r.epoch, l.l_c, l.l_f, l.l_mt_c, l.l_mt_f, l.alpha, l.l_total)
                .unwrap();
        }
        out
    }

    /// Writes `student.ckpt`, `teacher.ckpt`, `metrics.tsv` and `iterations.tsv`.
    pub fn write(&self, dir: &Path, cfg: &ModelConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join("student.ckpt"), &self.student, cfg)?;
        save_checkpoint(&dir.join("teacher.ckpt"), &self.teacher, cfg)?;
        for (name, text) in [("metrics.tsv", self.metrics_tsv()), ("iterations.tsv", self.iterations_tsv())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cycler_visits_everything_each_pass() {
        let mut c = Cycler::new(5, 1);
        let mut a = c.take(5);
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.take(7).len(), 7);
        assert!(Cycler::new(0, 1).take(3).is_empty());
    }

    #[test]
    fn epoch_length_follows_largest_share() {
        let b = BatchSpec::default();
        assert_eq!(iterations_per_epoch([60, 60, 120, 120], &b), 30);
        assert_eq!(iterations_per_epoch([61, 0, 0, 0], &b), 31);
        assert_eq!(iterations_per_epoch([0; 4], &b), 0);
    }
}
