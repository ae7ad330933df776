//! A generated dataset loaded into memory as normalized features and labels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datagen::{read_manifest, DatasetManifest, DatasetPaths, Split};
use crate::error::{Error, Result};
use crate::events::{read_strong, read_weak, EventList, EventTable};
use crate::features::{read_wav, FrontendConfig};
use crate::model::ModelConfig;
use crate::parallel;
use crate::tensor::{NdArray, Real};

#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    /// Normalized log-mel features `[M, T]`.
    pub spec: NdArray,
    /// Multiplier that normalization applied to log-power values.
    pub norm_scale: Real,
    /// Strong labels, for strong, validation and test clips.
    pub events: Option<EventList>,
    /// Clip-level class indices, for weak clips.
    pub tags: Option<Vec<usize>>,
}

impl Clip {
    /// Multi-hot clip targets `[K]`, from tags or the classes of the events.
    pub fn clip_targets(&self, classes: &[String]) -> Option<NdArray> {
        let mut t = vec![0.0; classes.len()];
        if let Some(tags) = &self.tags {
            tags.iter().for_each(|&c| t[c] = 1.0);
        } else if let Some(ev) = &self.events {
            for e in ev {
                if let Some(c) = classes.iter().position(|n| *n == e.label) {
                    t[c] = 1.0;
                }
            }
        } else {
            return None;
        }
        Some(NdArray::vector(t))
    }
}

/// Frame-activity targets `[T, K]` at input frame resolution: frame `t` is
/// active for an event whose interval contains the frame centre.
pub fn rasterize(events: &[crate::events::Event], classes: &[String], frames: usize, fe: &FrontendConfig) -> NdArray {
    let k = classes.len();
    let mut out = vec![0.0; frames * k];
    let half = fe.window / 2.0;
    for e in events {
        let Some(c) = classes.iter().position(|n| *n == e.label) else { continue };
        for t in 0..frames {
            let centre = t as Real * fe.hop + half;
            if centre >= e.onset && centre < e.offset {
                out[t * k + c] = 1.0;
            }
        }
    }
    NdArray::new(vec![frames, k], out).expect("frames and classes are positive")
}

/// Resamples `[T, K]` frame targets to the model's `L` output steps by
/// taking the input frame nearest each step centre.
pub fn to_output_steps(frame_targets: &NdArray, cfg: &ModelConfig, fe: &FrontendConfig) -> NdArray {
    let (t_in, k) = (frame_targets.shape()[0], frame_targets.shape()[1]);
    let l = cfg.output_steps();
    let spf = cfg.seconds_per_step();
    let mut out = Vec::with_capacity(l * k);
    for j in 0..l {
        let centre = (j as Real + 0.5) * spf;
        let t = ((centre - fe.window / 2.0) / fe.hop).round().clamp(0.0, (t_in - 1) as Real) as usize;
        out.extend_from_slice(&frame_targets.data()[t * k..(t + 1) * k]);
    }
    NdArray::new(vec![l, k], out).expect("non-empty targets")
}

/// Features of every requested split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub classes: Vec<String>,
    pub frontend: FrontendConfig,
    pub splits: BTreeMap<Split, Vec<Clip>>,
}

impl Corpus {
    pub fn load(root: &Path, frontend: &FrontendConfig, which: &[Split]) -> Result<Self> {
        let manifest = read_manifest(root)?;
        manifest.validate()?;
        if manifest.synth.sample_rate != frontend.sample_rate {
            return Err(Error::Config(format!(
                "dataset is {} Hz but features.sample_rate is {}",
                manifest.synth.sample_rate, frontend.sample_rate
            )));
        }
        let paths = DatasetPaths::new(root);
        let classes = manifest.class_names();
        let mut splits = BTreeMap::new();
        for &split in which {
            let labels: Option<EventTable> = match split {
                Split::StrongReal | Split::StrongSynth => Some(read_strong(&paths.strong())?),
                Split::Validation => Some(read_strong(&paths.validation())?),
                Split::Test => Some(read_strong(&paths.test())?),
                Split::Weak | Split::Unlabeled => None,
            };
            let weak = if split == Split::Weak { Some(read_weak(&paths.weak())?) } else { None };
            let n = manifest.sizes.get(split);
            let clips = parallel::try_map_indexed(n, |i| -> Result<Clip> {
                let name = DatasetManifest::clip_name(split, i);
                let path = paths.audio().join(&name);
                let (spec, norm_scale) = frontend.extract_with_scale(&read_wav(&path)?)?;
                let events = labels.as_ref().map(|t| t.get(&name).cloned().unwrap_or_default());
                let tags = match &weak {
                    Some(w) => {
                        let names = w.get(&name).ok_or_else(|| {
                            Error::format(&paths.weak(), format!("no weak label row for {name}"))
                        })?;
                        let idx = names
                            .iter()
                            .map(|c| {
                                classes.iter().position(|k| k == c).ok_or_else(|| {
                                    Error::format(&paths.weak(), format!("unknown class `{c}` for {name}"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Some(idx)
                    }
                    None => None,
                };
                Ok(Clip { name, spec: spec.values, norm_scale, events, tags })
            })?;
            splits.insert(split, clips);
        }
        Ok(Corpus { manifest, classes, frontend: frontend.clone(), splits })
    }

    pub fn split(&self, s: Split) -> &[Clip] {
        self.splits.get(&s).map_or(&[], Vec::as_slice)
    }

    /// Reference events of a strongly labeled split.
    pub fn refs(&self, s: Split) -> EventTable {
        self.split(s).iter().map(|c| (c.name.clone(), c.events.clone().unwrap_or_default())).collect()
    }

    /// Total audio duration of a split in seconds.
    pub fn seconds(&self, s: Split) -> Real {
        self.split(s).len() as Real * self.manifest.synth.clip_length
    }

    /// Checks that features line up with the model input geometry.
    pub fn check_model(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.num_classes != self.classes.len() {
            return Err(Error::Config(format!(
                "model.num_classes {} but the dataset has {} classes",
                cfg.num_classes,
                self.classes.len()
            )));
        }
        if let Some(c) = self.splits.values().flatten().next() {
            if c.spec.shape() != [cfg.mel_bins, cfg.frames] {
                return Err(Error::Config(format!(
                    "features are {:?} but model.mel_bins x model.frames is {}x{}",
                    c.spec.shape(),
                    cfg.mel_bins,
                    cfg.frames
                )));
            }
        }
        if (cfg.clip_duration - self.manifest.synth.clip_length).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "model.clip_duration {} differs from data.clip_length {}",
                cfg.clip_duration, self.manifest.synth.clip_length
            )));
        }
        Ok(())
    }
}
