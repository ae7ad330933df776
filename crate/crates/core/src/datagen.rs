//! Seeded synthetic soundscapes with strong, weak and unlabeled splits.
//!
//! Every clip draws from its own RNG stream, derived from the manifest seed,
//! the split and the clip index, so clips can be generated in any order.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{format_strong, format_weak, Event, EventList, EventTable};
use crate::features::{hz_to_mel, mel_centers, write_wav, Waveform};
use crate::model::ModelConfig;
use crate::parallel;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    ToneBurst,
    Harmonic,
    Chirp,
    NoiseBand,
    BroadbandNoise,
}

impl FromStr for SignalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tone_burst" => SignalKind::ToneBurst,
            "harmonic" => SignalKind::Harmonic,
            "chirp" => SignalKind::Chirp,
            "noise_band" => SignalKind::NoiseBand,
            "broadband_noise" => SignalKind::BroadbandNoise,
            other => return Err(Error::Config(format!("unknown signal kind `{other}`"))),
        })
    }
}

/// One synthetic event class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventTemplate {
    pub name: String,
    pub kind: SignalKind,
    /// Frequency range in Hz.
    pub band: (Real, Real),
    /// Duration range in seconds.
    pub duration: (Real, Real),
    /// RMS amplitude range.
    pub amplitude: (Real, Real),
}

impl EventTemplate {
    fn new(name: &str, kind: SignalKind, band: (Real, Real), duration: (Real, Real), amplitude: (Real, Real)) -> Self {
        EventTemplate { name: name.into(), kind, band, duration, amplitude }
    }

    pub fn mean_duration(&self) -> Real {
        0.5 * (self.duration.0 + self.duration.1)
    }

    /// Narrowband classes are the ones expected to favour specific frequency rows.
    pub fn is_narrowband(&self) -> bool {
        self.kind != SignalKind::BroadbandNoise && self.band.1 <= 5.0 * self.band.0
    }

    pub fn validate(&self, sample_rate: u32, clip_length: Real) -> Result<()> {
        let nyquist = sample_rate as Real / 2.0;
        let (lo, hi) = self.band;
        if !(lo > 0.0 && hi >= lo && hi < nyquist) {
            return Err(Error::Config(format!(
                "template `{}` band {lo}..{hi} Hz must lie within (0, {nyquist}) Hz",
                self.name
            )));
        }
        let (dlo, dhi) = self.duration;
        if !(dlo > 0.0 && dhi >= dlo && dhi <= clip_length) {
            return Err(Error::Config(format!(
                "template `{}` duration {dlo}..{dhi} s must be positive and at most the clip length {clip_length} s",
                self.name
            )));
        }
        let (alo, ahi) = self.amplitude;
        if !(alo > 0.0 && ahi >= alo) {
            return Err(Error::Config(format!("template `{}` amplitude range {alo}..{ahi} is invalid", self.name)));
        }
        Ok(())
    }
}

/// The six-class default vocabulary: one high-band, one low-band, two
/// mid-band and two all-band classes; four short and two long.
pub fn default_vocabulary() -> Vec<EventTemplate> {
    use SignalKind::*;
    let short = (0.1, 0.5);
    let long = (1.0, 2.0);
    let amp = (0.05, 0.15);
    vec![
        EventTemplate::new("beep_hi", ToneBurst, (3800.0, 4800.0), short, amp),
        EventTemplate::new("hum_lo", Harmonic, (110.0, 450.0), short, amp),
        EventTemplate::new("chirp_mid", Chirp, (1100.0, 1700.0), short, amp),
        EventTemplate::new("rattle_mid", NoiseBand, (600.0, 1000.0), short, amp),
        EventTemplate::new("hiss_all", BroadbandNoise, (50.0, 7900.0), long, amp),
        EventTemplate::new("motor_all", Harmonic, (80.0, 6000.0), long, amp),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub clip_length: Real,
    pub max_polyphony: usize,
    /// Mean event level over the noise floor, in dB.
    pub snr_db: Real,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { sample_rate: 16_000, clip_length: 2.0, max_polyphony: 3, snr_db: 30.0 }
    }
}

/// The dataset splits, each with its own RNG stream and filename prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    StrongReal,
    StrongSynth,
    Weak,
    Unlabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 6] =
        [Split::StrongReal, Split::StrongSynth, Split::Weak, Split::Unlabeled, Split::Validation, Split::Test];

    pub fn prefix(self) -> &'static str {
        match self {
            Split::StrongReal => "sr",
            Split::StrongSynth => "ss",
            Split::Weak => "wk",
            Split::Unlabeled => "ul",
            Split::Validation => "va",
            Split::Test => "te",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::StrongReal => "strong_real",
            Split::StrongSynth => "strong_synth",
            Split::Weak => "weak",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    /// Accepts the display name or the filename prefix.
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.to_string() == s || sp.prefix() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub strong_real: usize,
    pub strong_synth: usize,
    pub weak: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::StrongReal => self.strong_real,
            Split::StrongSynth => self.strong_synth,
            Split::Weak => self.weak,
            Split::Unlabeled => self.unlabeled,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

impl Default for SplitSizes {
    /// About 600 clips; the training splits follow a 1:1:2:2 shape.
    fn default() -> Self {
        SplitSizes { strong_real: 60, strong_synth: 60, weak: 120, unlabeled: 120, validation: 60, test: 180 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sizes: SplitSizes,
    pub synth: SynthConfig,
    pub vocabulary: Vec<EventTemplate>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 0,
            sizes: SplitSizes::default(),
            synth: SynthConfig::default(),
            vocabulary: default_vocabulary(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.synth.max_polyphony == 0 {
            return Err(Error::Config("data.max_polyphony must be at least 1".into()));
        }
        if !(self.synth.clip_length > 0.0) {
            return Err(Error::Config("data.clip_length must be positive".into()));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.vocabulary {
            if !seen.insert(&t.name) {
                return Err(Error::Config(format!("template `{}` is defined twice", t.name)));
            }
            t.validate(self.synth.sample_rate, self.synth.clip_length)?;
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.vocabulary.iter().map(|t| t.name.clone()).collect()
    }

    pub fn clip_name(split: Split, index: usize) -> String {
        format!("{}_{index:05}.wav", split.prefix())
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ index)
}

/// Seed of the RNG stream for one clip.
pub fn clip_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, split.tag(), index as u64)
}

fn ms(t: Real) -> Real {
    (t * 1000.0).round() / 1000.0
}

fn gaussian(rng: &mut ChaCha8Rng) -> Real {
    let z: f64 = StandardNormal.sample(rng);
    z as Real
}

fn unit_signal(t: &EventTemplate, n: usize, sr: Real, rng: &mut ChaCha8Rng) -> Vec<Real> {
    let (lo, hi) = t.band;
    let tau = 2.0 * PI as Real;
    let mut x: Vec<Real> = match t.kind {
        SignalKind::ToneBurst => {
            let f = rng.random_range(lo..=hi);
            let phase = rng.random_range(0.0..tau);
            (0..n).map(|i| (tau * f * i as Real / sr + phase).sin()).collect()
        }
        SignalKind::Harmonic => {
            let f0 = rng.random_range(lo..=(lo * 1.3).min(hi));
            let partials: Vec<(Real, Real)> = (1..)
                .map(|k| k as Real * f0)
                .take_while(|&f| f <= hi)
                .map(|f| (f, rng.random_range(0.0..tau)))
                .collect();
            (0..n)
                .map(|i| {
                    let ti = i as Real / sr;
                    partials.iter().enumerate().map(|(k, (f, ph))| (tau * f * ti + ph).sin() / ((k + 1) as Real).sqrt()).sum()
                })
                .collect()
        }
        SignalKind::Chirp => {
            let (f0, f1) = if rng.random_bool(0.5) { (lo, hi) } else { (hi, lo) };
            let dur = n as Real / sr;
            (0..n)
                .map(|i| {
                    let ti = i as Real / sr;
                    (tau * (f0 * ti + (f1 - f0) * ti * ti / (2.0 * dur))).sin()
                })
                .collect()
        }
        SignalKind::NoiseBand => {
            let comps: Vec<(Real, Real)> =
                (0..40).map(|_| (rng.random_range(lo..=hi), rng.random_range(0.0..tau))).collect();
            (0..n)
                .map(|i| {
                    let ti = i as Real / sr;
                    comps.iter().map(|(f, ph)| (tau * f * ti + ph).sin()).sum()
                })
                .collect()
        }
        SignalKind::BroadbandNoise => (0..n).map(|_| gaussian(rng)).collect(),
    };
    let rms = (x.iter().map(|v| v * v).sum::<Real>() / n.max(1) as Real).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    // 5 ms raised-cosine ramps at both ends.
    let ramp = ((0.005 * sr) as usize).min(n / 2);
    for i in 0..ramp {
        let w = 0.5 - 0.5 * (PI as Real * i as Real / ramp as Real).cos();
        x[i] *= w;
        x[n - 1 - i] *= w;
    }
    x
}

/// One clip and its exact event list. `seed` fully determines the result.
pub fn generate_clip(templates: &[EventTemplate], seed: u64, synth: &SynthConfig) -> Result<(Waveform, EventList)> {
    if synth.max_polyphony == 0 {
        return Err(Error::Config("max polyphony must be at least 1".into()));
    }
    if templates.is_empty() {
        return Err(Error::Config("no event templates".into()));
    }
    for t in templates {
        t.validate(synth.sample_rate, synth.clip_length)?;
    }
    let sr = synth.sample_rate as Real;
    let len = synth.clip_length;
    let n = (len * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mean_amp = templates.iter().map(|t| 0.5 * (t.amplitude.0 + t.amplitude.1)).sum::<Real>() / templates.len() as Real;
    let floor = mean_amp * (10.0 as Real).powf(-synth.snr_db / 20.0);
    let mut samples: Vec<Real> = (0..n).map(|_| floor * gaussian(&mut rng)).collect();

    let count = rng.random_range(1..=synth.max_polyphony);
    let mut events: EventList = Vec::with_capacity(count);
    for _ in 0..count {
        let t = &templates[rng.random_range(0..templates.len())];
        let d = rng.random_range(t.duration.0..=t.duration.1);
        let onset = ms(rng.random_range(0.0..=(len - d).max(0.0)));
        let offset = ms((onset + d).min(len)).min(len);
        // Same-class events never overlap, so the labels stay separable.
        if offset <= onset || events.iter().any(|e| e.label == t.name && e.onset < offset && onset < e.offset) {
            continue;
        }
        let amp = rng.random_range(t.amplitude.0..=t.amplitude.1);
        let start = (onset * sr).round() as usize;
        let end = ((offset * sr).round() as usize).min(n);
        let sig = unit_signal(t, end - start, sr, &mut rng);
        for (s, v) in samples[start..end].iter_mut().zip(sig) {
            *s += amp * v;
        }
        events.push(Event::new(t.name.clone(), onset, offset));
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then_with(|| a.label.cmp(&b.label)));
    Ok((Waveform::new(samples, synth.sample_rate)?, events))
}

/// File layout of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: &Path) -> Self {
        DatasetPaths { root: root.to_path_buf() }
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn audio(&self) -> PathBuf {
        self.root.join("audio")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }
    /// Strong labels of the training strong splits.
    pub fn strong(&self) -> PathBuf {
        self.labels().join("strong.tsv")
    }
    pub fn weak(&self) -> PathBuf {
        self.labels().join("weak.tsv")
    }
    pub fn unlabeled(&self) -> PathBuf {
        self.labels().join("unlabeled.txt")
    }
    pub fn validation(&self) -> PathBuf {
        self.labels().join("validation.tsv")
    }
    pub fn test(&self) -> PathBuf {
        self.labels().join("test.tsv")
    }
    /// Strong labels behind the weak split; never read by training.
    pub fn weak_hidden(&self) -> PathBuf {
        self.labels().join("weak_hidden_strong.tsv")
    }
}

/// Summary returned by [`build_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltDataset {
    pub clips: usize,
    pub strong_rows: usize,
    pub weak_rows: usize,
    pub unlabeled: usize,
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Generates every split and writes audio, labels and the manifest under `out`.
pub fn build_dataset(manifest: &DatasetManifest, out: &Path) -> Result<BuiltDataset> {
    manifest.validate()?;
    let paths = DatasetPaths::new(out);
    create_dir(&paths.audio())?;
    create_dir(&paths.labels())?;

    let mut tables: BTreeMap<Split, EventTable> = BTreeMap::new();
    for split in Split::ALL {
        let n = manifest.sizes.get(split);
        let events = parallel::try_map_indexed(n, |i| -> Result<(String, EventList)> {
            let (wave, events) =
                generate_clip(&manifest.vocabulary, clip_seed(manifest.seed, split, i), &manifest.synth)?;
            let name = DatasetManifest::clip_name(split, i);
            write_wav(&paths.audio().join(&name), &wave)?;
            Ok((name, events))
        })?;
        tables.insert(split, events.into_iter().collect());
    }

    let mut strong = tables[&Split::StrongReal].clone();
    strong.extend(tables[&Split::StrongSynth].clone());
    write_file(&paths.strong(), &format_strong(&strong))?;

    let order = manifest.class_names();
    let weak: BTreeMap<String, Vec<String>> = tables[&Split::Weak]
        .iter()
        .map(|(f, ev)| {
            let labels = order.iter().filter(|c| ev.iter().any(|e| &e.label == *c)).cloned().collect();
            (f.clone(), labels)
        })
        .collect();
    write_file(&paths.weak(), &format_weak(&weak))?;
    write_file(&paths.weak_hidden(), &format_strong(&tables[&Split::Weak]))?;

    let mut list = String::new();
    for f in tables[&Split::Unlabeled].keys() {
        list.push_str(f);
        list.push('\n');
    }
    write_file(&paths.unlabeled(), &list)?;
    write_file(&paths.validation(), &format_strong(&tables[&Split::Validation]))?;
    write_file(&paths.test(), &format_strong(&tables[&Split::Test]))?;

    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::format(&paths.manifest(), e.to_string()))?;
    write_file(&paths.manifest(), &(json + "\n"))?;

    Ok(BuiltDataset {
        clips: manifest.sizes.total(),
        strong_rows: strong.values().map(Vec::len).sum(),
        weak_rows: weak.len(),
        unlabeled: tables[&Split::Unlabeled].len(),
    })
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let p = DatasetPaths::new(root).manifest();
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
}

/// Mel bins whose centre lies inside `band` (or the nearest bin if none does).
pub fn band_mel_bins(band: (Real, Real), mel_bins: usize, sample_rate: u32) -> Vec<usize> {
    let centers = mel_centers(mel_bins, sample_rate);
    let inside: Vec<usize> = (0..mel_bins).filter(|&i| centers[i] >= band.0 && centers[i] <= band.1).collect();
    if !inside.is_empty() {
        return inside;
    }
    let mid = hz_to_mel(0.5 * (band.0 + band.1));
    let nearest = (0..mel_bins)
        .min_by(|&a, &b| (hz_to_mel(centers[a]) - mid).abs().total_cmp(&(hz_to_mel(centers[b]) - mid).abs()))
        .unwrap_or(0);
    vec![nearest]
}

/// Frequency-patch rows whose mel span overlaps the template band.
pub fn band_patch_rows(band: (Real, Real), cfg: &ModelConfig, sample_rate: u32) -> Vec<usize> {
    let bins = band_mel_bins(band, cfg.mel_bins, sample_rate);
    (0..cfg.freq_patches())
        .filter(|&f| {
            let lo = f * cfg.stride_freq;
            let hi = lo + cfg.patch_height;
            bins.iter().any(|&b| b >= lo && b < hi)
        })
        .collect()
}
