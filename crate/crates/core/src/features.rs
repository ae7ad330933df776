//! Waveform to normalized log-mel spectrogram frontend.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{NdArray, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Real>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<Real>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> Real {
        self.samples.len() as Real / self.sample_rate as Real
    }
}

/// Log-mel features `[mel_bins, frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: NdArray,
    /// Seconds between consecutive frames.
    pub hop: Real,
}

impl Spectrogram {
    pub fn mel_bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame_rate(&self) -> Real {
        1.0 / self.hop
    }

    /// Tab-separated dump, one line per mel band.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for row in self.values.data().chunks(self.frames()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&line.join("\t"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window: Real,
    pub hop: Real,
    pub mel_bins: usize,
    pub floor_eps: Real,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { sample_rate: 16_000, window: 0.025, hop: 0.010, mel_bins: 64, floor_eps: 1e-10 }
    }
}

impl FrontendConfig {
    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as Real).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as Real).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Frame count for a clip of `samples` samples.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        let win = self.window_samples();
        (samples >= win).then(|| (samples - win) / self.hop_samples() + 1)
    }

    /// Full pipeline: STFT, log-mel, per-clip normalization.
    pub fn extract(&self, w: &Waveform) -> Result<Spectrogram> {
        Ok(self.extract_with_scale(w)?.0)
    }

    /// [`FrontendConfig::extract`] plus the normalization multiplier.
    pub fn extract_with_scale(&self, w: &Waveform) -> Result<(Spectrogram, Real)> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Input(format!(
                "waveform is {} Hz, frontend expects {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        let mag = stft_magnitude(w, self.window, self.hop)?;
        let spec = log_mel(&mag, self.mel_bins, self.floor_eps, self.sample_rate, self.hop)?;
        Ok(normalize_with_scale(&spec))
    }
}

fn hann(n: usize) -> Vec<Real> {
    (0..n)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / n as f64;
            (x.sin() * x.sin()) as Real
        })
        .collect()
}

/// Hann-windowed magnitude STFT, `[fft_size / 2 + 1, frames]`, no padding.
pub fn stft_magnitude(w: &Waveform, window: Real, hop: Real) -> Result<NdArray> {
    let sr = w.sample_rate as Real;
    let win = (window * sr).round() as usize;
    let hop = (hop * sr).round() as usize;
    if win == 0 || hop == 0 {
        return Err(Error::Config("window and hop must span at least one sample".into()));
    }
    if w.samples.len() < win {
        return Err(Error::Input(format!(
            "clip of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        )));
    }
    let n_fft = win.next_power_of_two();
    let bins = n_fft / 2 + 1;
    let frames = (w.samples.len() - win) / hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let window = hann(win);
    let mut out = vec![0.0; bins * frames];
    let mut buf = vec![Complex::new(0.0f64, 0.0); n_fft];
    for t in 0..frames {
        let frame = &w.samples[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win { Complex::new((frame[i] * window[i]) as f64, 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[k * frames + t] = buf[k].norm() as Real;
        }
    }
    NdArray::new(vec![bins, frames], out)
}

pub fn hz_to_mel(hz: Real) -> Real {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: Real) -> Real {
    700.0 * ((10.0 as Real).powf(mel / 2595.0) - 1.0)
}

/// Centre frequency (Hz) of each mel band.
pub fn mel_centers(mel_bins: usize, sample_rate: u32) -> Vec<Real> {
    let top = hz_to_mel(sample_rate as Real / 2.0);
    (1..=mel_bins).map(|i| mel_to_hz(top * i as Real / (mel_bins + 1) as Real)).collect()
}

/// HTK-style triangular filterbank `[mel_bins, fft_bins]` with peaks of 1.
///
/// A band too narrow to cover any FFT bin falls back to the bin nearest its
/// centre, so every row has positive mass.
pub fn mel_filterbank(mel_bins: usize, fft_bins: usize, sample_rate: u32) -> Result<NdArray> {
    if mel_bins < 2 {
        return Err(Error::Config(format!("need at least 2 mel bands, got {mel_bins}")));
    }
    if mel_bins > fft_bins {
        return Err(Error::Config(format!("{mel_bins} mel bands exceed {fft_bins} FFT bins")));
    }
    let nyquist = sample_rate as Real / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<Real> =
        (0..mel_bins + 2).map(|i| mel_to_hz(top * i as Real / (mel_bins + 1) as Real)).collect();
    let bin_hz = nyquist / (fft_bins - 1) as Real;
    let mut w = vec![0.0; mel_bins * fft_bins];
    for m in 0..mel_bins {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut w[m * fft_bins..(m + 1) * fft_bins];
        for (b, slot) in row.iter_mut().enumerate() {
            let f = b as Real * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            *slot = v;
        }
        if row.iter().all(|&v| v == 0.0) {
            let nearest = ((mid / bin_hz).round() as usize).min(fft_bins - 1);
            row[nearest] = 1.0;
        }
    }
    NdArray::new(vec![mel_bins, fft_bins], w)
}

/// `ln(filterbank * |X|^2 + floor_eps)`.
pub fn log_mel(mag: &NdArray, mel_bins: usize, floor_eps: Real, sample_rate: u32, hop: Real) -> Result<Spectrogram> {
    let (bins, frames) = (mag.shape()[0], mag.shape()[1]);
    let fb = mel_filterbank(mel_bins, bins, sample_rate)?;
    let mut out = vec![0.0; mel_bins * frames];
    for m in 0..mel_bins {
        let weights = &fb.data()[m * bins..(m + 1) * bins];
        let row = &mut out[m * frames..(m + 1) * frames];
        for (b, &wv) in weights.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let mrow = &mag.data()[b * frames..(b + 1) * frames];
            for (o, &a) in row.iter_mut().zip(mrow) {
                *o += wv * a * a;
            }
        }
        for o in row.iter_mut() {
            *o = (*o + floor_eps).ln();
        }
    }
    Ok(Spectrogram { values: NdArray::new(vec![mel_bins, frames], out)?, hop })
}

/// Per-clip standardization to mean 0, standard deviation 0.5.
pub fn normalize(spec: &Spectrogram) -> Spectrogram {
    normalize_with_scale(spec).0
}

/// [`normalize`], also returning the multiplier applied to log-power values
/// (0 for a constant input).
pub fn normalize_with_scale(spec: &Spectrogram) -> (Spectrogram, Real) {
    let d = spec.values.data();
    let n = d.len() as Real;
    let mean = d.iter().sum::<Real>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let (values, scale) = if var > 0.0 {
        let scale = 0.5 / var.sqrt();
        (spec.values.map(|v| (v - mean) * scale), scale)
    } else {
        log::warn!("constant spectrogram; normalizing to zeros");
        (spec.values.map(|_| 0.0), 0.0)
    };
    (Spectrogram { values, hop: spec.hop }, scale)
}

/// Reads a mono 16-bit PCM RIFF file.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "expected single-channel 16-bit PCM"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as Real / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM RIFF file; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut bytes = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut bytes, spec).map_err(|e| Error::format(path, e.to_string()))?;
        for &s in &w.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| Error::format(path, e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::format(path, e.to_string()))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes.get_ref()).map_err(|e| Error::io(path, e))
}
