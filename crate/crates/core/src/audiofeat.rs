//! Audio loading and frame-synchronous log-mel features.
//!
//! One mel row is produced per animation frame: at 16 kHz and 30 fps the
//! hop is 533 samples. The 10-sample-per-second drift against an exact
//! 30 fps clock is absorbed by [`align_to_frames`].

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 533;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8_000.0;
pub const LOG_FLOOR: f64 = 1e-5;
/// Largest tolerated difference between mel rows and coefficient frames.
pub const MAX_DRIFT: usize = 3;

pub fn floor_value() -> f64 {
    LOG_FLOOR.ln()
}

/// Log-mel features, one row per animation frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSequence {
    pub mel: Array2<f64>,
}

impl AudioFeatureSequence {
    pub fn len(&self) -> usize {
        self.mel.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mel.nrows() == 0
    }

    /// Per-clip mean/variance normalization over all entries. Off by default
    /// in the pipeline.
    pub fn normalized(&self) -> Self {
        let n = self.mel.len().max(1) as f64;
        let mean = self.mel.sum() / n;
        let var = self.mel.mapv(|v| (v - mean).powi(2)).sum() / n;
        let std = var.sqrt().max(1e-8);
        Self {
            mel: self.mel.mapv(|v| (v - mean) / std),
        }
    }

    /// Root of the mean mel power per row. Used as the per-frame loudness
    /// signal by the sync proxy.
    pub fn frame_energy(&self) -> Vec<f64> {
        self.mel
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|v| v.exp()).sum::<f64>() / r.len() as f64).sqrt())
            .collect()
    }

    /// Flattened rows `start .. start + w`, with rows past the end taken at
    /// the log floor.
    pub fn token_at(&self, start: usize, w: usize) -> Array1<f64> {
        let m = self.mel.ncols();
        let mut out = Array1::from_elem(w * m, floor_value());
        for i in 0..w {
            let t = start + i;
            if t < self.mel.nrows() {
                out.slice_mut(s![i * m..(i + 1) * m]).assign(&self.mel.row(t));
            }
        }
        out
    }
}

/// Flattened window of mel rows, length `w * N_MELS`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioToken(pub Array1<f64>);

impl AudioToken {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|source| Error::Wav {
        path: path.to_path_buf(),
        source,
    })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE || spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: expected 16 kHz mono PCM16, got {} Hz, {} channel(s), {}-bit {:?}",
            path.display(),
            spec.sample_rate,
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f64 / 32768.0).map_err(|source| Error::Wav {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// Writes samples in [-1, 1] as 16 kHz mono PCM16. Values are clamped and
/// rounded to the nearest integer level.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters: `(lower, center, upper)` edges in Hz per band.
pub fn mel_band_edges() -> Vec<(f64, f64, f64)> {
    let lo = hz_to_mel(F_MIN);
    let hi = hz_to_mel(F_MAX);
    let pts: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    (0..N_MELS).map(|b| (pts[b], pts[b + 1], pts[b + 2])).collect()
}

/// Mel filterbank, `N_MELS × (N_FFT/2 + 1)`.
pub fn mel_filterbank() -> Array2<f64> {
    let n_bins = N_FFT / 2 + 1;
    let mut fb = Array2::zeros((N_MELS, n_bins));
    for (b, (lo, c, hi)) in mel_band_edges().into_iter().enumerate() {
        for k in 0..n_bins {
            let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Computes log-mel features. Row `t` is centred on sample `t * HOP`, with
/// reflection padding at both ends.
pub struct MelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl Default for MelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        let window = (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / N_FFT as f64).cos())
            .collect();
        Self {
            fft,
            window,
            filterbank: mel_filterbank(),
        }
    }

    pub fn compute(&self, samples: &[f64]) -> Result<AudioFeatureSequence> {
        let n = samples.len();
        if n < N_FFT {
            return Err(Error::Data(format!(
                "audio has {n} samples, at least {N_FFT} required"
            )));
        }
        let rows = n.div_ceil(HOP);
        let half = (N_FFT / 2) as isize;
        let reflect = |i: isize| -> f64 {
            let last = n as isize - 1;
            let j = if i < 0 {
                -i
            } else if i > last {
                2 * last - i
            } else {
                i
            };
            samples[j as usize]
        };
        let n_bins = N_FFT / 2 + 1;
        let mut mel = Array2::zeros((rows, N_MELS));
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = Array1::zeros(n_bins);
        let floor = floor_value();
        for t in 0..rows {
            let center = (t * HOP) as isize;
            for (k, slot) in buf.iter_mut().enumerate() {
                let x = reflect(center - half + k as isize);
                *slot = Complex::new(x * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                power[k] = buf[k].norm_sqr();
            }
            let energies = self.filterbank.dot(&power);
            for (b, e) in energies.iter().enumerate() {
                mel[[t, b]] = if *e > LOG_FLOOR { e.ln() } else { floor };
            }
        }
        Ok(AudioFeatureSequence { mel })
    }
}

pub fn mel_spectrogram(samples: &[f64]) -> Result<AudioFeatureSequence> {
    MelExtractor::new().compute(samples)
}

/// Truncates or floor-pads feature rows to exactly `frames` rows.
pub fn align_to_frames(feat: &AudioFeatureSequence, frames: usize) -> Result<AudioFeatureSequence> {
    let rows = feat.len();
    if rows.abs_diff(frames) > MAX_DRIFT {
        return Err(Error::Alignment(format!(
            "{rows} mel rows vs {frames} coefficient frames exceeds the {MAX_DRIFT}-frame tolerance"
        )));
    }
    let mut mel = Array2::from_elem((frames, feat.mel.ncols()), floor_value());
    let keep = rows.min(frames);
    mel.slice_mut(s![..keep, ..]).assign(&feat.mel.slice(s![..keep, ..]));
    Ok(AudioFeatureSequence { mel })
}

/// RMS of the raw samples under each animation frame (`HOP` samples per
/// frame); frames past the end of the audio read as silence.
pub fn frame_rms(samples: &[f64], frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|t| {
            let lo = (t * HOP).min(samples.len());
            let hi = ((t + 1) * HOP).min(samples.len());
            (samples[lo..hi].iter().map(|v| v * v).sum::<f64>() / HOP as f64).sqrt()
        })
        .collect()
}

/// Splits features into non-overlapping windows of `w` rows, padding the
/// tail with floor rows.
pub fn window_pool(feat: &AudioFeatureSequence, w: usize) -> Result<Vec<AudioToken>> {
    if w < 1 {
        return Err(Error::Parameter("window length must be at least 1".into()));
    }
    let count = feat.len().div_ceil(w);
    Ok((0..count).map(|k| AudioToken(feat.token_at(k * w, w))).collect())
}

/// Inverse of [`window_pool`]: stacks tokens back into the padded mel matrix.
pub fn unpool(tokens: &[AudioToken], w: usize) -> Array2<f64> {
    let m = tokens.first().map_or(N_MELS, |t| t.dim() / w);
    let mut mel = Array2::zeros((tokens.len() * w, m));
    for (k, tok) in tokens.iter().enumerate() {
        for i in 0..w {
            mel.row_mut(k * w + i).assign(&tok.0.slice(s![i * m..(i + 1) * m]));
        }
    }
    mel
}
