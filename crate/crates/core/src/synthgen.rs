//! Synthetic talking-head corpus with a known causal structure.
//!
//! Audio is a train of noise bursts. Jaw opening follows a low-passed copy
//! of the burst envelope, expression mixes two slow latent factors with the
//! same envelope, detail is a fixed linear map of expression plus noise, and
//! head pose is an audio-independent bounded walk.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiofeat::{write_wav, HOP, SAMPLE_RATE};
use crate::coeffstream::{
    write_coeff_file, ClipEntry, ClipManifest, CoefficientSequence, Split, COEFF_DIM, DETAIL_COLS, DETAIL_DIM,
    EXPR_COLS, EXPR_DIM, HEAD_COLS, JAW_COLS,
};
use crate::error::{Error, Result};

/// Number of slow factors driving the expression block (besides the envelope).
const EXPR_FACTORS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub clips: usize,
    pub frames: usize,
    pub seed: u64,
    /// Mean syllable pulses per second.
    pub syllable_rate: f64,
    /// Jaw rotation (radians) at full envelope.
    pub jaw_gain: f64,
    /// Per-frame standard deviation of the head walk increments (radians).
    pub head_step: f64,
    /// Head rotation bound per axis (radians).
    pub head_bound: f64,
    /// Weight of the envelope in the expression block.
    pub expr_drive: f64,
    /// Standard deviation of the noise added to the detail block.
    pub detail_noise: f64,
    /// One-pole smoothing coefficient of the jaw low-pass, in (0, 1].
    pub lowpass: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips: 50,
            frames: 300,
            seed: 0,
            syllable_rate: 3.0,
            jaw_gain: 0.3,
            head_step: 0.01,
            head_bound: 0.4,
            expr_drive: 0.5,
            detail_noise: 0.005,
            lowpass: 0.6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 {
            return Err(Error::Config("clips and frames must be positive".into()));
        }
        let positive = [self.jaw_gain, self.head_step, self.head_bound, self.expr_drive, self.detail_noise];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("synthesis scales must be positive and finite".into()));
        }
        if !(self.syllable_rate >= 0.0 && self.syllable_rate.is_finite()) {
            return Err(Error::Config("syllable rate must be non-negative".into()));
        }
        if !(self.lowpass > 0.0 && self.lowpass <= 1.0) {
            return Err(Error::Config("lowpass coefficient must lie in (0, 1]".into()));
        }
        if self.head_bound >= std::f64::consts::PI {
            return Err(Error::Config("head bound must stay below pi".into()));
        }
        Ok(())
    }

    /// Split for clip `index` under an 80/10/10 partition by index.
    pub fn split_of(&self, index: usize) -> Split {
        let train = self.clips * 8 / 10;
        let val = self.clips / 10;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Corpus-wide linear maps, fixed by `SynthSpec::seed`.
struct Maps {
    /// EXPR_DIM × (EXPR_FACTORS + 1); last column weights the envelope.
    expr: Array2<f64>,
    /// DETAIL_DIM × EXPR_DIM.
    detail: Array2<f64>,
}

fn maps(spec: &SynthSpec) -> Maps {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut expr = Array2::from_shape_simple_fn((EXPR_DIM, EXPR_FACTORS + 1), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * 0.3
    });
    expr.column_mut(EXPR_FACTORS).mapv_inplace(|v| v.abs() * spec.expr_drive);
    let scale = 1.0 / (EXPR_DIM as f64).sqrt();
    let detail = Array2::from_shape_simple_fn((DETAIL_DIM, EXPR_DIM), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    });
    Maps { expr, detail }
}

/// One generated clip. Samples are already quantized to PCM16 levels and
/// coefficients to f32, so writing and re-reading is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub samples: Vec<f64>,
    pub coeffs: CoefficientSequence,
    /// Per-frame burst envelope in [0, 1].
    pub envelope: Vec<f64>,
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

fn syllable_envelope(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut env = vec![0.0; n];
    if spec.syllable_rate <= 0.0 {
        return env;
    }
    let gap = Exp::new(spec.syllable_rate).expect("positive rate");
    let mut t = gap.sample(rng);
    let duration = n as f64 / SAMPLE_RATE as f64;
    while t < duration {
        let len_s = rng.gen_range(0.08..0.2);
        let amp = rng.gen_range(0.5..1.0);
        let start = (t * SAMPLE_RATE as f64) as usize;
        let len = (len_s * SAMPLE_RATE as f64) as usize;
        for i in 0..len {
            if start + i >= n {
                break;
            }
            let phase = i as f64 / len as f64;
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * phase).cos();
            env[start + i] = (env[start + i] + amp * w).min(1.0);
        }
        t += len_s + gap.sample(rng);
    }
    env
}

/// Bounded Ornstein-Uhlenbeck walk, reflected at `±bound`.
fn bounded_walk(n: usize, step: f64, bound: f64, reversion: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, step).expect("positive step");
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x += -reversion * x + noise.sample(rng);
            if x > bound {
                x = 2.0 * bound - x;
            } else if x < -bound {
                x = -2.0 * bound - x;
            }
            x = x.clamp(-bound, bound);
            x
        })
        .collect()
}

fn quantize_pcm(v: f64) -> f64 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

pub fn generate_clip(spec: &SynthSpec, index: usize) -> Result<SynthClip> {
    spec.validate()?;
    let t = spec.frames;
    let n = t * HOP;
    let maps = maps(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let env = syllable_envelope(spec, n, &mut rng);
    let samples: Vec<f64> = env
        .iter()
        .map(|e| {
            if *e == 0.0 {
                0.0
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                quantize_pcm((0.25 * e * z).clamp(-1.0, 1.0))
            }
        })
        .collect();
    let frame_env: Vec<f64> = (0..t)
        .map(|f| env[f * HOP..(f + 1) * HOP].iter().sum::<f64>() / HOP as f64)
        .collect();
    let mut lp = Vec::with_capacity(t);
    let mut y = 0.0;
    for e in &frame_env {
        y += spec.lowpass * (e - y);
        lp.push(y);
    }

    let mut frames = Array2::zeros((t, COEFF_DIM));
    let head: Vec<Vec<f64>> = (0..3)
        .map(|_| bounded_walk(t, spec.head_step, spec.head_bound, 0.02, &mut rng))
        .collect();
    let factors: Vec<Vec<f64>> = (0..EXPR_FACTORS).map(|_| bounded_walk(t, 0.05, 1.0, 0.05, &mut rng)).collect();
    let detail_noise = Normal::new(0.0, spec.detail_noise).expect("positive noise");
    for f in 0..t {
        for (c, col) in HEAD_COLS.enumerate() {
            frames[[f, col]] = head[c][f];
        }
        frames[[f, JAW_COLS.start]] = spec.jaw_gain * lp[f];
        let mut drive = Array1::zeros(EXPR_FACTORS + 1);
        for k in 0..EXPR_FACTORS {
            drive[k] = factors[k][f];
        }
        drive[EXPR_FACTORS] = lp[f];
        let expr = maps.expr.dot(&drive);
        for (i, col) in EXPR_COLS.enumerate() {
            frames[[f, col]] = expr[i];
        }
        let detail = maps.detail.dot(&expr);
        for (i, col) in DETAIL_COLS.enumerate() {
            frames[[f, col]] = detail[i] + detail_noise.sample(&mut rng);
        }
    }
    frames.mapv_inplace(|v| v as f32 as f64);
    Ok(SynthClip {
        samples,
        coeffs: CoefficientSequence::new(clip_id(index), frames)?,
        envelope: frame_env,
    })
}

/// Writes every clip plus `manifest.jsonl` under `out_dir`.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<ClipManifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut entries = Vec::with_capacity(spec.clips);
    for index in 0..spec.clips {
        let clip = generate_clip(spec, index)?;
        let id = clip_id(index);
        let coeff_rel = format!("clips/{id}.coeff");
        let wav_rel = format!("clips/{id}.wav");
        write_coeff_file(&clip.coeffs, out.join(&coeff_rel))?;
        write_wav(out.join(&wav_rel), &clip.samples)?;
        entries.push(ClipEntry {
            clip_id: id,
            coeff_path: coeff_rel,
            wav_path: wav_rel,
            split: spec.split_of(index),
        });
    }
    let manifest = ClipManifest {
        root: out.to_path_buf(),
        entries,
    };
    manifest.save(out.join("manifest.jsonl"))?;
    Ok(manifest)
}
