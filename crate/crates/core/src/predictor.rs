//! Window-based autoregressive latent predictor.
//!
//! Each window holds one audio token followed by `w` motion tokens (past
//! latents). Attention is full within the window except between audio
//! tokens. The motion-token outputs are the predicted latents of the next
//! `w` frames. Several windows are evaluated together as one token matrix
//! with a block-diagonal mask.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{AudioFeatureSequence, AudioToken, N_MELS};
use crate::checkpoint::Checkpoint;
use crate::coeffstream::{HeadPoseStream, MouthDetailStream};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Adam, Gradients, Graph, Linear, Mat, Params, TransformerStack, Var};
use crate::vqvae::{nearest_codes, StreamKind, TrainOptions, VqVae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub stream: StreamKind,
    /// Window length `w`; 1 gives the per-frame ablation.
    pub window: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub d_ff: usize,
    /// Distance between consecutive teacher-forced windows; 0 means `window`.
    pub train_stride: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::for_stream(StreamKind::Head)
    }
}

impl PredictorConfig {
    pub fn for_stream(stream: StreamKind) -> Self {
        Self {
            stream,
            window: 12,
            d_model: 256,
            heads: 8,
            blocks: 4,
            d_ff: 1024,
            train_stride: 0,
        }
    }

    pub fn stride(&self) -> usize {
        if self.train_stride == 0 {
            self.window
        } else {
            self.train_stride
        }
    }

    pub fn audio_dim(&self) -> usize {
        self.window * N_MELS
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config("blocks and d_ff must be positive".into()));
        }
        if self.stride() > self.window {
            return Err(Error::Config(format!(
                "train stride {} exceeds window {}",
                self.stride(),
                self.window
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tokens and mask

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Audio,
    Motion,
}

/// One audio token followed by `w` motion tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTokens {
    pub audio: Array1<f64>,
    /// `w × d_model` past latents, oldest first.
    pub motion: Array2<f64>,
}

impl WindowTokens {
    pub fn roles(&self) -> Vec<TokenRole> {
        std::iter::once(TokenRole::Audio)
            .chain(std::iter::repeat_n(TokenRole::Motion, self.motion.nrows()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.motion.nrows() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Builds the tokens for one window. `past` holds at most `w` latents and is
/// zero-padded at the front.
pub fn build_window_tokens(audio: &AudioToken, past: ArrayView2<'_, f64>, config: &PredictorConfig) -> Result<WindowTokens> {
    let w = config.window;
    if audio.dim() != config.audio_dim() {
        return Err(Error::Shape(format!(
            "audio token has {} values, window expects {}",
            audio.dim(),
            config.audio_dim()
        )));
    }
    if past.nrows() > w || (past.nrows() > 0 && past.ncols() != config.d_model) {
        return Err(Error::Shape(format!(
            "past latents {:?} do not fit a {w}×{} window",
            past.dim(),
            config.d_model
        )));
    }
    let mut motion = Array2::zeros((w, config.d_model));
    motion.slice_mut(s![w - past.nrows().., ..]).assign(&past);
    Ok(WindowTokens {
        audio: audio.0.clone(),
        motion,
    })
}

/// Additive {0, -inf} attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub matrix: Array2<f64>,
}

impl AttentionMask {
    /// -inf exactly where both tokens are audio.
    pub fn from_roles(roles: &[TokenRole]) -> Self {
        let n = roles.len();
        let matrix = Array2::from_shape_fn((n, n), |(i, j)| {
            if roles[i] == TokenRole::Audio && roles[j] == TokenRole::Audio {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        });
        Self { matrix }
    }

    /// `copies` independent windows: the per-window mask on the diagonal
    /// blocks and -inf everywhere else.
    pub fn block_diagonal(roles: &[TokenRole], copies: usize) -> Self {
        let inner = Self::from_roles(roles).matrix;
        let n = roles.len();
        let mut matrix = Array2::from_elem((n * copies, n * copies), f64::NEG_INFINITY);
        for k in 0..copies {
            matrix.slice_mut(s![k * n..(k + 1) * n, k * n..(k + 1) * n]).assign(&inner);
        }
        Self { matrix }
    }

    /// Every row keeps at least one finite entry.
    pub fn is_valid(&self) -> bool {
        self.matrix.rows().into_iter().all(|r| r.iter().any(|v| *v == 0.0))
            && self.matrix.iter().all(|v| *v == 0.0 || *v == f64::NEG_INFINITY)
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone)]
pub struct Predictor {
    config: PredictorConfig,
    params: Params,
    audio_mean: Array1<f64>,
    audio_std: Array1<f64>,
    audio_proj: Linear,
    motion_in: Linear,
    stack: TransformerStack,
    output: Linear,
}

/// Forward results for a batch of windows.
pub struct WindowForward {
    /// `n·w × d_model`; row `k·w + i` belongs to window `k`, slot `i`.
    pub predictions: Var,
    /// Per layer, head and window: `(w+1) × (w+1)` attention probabilities.
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.d_model;
        let audio_proj = Linear::new(&mut p, "audio_proj", config.audio_dim(), d, &mut rng);
        let motion_in = Linear::new(&mut p, "motion_in", d, d, &mut rng);
        let scale = 1.0 / (d as f64).sqrt();
        let stack = TransformerStack::new(&mut p, "blocks", config.blocks, d, config.heads, config.d_ff, scale, &mut rng);
        let output = Linear::new(&mut p, "output", d, d, &mut rng);
        Ok(Self {
            config,
            params: p,
            audio_mean: Array1::zeros(N_MELS),
            audio_std: Array1::ones(N_MELS),
            audio_proj,
            motion_in,
            stack,
            output,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn stack(&self) -> &TransformerStack {
        &self.stack
    }

    pub fn audio_stats(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.audio_mean, &self.audio_std)
    }

    /// Per-band standardization of mel rows, fitted on training features.
    pub fn fit_audio_stats(&mut self, feats: &[&AudioFeatureSequence]) {
        let rows: usize = feats.iter().map(|f| f.len()).sum();
        if rows == 0 {
            return;
        }
        let mut mean = Array1::<f64>::zeros(N_MELS);
        for f in feats {
            mean += &f.mel.sum_axis(Axis(0));
        }
        mean /= rows as f64;
        let mut var = Array1::<f64>::zeros(N_MELS);
        for f in feats {
            for r in f.mel.rows() {
                let d = &r - &mean;
                var += &(&d * &d);
            }
        }
        var /= rows as f64;
        self.audio_mean = mean.mapv(|v| v as f32 as f64);
        self.audio_std = var.mapv(|v| if v.sqrt() > 1e-8 { v.sqrt() as f32 as f64 } else { 1.0 });
    }

    /// Audio token for frames `start .. start + w`, floor-padded past the end.
    pub fn audio_token(&self, feat: &AudioFeatureSequence, start: usize) -> AudioToken {
        AudioToken(feat.token_at(start, self.config.window))
    }

    fn normalize_audio(&self, token: &Array1<f64>) -> Array1<f64> {
        let m = N_MELS;
        Array1::from_shape_fn(token.len(), |i| (token[i] - self.audio_mean[i % m]) / self.audio_std[i % m])
    }

    /// Evaluates a batch of windows in one graph.
    pub fn forward_graph(&self, g: &mut Graph, windows: &[WindowTokens]) -> WindowForward {
        let n = windows.len();
        let w = self.config.window;
        let d = self.config.d_model;
        let mut audio = Array2::zeros((n, self.config.audio_dim()));
        let mut motion = Array2::zeros((n * w, d));
        for (k, win) in windows.iter().enumerate() {
            audio.row_mut(k).assign(&self.normalize_audio(&win.audio));
            motion.slice_mut(s![k * w..(k + 1) * w, ..]).assign(&win.motion);
        }
        let a = g.constant(audio);
        let a = self.audio_proj.forward(g, &self.params, a);
        let m = g.constant(motion);
        let m = self.motion_in.forward(g, &self.params, m);
        let both = g.concat_rows(&[a, m]);
        let order: Vec<usize> = (0..n)
            .flat_map(|k| std::iter::once(k).chain((0..w).map(move |i| n + k * w + i)))
            .collect();
        let tokens = g.gather_rows(both, &order);
        let pe_one = sinusoidal_positions(w + 1, d);
        let mut pe = Array2::zeros((n * (w + 1), d));
        for k in 0..n {
            pe.slice_mut(s![k * (w + 1)..(k + 1) * (w + 1), ..]).assign(&pe_one);
        }
        let pe = g.constant(pe);
        let tokens = g.add(tokens, pe);
        let mask = AttentionMask::from_roles(&windows[0].roles());
        let (h, attention) = self.stack.forward_blocked(g, &self.params, tokens, w + 1, Some(&mask.matrix));
        let motion_rows: Vec<usize> = (0..n).flat_map(|k| (0..w).map(move |i| k * (w + 1) + 1 + i)).collect();
        let h = g.gather_rows(h, &motion_rows);
        let predictions = self.output.forward(g, &self.params, h);
        WindowForward { predictions, attention }
    }

    /// Predicted latents (`w × d_model`) for a single window.
    pub fn masked_attention_forward(&self, tokens: &WindowTokens) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, std::slice::from_ref(tokens));
        Ok(g.value(f.predictions).clone())
    }

    /// Realized attention probabilities indexed by layer, head and window.
    pub fn attention_maps(&self, windows: &[WindowTokens]) -> Result<Vec<Vec<Vec<Array2<f64>>>>> {
        for t in windows {
            self.check_tokens(t)?;
        }
        let mut g = Graph::new();
        let f = self.forward_graph(&mut g, windows);
        Ok(f.attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|head| head.iter().map(|v| g.value(*v).clone()).collect())
                    .collect()
            })
            .collect())
    }

    fn check_tokens(&self, t: &WindowTokens) -> Result<()> {
        if t.audio.len() != self.config.audio_dim() || t.motion.dim() != (self.config.window, self.config.d_model) {
            return Err(Error::Shape(format!(
                "window tokens ({}, {:?}) do not match config",
                t.audio.len(),
                t.motion.dim()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut tensors: Vec<(String, Mat)> = self.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        tensors.push(("buffer.audio_mean".into(), self.audio_mean.clone().insert_axis(Axis(0))));
        tensors.push(("buffer.audio_std".into(), self.audio_std.clone().insert_axis(Axis(0))));
        Checkpoint {
            config: serde_json::json!({
                "kind": "predictor",
                "format_version": crate::checkpoint::CHECKPOINT_VERSION,
                "seed": seed,
                "config": self.config,
            }),
            tensors,
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.kind() != Some("predictor") {
            return Err(Error::Format(format!("expected a predictor checkpoint, found {:?}", ck.kind())));
        }
        let config: PredictorConfig = serde_json::from_value(ck.config["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        model.audio_mean = ck.take_tensor("buffer.audio_mean")?.row(0).to_owned();
        model.audio_std = ck.take_tensor("buffer.audio_std")?.row(0).to_owned();
        model.params.load_named(ck.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        self.to_checkpoint(seed).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// Teacher forcing

/// One clip ready for predictor training: ground-truth coefficients of the
/// stream, their quantized latents, and frame-aligned audio features.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub coeffs: Array2<f64>,
    pub latents: Array2<f64>,
    pub audio: AudioFeatureSequence,
}

impl TrainClip {
    /// Computes ground-truth latents with the (frozen) VQ-VAE.
    pub fn prepare(vq: &VqVae, coeffs: Array2<f64>, audio: AudioFeatureSequence) -> Result<Self> {
        if audio.len() != coeffs.nrows() {
            return Err(Error::Alignment(format!(
                "{} audio rows for {} frames",
                audio.len(),
                coeffs.nrows()
            )));
        }
        let z = vq.encode(&coeffs)?;
        let latents = vq.quantize(&z)?.vectors;
        Ok(Self { coeffs, latents, audio })
    }

    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PredLoss {
    pub total: f64,
    /// Mean per-frame squared distance between predicted and true latents.
    pub latent: f64,
    /// Mean per-frame squared distance between decoded predictions and the
    /// true coefficients.
    pub coefficient: f64,
}

impl std::ops::AddAssign for PredLoss {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.latent += o.latent;
        self.coefficient += o.coefficient;
    }
}

impl PredLoss {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            total: self.total * c,
            latent: self.latent * c,
            coefficient: self.coefficient * c,
        }
    }
}

pub struct PredLossVars {
    pub total: Var,
    pub latent: Var,
    pub coefficient: Var,
}

impl PredLossVars {
    pub fn values(&self, g: &Graph) -> PredLoss {
        PredLoss {
            total: g.scalar(self.total),
            latent: g.scalar(self.latent),
            coefficient: g.scalar(self.coefficient),
        }
    }
}

/// Window start frames for teacher forcing.
pub fn window_starts(frames: usize, stride: usize) -> Vec<usize> {
    (0..frames).step_by(stride.max(1)).collect()
}

/// Loss of an assembled `T × d_model` prediction against a clip, decoding
/// through `vq` (which must be frozen).
pub fn prediction_loss_graph(g: &mut Graph, vq: &VqVae, predicted: Var, clip: &TrainClip) -> PredLossVars {
    let gt = g.constant(clip.latents.clone());
    let d = g.sub(predicted, gt);
    let d = g.row_sq_norm(d);
    let latent = g.mean(d);
    let decoded = vq.decode_loss_space_graph(g, predicted);
    let x = g.constant(vq.to_loss_space(&clip.coeffs));
    let d = g.sub(decoded, x);
    let d = g.row_sq_norm(d);
    let coefficient = g.mean(d);
    let total = g.add(latent, coefficient);
    PredLossVars {
        total,
        latent,
        coefficient,
    }
}

/// Loss of a fixed latent sequence (e.g. all zeros or ground truth).
pub fn fixed_prediction_loss(vq: &VqVae, predicted: &Array2<f64>, clip: &TrainClip) -> Result<PredLoss> {
    if predicted.dim() != clip.latents.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs latents {:?}",
            predicted.dim(),
            clip.latents.dim()
        )));
    }
    let mut frozen = vq.clone();
    frozen.freeze();
    let mut g = Graph::new();
    let p = g.constant(predicted.clone());
    Ok(prediction_loss_graph(&mut g, &frozen, p, clip).values(&g))
}

/// Baseline that always predicts zero latents.
pub fn zero_predictor_loss(vq: &VqVae, clip: &TrainClip) -> Result<PredLoss> {
    fixed_prediction_loss(vq, &Array2::zeros(clip.latents.raw_dim()), clip)
}

impl Predictor {
    /// Teacher-forced windows for a clip and, per window, how many leading
    /// predictions enter the assembled sequence.
    pub fn teacher_forced_windows(&self, clip: &TrainClip) -> Result<(Vec<WindowTokens>, Vec<usize>)> {
        let w = self.config.window;
        let t = clip.len();
        if t < 2 * w {
            return Err(Error::Data(format!("clip of {t} frames is shorter than 2w = {}", 2 * w)));
        }
        if clip.latents.ncols() != self.config.d_model {
            return Err(Error::Config(format!(
                "latent width {} vs predictor d_model {}",
                clip.latents.ncols(),
                self.config.d_model
            )));
        }
        let stride = self.config.stride();
        let mut windows = Vec::new();
        let mut keep = Vec::new();
        for s in window_starts(t, stride) {
            let past = clip.latents.slice(s![s.saturating_sub(w)..s, ..]);
            windows.push(build_window_tokens(&self.audio_token(&clip.audio, s), past, &self.config)?);
            keep.push(stride.min(t - s));
        }
        Ok((windows, keep))
    }

    /// Builds the teacher-forced loss for one clip; `vq` must be frozen.
    pub fn teacher_forced_graph(&self, g: &mut Graph, vq: &VqVae, clip: &TrainClip) -> Result<PredLossVars> {
        let (windows, keep) = self.teacher_forced_windows(clip)?;
        let f = self.forward_graph(g, &windows);
        let w = self.config.window;
        let rows: Vec<usize> = keep.iter().enumerate().flat_map(|(k, &n)| (0..n).map(move |i| k * w + i)).collect();
        let assembled = g.gather_rows(f.predictions, &rows);
        Ok(prediction_loss_graph(g, vq, assembled, clip))
    }

    pub fn teacher_forced_loss(&self, vq: &VqVae, clip: &TrainClip) -> Result<PredLoss> {
        let mut frozen = vq.clone();
        frozen.freeze();
        let mut g = Graph::new();
        Ok(self.teacher_forced_graph(&mut g, &frozen, clip)?.values(&g))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredEpoch {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: PredLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredTrainReport {
    pub curve: Vec<PredEpoch>,
    pub final_train: PredLoss,
    pub zero_baseline_train: PredLoss,
    pub final_val: Option<PredLoss>,
    pub zero_baseline_val: Option<PredLoss>,
}

fn mean_loss<F>(clips: &[TrainClip], f: F) -> Result<PredLoss>
where
    F: Fn(&TrainClip) -> Result<PredLoss> + Sync + Send,
{
    let all: Vec<PredLoss> = clips.par_iter().map(f).collect::<Result<_>>()?;
    let mut total = PredLoss::default();
    for l in all {
        total += l;
    }
    Ok(total.scaled(1.0 / clips.len() as f64))
}

/// Trains one predictor against a frozen VQ-VAE. Deterministic for a fixed seed.
pub fn train_predictor(
    train: &[TrainClip],
    val: &[TrainClip],
    vq: &VqVae,
    config: &PredictorConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(Predictor, PredTrainReport)> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if config.d_model != vq.config().d_model {
        return Err(Error::Config(format!(
            "predictor d_model {} does not match codebook width {}",
            config.d_model,
            vq.config().d_model
        )));
    }
    if config.stream != vq.config().stream {
        return Err(Error::Config(format!(
            "predictor stream '{}' paired with a '{}' VQ-VAE",
            config.stream.name(),
            vq.config().stream.name()
        )));
    }
    let mut frozen = vq.clone();
    frozen.freeze();
    let mut model = Predictor::new(config.clone(), seed)?;
    let feats: Vec<&AudioFeatureSequence> = train.iter().map(|c| &c.audio).collect();
    model.fit_audio_stats(&feats);
    for c in train.iter().chain(val) {
        model.teacher_forced_windows(c)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut opt = Adam::new(opts.adam);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = PredLoss::default();
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let per_clip: Vec<(Gradients, PredLoss)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let l = model.teacher_forced_graph(&mut g, &frozen, &train[i])?;
                    Ok((g.backward(l.total), l.values(&g)))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::default();
            let mut loss = PredLoss::default();
            for (gr, l) in per_clip {
                grads.merge(gr);
                loss += l;
            }
            let c = 1.0 / chunk.len() as f64;
            grads.scale(c);
            let loss = loss.scaled(c);
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite predictor loss {}", loss.total),
                });
            }
            opt.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let epoch_loss = epoch_loss.scaled(1.0 / batches as f64);
        if std::env::var_os("COEFFCAST_LOG").is_some() {
            eprintln!(
                "[predictor:{}] epoch {epoch} total {:.5} latent {:.5} coeff {:.5}",
                config.stream.name(),
                epoch_loss.total,
                epoch_loss.latent,
                epoch_loss.coefficient
            );
        }
        curve.push(PredEpoch {
            epoch,
            lr,
            loss: epoch_loss,
        });
    }

    let final_train = mean_loss(train, |c| model.teacher_forced_loss(&frozen, c))?;
    let zero_baseline_train = mean_loss(train, |c| zero_predictor_loss(&frozen, c))?;
    let (final_val, zero_baseline_val) = if val.is_empty() {
        (None, None)
    } else {
        (
            Some(mean_loss(val, |c| model.teacher_forced_loss(&frozen, c))?),
            Some(mean_loss(val, |c| zero_predictor_loss(&frozen, c))?),
        )
    };
    Ok((
        model,
        PredTrainReport {
            curve,
            final_train,
            zero_baseline_train,
            final_val,
            zero_baseline_val,
        },
    ))
}

// ---------------------------------------------------------------------------
// Inference

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    /// Keep the first prediction of each window and slide by one frame.
    #[default]
    PerFrame,
    /// Keep all `w` predictions and slide by `w`.
    PerWindow,
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_frame" => Ok(InferMode::PerFrame),
            "per_window" => Ok(InferMode::PerWindow),
            other => Err(Error::Parameter(format!("unknown inference mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InferOptions {
    pub mode: InferMode,
    /// Snap each predicted latent to its nearest code before reuse and decoding.
    pub snap: bool,
}

/// Autoregressively predicts `t_out` latents from audio, starting from zero
/// past latents.
pub fn autoregressive_latents(
    predictor: &Predictor,
    vq: &VqVae,
    audio: &AudioFeatureSequence,
    t_out: usize,
    opts: InferOptions,
) -> Result<Array2<f64>> {
    if t_out < 1 {
        return Err(Error::Parameter("T_out must be at least 1".into()));
    }
    let cfg = predictor.config();
    if cfg.d_model != vq.config().d_model {
        return Err(Error::Config(format!(
            "predictor d_model {} does not match codebook width {}",
            cfg.d_model,
            vq.config().d_model
        )));
    }
    let w = cfg.window;
    let codebook = vq.codebook();
    let mut out = Array2::zeros((t_out, cfg.d_model));
    let mut s = 0;
    while s < t_out {
        let past = out.slice(s![s.saturating_sub(w)..s, ..]);
        let tokens = build_window_tokens(&predictor.audio_token(audio, s), past, cfg)?;
        let mut pred = predictor.masked_attention_forward(&tokens)?;
        if opts.snap {
            let idx = nearest_codes(pred.view(), codebook.entries.view());
            pred = codebook.entries.select(Axis(0), &idx);
        }
        let keep = match opts.mode {
            InferMode::PerFrame => 1,
            InferMode::PerWindow => w,
        }
        .min(t_out - s);
        out.slice_mut(s![s..s + keep, ..]).assign(&pred.slice(s![..keep, ..]));
        s += keep;
    }
    Ok(out)
}

/// Predicts latents and decodes them with the frozen decoder: `t_out × C`.
pub fn autoregressive_infer(
    predictor: &Predictor,
    vq: &VqVae,
    audio: &AudioFeatureSequence,
    t_out: usize,
    opts: InferOptions,
) -> Result<Array2<f64>> {
    let z = autoregressive_latents(predictor, vq, audio, t_out, opts)?;
    let y = vq.decode_latents(&z)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            epoch: 0,
            detail: "non-finite inference output".into(),
        });
    }
    Ok(y)
}

/// Runs the head and mouth/detail predictors on the same audio.
pub fn infer_streams(
    head: (&Predictor, &VqVae),
    mouth: (&Predictor, &VqVae),
    audio: &AudioFeatureSequence,
    t_out: usize,
    opts: InferOptions,
) -> Result<(HeadPoseStream, MouthDetailStream)> {
    let h = autoregressive_infer(head.0, head.1, audio, t_out, opts)?;
    let m = autoregressive_infer(mouth.0, mouth.1, audio, t_out, opts)?;
    Ok((HeadPoseStream::new(h)?, MouthDetailStream::new(m)?))
}

#[cfg(test)]
mod tests;
