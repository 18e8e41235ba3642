//! Vector-quantized autoencoders over coefficient streams.
//!
//! Each model encodes a T×C stream with a clip-level transformer into one
//! latent per frame, snaps every latent to its nearest codebook row, and
//! decodes the code sequence back to coefficients. Gradients cross the
//! quantization step with a straight-through estimator; the codebook is
//! learned only from the codebook term of the loss.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::coeffstream::{
    split_streams, CoefficientSequence, COEFF_DIM, DETAIL_BLOCK, HEAD_DIM, MOUTH_BLOCK, MOUTH_DETAIL_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Adam, AdamConfig, Gradients, Graph, Linear, LrSchedule, Mat, ParamId, Params, TransformerStack, Var};

/// Which coefficient columns a model covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Head,
    MouthDetail,
    /// All 184 columns under one codebook (no disentanglement).
    Joint,
}

impl StreamKind {
    pub fn input_dim(self) -> usize {
        match self {
            StreamKind::Head => HEAD_DIM,
            StreamKind::MouthDetail => MOUTH_DETAIL_DIM,
            StreamKind::Joint => COEFF_DIM,
        }
    }

    /// Column blocks that each contribute a separate reconstruction term.
    pub fn blocks(self) -> Vec<Range<usize>> {
        match self {
            StreamKind::Head => vec![0..HEAD_DIM],
            StreamKind::MouthDetail => vec![MOUTH_BLOCK, DETAIL_BLOCK],
            StreamKind::Joint => vec![
                0..HEAD_DIM,
                HEAD_DIM + MOUTH_BLOCK.start..HEAD_DIM + MOUTH_BLOCK.end,
                HEAD_DIM + DETAIL_BLOCK.start..HEAD_DIM + DETAIL_BLOCK.end,
            ],
        }
    }

    pub fn extract(self, seq: &CoefficientSequence) -> Array2<f64> {
        match self {
            StreamKind::Head => split_streams(seq).0.into_frames(),
            StreamKind::MouthDetail => split_streams(seq).1.into_frames(),
            StreamKind::Joint => seq.frames().clone(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Head => "head",
            StreamKind::MouthDetail => "mouth_detail",
            StreamKind::Joint => "joint",
        }
    }
}

impl std::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(StreamKind::Head),
            "mouth_detail" => Ok(StreamKind::MouthDetail),
            "joint" => Ok(StreamKind::Joint),
            other => Err(Error::Parameter(format!("unknown stream selector '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconNorm {
    /// Mean per-frame Euclidean norm.
    #[default]
    L2,
    /// Mean per-frame absolute sum.
    L1,
}

/// Units in which the reconstruction error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconSpace {
    /// Each column divided by its training standard deviation, so blocks
    /// with small raw ranges are not drowned out by the latent terms.
    #[default]
    Standardized,
    /// Raw coefficient units.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub stream: StreamKind,
    pub input_dim: usize,
    /// Transformer width; equals the codebook vector dimension N_e.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub codebook_size: usize,
    pub commitment_weight: f64,
    pub recon_norm: ReconNorm,
    pub recon_space: ReconSpace,
    /// Attention span in frames: the encoder and decoder see consecutive
    /// non-overlapping segments of this length. 0 attends over the whole clip.
    pub segment: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self::for_stream(StreamKind::Head)
    }
}

impl VqConfig {
    pub fn for_stream(stream: StreamKind) -> Self {
        Self {
            stream,
            input_dim: stream.input_dim(),
            d_model: 256,
            layers: 12,
            heads: 8,
            d_ff: 1024,
            codebook_size: 256,
            commitment_weight: 0.25,
            recon_norm: ReconNorm::L2,
            recon_space: ReconSpace::Standardized,
            segment: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![3, 181, 184].contains(&self.input_dim) || self.input_dim != self.stream.input_dim() {
            return Err(Error::Config(format!(
                "input_dim {} does not match stream '{}' (expects {})",
                self.input_dim,
                self.stream.name(),
                self.stream.input_dim()
            )));
        }
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codebook size must be at least 1".into()));
        }
        if !(self.commitment_weight >= 0.0) || self.d_ff == 0 || self.layers == 0 {
            return Err(Error::Config("commitment weight, d_ff and layers must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Quantization

/// K×N_e matrix of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Array2<f64>,
}

/// Quantized latents: each row of `vectors` is the codebook row named by
/// the matching entry of `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodeSequence {
    pub vectors: Array2<f64>,
    pub indices: Vec<usize>,
}

impl LatentCodeSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 {
            return Err(Error::Parameter("codebook is empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("codebook has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn quantize(&self, latents: ArrayView2<'_, f64>) -> Result<LatentCodeSequence> {
        quantize(latents, self)
    }
}

/// Index of the nearest codebook row for every latent row, by squared
/// Euclidean distance; ties go to the lowest index.
pub fn nearest_codes(latents: ArrayView2<'_, f64>, entries: ArrayView2<'_, f64>) -> Vec<usize> {
    latents
        .rows()
        .into_iter()
        .map(|z| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, e) in entries.rows().into_iter().enumerate() {
                let mut d = 0.0;
                for (a, b) in z.iter().zip(e.iter()) {
                    let diff = a - b;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn quantize(latents: ArrayView2<'_, f64>, codebook: &Codebook) -> Result<LatentCodeSequence> {
    if codebook.size() == 0 {
        return Err(Error::Parameter("codebook is empty".into()));
    }
    if latents.ncols() != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent width {} vs codebook width {}",
            latents.ncols(),
            codebook.dim()
        )));
    }
    let indices = nearest_codes(latents, codebook.entries.view());
    let vectors = codebook.entries.select(Axis(0), &indices);
    Ok(LatentCodeSequence { vectors, indices })
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VqLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl std::ops::AddAssign for VqLoss {
    fn add_assign(&mut self, o: Self) {
        self.total += o.total;
        self.reconstruction += o.reconstruction;
        self.codebook += o.codebook;
        self.commitment += o.commitment;
    }
}

impl VqLoss {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            total: self.total * c,
            reconstruction: self.reconstruction * c,
            codebook: self.codebook * c,
            commitment: self.commitment * c,
        }
    }
}

pub struct VqLossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
}

impl VqLossVars {
    pub fn values(&self, g: &Graph) -> VqLoss {
        VqLoss {
            total: g.scalar(self.total),
            reconstruction: g.scalar(self.reconstruction),
            codebook: g.scalar(self.codebook),
            commitment: g.scalar(self.commitment),
        }
    }
}

/// Sum over column blocks of the mean per-frame norm of `recon - target`.
pub fn reconstruction_term(g: &mut Graph, target: Var, recon: Var, blocks: &[Range<usize>], norm: ReconNorm) -> Var {
    let diff = g.sub(recon, target);
    let mut terms = Vec::with_capacity(blocks.len());
    for b in blocks {
        let part = if b.start == 0 && b.end == g.value(diff).ncols() {
            diff
        } else {
            g.slice_cols(diff, b.start, b.len())
        };
        let n = match norm {
            ReconNorm::L2 => g.row_norm(part),
            ReconNorm::L1 => g.row_abs_sum(part),
        };
        terms.push(g.mean(n));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t);
    }
    total
}

/// Reconstruction + codebook + β·commitment. `quantized` must carry the
/// codebook gradient path (gathered codebook rows); `latents` the encoder
/// path. Stop-gradients are applied here.
#[allow(clippy::too_many_arguments)]
pub fn vq_loss_graph(
    g: &mut Graph,
    target: Var,
    recon: Var,
    latents: Var,
    quantized: Var,
    commitment_weight: f64,
    blocks: &[Range<usize>],
    norm: ReconNorm,
) -> VqLossVars {
    let reconstruction = reconstruction_term(g, target, recon, blocks, norm);
    let sg_latents = g.detach(latents);
    let d = g.sub(sg_latents, quantized);
    let d = g.row_sq_norm(d);
    let codebook = g.mean(d);
    let sg_q = g.detach(quantized);
    let d = g.sub(sg_q, latents);
    let d = g.row_sq_norm(d);
    let commit_raw = g.mean(d);
    let commitment = g.scale(commit_raw, commitment_weight);
    let t = g.add(reconstruction, codebook);
    let total = g.add(t, commitment);
    VqLossVars {
        total,
        reconstruction,
        codebook,
        commitment,
    }
}

/// Value-level loss on plain matrices.
pub fn vq_loss(
    input: &Array2<f64>,
    recon: &Array2<f64>,
    latents: &Array2<f64>,
    quantized: &Array2<f64>,
    commitment_weight: f64,
    blocks: &[Range<usize>],
    norm: ReconNorm,
) -> Result<VqLoss> {
    if input.dim() != recon.dim() {
        return Err(Error::Shape(format!("input {:?} vs reconstruction {:?}", input.dim(), recon.dim())));
    }
    if latents.dim() != quantized.dim() || latents.nrows() != input.nrows() {
        return Err(Error::Shape(format!(
            "latents {:?} vs quantized {:?} (input has {} frames)",
            latents.dim(),
            quantized.dim(),
            input.nrows()
        )));
    }
    if blocks.iter().any(|b| b.end > input.ncols()) {
        return Err(Error::Shape("reconstruction block exceeds input width".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let r = g.constant(recon.clone());
    let z = g.constant(latents.clone());
    let q = g.constant(quantized.clone());
    Ok(vq_loss_graph(&mut g, x, r, z, q, commitment_weight, blocks, norm).values(&g))
}

// ---------------------------------------------------------------------------
// Model

/// Per-column statistics used to standardize inputs and de-standardize
/// outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ColumnStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn from_streams(streams: &[Array2<f64>]) -> Self {
        let dim = streams[0].ncols();
        let n: usize = streams.iter().map(|s| s.nrows()).sum();
        let mut mean = Array1::zeros(dim);
        for s in streams {
            mean += &s.sum_axis(Axis(0));
        }
        mean /= n as f64;
        let mut var = Array1::<f64>::zeros(dim);
        for s in streams {
            for row in s.rows() {
                let d = &row - &mean;
                var += &(&d * &d);
            }
        }
        var /= n as f64;
        let std = var.mapv(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 });
        // Stored through f32 in checkpoints.
        Self {
            mean: mean.mapv(|v| v as f32 as f64),
            std: std.mapv(|v| v as f32 as f64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VqVae {
    config: VqConfig,
    params: Params,
    stats: ColumnStats,
    input_proj: Linear,
    encoder: TransformerStack,
    enc_out: Linear,
    codebook: ParamId,
    dec_in: Linear,
    decoder: TransformerStack,
    output_proj: Linear,
}

impl VqVae {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.d_model;
        let scale = 1.0 / ((d / config.heads) as f64).sqrt();
        let input_proj = Linear::new(&mut p, "enc.input", config.input_dim, d, &mut rng);
        let encoder = TransformerStack::new(&mut p, "enc", config.layers, d, config.heads, config.d_ff, scale, &mut rng);
        let enc_out = Linear::new(&mut p, "enc.output", d, d, &mut rng);
        let bound = 1.0 / config.codebook_size as f64;
        let cb = Array2::from_shape_simple_fn((config.codebook_size, d), || rng.gen_range(-bound..bound));
        let codebook = p.insert("codebook", cb);
        let dec_in = Linear::new(&mut p, "dec.input", d, d, &mut rng);
        let decoder = TransformerStack::new(&mut p, "dec", config.layers, d, config.heads, config.d_ff, scale, &mut rng);
        let output_proj = Linear::new(&mut p, "dec.output", d, config.input_dim, &mut rng);
        Ok(Self {
            stats: ColumnStats::identity(config.input_dim),
            config,
            params: p,
            input_proj,
            encoder,
            enc_out,
            codebook,
            dec_in,
            decoder,
            output_proj,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn stats(&self) -> &ColumnStats {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: ColumnStats) {
        assert_eq!(stats.mean.len(), self.config.input_dim);
        self.stats = stats;
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.params.get(self.codebook).clone(),
        }
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    /// Marks the whole model frozen (bound as constants in graphs).
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "{} stream expects {} columns, got {}",
                self.config.stream.name(),
                self.config.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("stream has no frames".into()));
        }
        Ok(())
    }

    /// Continuous latents (T×N_e) for a stream.
    pub fn encode_graph(&self, g: &mut Graph, x: &Array2<f64>) -> Var {
        let normed = (x - &self.stats.mean) / &self.stats.std;
        let xv = g.constant(normed);
        let h = self.input_proj.forward(g, &self.params, xv);
        let h = self.segmented(g, &self.encoder, h);
        self.enc_out.forward(g, &self.params, h)
    }

    /// Runs `stack` over each attention segment with positions restarting at
    /// zero, then stacks the segments back in time order.
    fn segmented(&self, g: &mut Graph, stack: &TransformerStack, h: Var) -> Var {
        let t = g.value(h).nrows();
        let seg = match self.config.segment {
            0 => t,
            s => s.min(t),
        };
        let mut parts = Vec::with_capacity(t.div_ceil(seg));
        for start in (0..t).step_by(seg) {
            let len = seg.min(t - start);
            let part = if len == t { h } else { g.slice_rows(h, start, len) };
            let pe = g.constant(sinusoidal_positions(len, self.config.d_model));
            let part = g.add(part, pe);
            parts.push(stack.forward(g, &self.params, part, None).0);
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)
        }
    }

    /// Reconstructed stream (T×input_dim) for latents `z`.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let y = self.decode_standardized_graph(g, z);
        self.destandardize_graph(g, y)
    }

    fn decode_standardized_graph(&self, g: &mut Graph, z: Var) -> Var {
        let h = self.dec_in.forward(g, &self.params, z);
        let h = self.segmented(g, &self.decoder, h);
        self.output_proj.forward(g, &self.params, h)
    }

    fn destandardize_graph(&self, g: &mut Graph, y: Var) -> Var {
        let std = g.constant(self.stats.std.clone().insert_axis(Axis(0)));
        let mean = g.constant(self.stats.mean.clone().insert_axis(Axis(0)));
        let y = g.mul_row(y, std);
        g.add_row(y, mean)
    }

    pub fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let z = self.encode_graph(&mut g, x);
        Ok(g.value(z).clone())
    }

    pub fn quantize(&self, latents: &Array2<f64>) -> Result<LatentCodeSequence> {
        quantize(latents.view(), &self.codebook())
    }

    pub fn decode(&self, codes: &LatentCodeSequence) -> Result<Array2<f64>> {
        self.decode_latents(&codes.vectors)
    }

    /// Decodes arbitrary (not necessarily quantized) latents.
    pub fn decode_latents(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        if latents.ncols() != self.config.d_model || latents.nrows() == 0 {
            return Err(Error::Shape(format!(
                "decoder expects T×{} latents, got {:?}",
                self.config.d_model,
                latents.dim()
            )));
        }
        let mut g = Graph::new();
        let z = g.constant(latents.clone());
        let y = self.decode_graph(&mut g, z);
        Ok(g.value(y).clone())
    }

    /// encode → quantize → decode.
    pub fn reconstruct(&self, x: &Array2<f64>) -> Result<(LatentCodeSequence, Array2<f64>)> {
        let z = self.encode(x)?;
        let codes = self.quantize(&z)?;
        let recon = self.decode(&codes)?;
        Ok((codes, recon))
    }

    /// Decoder output in the units of the reconstruction loss.
    pub fn decode_loss_space_graph(&self, g: &mut Graph, z: Var) -> Var {
        match self.config.recon_space {
            ReconSpace::Standardized => self.decode_standardized_graph(g, z),
            ReconSpace::Raw => self.decode_graph(g, z),
        }
    }

    /// `x` converted to the units of the reconstruction loss.
    pub fn to_loss_space(&self, x: &Array2<f64>) -> Array2<f64> {
        match self.config.recon_space {
            ReconSpace::Standardized => (x - &self.stats.mean) / &self.stats.std,
            ReconSpace::Raw => x.clone(),
        }
    }

    /// Reconstruction loss of predicting the per-column training mean for
    /// every frame, in the units of the training loss.
    pub fn mean_baseline(&self, clips: &[Array2<f64>]) -> f64 {
        let blocks = self.config.stream.blocks();
        let total: f64 = clips
            .iter()
            .map(|x| {
                let pred = Array2::from_shape_fn(x.raw_dim(), |(_, c)| self.stats.mean[c]);
                let mut g = Graph::new();
                let xv = g.constant(self.to_loss_space(x));
                let pv = g.constant(self.to_loss_space(&pred));
                let l = reconstruction_term(&mut g, xv, pv, &blocks, self.config.recon_norm);
                g.scalar(l)
            })
            .sum();
        total / clips.len() as f64
    }

    /// Builds the full training loss for one clip (straight-through
    /// quantization). Returns the loss vars and the chosen code indices.
    pub fn loss_graph(&self, g: &mut Graph, x: &Array2<f64>) -> (VqLossVars, Vec<usize>) {
        let z = self.encode_graph(g, x);
        let cb = g.param(&self.params, self.codebook);
        let indices = nearest_codes(g.value(z).view(), g.value(cb).view());
        let q = g.gather_rows(cb, &indices);
        let q_value = g.value(q).clone();
        let st = g.straight_through(z, q_value);
        let recon = self.decode_loss_space_graph(g, st);
        let target = g.constant(self.to_loss_space(x));
        let blocks = self.config.stream.blocks();
        let loss = vq_loss_graph(g, target, recon, z, q, self.config.commitment_weight, &blocks, self.config.recon_norm);
        (loss, indices)
    }

    /// Reconstruction loss of decode(encode(x)) with quantization bypassed.
    pub fn bypass_loss_graph(&self, g: &mut Graph, x: &Array2<f64>) -> Var {
        let z = self.encode_graph(g, x);
        let recon = self.decode_loss_space_graph(g, z);
        let target = g.constant(self.to_loss_space(x));
        reconstruction_term(g, target, recon, &self.config.stream.blocks(), self.config.recon_norm)
    }

    /// Evaluation-mode loss components for one clip.
    pub fn evaluate(&self, x: &Array2<f64>) -> Result<(VqLoss, Vec<usize>)> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let (loss, idx) = self.loss_graph(&mut g, x);
        Ok((loss.values(&g), idx))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut tensors: Vec<(String, Mat)> = self.params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        tensors.push(("buffer.norm_mean".into(), self.stats.mean.clone().insert_axis(Axis(0))));
        tensors.push(("buffer.norm_std".into(), self.stats.std.clone().insert_axis(Axis(0))));
        Checkpoint {
            config: serde_json::json!({
                "kind": "vqvae",
                "format_version": crate::checkpoint::CHECKPOINT_VERSION,
                "seed": seed,
                "config": self.config,
            }),
            tensors,
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        if ck.kind() != Some("vqvae") {
            return Err(Error::Format(format!("expected a vqvae checkpoint, found {:?}", ck.kind())));
        }
        let config: VqConfig = serde_json::from_value(ck.config["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        let mean = ck.take_tensor("buffer.norm_mean")?;
        let std = ck.take_tensor("buffer.norm_std")?;
        model.stats = ColumnStats {
            mean: mean.row(0).to_owned(),
            std: std.row(0).to_owned(),
        };
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
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// VQ-VAE only: epochs of plain autoencoder training (quantization
    /// bypassed) before the codebook is initialized. Not counted in `epochs`.
    pub warmup_epochs: usize,
    /// VQ-VAE only: Lloyd iterations refining the data-seeded codebook.
    pub kmeans_iters: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            warmup_epochs: 0,
            kmeans_iters: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: VqLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    /// Reconstruction loss per warm-up epoch (quantization bypassed).
    pub warmup_curve: Vec<f64>,
    pub curve: Vec<EpochLoss>,
    /// Mean evaluation-mode loss over the training clips after the last epoch.
    pub final_train: VqLoss,
    pub final_val: Option<VqLoss>,
    /// Fraction of codebook rows selected at least once on validation clips.
    pub codebook_utilization: f64,
}

/// Fraction of the `k` codes that appear in `indices`.
pub fn codebook_utilization(indices: impl IntoIterator<Item = usize>, k: usize) -> f64 {
    let mut used = vec![false; k];
    for i in indices {
        used[i] = true;
    }
    used.iter().filter(|u| **u).count() as f64 / k as f64
}

fn batch_loss(model: &VqVae, clips: &[&Array2<f64>]) -> (Gradients, VqLoss) {
    let per_clip: Vec<(Gradients, VqLoss)> = clips
        .par_iter()
        .map(|x| {
            let mut g = Graph::new();
            let (loss, _) = model.loss_graph(&mut g, x);
            (g.backward(loss.total), loss.values(&g))
        })
        .collect();
    let mut grads = Gradients::default();
    let mut total = VqLoss::default();
    for (gr, l) in per_clip {
        grads.merge(gr);
        total += l;
    }
    let c = 1.0 / clips.len() as f64;
    grads.scale(c);
    (grads, total.scaled(c))
}

/// Most frames fed to the codebook k-means; larger sets are subsampled.
const KMEANS_MAX_FRAMES: usize = 20_000;

/// Seeds the codebook with encoder outputs of randomly chosen training
/// frames (plus a small jitter so duplicate frames give distinct rows), then
/// refines it with `iters` Lloyd iterations. Empty clusters keep their seed.
fn init_codebook_from_data(model: &mut VqVae, train: &[Array2<f64>], iters: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let latents: Vec<Array2<f64>> = train.par_iter().map(|x| model.encode(x)).collect::<Result<_>>()?;
    let mut frames: Vec<(usize, usize)> = latents
        .iter()
        .enumerate()
        .flat_map(|(c, z)| (0..z.nrows()).map(move |t| (c, t)))
        .collect();
    if frames.len() > KMEANS_MAX_FRAMES {
        frames.shuffle(rng);
        frames.truncate(KMEANS_MAX_FRAMES);
    }
    let k = model.config.codebook_size;
    let d = model.config.d_model;
    let points = Array2::from_shape_fn((frames.len(), d), |(i, j)| {
        let (c, t) = frames[i];
        latents[c][[t, j]]
    });
    let mut entries = Array2::zeros((k, d));
    for i in 0..k {
        let row = points.row(rng.gen_range(0..points.nrows()));
        for j in 0..d {
            entries[[i, j]] = row[j] + rng.gen_range(-1e-3..1e-3);
        }
    }
    for _ in 0..iters {
        let assign = nearest_codes(points.view(), entries.view());
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().into_iter().zip(&assign) {
            sums.row_mut(a).scaled_add(1.0, &p);
            counts[a] += 1;
        }
        for (i, &n) in counts.iter().enumerate() {
            if n > 0 {
                entries.row_mut(i).assign(&(&sums.row(i) / n as f64));
            }
        }
    }
    let id = model.codebook;
    *model.params.get_mut(id) = entries;
    crate::nn::round_f32(model.params.get_mut(id));
    Ok(())
}

fn bypass_batch(model: &VqVae, clips: &[&Array2<f64>]) -> (Gradients, f64) {
    let per_clip: Vec<(Gradients, f64)> = clips
        .par_iter()
        .map(|x| {
            let mut g = Graph::new();
            let loss = model.bypass_loss_graph(&mut g, x);
            (g.backward(loss), g.scalar(loss))
        })
        .collect();
    let mut grads = Gradients::default();
    let mut total = 0.0;
    for (gr, l) in per_clip {
        grads.merge(gr);
        total += l;
    }
    let c = 1.0 / clips.len() as f64;
    grads.scale(c);
    (grads, total * c)
}

/// Trains a VQ-VAE on pre-extracted streams. Deterministic for a fixed seed.
pub fn train_vqvae(
    train: &[Array2<f64>],
    val: &[Array2<f64>],
    config: &VqConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(VqVae, VqTrainReport)> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut model = VqVae::new(config.clone(), seed)?;
    for x in train.iter().chain(val) {
        model.check_width(x)?;
    }
    model.set_stats(ColumnStats::from_streams(train));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let batch = opts.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut warmup_curve = Vec::with_capacity(opts.warmup_epochs);
    let mut opt = Adam::new(opts.adam);
    for epoch in 0..opts.warmup_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let clips: Vec<&Array2<f64>> = chunk.iter().map(|&i| &train[i]).collect();
            let (grads, loss) = bypass_batch(&model, &clips);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite warm-up loss {loss}"),
                });
            }
            opt.step(&mut model.params, &grads, opts.schedule.initial);
            total += loss;
            batches += 1;
        }
        let total = total / batches as f64;
        log_warmup(config.stream.name(), epoch, total);
        warmup_curve.push(total);
    }
    init_codebook_from_data(&mut model, train, opts.kmeans_iters, &mut rng)?;

    // Fresh moments: the codebook enters the optimizer only now.
    let mut opt = Adam::new(opts.adam);
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = opts.schedule.at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = VqLoss::default();
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let clips: Vec<&Array2<f64>> = chunk.iter().map(|&i| &train[i]).collect();
            let (grads, loss) = batch_loss(&model, &clips);
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {}", loss.total),
                });
            }
            opt.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let epoch_loss = epoch_loss.scaled(1.0 / batches as f64);
        log_epoch("vqvae", config.stream.name(), epoch, &epoch_loss);
        curve.push(EpochLoss {
            epoch,
            lr,
            loss: epoch_loss,
        });
    }

    let final_train = mean_eval(&model, train)?.0;
    let (final_val, utilization) = if val.is_empty() {
        (None, mean_eval(&model, train)?.1)
    } else {
        let (l, u) = mean_eval(&model, val)?;
        (Some(l), u)
    };
    Ok((
        model,
        VqTrainReport {
            warmup_curve,
            curve,
            final_train,
            final_val,
            codebook_utilization: utilization,
        },
    ))
}

fn log_warmup(stream: &str, epoch: usize, loss: f64) {
    if std::env::var_os("COEFFCAST_LOG").is_some() {
        eprintln!("[vqvae-warmup:{stream}] epoch {epoch} rec {loss:.5}");
    }
}

fn log_epoch(what: &str, stream: &str, epoch: usize, loss: &VqLoss) {
    if std::env::var_os("COEFFCAST_LOG").is_some() {
        eprintln!(
            "[{what}:{stream}] epoch {epoch} total {:.5} rec {:.5} cb {:.5} cmt {:.5}",
            loss.total, loss.reconstruction, loss.codebook, loss.commitment
        );
    }
}

/// Mean evaluation loss and codebook utilization over a set of clips.
pub fn mean_eval(model: &VqVae, clips: &[Array2<f64>]) -> Result<(VqLoss, f64)> {
    let results: Vec<(VqLoss, Vec<usize>)> = clips.par_iter().map(|x| model.evaluate(x)).collect::<Result<_>>()?;
    let mut total = VqLoss::default();
    let mut all = Vec::new();
    for (l, idx) in results {
        total += l;
        all.extend(idx);
    }
    Ok((
        total.scaled(1.0 / clips.len() as f64),
        codebook_utilization(all, model.config.codebook_size),
    ))
}

/// Slices a T×C stream into frames `range` (helper for tests and tools).
pub fn frames(x: &Array2<f64>, range: Range<usize>) -> Array2<f64> {
    x.slice(s![range, ..]).to_owned()
}
