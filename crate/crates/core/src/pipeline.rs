//! End-to-end commands: synthesize, train, infer, evaluate and export.
//!
//! Every command reads a [`RunConfig`], writes its artifacts under the
//! configured output directory and records a `run_<command>.json` metadata
//! file holding the config hash and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audiofeat::{align_to_frames, frame_rms, load_wav, mel_spectrogram, AudioFeatureSequence};
use crate::coeffstream::{
    concat_streams, read_coeff_file, smooth_sequence, write_coeff_file, ClipManifest, CoefficientSequence,
    HeadPoseStream, MouthDetailStream, SmoothingKernel, Split,
};
use crate::error::{Error, Result};
use crate::meshexport::{export_obj, BlendshapeModel};
use crate::metrics::{clip_metrics_csv, evaluate, ClipEval, EvalReport};
use crate::nn::LrSchedule;
use crate::predictor::{autoregressive_infer, train_predictor, InferOptions, PredTrainReport, Predictor, PredictorConfig, TrainClip};
use crate::synthgen::{generate_dataset, SynthSpec};
use crate::vqvae::{train_vqvae, StreamKind, TrainOptions, VqConfig, VqTrainReport, VqVae};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Ablation switch: which VQ layout and predictor window to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Separate head and mouth/detail models, windowed predictor.
    #[default]
    Full,
    /// One joint VQ-VAE and predictor over all coefficients.
    NoDisentangle,
    /// Separate models, window of one frame.
    NoWindow,
    /// Joint model with a window of one frame.
    Neither,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoDisentangle, Mode::NoWindow, Mode::Neither];

    pub fn streams(self) -> Vec<StreamKind> {
        match self {
            Mode::Full | Mode::NoWindow => vec![StreamKind::Head, StreamKind::MouthDetail],
            Mode::NoDisentangle | Mode::Neither => vec![StreamKind::Joint],
        }
    }

    pub fn windowed(self) -> bool {
        matches!(self, Mode::Full | Mode::NoDisentangle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoDisentangle => "no_disentangle",
            Mode::NoWindow => "no_window",
            Mode::Neither => "neither",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown mode '{s}'")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared VQ-VAE architecture; the stream fixes the input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqArch {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub codebook_size: usize,
    pub commitment_weight: f64,
    pub recon_norm: crate::vqvae::ReconNorm,
    pub recon_space: crate::vqvae::ReconSpace,
    pub segment: usize,
}

impl Default for VqArch {
    fn default() -> Self {
        let c = VqConfig::default();
        Self {
            d_model: c.d_model,
            layers: c.layers,
            heads: c.heads,
            d_ff: c.d_ff,
            codebook_size: c.codebook_size,
            commitment_weight: c.commitment_weight,
            recon_norm: c.recon_norm,
            recon_space: c.recon_space,
            segment: c.segment,
        }
    }
}

impl VqArch {
    pub fn for_stream(&self, stream: StreamKind) -> VqConfig {
        VqConfig {
            stream,
            input_dim: stream.input_dim(),
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            codebook_size: self.codebook_size,
            commitment_weight: self.commitment_weight,
            recon_norm: self.recon_norm,
            recon_space: self.recon_space,
            segment: self.segment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsOptions {
    /// Disjoint pairs for diversity; 0 uses every clip.
    pub diversity_pairs: usize,
    pub split: Split,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            diversity_pairs: 0,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory holding `manifest.jsonl`.
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: Mode,
    pub synth: SynthSpec,
    /// Head-pose VQ-VAE architecture.
    pub head_vq: VqArch,
    /// Mouth/detail VQ-VAE architecture.
    pub mouth_vq: VqArch,
    /// Joint VQ-VAE architecture (no-disentanglement modes).
    pub joint_vq: VqArch,
    /// Predictor template; stream and window are set per mode.
    pub predictor: PredictorConfig,
    pub vq_train: TrainOptions,
    pub predictor_train: TrainOptions,
    pub infer: InferOptions,
    pub metrics: MetricsOptions,
    /// Standardize mel features per clip before use.
    pub normalize_audio: bool,
    /// Causal smoothing window applied by the `smooth` command.
    pub smoothing_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            seed: 0,
            mode: Mode::Full,
            synth: SynthSpec::default(),
            head_vq: VqArch::default(),
            mouth_vq: VqArch::default(),
            joint_vq: VqArch::default(),
            predictor: PredictorConfig::default(),
            vq_train: TrainOptions::default(),
            predictor_train: TrainOptions::default(),
            infer: InferOptions::default(),
            metrics: MetricsOptions::default(),
            normalize_audio: false,
            smoothing_window: 4,
        }
    }
}

impl RunConfig {
    /// Reduced model and schedule that trains the 50-clip synthetic set on
    /// one CPU core in roughly ten minutes.
    pub fn desk_scale() -> Self {
        let arch = VqArch {
            d_model: 32,
            layers: 2,
            heads: 4,
            d_ff: 64,
            ..VqArch::default()
        };
        let vq_train = TrainOptions {
            epochs: 25,
            batch_size: 4,
            warmup_epochs: 15,
            kmeans_iters: 10,
            schedule: LrSchedule {
                initial: 3e-3,
                floor: 1e-4,
                decay_epochs: 25,
            },
            ..TrainOptions::default()
        };
        let predictor_train = TrainOptions {
            epochs: 40,
            batch_size: 4,
            schedule: LrSchedule {
                initial: 1e-2,
                floor: 1e-4,
                decay_epochs: 40,
            },
            ..TrainOptions::default()
        };
        Self {
            head_vq: arch.clone(),
            mouth_vq: arch.clone(),
            joint_vq: arch,
            predictor: PredictorConfig {
                window: 12,
                d_model: 32,
                heads: 4,
                blocks: 2,
                d_ff: 64,
                train_stride: 4,
                ..PredictorConfig::default()
            },
            vq_train,
            predictor_train,
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn vq_config(&self, stream: StreamKind) -> VqConfig {
        match stream {
            StreamKind::Head => self.head_vq.for_stream(stream),
            StreamKind::MouthDetail => self.mouth_vq.for_stream(stream),
            StreamKind::Joint => self.joint_vq.for_stream(stream),
        }
    }

    pub fn predictor_config(&self, stream: StreamKind) -> PredictorConfig {
        let mut c = self.predictor.clone();
        c.stream = stream;
        c.d_model = self.vq_config(stream).d_model;
        if !self.mode.windowed() {
            c.window = 1;
            c.train_stride = 1;
        }
        c
    }

    /// Rejects contradictions before any compute.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        for stream in self.mode.streams() {
            let vq = self.vq_config(stream);
            vq.validate()?;
            if self.predictor.d_model != vq.d_model {
                return Err(Error::Config(format!(
                    "predictor d_model {} differs from the {} codebook width N_e = {}",
                    self.predictor.d_model,
                    stream.name(),
                    vq.d_model
                )));
            }
            self.predictor_config(stream).validate()?;
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("smoothing window must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn vq_path(&self, stream: StreamKind) -> PathBuf {
        self.checkpoint_dir().join(format!("vq_{}.ckpt", stream.name()))
    }

    pub fn predictor_path(&self, stream: StreamKind) -> PathBuf {
        self.checkpoint_dir().join(format!("predictor_{}.ckpt", stream.name()))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.out.join("predictions")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dataset.join("manifest.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub mode: Mode,
    pub config_hash: String,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdir(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn record(cfg: &RunConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let meta = RunMetadata {
        command: command.into(),
        version: VERSION.into(),
        seed: cfg.seed,
        mode: cfg.mode,
        config_hash: cfg.hash(),
        outputs: outputs
            .iter()
            .map(|p| p.strip_prefix(&cfg.out).unwrap_or(p).display().to_string())
            .collect(),
        config: cfg.clone(),
    };
    let path = cfg.out.join(format!("run_{command}.json"));
    write_json(&path, &meta)?;
    Ok(path)
}

fn log(msg: impl AsRef<str>) {
    if std::env::var_os("COEFFCAST_LOG").is_some() {
        eprintln!("{}", msg.as_ref());
    }
}

// ---------------------------------------------------------------------------
// Data loading

/// One clip as loaded from the dataset.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub clip_id: String,
    pub coeffs: CoefficientSequence,
    pub samples: Vec<f64>,
    pub audio: AudioFeatureSequence,
}

pub fn load_manifest(cfg: &RunConfig) -> Result<ClipManifest> {
    let m = ClipManifest::load(cfg.manifest_path())?;
    m.validate()?;
    Ok(m)
}

pub fn load_split(cfg: &RunConfig, manifest: &ClipManifest, split: Split) -> Result<Vec<LoadedClip>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let coeffs = read_coeff_file(manifest.coeff_path(e))?.with_clip_id(e.clip_id.clone());
            let samples = load_wav(manifest.wav_path(e))?;
            let mel = mel_spectrogram(&samples)?;
            let mut audio = align_to_frames(&mel, coeffs.len())?;
            if cfg.normalize_audio {
                audio = audio.normalized();
            }
            Ok(LoadedClip {
                clip_id: e.clip_id.clone(),
                coeffs,
                samples,
                audio,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_synth(cfg: &RunConfig) -> Result<ClipManifest> {
    let spec = SynthSpec {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let manifest = generate_dataset(&spec, &cfg.dataset)?;
    let meta = RunConfig {
        out: cfg.dataset.clone(),
        ..cfg.clone()
    };
    record(&meta, "synth", &[cfg.manifest_path()])?;
    Ok(manifest)
}

/// Smooths one `.coeff` file, or every `.coeff` file of a directory, into
/// `output` with a uniform causal kernel.
pub fn cmd_smooth(cfg: &RunConfig, input: &Path, output: &Path) -> Result<Vec<PathBuf>> {
    let kernel = SmoothingKernel::uniform(cfg.smoothing_window)?;
    let files: Vec<(PathBuf, PathBuf)> = if input.is_dir() {
        mkdir(output)?;
        let mut names: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "coeff"))
            .collect();
        names.sort();
        names
            .into_iter()
            .map(|p| {
                let dst = output.join(p.file_name().expect("file name"));
                (p, dst)
            })
            .collect()
    } else {
        if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        vec![(input.to_path_buf(), output.to_path_buf())]
    };
    let mut written = Vec::new();
    for (src, dst) in files {
        let seq = read_coeff_file(&src)?;
        write_coeff_file(&smooth_sequence(&seq, &kernel)?, &dst)?;
        written.push(dst);
    }
    record(cfg, "smooth", &written)?;
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqRunReport {
    pub stream: StreamKind,
    pub train: VqTrainReport,
    /// Reconstruction loss of predicting the per-column training mean, on
    /// the training clips.
    pub mean_baseline_train: f64,
    pub mean_baseline_val: Option<f64>,
}

/// Trains the VQ-VAEs required by the mode (or only `only`).
pub fn cmd_train_vqvae(cfg: &RunConfig, only: Option<StreamKind>) -> Result<Vec<VqRunReport>> {
    cfg.validate()?;
    let streams: Vec<StreamKind> = match only {
        Some(s) => vec![s],
        None => cfg.mode.streams(),
    };
    let manifest = load_manifest(cfg)?;
    let train = load_split(cfg, &manifest, Split::Train)?;
    let val = load_split(cfg, &manifest, Split::Val)?;
    if train.is_empty() {
        return Err(Error::Data("manifest has no training clips".into()));
    }
    mkdir(&cfg.checkpoint_dir())?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for stream in streams {
        let vq_cfg = cfg.vq_config(stream);
        let tr: Vec<Array2<f64>> = train.iter().map(|c| stream.extract(&c.coeffs)).collect();
        let va: Vec<Array2<f64>> = val.iter().map(|c| stream.extract(&c.coeffs)).collect();
        log(format!("training {} VQ-VAE on {} clips", stream.name(), tr.len()));
        let (model, report) = train_vqvae(&tr, &va, &vq_cfg, &cfg.vq_train, cfg.seed)?;
        let run = VqRunReport {
            stream,
            mean_baseline_train: model.mean_baseline(&tr),
            mean_baseline_val: (!va.is_empty()).then(|| model.mean_baseline(&va)),
            train: report,
        };
        let ck = cfg.vq_path(stream);
        model.save(&ck, cfg.seed)?;
        let rp = cfg.out.join(format!("train_vqvae_{}.json", stream.name()));
        write_json(&rp, &run)?;
        outputs.extend([ck, rp]);
        reports.push(run);
    }
    record(cfg, "train_vqvae", &outputs)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRunReport {
    pub stream: StreamKind,
    pub train: PredTrainReport,
}

fn load_vq(cfg: &RunConfig, stream: StreamKind) -> Result<VqVae> {
    let path = cfg.vq_path(stream);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "VQ-VAE checkpoint missing; run train-vqvae first"),
        ));
    }
    let vq = VqVae::load(&path)?;
    if vq.config().d_model != cfg.predictor.d_model {
        return Err(Error::Config(format!(
            "{}: codebook width {} differs from predictor d_model {}",
            path.display(),
            vq.config().d_model,
            cfg.predictor.d_model
        )));
    }
    Ok(vq)
}

fn load_predictor(cfg: &RunConfig, stream: StreamKind) -> Result<Predictor> {
    let path = cfg.predictor_path(stream);
    if !path.is_file() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "predictor checkpoint missing; run train-predictor first"),
        ));
    }
    Predictor::load(&path)
}

fn train_clips(vq: &VqVae, clips: &[LoadedClip], stream: StreamKind) -> Result<Vec<TrainClip>> {
    clips
        .par_iter()
        .map(|c| TrainClip::prepare(vq, stream.extract(&c.coeffs), c.audio.clone()))
        .collect()
}

/// Trains one predictor per stream of the mode against the frozen VQ-VAEs.
pub fn cmd_train_predictor(cfg: &RunConfig) -> Result<Vec<PredictorRunReport>> {
    cfg.validate()?;
    let vqs: Vec<(StreamKind, VqVae)> = cfg
        .mode
        .streams()
        .into_iter()
        .map(|s| Ok((s, load_vq(cfg, s)?)))
        .collect::<Result<_>>()?;
    let manifest = load_manifest(cfg)?;
    let train = load_split(cfg, &manifest, Split::Train)?;
    let val = load_split(cfg, &manifest, Split::Val)?;
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    for (stream, vq) in vqs {
        let tr = train_clips(&vq, &train, stream)?;
        let va = train_clips(&vq, &val, stream)?;
        log(format!("training {} predictor on {} clips", stream.name(), tr.len()));
        let (model, report) = train_predictor(&tr, &va, &vq, &cfg.predictor_config(stream), &cfg.predictor_train, cfg.seed)?;
        let ck = cfg.predictor_path(stream);
        model.save(&ck, cfg.seed)?;
        let rp = cfg.out.join(format!("train_predictor_{}.json", stream.name()));
        let run = PredictorRunReport { stream, train: report };
        write_json(&rp, &run)?;
        outputs.extend([ck, rp]);
        reports.push(run);
    }
    record(cfg, "train_predictor", &outputs)?;
    Ok(reports)
}

/// Trained models for one mode.
pub struct Generator {
    pub mode: Mode,
    pub models: Vec<(StreamKind, Predictor, VqVae)>,
    pub infer: InferOptions,
}

impl Generator {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let models = cfg
            .mode
            .streams()
            .into_iter()
            .map(|s| Ok((s, load_predictor(cfg, s)?, load_vq(cfg, s)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            mode: cfg.mode,
            models,
            infer: cfg.infer,
        })
    }

    /// Full 184-column sequence of `t_out` frames driven by `audio`.
    pub fn generate(&self, clip_id: &str, audio: &AudioFeatureSequence, t_out: usize) -> Result<CoefficientSequence> {
        let outs: Vec<(StreamKind, Array2<f64>)> = self
            .models
            .iter()
            .map(|(s, p, v)| Ok((*s, autoregressive_infer(p, v, audio, t_out, self.infer)?)))
            .collect::<Result<_>>()?;
        match outs.as_slice() {
            [(StreamKind::Joint, y)] => CoefficientSequence::new(clip_id, y.clone()),
            [(StreamKind::Head, h), (StreamKind::MouthDetail, m)] => {
                concat_streams(clip_id, &HeadPoseStream::new(h.clone())?, &MouthDetailStream::new(m.clone())?)
            }
            _ => Err(Error::Config("unsupported stream layout".into())),
        }
    }
}

/// Generates predictions for every clip of the evaluation split. The output
/// length equals the number of mel rows of each clip's audio.
pub fn cmd_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let generator = Generator::load(cfg)?;
    let manifest = load_manifest(cfg)?;
    let dir = cfg.predictions_dir();
    mkdir(&dir)?;
    let entries: Vec<_> = manifest.split(cfg.metrics.split).collect();
    let written: Vec<PathBuf> = entries
        .par_iter()
        .map(|e| {
            let samples = load_wav(manifest.wav_path(e))?;
            let mut audio = mel_spectrogram(&samples)?;
            if cfg.normalize_audio {
                audio = audio.normalized();
            }
            let seq = generator.generate(&e.clip_id, &audio, audio.len())?;
            let path = dir.join(format!("{}.coeff", e.clip_id));
            write_coeff_file(&seq, &path)?;
            Ok(path)
        })
        .collect::<Result<_>>()?;
    record(cfg, "infer", &written)?;
    Ok(written)
}

/// Evaluates predictions in `pred_dir` against ground truth: `gt_dir` if
/// given (matched by file name), otherwise the dataset's evaluation split.
/// Audio energy comes from the dataset WAV of the same clip when available.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: Option<&Path>, gt_dir: Option<&Path>) -> Result<EvalReport> {
    let pred_dir = pred_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.predictions_dir());
    let manifest = ClipManifest::load(cfg.manifest_path()).ok();
    let mut pairs: BTreeMap<String, (PathBuf, PathBuf)> = BTreeMap::new();
    match gt_dir {
        Some(gt) => {
            let read = fs::read_dir(gt).map_err(|e| Error::io(gt, e))?;
            for entry in read.filter_map(|e| e.ok()) {
                let p = entry.path();
                if p.extension().is_some_and(|x| x == "coeff") {
                    let id = p.file_stem().expect("stem").to_string_lossy().to_string();
                    pairs.insert(id.clone(), (pred_dir.join(format!("{id}.coeff")), p));
                }
            }
        }
        None => {
            let m = manifest
                .as_ref()
                .ok_or_else(|| Error::Data(format!("no ground truth: {} unreadable", cfg.manifest_path().display())))?;
            for e in m.split(cfg.metrics.split) {
                pairs.insert(e.clip_id.clone(), (pred_dir.join(format!("{}.coeff", e.clip_id)), m.coeff_path(e)));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data("no clips to evaluate".into()));
    }
    let pairs: Vec<(String, (PathBuf, PathBuf))> = pairs.into_iter().collect();
    let clips: Vec<ClipEval> = pairs
        .par_iter()
        .map(|(id, (p, g))| {
            let prediction = read_coeff_file(p)?;
            let ground_truth = read_coeff_file(g)?;
            let wav = manifest.as_ref().and_then(|m| m.get(id).map(|e| m.wav_path(e)));
            let energy = match wav {
                Some(w) if w.is_file() => frame_rms(&load_wav(&w)?, prediction.len()),
                _ => vec![0.0; prediction.len()],
            };
            Ok(ClipEval {
                clip_id: id.clone(),
                prediction,
                ground_truth,
                energy,
            })
        })
        .collect::<Result<_>>()?;
    let (report, rows) = evaluate(&clips, cfg.metrics.diversity_pairs, cfg.seed)?;
    let dir = cfg.eval_dir();
    mkdir(&dir)?;
    let rp = dir.join("report.json");
    report.write_json(&rp)?;
    let csv = dir.join("per_clip.csv");
    fs::write(&csv, clip_metrics_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    record(cfg, "eval", &[rp, csv])?;
    Ok(report)
}

/// Writes one OBJ per frame of `coeff` into `out_dir`.
pub fn cmd_export_mesh(cfg: &RunConfig, coeff: &Path, out_dir: &Path, detail_debug_gain: Option<f64>) -> Result<Vec<PathBuf>> {
    let seq = read_coeff_file(coeff)?;
    let model = BlendshapeModel::toy()?;
    let meshes = model.sequence_meshes(&seq, detail_debug_gain)?;
    let paths = export_obj(&meshes, &model.faces, out_dir)?;
    record(cfg, "export_mesh", &[out_dir.to_path_buf()])?;
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: Mode,
    pub vq: Vec<VqRunReport>,
    pub predictor: Vec<PredictorRunReport>,
    pub eval: EvalReport,
}

/// train-vqvae → train-predictor → infer → eval for the configured mode.
/// The dataset must already exist.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let vq = cmd_train_vqvae(cfg, None)?;
    let predictor = cmd_train_predictor(cfg)?;
    cmd_infer(cfg)?;
    let eval = cmd_eval(cfg, None, None)?;
    let report = PipelineReport {
        mode: cfg.mode,
        vq,
        predictor,
        eval,
    };
    write_json(&cfg.out.join("pipeline.json"), &report)?;
    Ok(report)
}

/// Runs each mode in its own subdirectory of `cfg.out` and writes a
/// side-by-side summary. VQ-VAE training does not depend on the predictor
/// window, so a mode whose stream layout was already trained earlier in the
/// same ablation reuses those checkpoints instead of retraining.
pub fn run_ablation(cfg: &RunConfig, modes: &[Mode]) -> Result<Vec<PipelineReport>> {
    run_ablation_from(cfg, modes, Vec::new())
}

/// As [`run_ablation`], continuing from modes already run into
/// `cfg.out/<mode>`; their reports join the summary and their checkpoints
/// can be reused.
pub fn run_ablation_from(cfg: &RunConfig, modes: &[Mode], prior: Vec<PipelineReport>) -> Result<Vec<PipelineReport>> {
    let mut out = prior;
    for &mode in modes {
        let sub = RunConfig {
            mode,
            out: cfg.out.join(mode.name()),
            ..cfg.clone()
        };
        sub.validate()?;
        let donor = out.iter().find(|r| r.mode.streams() == mode.streams());
        let vq = match donor {
            Some(d) => {
                let src = RunConfig {
                    mode: d.mode,
                    out: cfg.out.join(d.mode.name()),
                    ..cfg.clone()
                };
                mkdir(&sub.checkpoint_dir())?;
                for stream in mode.streams() {
                    let (from, to) = (src.vq_path(stream), sub.vq_path(stream));
                    fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
                }
                d.vq.clone()
            }
            None => cmd_train_vqvae(&sub, None)?,
        };
        let predictor = cmd_train_predictor(&sub)?;
        cmd_infer(&sub)?;
        let eval = cmd_eval(&sub, None, None)?;
        let report = PipelineReport {
            mode,
            vq,
            predictor,
            eval,
        };
        write_json(&sub.out.join("pipeline.json"), &report)?;
        out.push(report);
    }
    let summary: BTreeMap<&str, &EvalReport> = out.iter().map(|r| (r.mode.name(), &r.eval)).collect();
    write_json(&cfg.out.join("ablation.json"), &summary)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_mapping() {
        let cfg = RunConfig {
            mode: Mode::NoWindow,
            ..RunConfig::default()
        };
        assert_eq!(cfg.predictor_config(StreamKind::Head).window, 1);
        assert_eq!(Mode::Neither.streams(), vec![StreamKind::Joint]);
        assert_eq!(RunConfig::default().predictor_config(StreamKind::MouthDetail).window, 12);
        assert_eq!("no_disentangle".parse::<Mode>().unwrap(), Mode::NoDisentangle);
    }

    #[test]
    fn contradictions_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.predictor.d_model = 128;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_config() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        match load_vq(&cfg, StreamKind::Head) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("vq_head.ckpt")),
            other => panic!("{:?}", other.err()),
        }
    }
}
