//! Coefficient sequences: the per-frame facial parameter layout, the `.coeff`
//! binary clip format, stream splitting, validation and causal smoothing.
//!
//! Column layout of a frame (184 floats):
//!
//! | columns   | content                              |
//! |-----------|--------------------------------------|
//! | 0..3      | head pose, axis-angle radians        |
//! | 3..6      | jaw pose, axis-angle radians         |
//! | 6..56     | expression coefficients              |
//! | 56..184   | detail latent                        |
//!
//! The head-pose stream is columns 0..3, the mouth/detail stream is 3..184.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FPS: u32 = 30;
pub const COEFF_DIM: usize = 184;
pub const HEAD_DIM: usize = 3;
pub const JAW_DIM: usize = 3;
pub const EXPR_DIM: usize = 50;
pub const DETAIL_DIM: usize = 128;
pub const MOUTH_DETAIL_DIM: usize = JAW_DIM + EXPR_DIM + DETAIL_DIM;

pub const HEAD_COLS: Range<usize> = 0..3;
pub const JAW_COLS: Range<usize> = 3..6;
pub const EXPR_COLS: Range<usize> = 6..56;
pub const DETAIL_COLS: Range<usize> = 56..184;

/// Mouth block (jaw + expression) inside the mouth/detail stream.
pub const MOUTH_BLOCK: Range<usize> = 0..53;
/// Detail block inside the mouth/detail stream.
pub const DETAIL_BLOCK: Range<usize> = 53..181;

const MAGIC: &[u8; 4] = b"VTCF";
const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// A validated clip of facial coefficients at 30 fps.
///
/// Frames are held in `f64`; the on-disk format stores `f32`, so a
/// write/read round trip is bit-exact for values representable in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSequence {
    clip_id: String,
    frames: Array2<f64>,
}

impl CoefficientSequence {
    pub fn new(clip_id: impl Into<String>, frames: Array2<f64>) -> Result<Self> {
        let report = validate_frames(frames.view());
        if let Some(first) = report.violations.first() {
            return Err(Error::Validation(format!(
                "{first} ({} violation(s) total)",
                report.violations.len()
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            frames,
        })
    }

    pub fn zeros(clip_id: impl Into<String>, len: usize) -> Result<Self> {
        Self::new(clip_id, Array2::zeros((len, COEFF_DIM)))
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn fps(&self) -> u32 {
        FPS
    }

    pub fn with_clip_id(mut self, clip_id: impl Into<String>) -> Self {
        self.clip_id = clip_id.into();
        self
    }
}

/// Head pose stream, T×3.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPoseStream(Array2<f64>);

/// Jaw + expression + detail stream, T×181.
#[derive(Debug, Clone, PartialEq)]
pub struct MouthDetailStream(Array2<f64>);

fn check_stream(frames: &Array2<f64>, width: usize, rotation_cols: Range<usize>, what: &str) -> Result<()> {
    if frames.ncols() != width {
        return Err(Error::Shape(format!(
            "{what} stream must have {width} columns, got {}",
            frames.ncols()
        )));
    }
    for ((t, c), &v) in frames.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::Validation(format!("{what} stream: non-finite value at frame {t}, column {c}")));
        }
        if rotation_cols.contains(&c) && v.abs() > std::f64::consts::PI {
            return Err(Error::Validation(format!(
                "{what} stream: rotation value {v} outside [-pi, pi] at frame {t}, column {c}"
            )));
        }
    }
    Ok(())
}

impl HeadPoseStream {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        check_stream(&frames, HEAD_DIM, 0..HEAD_DIM, "head pose")?;
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

impl MouthDetailStream {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        check_stream(&frames, MOUTH_DETAIL_DIM, 0..JAW_DIM, "mouth/detail")?;
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// Jaw-opening magnitude per frame: Euclidean norm of the jaw columns.
    pub fn jaw_magnitude(&self) -> Vec<f64> {
        self.0
            .slice(s![.., 0..JAW_DIM])
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect()
    }
}

pub fn split_streams(seq: &CoefficientSequence) -> (HeadPoseStream, MouthDetailStream) {
    let head = seq.frames.slice(s![.., HEAD_COLS]).to_owned();
    let mouth = seq.frames.slice(s![.., HEAD_DIM..]).to_owned();
    // Sub-blocks of a valid sequence satisfy the stream invariants.
    (HeadPoseStream(head), MouthDetailStream(mouth))
}

pub fn concat_streams(
    clip_id: impl Into<String>,
    head: &HeadPoseStream,
    mouth: &MouthDetailStream,
) -> Result<CoefficientSequence> {
    if head.len() != mouth.len() {
        return Err(Error::Shape(format!(
            "stream lengths differ: head {} vs mouth/detail {}",
            head.len(),
            mouth.len()
        )));
    }
    let frames = concatenate(Axis(1), &[head.0.view(), mouth.0.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    CoefficientSequence::new(clip_id, frames)
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub frame: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.frame, self.column) {
            (Some(t), Some(c)) => write!(f, "frame {t}, column {c}: {}", self.message),
            (None, Some(c)) => write!(f, "column {c}: {}", self.message),
            (Some(t), None) => write!(f, "frame {t}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("\n")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks a raw frame matrix against every coefficient-sequence invariant.
pub fn validate_frames(frames: ArrayView2<'_, f64>) -> ValidationReport {
    let mut violations = Vec::new();
    if frames.ncols() != COEFF_DIM {
        violations.push(Violation {
            frame: None,
            column: None,
            message: format!("expected {COEFF_DIM} columns, found {}", frames.ncols()),
        });
    }
    if frames.nrows() == 0 {
        violations.push(Violation {
            frame: None,
            column: None,
            message: "sequence has no frames (T >= 1 required)".into(),
        });
    }
    let check_rotation = frames.ncols() == COEFF_DIM;
    for ((t, c), &v) in frames.indexed_iter() {
        if !v.is_finite() {
            violations.push(Violation {
                frame: Some(t),
                column: Some(c),
                message: format!("non-finite value {v}"),
            });
        } else if check_rotation && c < HEAD_DIM + JAW_DIM && v.abs() > std::f64::consts::PI {
            violations.push(Violation {
                frame: Some(t),
                column: Some(c),
                message: format!("rotation component {v} outside [-pi, pi]"),
            });
        }
    }
    ValidationReport { violations }
}

pub fn validate_sequence(seq: &CoefficientSequence) -> ValidationReport {
    validate_frames(seq.frames.view())
}

// ---------------------------------------------------------------------------
// Binary clip format

pub fn encode_coeff(seq: &CoefficientSequence) -> Vec<u8> {
    let (t, c) = seq.frames.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + t * c * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for &v in seq.frames.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_coeff(bytes: &[u8], clip_id: &str) -> Result<CoefficientSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{clip_id}: missing VTCF magic header")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{clip_id}: unsupported format version {version}")));
    }
    let t = word(8) as usize;
    let c = word(12) as usize;
    if c != COEFF_DIM {
        return Err(Error::Format(format!(
            "{clip_id}: header declares {c} columns, expected {COEFF_DIM}"
        )));
    }
    let expected = t * c * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Corruption(format!(
            "{clip_id}: payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let frames = Array2::from_shape_vec((t, c), values).map_err(|e| Error::Shape(e.to_string()))?;
    CoefficientSequence::new(clip_id, frames)
}

pub fn read_coeff_file(path: impl AsRef<Path>) -> Result<CoefficientSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_coeff(&bytes, &clip_id)
}

pub fn write_coeff_file(seq: &CoefficientSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Sequences built through `new` are valid, but guard against frames
    // that cannot round-trip through f32.
    if let Some((t, c)) = seq
        .frames
        .indexed_iter()
        .find(|(_, v)| !(**v as f32).is_finite())
        .map(|(ix, _)| ix)
    {
        return Err(Error::Validation(format!(
            "frame {t}, column {c}: value overflows f32 storage"
        )));
    }
    fs::write(path, encode_coeff(seq)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Smoothing

/// Causal weighted-average kernel; `weights[k]` multiplies frame
/// `t - window + 1 + k`, so the last weight applies to the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernel {
    weights: Vec<f64>,
}

impl SmoothingKernel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Parameter("smoothing window must be positive".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter("smoothing weights must be finite and non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("smoothing weights sum to {sum}, expected 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Parameter("smoothing window must be positive".into()));
        }
        Self::new(vec![1.0 / window as f64; window])
    }

    pub fn window(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Applies the kernel to an arbitrary T×C matrix. Indices before frame 0
    /// clamp to frame 0.
    pub fn apply(&self, frames: ArrayView2<'_, f64>) -> Array2<f64> {
        let (t_len, _) = frames.dim();
        let window = self.weights.len() as isize;
        let mut out = Array2::zeros(frames.raw_dim());
        for t in 0..t_len {
            let mut row = out.row_mut(t);
            for (k, &w) in self.weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = (t as isize - window + 1 + k as isize).max(0) as usize;
                row.scaled_add(w, &frames.row(src));
            }
        }
        out
    }
}

impl Default for SmoothingKernel {
    fn default() -> Self {
        Self::uniform(4).expect("uniform kernel")
    }
}

pub fn smooth_sequence(seq: &CoefficientSequence, kernel: &SmoothingKernel) -> Result<CoefficientSequence> {
    CoefficientSequence::new(seq.clip_id.clone(), kernel.apply(seq.frames.view()))
}

/// Per-column total variation Σ_t |x_{t+1} - x_t|.
pub fn total_variation(frames: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut tv = vec![0.0; frames.ncols()];
    for t in 1..frames.nrows() {
        for (c, acc) in tv.iter_mut().enumerate() {
            *acc += (frames[[t, c]] - frames[[t - 1, c]]).abs();
        }
    }
    tv
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parameter(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub coeff_path: String,
    pub wav_path: String,
    pub split: Split,
}

/// Dataset index. Paths in entries are relative to `root` (the directory
/// holding the manifest file).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipManifest {
    pub root: PathBuf,
    pub entries: Vec<ClipEntry>,
}

impl ClipManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ClipEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, entries };
        manifest.check_unique()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Data(format!("duplicate clip_id '{}' in manifest", e.clip_id)));
            }
        }
        Ok(())
    }

    /// Checks id uniqueness and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.check_unique()?;
        for e in &self.entries {
            for p in [self.coeff_path(e), self.wav_path(e)] {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn coeff_path(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join(&entry.coeff_path)
    }

    pub fn wav_path(&self, entry: &ClipEntry) -> PathBuf {
        self.root.join(&entry.wav_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_seq(rng: &mut ChaCha8Rng, t: usize) -> CoefficientSequence {
        let frames = Array2::from_shape_fn((t, COEFF_DIM), |(_, c)| {
            let v: f32 = if c < 6 { rng.gen_range(-3.0..3.0) } else { rng.gen_range(-10.0..10.0) };
            v as f64
        });
        CoefficientSequence::new("r", frames).unwrap()
    }

    #[test]
    fn zero_payload_reads_back() {
        let mut bytes = b"VTCF".to_vec();
        for w in [1u32, 2, 184] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 368 * 4));
        let seq = decode_coeff(&bytes, "z").unwrap();
        assert_eq!(seq.len(), 2);
        assert!(seq.frames().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_column_count_is_format_error() {
        let mut bytes = b"VTCF".to_vec();
        for w in [1u32, 1, 180] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 180 * 4));
        assert!(matches!(decode_coeff(&bytes, "x"), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let seq = CoefficientSequence::zeros("a", 3).unwrap();
        let mut bytes = encode_coeff(&seq);
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_coeff(&bytes, "a"), Err(Error::Corruption(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_coeff(&bytes, "a"), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_payload_names_frame_and_column() {
        let seq = CoefficientSequence::zeros("a", 3).unwrap();
        let mut bytes = encode_coeff(&seq);
        let off = HEADER_LEN + (2 * COEFF_DIM + 17) * 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_coeff(&bytes, "a").unwrap_err().to_string();
        assert!(err.contains("frame 2, column 17"), "{err}");
    }

    #[test]
    fn one_frame_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.coeff");
        write_coeff_file(&CoefficientSequence::zeros("one", 1).unwrap(), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, HEADER_LEN + 184 * 4);
    }

    #[test]
    fn nan_sequence_is_rejected() {
        let mut frames = Array2::zeros((2, COEFF_DIM));
        frames[[1, 40]] = f64::NAN;
        assert!(matches!(CoefficientSequence::new("n", frames), Err(Error::Validation(_))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let seq = random_seq(&mut rng, 1 + i % 40);
            let p = dir.path().join("r.coeff");
            write_coeff_file(&seq, &p).unwrap();
            let back = read_coeff_file(&p).unwrap();
            assert_eq!(back.frames().dim(), seq.frames().dim());
            for (a, b) in back.frames().iter().zip(seq.frames().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn split_takes_expected_columns() {
        let frame: Vec<f64> = (0..COEFF_DIM).map(|c| if c < 6 { (c + 1) as f64 * 0.5 } else { c as f64 }).collect();
        let seq = CoefficientSequence::new("s", Array2::from_shape_vec((1, COEFF_DIM), frame.clone()).unwrap()).unwrap();
        let (head, mouth) = split_streams(&seq);
        assert_eq!(head.frames().row(0).to_vec(), frame[0..3].to_vec());
        assert_eq!(mouth.frames().row(0).to_vec(), frame[3..].to_vec());
        let zero = CoefficientSequence::zeros("z", 4).unwrap();
        let (h, m) = split_streams(&zero);
        assert!(h.frames().iter().chain(m.frames().iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn split_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = rng.gen_range(1..30);
            let seq = random_seq(&mut rng, t);
            let (h, m) = split_streams(&seq);
            assert_eq!(concat_streams("r", &h, &m).unwrap(), seq);
        }
    }

    #[test]
    fn concat_rejects_length_mismatch() {
        let h = HeadPoseStream::new(Array2::zeros((3, 3))).unwrap();
        let m = MouthDetailStream::new(Array2::zeros((4, 181))).unwrap();
        assert!(matches!(concat_streams("x", &h, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn smoothing_examples() {
        let mut frames = Array2::zeros((4, COEFF_DIM));
        frames.row_mut(3).fill(2.0);
        frames.row_mut(3).slice_mut(s![6..]).fill(4.0);
        let seq = CoefficientSequence::new("s", frames).unwrap();
        let out = smooth_sequence(&seq, &SmoothingKernel::default()).unwrap();
        assert_eq!(out.frames()[[3, 10]], 1.0);
        assert_eq!(out.frames()[[3, 0]], 0.5);
        assert_eq!(out.frames()[[2, 10]], 0.0);

        let konst = CoefficientSequence::new("c", Array2::from_elem((10, COEFF_DIM), 0.3)).unwrap();
        let out = smooth_sequence(&konst, &SmoothingKernel::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        for v in out.frames() {
            assert!((v - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn unnormalized_weights_rejected() {
        assert!(matches!(SmoothingKernel::new(vec![0.5, 0.6]), Err(Error::Parameter(_))));
        assert!(matches!(SmoothingKernel::uniform(0), Err(Error::Parameter(_))));
    }

    #[test]
    fn window_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 20);
        let out = smooth_sequence(&seq, &SmoothingKernel::uniform(1).unwrap()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn validation_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(validate_sequence(&random_seq(&mut rng, 10)).is_valid());

        let mut frames = Array2::zeros((3, COEFF_DIM));
        frames[[1, 2]] = 10.0;
        let report = validate_frames(frames.view());
        assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        assert_eq!((v.frame, v.column), (Some(1), Some(2)));
        assert!(v.message.contains("[-pi, pi]"));

        let report = validate_frames(Array2::<f64>::zeros((3, 181)).view());
        assert!(report.violations.iter().any(|v| v.message.contains("184 columns")));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClipManifest {
            root: dir.path().to_path_buf(),
            entries: vec![ClipEntry {
                clip_id: "a".into(),
                coeff_path: "a.coeff".into(),
                wav_path: "a.wav".into(),
                split: Split::Train,
            }],
        };
        let p = dir.path().join("manifest.jsonl");
        m.save(&p).unwrap();
        let back = ClipManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert!(matches!(back.validate(), Err(Error::Io { .. })));
    }
}
