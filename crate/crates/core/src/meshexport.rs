//! Toy blendshape head for visual inspection of coefficient streams.
//!
//! A template ellipsoid is deformed by a linear expression basis, its lower
//! front region is rotated about a jaw pivot, and the whole mesh is rotated
//! by the head pose. Frames are written as Wavefront OBJ files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use ndarray::{s, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coeffstream::{CoefficientSequence, EXPR_DIM};
use crate::error::{Error, Result};

/// Template shipped with the crate.
pub const TEMPLATE_OBJ: &str = include_str!("../assets/template.obj");

const RINGS: usize = 20;
const SEGMENTS: usize = 24;
const RADII: [f64; 3] = [1.0, 1.3, 1.1];
const BASIS_SEED: u64 = 0x6d65_7368;

pub type Face = [usize; 3];

/// Parses `v` and triangular `f` records (1-based indices; `v/vt/vn` forms
/// keep the vertex index). Other records are ignored.
pub fn parse_obj(text: &str) -> Result<(Array2<f64>, Vec<Face>)> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", no + 1));
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>().map_err(|_| bad("bad vertex coordinate")))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad("vertex needs three coordinates"));
                }
                verts.extend(xyz);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|i| i.parse::<usize>().ok())
                            .filter(|i| *i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad("bad face index"))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(bad("only triangles are supported"));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    let n = verts.len() / 3;
    if faces.iter().flatten().any(|&i| i >= n) {
        return Err(Error::Format("face references a missing vertex".into()));
    }
    let v = Array2::from_shape_vec((n, 3), verts).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((v, faces))
}

/// Writes `v` and `f` records only.
pub fn obj_text(vertices: &Array2<f64>, faces: &[Face]) -> String {
    let mut out = String::with_capacity(vertices.nrows() * 40 + faces.len() * 20);
    for r in vertices.rows() {
        let _ = writeln!(out, "v {} {} {}", r[0], r[1], r[2]);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// UV ellipsoid: two poles plus `RINGS - 1` rings of `SEGMENTS` vertices.
/// +y is up and +z faces forward.
pub fn ellipsoid_template() -> (Array2<f64>, Vec<Face>) {
    let n = 2 + (RINGS - 1) * SEGMENTS;
    let mut v = Array2::zeros((n, 3));
    v.row_mut(0).assign(&ndarray::arr1(&[0.0, RADII[1], 0.0]));
    for r in 1..RINGS {
        let theta = std::f64::consts::PI * r as f64 / RINGS as f64;
        for sgm in 0..SEGMENTS {
            let phi = 2.0 * std::f64::consts::PI * sgm as f64 / SEGMENTS as f64;
            let i = 1 + (r - 1) * SEGMENTS + sgm;
            v[[i, 0]] = RADII[0] * theta.sin() * phi.sin();
            v[[i, 1]] = RADII[1] * theta.cos();
            v[[i, 2]] = RADII[2] * theta.sin() * phi.cos();
        }
    }
    v.row_mut(n - 1).assign(&ndarray::arr1(&[0.0, -RADII[1], 0.0]));
    v.mapv_inplace(|x| (x * 1e6).round() / 1e6);
    let ring = |r: usize, s: usize| 1 + (r - 1) * SEGMENTS + s % SEGMENTS;
    let mut faces = Vec::new();
    for s in 0..SEGMENTS {
        faces.push([0, ring(1, s + 1), ring(1, s)]);
    }
    for r in 1..RINGS - 1 {
        for s in 0..SEGMENTS {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    for s in 0..SEGMENTS {
        faces.push([n - 1, ring(RINGS - 1, s), ring(RINGS - 1, s + 1)]);
    }
    (v, faces)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel {
    pub template: Array2<f64>,
    /// `N_v × 3 × EXPR_DIM`.
    pub basis: Array3<f64>,
    pub jaw_mask: Vec<bool>,
    pub jaw_pivot: [f64; 3],
    pub faces: Vec<Face>,
}

impl BlendshapeModel {
    pub fn new(template: Array2<f64>, basis: Array3<f64>, jaw_mask: Vec<bool>, jaw_pivot: [f64; 3], faces: Vec<Face>) -> Result<Self> {
        let n = template.nrows();
        if n < 4 || template.ncols() != 3 {
            return Err(Error::Shape(format!("template must be N×3 with N >= 4, got {:?}", template.dim())));
        }
        if basis.dim() != (n, 3, EXPR_DIM) || jaw_mask.len() != n {
            return Err(Error::Shape("basis or jaw mask does not match the template".into()));
        }
        if !jaw_mask.iter().any(|m| *m) {
            return Err(Error::Validation("jaw mask is empty".into()));
        }
        if basis.iter().chain(template.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("template or basis has non-finite values".into()));
        }
        Ok(Self {
            template,
            basis,
            jaw_mask,
            jaw_pivot,
            faces,
        })
    }

    /// Template from the bundled asset; a seeded basis of smooth bumps along
    /// the surface normal; the jaw region is the lower front of the head.
    pub fn toy() -> Result<Self> {
        let (template, faces) = parse_obj(TEMPLATE_OBJ)?;
        let normals = vertex_normals(&template, &faces);
        let n = template.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(BASIS_SEED);
        let front: Vec<usize> = (0..n).filter(|&i| template[[i, 2]] > 0.3).collect();
        let mut basis = Array3::zeros((n, 3, EXPR_DIM));
        for k in 0..EXPR_DIM {
            let centre = template.row(front[rng.gen_range(0..front.len())]).to_owned();
            let width = rng.gen_range(0.2..0.5);
            let amp = rng.gen_range(0.01..0.04) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for i in 0..n {
                let d2 = (&template.row(i) - &centre).mapv(|x| x * x).sum();
                let w = amp * (-d2 / (2.0 * width * width)).exp();
                for a in 0..3 {
                    basis[[i, a, k]] = w * normals[[i, a]];
                }
            }
        }
        let jaw_mask = (0..n)
            .map(|i| template[[i, 1]] < -0.35 * RADII[1] && template[[i, 2]] > 0.0)
            .collect();
        Self::new(template, basis, jaw_mask, [0.0, -0.2, -0.3], faces)
    }

    pub fn vertex_count(&self) -> usize {
        self.template.nrows()
    }

    /// Deforms the template by one 56-value frame `[head 3 | jaw 3 | expr 50]`.
    pub fn apply_frame(&self, frame: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        if frame.len() != 6 + EXPR_DIM {
            return Err(Error::Shape(format!("frame needs {} values, got {}", 6 + EXPR_DIM, frame.len())));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("frame has non-finite values".into()));
        }
        let head = Rotation3::from_scaled_axis(Vector3::new(frame[0], frame[1], frame[2]));
        let jaw_axis = Vector3::new(frame[3], frame[4], frame[5]);
        let jaw = Rotation3::from_scaled_axis(jaw_axis);
        let jaw_open = jaw_axis.norm() != 0.0;
        let expr = frame.slice(s![6..]);
        let pivot = Vector3::from(self.jaw_pivot);
        let mut out = Array2::zeros(self.template.raw_dim());
        for i in 0..self.vertex_count() {
            let offset = self.basis.slice(s![i, .., ..]).dot(&expr);
            let mut p = Vector3::new(
                self.template[[i, 0]] + offset[0],
                self.template[[i, 1]] + offset[1],
                self.template[[i, 2]] + offset[2],
            );
            if jaw_open && self.jaw_mask[i] {
                p = jaw * (p - pivot) + pivot;
            }
            let p = head * p;
            out.row_mut(i).assign(&ndarray::arr1(&[p.x, p.y, p.z]));
        }
        Ok(out)
    }

    /// Non-physical debug view: pushes every vertex out along its template
    /// normal by `gain · magnitude`.
    pub fn displace_along_normals(&self, vertices: &mut Array2<f64>, magnitude: f64, gain: f64) {
        let normals = vertex_normals(&self.template, &self.faces);
        *vertices += &(normals * (gain * magnitude));
    }

    /// Meshes for every frame of a full coefficient sequence. When
    /// `detail_debug_gain` is set, the per-frame norm of the detail block is
    /// shown as a normal displacement.
    pub fn sequence_meshes(&self, seq: &CoefficientSequence, detail_debug_gain: Option<f64>) -> Result<Vec<Array2<f64>>> {
        seq.frames()
            .rows()
            .into_iter()
            .map(|row| {
                let mut v = self.apply_frame(row.slice(s![..6 + EXPR_DIM]))?;
                if let Some(gain) = detail_debug_gain {
                    let detail = row.slice(s![6 + EXPR_DIM..]);
                    self.displace_along_normals(&mut v, detail.dot(&detail).sqrt(), gain);
                }
                Ok(v)
            })
            .collect()
    }
}

/// Area-weighted unit vertex normals.
pub fn vertex_normals(vertices: &Array2<f64>, faces: &[Face]) -> Array2<f64> {
    let mut normals = Array2::<f64>::zeros(vertices.raw_dim());
    let at = |i: usize| Vector3::new(vertices[[i, 0]], vertices[[i, 1]], vertices[[i, 2]]);
    for f in faces {
        let n = (at(f[1]) - at(f[0])).cross(&(at(f[2]) - at(f[0])));
        for &i in f {
            for a in 0..3 {
                normals[[i, a]] += n[a];
            }
        }
    }
    for mut r in normals.rows_mut() {
        let len = r.dot(&r).sqrt();
        if len > 0.0 {
            r /= len;
        }
    }
    normals
}

/// Writes one OBJ per frame as `frame_%06d.obj` under `out_dir`.
pub fn export_obj(frames: &[Array2<f64>], faces: &[Face], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out_dir.as_ref();
    if let Some(first) = frames.first() {
        if frames.iter().any(|f| f.dim() != first.dim()) {
            return Err(Error::Shape("frames have inconsistent vertex counts".into()));
        }
        if faces.iter().flatten().any(|&i| i >= first.nrows()) {
            return Err(Error::Shape("face references a missing vertex".into()));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let path = out.join(format!("frame_{t:06}.obj"));
            fs::write(&path, obj_text(v, faces)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;

    /// Rodrigues' formula, written out independently of nalgebra.
    fn rodrigues(w: [f64; 3], p: [f64; 3]) -> [f64; 3] {
        let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if theta == 0.0 {
            return p;
        }
        let k = [w[0] / theta, w[1] / theta, w[2] / theta];
        let (c, s) = (theta.cos(), theta.sin());
        let kxp = [k[1] * p[2] - k[2] * p[1], k[2] * p[0] - k[0] * p[2], k[0] * p[1] - k[1] * p[0]];
        let kdp = k[0] * p[0] + k[1] * p[1] + k[2] * p[2];
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = p[a] * c + kxp[a] * s + k[a] * kdp * (1.0 - c);
        }
        out
    }

    fn frame(head: [f64; 3], jaw: [f64; 3], expr: &[f64]) -> Array1<f64> {
        let mut f = Array1::zeros(56);
        for a in 0..3 {
            f[a] = head[a];
            f[3 + a] = jaw[a];
        }
        for (i, e) in expr.iter().enumerate() {
            f[6 + i] = *e;
        }
        f
    }

    #[test]
    fn asset_matches_generator() {
        let (v, f) = parse_obj(TEMPLATE_OBJ).unwrap();
        let (gv, gf) = ellipsoid_template();
        assert_eq!(f, gf);
        assert_eq!(v, gv);
        assert!(v.nrows() >= 400 && v.nrows() <= 600);
    }

    #[test]
    #[ignore = "writes the bundled template asset"]
    fn regenerate_template_asset() {
        let (v, f) = ellipsoid_template();
        fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/assets/template.obj"), obj_text(&v, &f)).unwrap();
    }

    #[test]
    fn zero_frame_is_template() {
        let m = BlendshapeModel::toy().unwrap();
        assert_eq!(m.apply_frame(Array1::zeros(56).view()).unwrap(), m.template);
    }

    #[test]
    fn half_turn_about_z_negates_xy() {
        let m = BlendshapeModel::toy().unwrap();
        let v = m.apply_frame(frame([0.0, 0.0, std::f64::consts::PI], [0.0; 3], &[]).view()).unwrap();
        for (a, b) in v.rows().into_iter().zip(m.template.rows()) {
            assert!((a[0] + b[0]).abs() < 1e-12 && (a[1] + b[1]).abs() < 1e-12 && (a[2] - b[2]).abs() < 1e-12);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_independent_script() {
        let m = BlendshapeModel::toy().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expr: Vec<f64> = (0..EXPR_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = [0.3, -0.2, 0.1];
        let jaw = [0.25, 0.02, -0.01];
        let v = m.apply_frame(frame(head, jaw, &expr).view()).unwrap();
        for i in 0..m.vertex_count() {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = m.template[[i, a]];
                for k in 0..EXPR_DIM {
                    p[a] += m.basis[[i, a, k]] * expr[k];
                }
            }
            if m.jaw_mask[i] {
                let rel = [p[0] - m.jaw_pivot[0], p[1] - m.jaw_pivot[1], p[2] - m.jaw_pivot[2]];
                let r = rodrigues(jaw, rel);
                p = [r[0] + m.jaw_pivot[0], r[1] + m.jaw_pivot[1], r[2] + m.jaw_pivot[2]];
            }
            let q = rodrigues(head, p);
            for a in 0..3 {
                assert!((v[[i, a]] - q[a]).abs() < 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn head_rotation_is_rigid_and_expression_linear(
            hx in -3.0f64..3.0, hy in -3.0f64..3.0, hz in -3.0f64..3.0, c in -2.0f64..2.0, seed in any::<u64>()
        ) {
            let m = BlendshapeModel::toy().unwrap();
            let v = m.apply_frame(frame([hx, hy, hz], [0.0; 3], &[]).view()).unwrap();
            for (i, j) in [(0usize, 5usize), (17, 300), (42, 457), (100, 101)] {
                let d = |x: &Array2<f64>| (&x.row(i) - &x.row(j)).mapv(|t| t * t).sum().sqrt();
                prop_assert!((d(&v) - d(&m.template)).abs() < 1e-6);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e1: Vec<f64> = (0..EXPR_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e2: Vec<f64> = (0..EXPR_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + c * b).collect();
            let off = |e: &[f64]| m.apply_frame(frame([0.0; 3], [0.0; 3], e).view()).unwrap() - &m.template;
            let lhs = off(&mix);
            let rhs = off(&e1) + off(&e2) * c;
            prop_assert!((lhs - rhs).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let m = BlendshapeModel::toy().unwrap();
        let mut f = Array1::zeros(56);
        f[10] = f64::NAN;
        assert!(matches!(m.apply_frame(f.view()), Err(Error::Validation(_))));
        assert!(matches!(m.apply_frame(Array1::zeros(5).view()), Err(Error::Shape(_))));
    }

    /// Separate reader so the round trip does not reuse the writer's parser.
    fn read_vertices(text: &str) -> Vec<[f64; 3]> {
        text.lines()
            .filter_map(|l| l.strip_prefix("v "))
            .map(|l| {
                let p: Vec<f64> = l.split(' ').map(|x| x.parse().unwrap()).collect();
                [p[0], p[1], p[2]]
            })
            .collect()
    }

    #[test]
    fn export_layout_and_roundtrip() {
        let v = Array2::from_shape_vec(
            (4, 3),
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.123456789, 0.5, 1.0 / 3.0],
        )
        .unwrap();
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let dir = tempfile::tempdir().unwrap();
        let paths = export_obj(std::slice::from_ref(&v), &faces, dir.path()).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].ends_with("frame_000000.obj"));
        let text = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 2);
        for (row, p) in v.rows().into_iter().zip(read_vertices(&text)) {
            for a in 0..3 {
                assert!((row[a] - p[a]).abs() < 1e-12);
            }
        }

        let m = BlendshapeModel::toy().unwrap();
        let seq = CoefficientSequence::zeros("z", 3).unwrap();
        let meshes = m.sequence_meshes(&seq, Some(0.1)).unwrap();
        let paths = export_obj(&meshes, &m.faces, dir.path().join("seq")).unwrap();
        assert_eq!(paths.len(), 3);
    }
}
