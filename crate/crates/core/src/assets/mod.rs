//! Mesh, rig and image containers plus their file formats, and the
//! procedural fixtures (mini rig, synthetic subjects) used by tests and
//! training.

mod img_io;
mod minirig;
mod obj;
mod synth;

pub use img_io::{load_image, load_pfm, save_image, save_pfm};
pub use minirig::make_mini_rig;
pub use obj::{load_mesh, save_mesh};
pub use synth::{
    load_subject, make_default_subject, make_synthetic_subject, save_subject, SyntheticSubject,
};

use crate::{Error, Result};
use std::collections::HashMap;

/// Semantic region of a head vertex. Deformation limits and evaluation are
/// region-aware, so every vertex carries exactly one label.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum PartLabel {
    Face,
    Hair,
    Neck,
    Eyeball,
    Eyelid,
    Other,
}

impl PartLabel {
    pub const ALL: [PartLabel; 6] = [
        PartLabel::Face,
        PartLabel::Hair,
        PartLabel::Neck,
        PartLabel::Eyeball,
        PartLabel::Eyelid,
        PartLabel::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartLabel::Face => "face",
            PartLabel::Hair => "hair",
            PartLabel::Neck => "neck",
            PartLabel::Eyeball => "eyeball",
            PartLabel::Eyelid => "eyelid",
            PartLabel::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }

    /// Stable index into per-part tables (also the one-hot channel).
    pub fn index(self) -> usize {
        self as usize
    }

    /// Per-axis budget for how far a vertex of this part may move from its
    /// template position. Reconstruction clamps accumulated deformation to
    /// this box, and the procedural rig keeps its identity variation
    /// inside it, so every generated subject stays reachable.
    pub fn deformation_limit(self) -> f64 {
        match self {
            PartLabel::Face => 0.003,
            PartLabel::Hair => 0.08,
            PartLabel::Neck => 0.02,
            PartLabel::Eyeball | PartLabel::Eyelid => 0.0,
            PartLabel::Other => 0.02,
        }
    }
}

/// Triangle mesh with a UV atlas and full rig attributes.
///
/// Layout conventions:
/// * `skin_weights` is `n_vertices x n_joints`, rows nonnegative and
///   summing to 1.
/// * `blendshapes` is `n_blendshapes x n_vertices x 3` vertex offsets; the
///   first `n_shape` entries are identity shapes, the rest expressions.
/// * `joint_regressor` is `n_joints x n_vertices`; joints are regressed as
///   `J = R * V`.
/// * `joint_parents` holds `-1` for the root; every other joint's parent
///   index is smaller than its own (topological order).
/// * UV is per vertex; seams are represented by duplicated vertices.
#[derive(Clone, Debug)]
pub struct RiggedMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub skin_weights: Vec<f64>,
    pub blendshapes: Vec<f64>,
    pub n_shape: usize,
    pub joint_regressor: Vec<f64>,
    pub joint_parents: Vec<i32>,
    pub part_labels: Vec<PartLabel>,
}

impl RiggedMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn n_blendshapes(&self) -> usize {
        if self.vertices.is_empty() {
            0
        } else {
            self.blendshapes.len() / (self.vertices.len() * 3)
        }
    }

    /// Expression blendshape count (`n_blendshapes - n_shape`).
    pub fn n_expr(&self) -> usize {
        self.n_blendshapes() - self.n_shape
    }

    pub fn weights_row(&self, v: usize) -> &[f64] {
        let j = self.n_joints();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    pub fn regressor_row(&self, j: usize) -> &[f64] {
        let n = self.n_vertices();
        &self.joint_regressor[j * n..(j + 1) * n]
    }

    /// Offsets of blendshape `k` as `n_vertices x 3`.
    pub fn blendshape(&self, k: usize) -> &[f64] {
        let n = self.n_vertices() * 3;
        &self.blendshapes[k * n..(k + 1) * n]
    }

    /// Undirected edges with incident face counts.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), u32> {
        let mut m = HashMap::with_capacity(self.faces.len() * 3 / 2);
        for f in &self.faces {
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *m.entry(key).or_insert(0u32) += 1;
            }
        }
        m
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edge_face_counts();
        if edges.is_empty() {
            return 0.0;
        }
        let sum: f64 = edges
            .keys()
            .map(|&(a, b)| dist3(self.vertices[a], self.vertices[b]))
            .sum();
        sum / edges.len() as f64
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut best = 0.0f64;
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                best = best.max(dist3(self.vertices[a], self.vertices[b]));
            }
        }
        best
    }

    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                triangle_area(
                    self.vertices[f[0]],
                    self.vertices[f[1]],
                    self.vertices[f[2]],
                )
            })
            .sum()
    }

    /// `V - E + F`.
    pub fn euler_characteristic(&self) -> i64 {
        let e = self.edge_face_counts().len() as i64;
        self.n_vertices() as i64 - e + self.faces.len() as i64
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vertices();
        let j = self.n_joints();
        if n == 0 || self.faces.is_empty() {
            return Err(Error::invariant("mesh has no vertices or no faces"));
        }
        if self.uv.len() != n || self.part_labels.len() != n {
            return Err(Error::invariant(format!(
                "attribute length mismatch: {} vertices, {} uv, {} labels",
                n,
                self.uv.len(),
                self.part_labels.len()
            )));
        }
        if j == 0 || self.skin_weights.len() != n * j || self.joint_regressor.len() != j * n {
            return Err(Error::invariant(format!(
                "rig table mismatch: {n} vertices, {j} joints, {} weights, {} regressor",
                self.skin_weights.len(),
                self.joint_regressor.len()
            )));
        }
        if self.blendshapes.len() % (n * 3) != 0 {
            return Err(Error::invariant("blendshape table is not a multiple of n*3"));
        }
        if self.n_shape > self.n_blendshapes() {
            return Err(Error::invariant(format!(
                "shape count {} exceeds blendshape count {}",
                self.n_shape,
                self.n_blendshapes()
            )));
        }
        for (vi, p) in self.vertices.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::invariant(format!("vertex {vi} is not finite")));
            }
        }
        for (vi, row) in self.skin_weights.chunks(j).enumerate() {
            let mut sum = 0.0;
            for &w in row {
                if !(0.0..=1.0 + 1e-9).contains(&w) {
                    return Err(Error::invariant(format!(
                        "skin weight out of range at vertex {vi}: {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invariant(format!(
                    "skin weights at vertex {vi} sum to {sum}"
                )));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::invariant(format!("face {fi} references vertex out of range")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::invariant(format!("face {fi} repeats a vertex")));
            }
        }
        for (&(a, b), &count) in &self.edge_face_counts() {
            if count > 2 {
                return Err(Error::invariant(format!(
                    "edge ({a},{b}) borders {count} faces (not edge-manifold)"
                )));
            }
        }
        for (vi, t) in self.uv.iter().enumerate() {
            if !(0.0..=1.0).contains(&t[0]) || !(0.0..=1.0).contains(&t[1]) {
                return Err(Error::invariant(format!(
                    "uv out of [0,1] at vertex {vi}: {t:?}"
                )));
            }
        }
        let roots = self.joint_parents.iter().filter(|&&p| p == -1).count();
        if roots != 1 {
            return Err(Error::invariant(format!("{roots} root joints (want 1)")));
        }
        for (ji, &p) in self.joint_parents.iter().enumerate() {
            if p != -1 && (p < 0 || p as usize >= ji) {
                return Err(Error::invariant(format!(
                    "joint {ji} has parent {p}; parents must precede children"
                )));
            }
        }
        Ok(())
    }
}

/// Row-major float image, values nominally in `[0,1]` (metric images such
/// as normals may exceed that range).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        &self.data[(y * self.w + x) * self.c..(y * self.w + x + 1) * self.c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        &mut self.data[(y * self.w + x) * self.c..(y * self.w + x + 1) * self.c]
    }

    /// Bilinear sample at continuous pixel coordinates (origin at the
    /// top-left corner, pixel centers at half-integers), clamped to the
    /// image border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Vec<f32> {
        let mut out = vec![0.0f32; self.c];
        for (off, idx, wgt) in bilinear_taps(x, y, self.w, self.h) {
            let _ = off;
            let px = &self.data[idx * self.c..(idx + 1) * self.c];
            for (o, &v) in out.iter_mut().zip(px) {
                *o += (wgt as f32) * v;
            }
        }
        out
    }
}

/// The four bilinear taps for continuous pixel coordinates `(x, y)` with
/// half-integer pixel centers, clamped at borders. Returns
/// `(corner, flat_pixel_index, weight)` tuples; weights sum to 1.
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> Vec<(usize, usize, f64)> {
    let fx = (x - 0.5).max(0.0).min(w as f64 - 1.0);
    let fy = (y - 0.5).max(0.0).min(h as f64 - 1.0);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    vec![
        (0, y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
        (1, y0 * w + x1, ax * (1.0 - ay)),
        (2, y1 * w + x0, (1.0 - ax) * ay),
        (3, y1 * w + x1, ax * ay),
    ]
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub(crate) fn triangle_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_roundtrip_names() {
        for l in PartLabel::ALL {
            assert_eq!(PartLabel::from_name(l.name()), Some(l));
        }
        assert_eq!(PartLabel::from_name("scalp"), None);
    }

    #[test]
    fn bilinear_taps_partition_unity() {
        for &(x, y) in &[(0.0, 0.0), (3.7, 2.2), (15.99, 0.01), (8.5, 8.5)] {
            let taps = bilinear_taps(x, y, 16, 16);
            let s: f64 = taps.iter().map(|t| t.2).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_center_hits_single_pixel() {
        let mut img = Image::new(4, 4, 1);
        img.pixel_mut(2, 1)[0] = 7.0;
        let v = img.sample_bilinear(1.5, 2.5);
        assert_eq!(v[0], 7.0);
    }
}
