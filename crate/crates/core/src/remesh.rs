//! Topology correction for deforming meshes: long-edge subdivision,
//! winding repair, removal of degenerate/duplicate faces, rig attribute
//! transfer onto the corrected vertex set, and joint-regressor refitting so
//! the skeleton stays put.
//!
//! Every stage is deterministic, and [`topology_correct`] is a bit-exact
//! no-op on meshes that already satisfy its postconditions, so applying it
//! twice equals applying it once.

use crate::assets::{dist3, triangle_area, PartLabel, RiggedMesh};
use crate::headmodel::regress_joints;
use crate::{Error, Result};
use std::collections::{BTreeMap, HashMap};

/// Faces below this area are treated as degenerate and removed.
pub const MIN_FACE_AREA: f64 = 1e-10;

/// Subdivision never touches faces whose children could fall below
/// [`MIN_FACE_AREA`] (a midpoint split divides area by at most 4).
const SPLITTABLE_AREA: f64 = 4.0 * MIN_FACE_AREA;

/// Maximum subdivision sweeps before giving up on bounding edge lengths.
const MAX_SPLIT_ROUNDS: usize = 32;

/// Sparse linear map from the vertices of a source mesh to the vertices of
/// its corrected version: row `v` lists `(source_vertex, weight)` pairs
/// with weights summing to 1. Besides rebuilding attributes, the pipeline
/// uses it to carry per-vertex recurrent state across corrections.
#[derive(Clone, Debug)]
pub struct CorrectionMap {
    pub n_source: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl CorrectionMap {
    pub fn identity(n: usize) -> Self {
        CorrectionMap {
            n_source: n,
            rows: (0..n).map(|v| vec![(v, 1.0)]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rows.len() == self.n_source
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(v, row)| row.len() == 1 && row[0] == (v, 1.0))
    }

    /// `second(first(x))`: `first` maps source -> mid, `second` maps
    /// mid -> target; the result maps source -> target.
    pub fn compose(first: &Self, second: &Self) -> Self {
        let rows = second
            .rows
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &(mid, w) in row {
                    for &(src, u) in &first.rows[mid] {
                        *acc.entry(src).or_insert(0.0) += w * u;
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        CorrectionMap {
            n_source: first.n_source,
            rows,
        }
    }

    /// Applies the map to per-vertex 3-vectors.
    pub fn mix_points(&self, src: &[[f64; 3]]) -> Vec<[f64; 3]> {
        self.rows
            .iter()
            .map(|row| {
                let mut p = [0.0; 3];
                for &(v, w) in row {
                    for ax in 0..3 {
                        p[ax] += w * src[v][ax];
                    }
                }
                p
            })
            .collect()
    }

    /// Applies the map to flat per-vertex rows of width `stride`.
    pub fn mix_rows(&self, src: &[f64], stride: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows.len() * stride];
        for (t, row) in self.rows.iter().enumerate() {
            for &(v, w) in row {
                for c in 0..stride {
                    out[t * stride + c] += w * src[v * stride + c];
                }
            }
        }
        out
    }
}

/// What a correction pass changed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorrectionStats {
    pub edges_split: usize,
    pub faces_flipped: usize,
    pub faces_removed: usize,
    pub vertices_removed: usize,
}

impl CorrectionStats {
    pub fn is_noop(&self) -> bool {
        *self == CorrectionStats::default()
    }
}

/// A corrected mesh together with the vertex map from the input mesh and a
/// summary of the edits.
#[derive(Clone, Debug)]
pub struct Corrected {
    pub mesh: RiggedMesh,
    pub map: CorrectionMap,
    pub stats: CorrectionStats,
}

/// Interpolates all per-vertex rig attributes of `source` through `map`:
/// UV and blendshape offsets are mixed linearly, skin weights are mixed
/// and renormalized, and each vertex takes the part label of its
/// largest-weight source (ties break to the smallest source index).
pub fn transfer_attributes(
    source: &RiggedMesh,
    map: &CorrectionMap,
) -> Result<(Vec<[f64; 2]>, Vec<f64>, Vec<f64>, Vec<PartLabel>)> {
    if map.n_source != source.n_vertices() {
        return Err(Error::invariant(format!(
            "correction map expects {} source vertices, mesh has {}",
            map.n_source,
            source.n_vertices()
        )));
    }
    let n_new = map.rows.len();
    let nj = source.n_joints();
    let kb = source.n_blendshapes();

    let mut uv = Vec::with_capacity(n_new);
    let mut labels = Vec::with_capacity(n_new);
    for row in &map.rows {
        if row.is_empty() {
            return Err(Error::invariant("correction map has an empty row"));
        }
        let mut t = [0.0f64; 2];
        let (mut best_v, mut best_w) = (row[0].0, f64::NEG_INFINITY);
        for &(v, w) in row {
            t[0] += w * source.uv[v][0];
            t[1] += w * source.uv[v][1];
            if w > best_w {
                best_w = w;
                best_v = v;
            }
        }
        uv.push([t[0].clamp(0.0, 1.0), t[1].clamp(0.0, 1.0)]);
        labels.push(source.part_labels[best_v]);
    }

    let mut weights = map.mix_rows(&source.skin_weights, nj);
    for row in weights.chunks_mut(nj) {
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invariant("transferred skin weights sum to zero"));
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    }

    let mut blendshapes = Vec::with_capacity(kb * n_new * 3);
    for k in 0..kb {
        blendshapes.extend(map.mix_rows(source.blendshape(k), 3));
    }

    Ok((uv, weights, blendshapes, labels))
}

fn face_key(f: &[usize; 3]) -> [usize; 3] {
    let mut k = *f;
    k.sort_unstable();
    k
}

/// Drops faces that repeat a vertex, duplicate another face (same vertex
/// set, any winding; the first occurrence stays), or span less than
/// [`MIN_FACE_AREA`], then prunes vertices no remaining face references.
/// The joint regressor keeps the surviving columns; see
/// [`topology_correct`] for the refit that restores joint positions.
pub fn remove_invalid_faces(mesh: &RiggedMesh) -> Result<(RiggedMesh, CorrectionMap, CorrectionStats)> {
    let mut seen: HashMap<[usize; 3], ()> = HashMap::with_capacity(mesh.faces.len());
    let mut kept_faces = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            continue;
        }
        let area = triangle_area(
            mesh.vertices[f[0]],
            mesh.vertices[f[1]],
            mesh.vertices[f[2]],
        );
        if area < MIN_FACE_AREA {
            continue;
        }
        if seen.insert(face_key(f), ()).is_some() {
            continue;
        }
        kept_faces.push(*f);
    }
    if kept_faces.is_empty() {
        return Err(Error::invariant("face cleanup removed every face"));
    }
    let faces_removed = mesh.faces.len() - kept_faces.len();

    let n = mesh.n_vertices();
    let mut referenced = vec![false; n];
    for f in &kept_faces {
        for &v in f {
            referenced[v] = true;
        }
    }
    let mut remap = vec![usize::MAX; n];
    let mut kept_verts = Vec::new();
    for v in 0..n {
        if referenced[v] {
            remap[v] = kept_verts.len();
            kept_verts.push(v);
        }
    }
    let vertices_removed = n - kept_verts.len();
    for f in kept_faces.iter_mut() {
        for v in f.iter_mut() {
            *v = remap[*v];
        }
    }

    let map = CorrectionMap {
        n_source: n,
        rows: kept_verts.iter().map(|&v| vec![(v, 1.0)]).collect(),
    };
    let nj = mesh.n_joints();
    let mut out = mesh.clone();
    out.vertices = kept_verts.iter().map(|&v| mesh.vertices[v]).collect();
    out.faces = kept_faces;
    out.uv = kept_verts.iter().map(|&v| mesh.uv[v]).collect();
    out.part_labels = kept_verts.iter().map(|&v| mesh.part_labels[v]).collect();
    out.skin_weights = kept_verts
        .iter()
        .flat_map(|&v| mesh.weights_row(v).iter().copied().collect::<Vec<_>>())
        .collect();
    let mut blendshapes = Vec::with_capacity(mesh.n_blendshapes() * kept_verts.len() * 3);
    for k in 0..mesh.n_blendshapes() {
        let b = mesh.blendshape(k);
        for &v in &kept_verts {
            blendshapes.extend_from_slice(&b[v * 3..v * 3 + 3]);
        }
    }
    out.blendshapes = blendshapes;
    let mut regressor = vec![0.0; nj * kept_verts.len()];
    for j in 0..nj {
        let row = mesh.regressor_row(j);
        for (t, &v) in kept_verts.iter().enumerate() {
            regressor[j * kept_verts.len() + t] = row[v];
        }
    }
    out.joint_regressor = regressor;

    let stats = CorrectionStats {
        faces_removed,
        vertices_removed,
        ..CorrectionStats::default()
    };
    Ok((out, map, stats))
}

fn one_split(f: [usize; 3], m: usize) -> [[usize; 3]; 2] {
    let [a, b, c] = f;
    [[a, m, c], [m, b, c]]
}

fn two_split(f: [usize; 3], mab: usize, mbc: usize) -> [[usize; 3]; 3] {
    let [a, b, c] = f;
    [[mab, b, mbc], [a, mab, mbc], [a, mbc, c]]
}

fn three_split(f: [usize; 3], mab: usize, mbc: usize, mca: usize) -> [[usize; 3]; 4] {
    let [a, b, c] = f;
    [[a, mab, mca], [mab, b, mbc], [mca, mbc, c], [mab, mbc, mca]]
}

/// Repeatedly bisects every edge longer than `max_len` at its midpoint
/// (shared between the incident faces) until all edges fit, interpolating
/// all attributes for the new vertices. Edges on near-degenerate faces
/// (area under four times [`MIN_FACE_AREA`]) are left alone so subdivision
/// never creates faces that cleanup would delete. Returns the new mesh,
/// the vertex map, and the number of edges split. The joint regressor is
/// extended with zero columns, which leaves regressed joints unchanged.
pub fn split_long_edges(
    mesh: &RiggedMesh,
    max_len: f64,
) -> Result<(RiggedMesh, CorrectionMap, usize)> {
    if !(max_len > 0.0) {
        return Err(Error::invariant(format!(
            "edge length bound must be positive, got {max_len}"
        )));
    }
    let n0 = mesh.n_vertices();
    let mut positions = mesh.vertices.clone();
    let mut faces = mesh.faces.clone();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..n0).map(|v| vec![(v, 1.0)]).collect();
    let mut total_split = 0usize;

    let splittable_edges = |positions: &[[f64; 3]], faces: &[[usize; 3]]| {
        let mut edge_ok: HashMap<(usize, usize), bool> = HashMap::new();
        for f in faces {
            let area = triangle_area(positions[f[0]], positions[f[1]], positions[f[2]]);
            let ok = area >= SPLITTABLE_AREA;
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                edge_ok
                    .entry(key)
                    .and_modify(|v| *v = *v && ok)
                    .or_insert(ok);
            }
        }
        let mut long: Vec<(usize, usize)> = edge_ok
            .into_iter()
            .filter(|&((a, b), ok)| ok && dist3(positions[a], positions[b]) > max_len)
            .map(|(k, _)| k)
            .collect();
        long.sort_unstable();
        long
    };

    for _ in 0..MAX_SPLIT_ROUNDS {
        let long = splittable_edges(&positions, &faces);
        if long.is_empty() {
            break;
        }
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::with_capacity(long.len());
        for &(a, b) in &long {
            let m = positions.len();
            positions.push([
                0.5 * (positions[a][0] + positions[b][0]),
                0.5 * (positions[a][1] + positions[b][1]),
                0.5 * (positions[a][2] + positions[b][2]),
            ]);
            let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
            for &(src, w) in &rows[a] {
                *acc.entry(src).or_insert(0.0) += 0.5 * w;
            }
            for &(src, w) in &rows[b] {
                *acc.entry(src).or_insert(0.0) += 0.5 * w;
            }
            rows.push(acc.into_iter().collect());
            midpoint.insert((a, b), m);
        }
        total_split += long.len();

        let mid_of = |a: usize, b: usize, midpoint: &HashMap<(usize, usize), usize>| {
            midpoint.get(&(a.min(b), a.max(b))).copied()
        };
        let mut next_faces = Vec::with_capacity(faces.len() * 2);
        for f in &faces {
            let [a, b, c] = *f;
            let mids = (
                mid_of(a, b, &midpoint),
                mid_of(b, c, &midpoint),
                mid_of(c, a, &midpoint),
            );
            match mids {
                (None, None, None) => next_faces.push(*f),
                (Some(m), None, None) => next_faces.extend(one_split([a, b, c], m)),
                (None, Some(m), None) => next_faces.extend(one_split([b, c, a], m)),
                (None, None, Some(m)) => next_faces.extend(one_split([c, a, b], m)),
                (Some(m1), Some(m2), None) => next_faces.extend(two_split([a, b, c], m1, m2)),
                (None, Some(m1), Some(m2)) => next_faces.extend(two_split([b, c, a], m1, m2)),
                (Some(m2), None, Some(m1)) => next_faces.extend(two_split([c, a, b], m1, m2)),
                (Some(m1), Some(m2), Some(m3)) => {
                    next_faces.extend(three_split([a, b, c], m1, m2, m3))
                }
            }
        }
        faces = next_faces;
    }
    if !splittable_edges(&positions, &faces).is_empty() {
        return Err(Error::invariant(format!(
            "edge subdivision did not bound all edges by {max_len} within {MAX_SPLIT_ROUNDS} sweeps"
        )));
    }

    let map = CorrectionMap {
        n_source: n0,
        rows,
    };
    let (uv, skin_weights, blendshapes, part_labels) = transfer_attributes(mesh, &map)?;
    let nj = mesh.n_joints();
    let n_new = positions.len();
    let mut regressor = vec![0.0; nj * n_new];
    for j in 0..nj {
        regressor[j * n_new..j * n_new + n0].copy_from_slice(mesh.regressor_row(j));
    }
    let mut out = mesh.clone();
    out.vertices = positions;
    out.faces = faces;
    out.uv = uv;
    out.skin_weights = skin_weights;
    out.blendshapes = blendshapes;
    out.part_labels = part_labels;
    out.joint_regressor = regressor;
    Ok((out, map, total_split))
}

/// Makes triangle windings consistent per connected component by flooding
/// across shared edges, flipping the smaller side so the majority keeps
/// its original winding. Fails on edges bordering more than two faces and
/// on non-orientable surfaces. Returns the repaired faces and how many
/// were flipped.
pub fn fix_orientation(faces: &[[usize; 3]]) -> Result<(Vec<[usize; 3]>, usize)> {
    // (face index, traversed low->high?)
    let mut edge_faces: HashMap<(usize, usize), Vec<(usize, bool)>> =
        HashMap::with_capacity(faces.len() * 3 / 2);
    for (fi, f) in faces.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            edge_faces.entry(key).or_default().push((fi, a < b));
        }
    }
    for (&(a, b), inc) in &edge_faces {
        if inc.len() > 2 {
            return Err(Error::invariant(format!(
                "edge ({a},{b}) borders {} faces; orientation repair needs an edge-manifold mesh",
                inc.len()
            )));
        }
    }

    let mut state: Vec<Option<bool>> = vec![None; faces.len()]; // Some(flip?)
    let mut flip = vec![false; faces.len()];
    let mut queue = std::collections::VecDeque::new();
    for start in 0..faces.len() {
        if state[start].is_some() {
            continue;
        }
        state[start] = Some(false);
        queue.push_back(start);
        let mut component = vec![start];
        let mut flipped_in_component = 0usize;
        while let Some(fi) = queue.pop_front() {
            let my_flip = state[fi].unwrap();
            let f = faces[fi];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                for &(other, other_dir) in &edge_faces[&key] {
                    if other == fi {
                        continue;
                    }
                    let my_dir = (a < b) ^ my_flip;
                    // A consistent pair traverses the shared edge in
                    // opposite directions, so `other` must flip exactly
                    // when its stored direction matches ours.
                    let want = other_dir == my_dir;
                    match state[other] {
                        None => {
                            state[other] = Some(want);
                            if want {
                                flipped_in_component += 1;
                            }
                            component.push(other);
                            queue.push_back(other);
                        }
                        Some(existing) => {
                            if existing != want {
                                return Err(Error::invariant(
                                    "mesh is non-orientable: no consistent winding exists"
                                        .to_string(),
                                ));
                            }
                        }
                    }
                }
            }
        }
        let invert = 2 * flipped_in_component > component.len();
        for &fi in &component {
            flip[fi] = state[fi].unwrap() ^ invert;
        }
    }

    let mut out = faces.to_vec();
    let mut n_flipped = 0;
    for (fi, f) in out.iter_mut().enumerate() {
        if flip[fi] {
            f.swap(1, 2);
            n_flipped += 1;
        }
    }
    Ok((out, n_flipped))
}

/// Eigendecomposition of a small symmetric matrix via cyclic Jacobi
/// rotations; returns (eigenvalues, column eigenvectors).
fn eigh_small(mut m: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..n).map(|c| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let scale = m
        .iter()
        .flat_map(|r| r.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|r| (r + 1..n).map(move |c| (r, c)))
            .map(|(r, c)| m[r][c].abs())
            .fold(0.0, f64::max);
        if off < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                if m[p][r].abs() < 1e-18 * scale {
                    continue;
                }
                let theta = 0.5 * (m[r][r] - m[p][p]) / m[p][r];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mpk, mrk) = (m[p][k], m[r][k]);
                    m[p][k] = c * mpk - s * mrk;
                    m[r][k] = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let (mkp, mkr) = (m[k][p], m[k][r]);
                    m[k][p] = c * mkp - s * mkr;
                    m[k][r] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let (qkp, qkr) = (q[k][p], q[k][r]);
                    q[k][p] = c * qkp - s * qkr;
                    q[k][r] = s * qkp + c * qkr;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), q)
}

/// Minimum-norm solution of the (possibly rank-deficient) symmetric PSD
/// system `M x = b`, dropping eigenvalues below `1e-10 * max`.
fn solve_psd_pinv(m: Vec<Vec<f64>>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let (vals, q) = eigh_small(m);
    let vmax = vals.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let mut x = vec![0.0; n];
    for e in 0..n {
        if vals[e] <= 1e-10 * vmax {
            continue;
        }
        let proj: f64 = (0..n).map(|k| q[k][e] * b[k]).sum();
        let coef = proj / vals[e];
        for k in 0..n {
            x[k] += coef * q[k][e];
        }
    }
    x
}

/// Minimum-norm weights over `picked` vertices satisfying
/// `sum(w * p) = joint`, `sum(w) = 1`; `None` when the joint is outside
/// the affine span of the picked vertices.
fn interpolation_weights(
    vertices: &[[f64; 3]],
    picked: &[usize],
    joint: &[f64; 3],
) -> Option<Vec<f64>> {
    let k = picked.len();
    // A w = [joint; 1] with A = [positions; ones]: w = A^T y where
    // (A A^T) y = b, pseudo-inverted to tolerate flat neighborhoods.
    let a_rows: [Vec<f64>; 4] = [
        picked.iter().map(|&v| vertices[v][0]).collect(),
        picked.iter().map(|&v| vertices[v][1]).collect(),
        picked.iter().map(|&v| vertices[v][2]).collect(),
        vec![1.0; k],
    ];
    let m: Vec<Vec<f64>> = (0..4)
        .map(|r| {
            (0..4)
                .map(|c| (0..k).map(|i| a_rows[r][i] * a_rows[c][i]).sum())
                .collect()
        })
        .collect();
    let b = [joint[0], joint[1], joint[2], 1.0];
    let y = solve_psd_pinv(m, &b);
    let w: Vec<f64> = (0..k)
        .map(|i| (0..4).map(|r| a_rows[r][i] * y[r]).sum())
        .collect();
    // The pseudo-inverse silently drops infeasible components; verify the
    // weights actually reproduce the joint.
    let mut achieved = [0.0f64; 4];
    for (i, &wi) in w.iter().enumerate() {
        for r in 0..4 {
            achieved[r] += wi * a_rows[r][i];
        }
    }
    let err = (0..4)
        .map(|r| (achieved[r] - b[r]).abs())
        .fold(0.0f64, f64::max);
    let scale_b = b.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
    (err <= 1e-8 * scale_b).then_some(w)
}

/// Fits a sparse joint regressor over `vertices` so each row reproduces
/// its target joint exactly: for every joint, the `k` nearest vertices
/// get the minimum-norm weights satisfying `sum(w * p) = joint`,
/// `sum(w) = 1`. When those `k` cannot span the joint (e.g. they are a
/// coplanar ring and the joint sits off the plane) the neighborhood is
/// doubled until it can; a joint outside the affine span of all vertices
/// is an error.
pub fn refit_joint_regressor(
    vertices: &[[f64; 3]],
    target_joints: &[[f64; 3]],
    k: usize,
) -> Result<Vec<f64>> {
    let n = vertices.len();
    if n == 0 || k == 0 {
        return Err(Error::invariant("regressor refit needs vertices and k > 0"));
    }
    let mut regressor = vec![0.0; target_joints.len() * n];
    for (j, joint) in target_joints.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_unstable_by(|&a, &b| {
            let da = dist3(vertices[a], *joint);
            let db = dist3(vertices[b], *joint);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        let mut kk = k.min(n);
        let w = loop {
            if let Some(w) = interpolation_weights(vertices, &order[..kk], joint) {
                break Some(w);
            }
            if kk == n {
                break None;
            }
            kk = (kk * 2).min(n);
        };
        let w = w.ok_or_else(|| {
            Error::invariant(format!(
                "joint {j} lies outside the affine span of the mesh vertices; cannot refit \
                 the regressor"
            ))
        })?;
        for (i, &v) in order[..kk].iter().enumerate() {
            regressor[j * n + v] = w[i];
        }
    }
    Ok(regressor)
}

/// Full correction pass: cleanup of invalid faces, subdivision of edges
/// longer than `max_edge`, winding repair, and a joint-regressor refit
/// (16 nearest vertices per joint) that keeps regressed joints where the
/// input mesh put them. When the mesh already satisfies every
/// postcondition the input is returned unchanged, bit for bit.
pub fn topology_correct(mesh: &RiggedMesh, max_edge: f64) -> Result<Corrected> {
    let joints0 = regress_joints(mesh, &mesh.vertices);
    let (cleaned, map_clean, clean_stats) = remove_invalid_faces(mesh)?;
    let (mut split, map_split, edges_split) = split_long_edges(&cleaned, max_edge)?;
    let (faces, faces_flipped) = fix_orientation(&split.faces)?;
    split.faces = faces;

    let stats = CorrectionStats {
        edges_split,
        faces_flipped,
        faces_removed: clean_stats.faces_removed,
        vertices_removed: clean_stats.vertices_removed,
    };
    if stats.is_noop() {
        return Ok(Corrected {
            mesh: mesh.clone(),
            map: CorrectionMap::identity(mesh.n_vertices()),
            stats,
        });
    }

    split.joint_regressor = refit_joint_regressor(&split.vertices, &joints0, 16)?;
    let map = CorrectionMap::compose(&map_clean, &map_split);
    split.validate()?;
    Ok(Corrected {
        mesh: split,
        map,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::make_mini_rig;
    use crate::pipeline::Profile;

    /// Two triangles over four vertices, two joints, one blendshape, with
    /// distinct attributes per vertex.
    fn quad_mesh() -> RiggedMesh {
        RiggedMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [0, 2, 3]],
            uv: vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            skin_weights: vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.25, 0.75],
            blendshapes: vec![
                0.1, 0.0, 0.0, //
                0.0, 0.2, 0.0, //
                0.0, 0.0, 0.3, //
                0.4, 0.4, 0.0,
            ],
            n_shape: 0,
            joint_regressor: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5],
            joint_parents: vec![-1, 0],
            part_labels: vec![
                PartLabel::Face,
                PartLabel::Hair,
                PartLabel::Neck,
                PartLabel::Other,
            ],
        }
    }

    /// Closed triangulated band: 2n vertices, 2n faces, orientable.
    fn band_faces(n: usize, twist: bool) -> Vec<[usize; 3]> {
        let mut faces = Vec::new();
        for i in 0..n {
            let (t0, b0) = (2 * i, 2 * i + 1);
            let (t1, b1) = if i + 1 < n {
                (2 * (i + 1), 2 * (i + 1) + 1)
            } else if twist {
                (1, 0)
            } else {
                (0, 1)
            };
            faces.push([t0, b0, t1]);
            faces.push([b0, b1, t1]);
        }
        faces
    }

    #[test]
    fn subdivision_bounds_every_edge() {
        let rig = make_mini_rig(Profile::Desk);
        let max_edge = 0.7 * rig.mean_edge_length();
        let out = topology_correct(&rig, max_edge).unwrap();
        assert!(out.stats.edges_split > 0);
        out.mesh.validate().unwrap();
        for (&(a, b), _) in &out.mesh.edge_face_counts() {
            let len = dist3(out.mesh.vertices[a], out.mesh.vertices[b]);
            assert!(len <= max_edge + 1e-12, "edge ({a},{b}) has length {len}");
        }
        assert_eq!(
            out.mesh.euler_characteristic(),
            rig.euler_characteristic(),
            "midpoint subdivision must not change the surface topology"
        );
    }

    #[test]
    fn correction_map_reproduces_new_vertices() {
        let rig = make_mini_rig(Profile::Desk);
        let out = topology_correct(&rig, 0.7 * rig.mean_edge_length()).unwrap();
        assert_eq!(out.map.rows.len(), out.mesh.n_vertices());
        let mixed = out.map.mix_points(&rig.vertices);
        for (p, q) in mixed.iter().zip(&out.mesh.vertices) {
            for ax in 0..3 {
                assert!((p[ax] - q[ax]).abs() < 1e-12);
            }
        }
        for row in &out.map.rows {
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_mesh_passes_through_bit_exact() {
        let rig = make_mini_rig(Profile::Desk);
        let out = topology_correct(&rig, 10.0 * rig.mean_edge_length()).unwrap();
        assert!(out.stats.is_noop());
        assert!(out.map.is_identity());
        assert_eq!(out.mesh.vertices, rig.vertices);
        assert_eq!(out.mesh.faces, rig.faces);
        assert_eq!(out.mesh.joint_regressor, rig.joint_regressor);
    }

    #[test]
    fn correction_is_idempotent() {
        let rig = make_mini_rig(Profile::Desk);
        let max_edge = 0.7 * rig.mean_edge_length();
        let once = topology_correct(&rig, max_edge).unwrap();
        let twice = topology_correct(&once.mesh, max_edge).unwrap();
        assert!(twice.stats.is_noop(), "second pass edited: {:?}", twice.stats);
        assert_eq!(once.mesh.vertices, twice.mesh.vertices);
        assert_eq!(once.mesh.faces, twice.mesh.faces);
        assert_eq!(once.mesh.skin_weights, twice.mesh.skin_weights);
        assert_eq!(once.mesh.joint_regressor, twice.mesh.joint_regressor);
    }

    #[test]
    fn joints_stay_put_through_correction() {
        let rig = make_mini_rig(Profile::Desk);
        let before = regress_joints(&rig, &rig.vertices);
        let out = topology_correct(&rig, 0.7 * rig.mean_edge_length()).unwrap();
        let after = regress_joints(&out.mesh, &out.mesh.vertices);
        for (a, b) in before.iter().zip(&after) {
            assert!(dist3(*a, *b) < 1e-9, "joint moved from {a:?} to {b:?}");
        }
    }

    #[test]
    fn midpoint_attributes_interpolate_their_sources() {
        let mesh = quad_mesh();
        let (out, map, n_split) = split_long_edges(&mesh, 0.9).unwrap();
        assert!(n_split > 0);
        for (t, row) in map.rows.iter().enumerate() {
            // Expected values straight from the map definition.
            let nj = mesh.n_joints();
            let mut want_w = vec![0.0; nj];
            let mut want_uv = [0.0; 2];
            let mut want_b = [0.0; 3];
            for &(v, w) in row {
                for j in 0..nj {
                    want_w[j] += w * mesh.skin_weights[v * nj + j];
                }
                for ax in 0..2 {
                    want_uv[ax] += w * mesh.uv[v][ax];
                }
                for ax in 0..3 {
                    want_b[ax] += w * mesh.blendshapes[v * 3 + ax];
                }
            }
            let sum: f64 = want_w.iter().sum();
            for j in 0..nj {
                assert!((out.skin_weights[t * nj + j] - want_w[j] / sum).abs() < 1e-12);
            }
            for ax in 0..2 {
                assert!((out.uv[t][ax] - want_uv[ax]).abs() < 1e-12);
            }
            for ax in 0..3 {
                assert!((out.blendshapes[t * 3 + ax] - want_b[ax]).abs() < 1e-12);
            }
            let best = row
                .iter()
                .copied()
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(out.part_labels[t], mesh.part_labels[best]);
        }
    }

    #[test]
    fn flipped_minority_faces_are_restored() {
        let mut faces = band_faces(8, false);
        let original = faces.clone();
        for &fi in &[2usize, 7, 11] {
            faces[fi].swap(1, 2);
        }
        let (fixed, n_flipped) = fix_orientation(&faces).unwrap();
        assert_eq!(n_flipped, 3);
        assert_eq!(fixed, original);
    }

    #[test]
    fn moebius_band_is_rejected() {
        let err = fix_orientation(&band_faces(9, true)).unwrap_err();
        assert!(err.to_string().contains("non-orientable"), "{err}");
    }

    #[test]
    fn nonmanifold_edges_are_rejected_by_orientation_repair() {
        let mut faces = band_faces(8, false);
        faces.push([0, 1, 6]); // edge (0,1) now borders three faces
        assert!(fix_orientation(&faces).is_err());
    }

    #[test]
    fn degenerate_and_duplicate_faces_are_removed() {
        let mut mesh = quad_mesh();
        // A sliver on three fresh vertices, a duplicate (other winding),
        // and a face repeating a vertex.
        mesh.vertices.push([2.0, 0.0, 0.0]);
        mesh.vertices.push([3.0, 0.0, 0.0]);
        mesh.vertices.push([2.5, 1e-12, 0.0]);
        for _ in 0..3 {
            mesh.uv.push([0.5, 0.5]);
            mesh.part_labels.push(PartLabel::Other);
            mesh.skin_weights.extend([1.0, 0.0]);
        }
        let b = mesh.blendshapes.clone();
        mesh.blendshapes = [b, vec![0.0; 9]].concat();
        mesh.joint_regressor = vec![
            0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0,
        ];
        mesh.faces.push([4, 5, 6]);
        mesh.faces.push([0, 2, 1]);
        mesh.faces.push([3, 3, 1]);

        let (out, _, stats) = remove_invalid_faces(&mesh).unwrap();
        assert_eq!(stats.faces_removed, 3);
        assert_eq!(stats.vertices_removed, 3);
        assert_eq!(out.faces, quad_mesh().faces);
        assert_eq!(out.vertices, quad_mesh().vertices);
        out.validate().unwrap();
    }

    #[test]
    fn refit_reproduces_targets_exactly() {
        let rig = make_mini_rig(Profile::Desk);
        let joints = regress_joints(&rig, &rig.vertices);
        let reg = refit_joint_regressor(&rig.vertices, &joints, 16).unwrap();
        let n = rig.n_vertices();
        for (j, joint) in joints.iter().enumerate() {
            let mut p = [0.0; 3];
            let mut wsum = 0.0;
            for v in 0..n {
                let w = reg[j * n + v];
                wsum += w;
                for ax in 0..3 {
                    p[ax] += w * rig.vertices[v][ax];
                }
            }
            assert!((wsum - 1.0).abs() < 1e-9);
            assert!(dist3(p, *joint) < 1e-9);
        }
    }

    #[test]
    fn refit_rejects_a_degenerate_neighborhood() {
        // All candidate vertices on a line, joint off the line.
        let verts: Vec<[f64; 3]> = (0..8).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(refit_joint_regressor(&verts, &[[0.0, 1.0, 0.0]], 8).is_err());
    }

    #[test]
    fn randomized_deformations_stay_correctable() {
        use rand::{Rng, SeedableRng};
        let rig = make_mini_rig(Profile::Desk);
        let max_edge = 1.5 * rig.mean_edge_length();
        for seed in 0..10u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut mesh = rig.clone();
            for p in mesh.vertices.iter_mut() {
                for ax in 0..3 {
                    p[ax] += rng.gen_range(-0.05..0.05);
                }
            }
            let joints = regress_joints(&mesh, &mesh.vertices);
            let out = topology_correct(&mesh, max_edge).unwrap();
            out.mesh.validate().unwrap();
            let after = regress_joints(&out.mesh, &out.mesh.vertices);
            for (a, b) in joints.iter().zip(&after) {
                assert!(dist3(*a, *b) < 1e-6);
            }
            let again = topology_correct(&out.mesh, max_edge).unwrap();
            assert!(again.stats.is_noop());
            for (p, q) in out.mesh.vertices.iter().zip(&again.mesh.vertices) {
                for ax in 0..3 {
                    assert!((p[ax] - q[ax]).abs() < 1e-12);
                }
            }
        }
    }
}
