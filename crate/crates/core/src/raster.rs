//! Deterministic CPU rasterization: perspective-correct triangle
//! rasterization into a G-buffer (face id, barycentrics, depth, UV, smooth
//! normal, part label), shading helpers, UV-space rasterization, and
//! image-to-texture unwrapping with a conservative validity rule.
//!
//! Determinism contract: face loops run in index order, depth ties keep the
//! earlier face, and pixel coverage uses inclusive (`>= 0`) edge tests on
//! screen barycentrics, so results are bit-identical across runs.

use crate::assets::{bilinear_taps, Image, PartLabel, RiggedMesh};
use crate::headmodel::Camera;
use crate::{Error, Result};

/// Faces with view-space depth at or below this are culled.
const NEAR_Z: f64 = 1e-6;

/// Per-pixel rasterization records, flattened row-major. `face_id` is `-1`
/// on background; there `bary`/`uv`/`normal` are zero, `depth` is 0, and
/// `part` is `-1`. On covered pixels `bary` holds perspective-correct
/// barycentric coordinates (each `>= 0`, summing to 1 within 1e-9), `depth`
/// the view-space z of the surface point, `uv` the interpolated texture
/// coordinates, `normal` the barycentric blend of unit vertex normals
/// renormalized to unit length, and `part` the label index of the corner
/// with the largest barycentric weight.
#[derive(Clone, Debug)]
pub struct RasterMap {
    pub width: usize,
    pub height: usize,
    pub face_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub uv: Vec<[f64; 2]>,
    pub normal: Vec<[f64; 3]>,
    pub part: Vec<i32>,
}

/// Signed doubled area of `(a, b, p)`; the building block of screen-space
/// barycentrics.
#[inline]
fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Smooth per-vertex normals: mean of incident unit face normals,
/// renormalized (zero for vertices touching no non-degenerate face).
pub fn vertex_normals(verts: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let fnorm = face_normals(verts, faces);
    let mut acc = vec![[0.0f64; 3]; verts.len()];
    let mut cnt = vec![0usize; verts.len()];
    for (f, n) in faces.iter().zip(&fnorm) {
        if n == &[0.0; 3] {
            continue;
        }
        for &v in f {
            acc[v][0] += n[0];
            acc[v][1] += n[1];
            acc[v][2] += n[2];
            cnt[v] += 1;
        }
    }
    for (a, &c) in acc.iter_mut().zip(&cnt) {
        if c == 0 {
            continue;
        }
        let inv = 1.0 / c as f64;
        let m = [a[0] * inv, a[1] * inv, a[2] * inv];
        let l = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        *a = if l < 1e-18 {
            [0.0; 3]
        } else {
            [m[0] / l, m[1] / l, m[2] / l]
        };
    }
    acc
}

struct ProjectedFace {
    pix: [[f64; 2]; 3],
    view_z: [f64; 3],
}

/// Projects one face; returns `None` when the face is culled (behind the
/// near plane or backfacing).
fn project_face(verts: &[[f64; 3]], f: &[usize; 3], cam: &Camera, eye: [f64; 3]) -> Option<ProjectedFace> {
    let a = verts[f[0]];
    let b = verts[f[1]];
    let c = verts[f[2]];
    // World-space backface cull: outward normal pointing away from the
    // camera means the face shows its back.
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let centroid = [
        (a[0] + b[0] + c[0]) / 3.0 - eye[0],
        (a[1] + b[1] + c[1]) / 3.0 - eye[1],
        (a[2] + b[2] + c[2]) / 3.0 - eye[2],
    ];
    if n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2] >= 0.0 {
        return None;
    }
    let mut pix = [[0.0f64; 2]; 3];
    let mut view_z = [0.0f64; 3];
    for (k, &vi) in f.iter().enumerate() {
        let vw = cam.to_view(verts[vi]);
        if vw[2] <= NEAR_Z {
            return None;
        }
        pix[k] = cam.view_to_pixel(vw);
        view_z[k] = vw[2];
    }
    Some(ProjectedFace { pix, view_z })
}

/// Tests pixel center `(px, py)` against a projected face; on coverage
/// returns `(perspective_bary, depth)`.
#[inline]
fn cover_pixel(pf: &ProjectedFace, px: f64, py: f64) -> Option<([f64; 3], f64)> {
    let [pa, pb, pc] = pf.pix;
    let area = edge(pa, pb, pc);
    if area.abs() < 1e-18 {
        return None;
    }
    let p = [px, py];
    let l0 = edge(pb, pc, p) / area;
    let l1 = edge(pc, pa, p) / area;
    let l2 = edge(pa, pb, p) / area;
    if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
        return None;
    }
    let inv_z = l0 / pf.view_z[0] + l1 / pf.view_z[1] + l2 / pf.view_z[2];
    let depth = 1.0 / inv_z;
    let bary = [
        l0 / pf.view_z[0] * depth,
        l1 / pf.view_z[1] * depth,
        l2 / pf.view_z[2] * depth,
    ];
    Some((bary, depth))
}

fn raster_impl(mesh: &RiggedMesh, cam: &Camera, w: usize, h: usize, use_bbox: bool) -> RasterMap {
    let verts = &mesh.vertices;
    let faces = &mesh.faces;
    let vnorm = vertex_normals(verts, faces);
    let eye = cam.position();
    let mut out = RasterMap {
        width: w,
        height: h,
        face_id: vec![-1; w * h],
        bary: vec![[0.0; 3]; w * h],
        depth: vec![f64::INFINITY; w * h],
        uv: vec![[0.0; 2]; w * h],
        normal: vec![[0.0; 3]; w * h],
        part: vec![-1; w * h],
    };
    for (fi, f) in faces.iter().enumerate() {
        let Some(pf) = project_face(verts, f, cam, eye) else {
            continue;
        };
        // Bounding box over pixel centers, expanded by one pixel so that
        // centers landing exactly on an edge are never lost to rounding.
        let (x0, x1, y0, y1) = if use_bbox {
            let minx = pf.pix.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let maxx = pf.pix.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let miny = pf.pix.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let maxy = pf.pix.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            (
                ((minx - 0.5).floor() as i64 - 1).max(0) as usize,
                (((maxx - 0.5).ceil() as i64) + 1).min(w as i64 - 1).max(0) as usize,
                ((miny - 0.5).floor() as i64 - 1).max(0) as usize,
                (((maxy - 0.5).ceil() as i64) + 1).min(h as i64 - 1).max(0) as usize,
            )
        } else {
            (0, w - 1, 0, h - 1)
        };
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                let Some((bary, depth)) = cover_pixel(&pf, x as f64 + 0.5, y as f64 + 0.5)
                else {
                    continue;
                };
                let idx = y * w + x;
                if depth < out.depth[idx] {
                    out.depth[idx] = depth;
                    out.face_id[idx] = fi as i32;
                    out.bary[idx] = bary;
                }
            }
        }
    }
    // Fill the interpolated records from the winning face of each pixel.
    for idx in 0..w * h {
        let fi = out.face_id[idx];
        if fi < 0 {
            out.depth[idx] = 0.0;
            continue;
        }
        let f = faces[fi as usize];
        let b = out.bary[idx];
        let mut uv = [0.0f64; 2];
        let mut n = [0.0f64; 3];
        for k in 0..3 {
            uv[0] += b[k] * mesh.uv[f[k]][0];
            uv[1] += b[k] * mesh.uv[f[k]][1];
            n[0] += b[k] * vnorm[f[k]][0];
            n[1] += b[k] * vnorm[f[k]][1];
            n[2] += b[k] * vnorm[f[k]][2];
        }
        let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        out.uv[idx] = uv;
        out.normal[idx] = if l < 1e-18 {
            [0.0; 3]
        } else {
            [n[0] / l, n[1] / l, n[2] / l]
        };
        let argmax = (0..3).max_by(|&i, &j| b[i].partial_cmp(&b[j]).unwrap()).unwrap();
        out.part[idx] = mesh.part_labels[f[argmax]].index() as i32;
    }
    out
}

fn check_raster_inputs(mesh: &RiggedMesh, cam: &Camera, w: usize, h: usize) -> Result<()> {
    cam.validate()?;
    if w == 0 || h == 0 {
        return Err(Error::invariant("raster target has zero pixels"));
    }
    if mesh.uv.len() != mesh.vertices.len() || mesh.part_labels.len() != mesh.vertices.len() {
        return Err(Error::invariant(
            "mesh uv/part tables do not match the vertex count",
        ));
    }
    Ok(())
}

/// Rasterizes a posed mesh through `cam` into a `width x height` G-buffer,
/// using a per-face bounding box.
pub fn rasterize(mesh: &RiggedMesh, cam: &Camera, width: usize, height: usize) -> Result<RasterMap> {
    check_raster_inputs(mesh, cam, width, height)?;
    Ok(raster_impl(mesh, cam, width, height, true))
}

/// Exhaustive variant used as a validation reference: every face is tested
/// against every pixel, with no bounding-box shortcut. Must agree exactly
/// with [`rasterize`].
pub fn coverage_reference(
    mesh: &RiggedMesh,
    cam: &Camera,
    width: usize,
    height: usize,
) -> Result<RasterMap> {
    check_raster_inputs(mesh, cam, width, height)?;
    Ok(raster_impl(mesh, cam, width, height, false))
}

/// Unit face normals in world space (zero for degenerate faces).
pub fn face_normals(verts: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 3]> {
    faces
        .iter()
        .map(|f| {
            let a = verts[f[0]];
            let b = verts[f[1]];
            let c = verts[f[2]];
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if l < 1e-18 {
                [0.0; 3]
            } else {
                [n[0] / l, n[1] / l, n[2] / l]
            }
        })
        .collect()
}

/// Binary coverage mask (1 channel).
pub fn render_mask(rm: &RasterMap) -> Image {
    let mut img = Image::new(rm.height, rm.width, 1);
    for (o, &fi) in img.data.iter_mut().zip(&rm.face_id) {
        *o = if fi >= 0 { 1.0 } else { 0.0 };
    }
    img
}

/// Smooth-shaded world-space normal image (3 channels, components in
/// `[-1,1]`, background 0).
pub fn render_normals(rm: &RasterMap) -> Image {
    let mut img = Image::new(rm.height, rm.width, 3);
    for (idx, n) in rm.normal.iter().enumerate() {
        let px = &mut img.data[idx * 3..idx * 3 + 3];
        px[0] = n[0] as f32;
        px[1] = n[1] as f32;
        px[2] = n[2] as f32;
    }
    img
}

/// Hard one-hot part map (channel order follows [`PartLabel::index`],
/// background all-zero).
pub fn render_parts(rm: &RasterMap) -> Image {
    let c = PartLabel::ALL.len();
    let mut img = Image::new(rm.height, rm.width, c);
    for (idx, &p) in rm.part.iter().enumerate() {
        if p >= 0 {
            img.data[idx * c + p as usize] = 1.0;
        }
    }
    img
}

/// Textured render: bilinear lookup of the texture at each covered pixel's
/// interpolated UV. Background stays 0. The texture's validity plane is not
/// consulted; invalid texels are expected to be zero-filled already.
pub fn shade_texture(rm: &RasterMap, tex: &UvImage) -> Image {
    let t = &tex.color;
    let mut img = Image::new(rm.height, rm.width, t.c);
    for (idx, &fi) in rm.face_id.iter().enumerate() {
        if fi < 0 {
            continue;
        }
        let uv = rm.uv[idx];
        let s = t.sample_bilinear(uv[0] * t.w as f64, uv[1] * t.h as f64);
        img.data[idx * t.c..(idx + 1) * t.c].copy_from_slice(&s);
    }
    img
}

/// Per-pixel sparse taps into a `tex_res x tex_res` texel grid (flattened
/// row-major), from the G-buffer UVs. Background pixels get no taps.
/// Feeding these rows to a sparse row-mixing resample reproduces
/// [`shade_texture`] exactly.
pub fn texture_sample_plan(rm: &RasterMap, tex_res: usize) -> Vec<Vec<(usize, f64)>> {
    let mut plan = vec![Vec::new(); rm.face_id.len()];
    for (idx, &fi) in rm.face_id.iter().enumerate() {
        if fi < 0 {
            continue;
        }
        let uv = rm.uv[idx];
        plan[idx] = bilinear_taps(uv[0] * tex_res as f64, uv[1] * tex_res as f64, tex_res, tex_res)
            .into_iter()
            .map(|(_, i, w)| (i, w))
            .collect();
    }
    plan
}

/// Per-pixel single tap onto the covering face's row (weight 1); used to
/// scatter per-face quantities into image space.
pub fn face_scatter_plan(rm: &RasterMap) -> Vec<Vec<(usize, f64)>> {
    rm.face_id
        .iter()
        .map(|&fi| {
            if fi >= 0 {
                vec![(fi as usize, 1.0)]
            } else {
                Vec::new()
            }
        })
        .collect()
}

/// Per-pixel taps onto the covering face's corner-vertex rows, weighted by
/// the perspective-correct barycentrics; used to interpolate per-vertex
/// quantities (smooth normals) into image space.
pub fn vertex_interp_plan(rm: &RasterMap, faces: &[[usize; 3]]) -> Vec<Vec<(usize, f64)>> {
    rm.face_id
        .iter()
        .enumerate()
        .map(|(idx, &fi)| {
            if fi < 0 {
                return Vec::new();
            }
            let f = faces[fi as usize];
            let b = rm.bary[idx];
            (0..3).map(|k| (f[k], b[k])).collect()
        })
        .collect()
}

/// Per-vertex taps onto incident face rows with uniform `1/count` weights;
/// averaging unit face normals through this plan yields (unnormalized)
/// smooth vertex normals.
pub fn incident_face_plan(n_verts: usize, faces: &[[usize; 3]]) -> Vec<Vec<(usize, f64)>> {
    let mut incident = vec![Vec::new(); n_verts];
    for (fi, f) in faces.iter().enumerate() {
        for &v in f {
            incident[v].push(fi);
        }
    }
    incident
        .into_iter()
        .map(|fs| {
            let w = if fs.is_empty() { 0.0 } else { 1.0 / fs.len() as f64 };
            fs.into_iter().map(|fi| (fi, w)).collect()
        })
        .collect()
}

/// UV-space rasterization result over a square texel grid.
#[derive(Clone, Debug)]
pub struct UvRaster {
    pub res: usize,
    pub face_id: Vec<i32>,
    pub bary: Vec<[f64; 3]>,
}

/// Rasterizes the UV chart onto a `res x res` texel grid (texel centers at
/// half-integers of `uv * res`). The chart is expected to be injective; on
/// overlap the lower face index wins.
pub fn rasterize_uv(faces: &[[usize; 3]], uv: &[[f64; 2]], res: usize) -> UvRaster {
    let mut out = UvRaster {
        res,
        face_id: vec![-1; res * res],
        bary: vec![[0.0; 3]; res * res],
    };
    let s = res as f64;
    for (fi, f) in faces.iter().enumerate() {
        let pa = [uv[f[0]][0] * s, uv[f[0]][1] * s];
        let pb = [uv[f[1]][0] * s, uv[f[1]][1] * s];
        let pc = [uv[f[2]][0] * s, uv[f[2]][1] * s];
        let area = edge(pa, pb, pc);
        if area.abs() < 1e-18 {
            continue;
        }
        let minx = pa[0].min(pb[0]).min(pc[0]);
        let maxx = pa[0].max(pb[0]).max(pc[0]);
        let miny = pa[1].min(pb[1]).min(pc[1]);
        let maxy = pa[1].max(pb[1]).max(pc[1]);
        let x0 = ((minx - 0.5).floor() as i64 - 1).max(0) as usize;
        let x1 = (((maxx - 0.5).ceil() as i64) + 1).min(res as i64 - 1).max(0) as usize;
        let y0 = ((miny - 0.5).floor() as i64 - 1).max(0) as usize;
        let y1 = (((maxy - 0.5).ceil() as i64) + 1).min(res as i64 - 1).max(0) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let idx = y * res + x;
                if out.face_id[idx] >= 0 {
                    continue;
                }
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let l0 = edge(pb, pc, p) / area;
                let l1 = edge(pc, pa, p) / area;
                let l2 = edge(pa, pb, p) / area;
                if l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0 {
                    out.face_id[idx] = fi as i32;
                    out.bary[idx] = [l0, l1, l2];
                }
            }
        }
    }
    out
}

/// Image-to-texture reprojection plan: for each texel, bilinear taps into a
/// rendered view of the same mesh, with validity. Applying it to an image
/// yields a partial texture.
#[derive(Clone, Debug)]
pub struct UnwrapMap {
    pub res: usize,
    /// Per-texel taps into flattened `height x width` pixel rows. Empty on
    /// invalid texels.
    pub anchors: Vec<Vec<(usize, f64)>>,
    pub validity: Vec<f32>,
}

/// Partial texture: color planes plus a single-channel validity mask.
/// Invalid texels hold zeros in `color`.
#[derive(Clone, Debug)]
pub struct UvImage {
    pub color: Image,
    pub validity: Image,
}

impl UvImage {
    /// A fully-valid texture wrapping an existing color image.
    pub fn full(color: Image) -> Self {
        let mut validity = Image::new(color.h, color.w, 1);
        validity.data.fill(1.0);
        UvImage { color, validity }
    }
}

fn faces_share_vertex(a: &[usize; 3], b: &[usize; 3]) -> bool {
    a.iter().any(|v| b.contains(v))
}

/// Builds the reprojection plan from a posed mesh and its rasterization
/// under `cam`. A texel is valid only when its surface point projects inside
/// the frame, the nearest pixel's visible face is the texel's own face
/// (exact-id occlusion test), and all four bilinear source pixels are
/// covered by that face or a vertex-sharing neighbor (seam/silhouette
/// guard).
pub fn unwrap_plan(mesh: &RiggedMesh, cam: &Camera, rm: &RasterMap, tex_res: usize) -> UnwrapMap {
    let faces = &mesh.faces;
    let uvr = rasterize_uv(faces, &mesh.uv, tex_res);
    let mut anchors = vec![Vec::new(); tex_res * tex_res];
    let mut validity = vec![0.0f32; tex_res * tex_res];
    for idx in 0..tex_res * tex_res {
        let fi = uvr.face_id[idx];
        if fi < 0 {
            continue;
        }
        let f = &faces[fi as usize];
        let bary = uvr.bary[idx];
        let mut p = [0.0f64; 3];
        for k in 0..3 {
            for c in 0..3 {
                p[c] += bary[k] * mesh.vertices[f[k]][c];
            }
        }
        let view = cam.to_view(p);
        if view[2] <= NEAR_Z {
            continue;
        }
        let [px, py] = cam.view_to_pixel(view);
        if px < 0.0 || py < 0.0 || px >= rm.width as f64 || py >= rm.height as f64 {
            continue;
        }
        let nearest = (py as usize).min(rm.height - 1) * rm.width + (px as usize).min(rm.width - 1);
        if rm.face_id[nearest] != fi {
            continue;
        }
        let taps = bilinear_taps(px, py, rm.width, rm.height);
        let ok = taps.iter().all(|&(_, pi, _)| {
            let g = rm.face_id[pi];
            g >= 0 && (g == fi || faces_share_vertex(f, &faces[g as usize]))
        });
        if !ok {
            continue;
        }
        anchors[idx] = taps.into_iter().map(|(_, i, w)| (i, w)).collect();
        validity[idx] = 1.0;
    }
    UnwrapMap {
        res: tex_res,
        anchors,
        validity,
    }
}

impl UnwrapMap {
    /// Applies the plan to an image rendered from the same view. Invalid
    /// texels come out zero-filled.
    pub fn apply(&self, img: &Image) -> UvImage {
        let mut color = Image::new(self.res, self.res, img.c);
        for (t, taps) in self.anchors.iter().enumerate() {
            let out = &mut color.data[t * img.c..(t + 1) * img.c];
            for &(pi, w) in taps {
                let px = &img.data[pi * img.c..(pi + 1) * img.c];
                for (o, &v) in out.iter_mut().zip(px) {
                    *o += (w as f32) * v;
                }
            }
        }
        let mut validity = Image::new(self.res, self.res, 1);
        validity.data.copy_from_slice(&self.validity);
        UvImage { color, validity }
    }
}

/// Reprojects an image of the posed mesh into its UV chart: rasterizes the
/// mesh at the source resolution, visibility-tests every texel, and
/// bilinearly samples the source where visible. Occluded or off-frame
/// texels are zero-filled with validity 0.
pub fn unwrap(source: &Image, mesh: &RiggedMesh, cam: &Camera, tex_res: usize) -> Result<UvImage> {
    let rm = rasterize(mesh, cam, source.w, source.h)?;
    Ok(unwrap_plan(mesh, cam, &rm, tex_res).apply(source))
}
