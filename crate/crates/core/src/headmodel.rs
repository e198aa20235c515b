//! Parametric head model mathematics: blendshape application, joint
//! regression, linear blend skinning, pose parameters with their pinhole
//! camera, and JSON serialization for both.

use crate::assets::RiggedMesh;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Pinhole camera: intrinsics in pixels plus world-to-camera extrinsics.
/// Camera space follows the computer-vision convention: +x right, +y down,
/// +z forward; a world point `p` maps to `rot * p + trans`, then to pixel
/// `(fx*x/z + cx, fy*y/z + cy)`. Pixel (0,0) is the top-left corner and
/// pixel centers sit at half-integers.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / l, v[1] / l, v[2] / l]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl Camera {
    /// Camera at `eye` looking toward `target` (world +y treated as up),
    /// with a vertical field of view in degrees for a `width x height`
    /// image, square pixels, centered principal point.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        fov_y_deg: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = norm3([
            target[0] - eye[0],
            target[1] - eye[1],
            target[2] - eye[2],
        ]);
        let right = norm3(cross3(fwd, [0.0, 1.0, 0.0]));
        let down = cross3(fwd, right);
        let rot = [right, down, fwd];
        let trans = [
            -(rot[0][0] * eye[0] + rot[0][1] * eye[1] + rot[0][2] * eye[2]),
            -(rot[1][0] * eye[0] + rot[1][1] * eye[1] + rot[1][2] * eye[2]),
            -(rot[2][0] * eye[0] + rot[2][1] * eye[1] + rot[2][2] * eye[2]),
        ];
        let fy = 0.5 * height as f64 / (fov_y_deg.to_radians() * 0.5).tan();
        Camera {
            fx: fy,
            fy,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            rot,
            trans,
        }
    }

    /// Checks intrinsics are nondegenerate and the rotation is orthonormal
    /// within 1e-9.
    pub fn validate(&self) -> Result<()> {
        if self.fx == 0.0 || self.fy == 0.0 {
            return Err(Error::invariant("camera has zero focal length"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.rot[i][k] * self.rot[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return Err(Error::invariant(format!(
                        "camera rotation is not orthonormal: row{i}.row{j} = {dot}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// World point to camera space.
    pub fn to_view(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.rot[0][0] * p[0] + self.rot[0][1] * p[1] + self.rot[0][2] * p[2] + self.trans[0],
            self.rot[1][0] * p[0] + self.rot[1][1] * p[1] + self.rot[1][2] * p[2] + self.trans[1],
            self.rot[2][0] * p[0] + self.rot[2][1] * p[1] + self.rot[2][2] * p[2] + self.trans[2],
        ]
    }

    /// Camera-space point to continuous pixel coordinates (caller ensures
    /// `view[2] > 0`).
    pub fn view_to_pixel(&self, view: [f64; 3]) -> [f64; 2] {
        [
            self.fx * view[0] / view[2] + self.cx,
            self.fy * view[1] / view[2] + self.cy,
        ]
    }

    /// Camera origin in world coordinates (`-R^T t`).
    pub fn position(&self) -> [f64; 3] {
        let t = self.trans;
        [
            -(self.rot[0][0] * t[0] + self.rot[1][0] * t[1] + self.rot[2][0] * t[2]),
            -(self.rot[0][1] * t[0] + self.rot[1][1] * t[1] + self.rot[2][1] * t[2]),
            -(self.rot[0][2] * t[0] + self.rot[1][2] * t[1] + self.rot[2][2] * t[2]),
        ]
    }
}

/// Animation inputs for one frame: identity-shape coefficients (used when
/// constructing ground-truth geometry; reconstruction never sets them),
/// expression coefficients, per-joint axis-angle rotations, and the camera
/// of the input view. The coefficient split must satisfy
/// `shape_coeffs.len() + expr_coeffs.len() == K_b` of the rig.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub shape_coeffs: Vec<f64>,
    pub expr_coeffs: Vec<f64>,
    pub joint_rotations: Vec<[f64; 3]>,
    pub camera: Camera,
}

impl PoseParams {
    /// Identity pose sized for `mesh`, with a frontal default camera for a
    /// square image of side `res`.
    pub fn rest(mesh: &RiggedMesh, res: usize) -> Self {
        PoseParams {
            shape_coeffs: vec![0.0; mesh.n_shape],
            expr_coeffs: vec![0.0; mesh.n_expr()],
            joint_rotations: vec![[0.0; 3]; mesh.n_joints()],
            camera: Camera::look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], 40.0, res, res),
        }
    }

    pub fn validate_for(&self, mesh: &RiggedMesh) -> Result<()> {
        if self.shape_coeffs.len() + self.expr_coeffs.len() != mesh.n_blendshapes() {
            return Err(Error::invariant(format!(
                "coefficient split {}+{} does not cover the {}-blendshape basis",
                self.shape_coeffs.len(),
                self.expr_coeffs.len(),
                mesh.n_blendshapes()
            )));
        }
        if self.joint_rotations.len() != mesh.n_joints() {
            return Err(Error::invariant(format!(
                "{} joint rotations for {} joints",
                self.joint_rotations.len(),
                mesh.n_joints()
            )));
        }
        self.camera.validate()
    }
}

fn fmt_f64_list(out: &mut String, xs: impl Iterator<Item = f64>) {
    out.push('[');
    for (i, v) in xs.enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push(']');
}

/// Writes pose parameters (camera included) as JSON with 17-significant-
/// digit floats.
pub fn save_params(params: &PoseParams, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("{\n  \"shape_coeffs\": ");
    fmt_f64_list(&mut s, params.shape_coeffs.iter().copied());
    s.push_str(",\n  \"expr_coeffs\": ");
    fmt_f64_list(&mut s, params.expr_coeffs.iter().copied());
    s.push_str(",\n  \"joint_rotations\": [");
    for (i, r) in params.joint_rotations.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str("\n    ");
        fmt_f64_list(&mut s, r.iter().copied());
    }
    let cam = &params.camera;
    write!(
        s,
        "\n  ],\n  \"camera\": {{\n    \"fx\": {:.16e},\n    \"fy\": {:.16e},\n    \"cx\": {:.16e},\n    \"cy\": {:.16e},\n    \"rotation\": [",
        cam.fx, cam.fy, cam.cx, cam.cy
    )
    .unwrap();
    for (i, row) in cam.rot.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str("\n      ");
        fmt_f64_list(&mut s, row.iter().copied());
    }
    s.push_str("\n    ],\n    \"translation\": ");
    fmt_f64_list(&mut s, cam.trans.iter().copied());
    s.push_str("\n  }\n}\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn json_f64_list(v: &serde_json::Value, what: &str, path: &Path) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::parse(path, format!("{what} is not an array")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::parse(path, format!("{what} holds a non-number")))
        })
        .collect()
}

pub fn load_params(path: &Path) -> Result<PoseParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let field = |doc: &serde_json::Value, name: &str| -> Result<serde_json::Value> {
        doc.get(name)
            .cloned()
            .ok_or_else(|| Error::parse(path, format!("missing field {name}")))
    };
    let mut joint_rotations = Vec::new();
    for row in field(&doc, "joint_rotations")?
        .as_array()
        .ok_or_else(|| Error::parse(path, "joint_rotations is not an array"))?
    {
        let r = json_f64_list(row, "joint_rotations row", path)?;
        if r.len() != 3 {
            return Err(Error::parse(path, "joint_rotations row must be 3 numbers"));
        }
        joint_rotations.push([r[0], r[1], r[2]]);
    }
    let cam_doc = field(&doc, "camera")?;
    let num = |name: &str| -> Result<f64> {
        cam_doc
            .get(name)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::parse(path, format!("camera missing number {name}")))
    };
    let mut rot = [[0.0f64; 3]; 3];
    let rot_doc = field(&cam_doc, "rotation")?;
    let rows = rot_doc
        .as_array()
        .ok_or_else(|| Error::parse(path, "camera rotation is not an array"))?;
    if rows.len() != 3 {
        return Err(Error::parse(path, "camera rotation must be 3 rows"));
    }
    for (i, row) in rows.iter().enumerate() {
        let r = json_f64_list(row, "camera rotation row", path)?;
        if r.len() != 3 {
            return Err(Error::parse(path, "camera rotation row must be 3 numbers"));
        }
        rot[i] = [r[0], r[1], r[2]];
    }
    let t = json_f64_list(&field(&cam_doc, "translation")?, "camera translation", path)?;
    if t.len() != 3 {
        return Err(Error::parse(path, "camera translation must be 3 numbers"));
    }
    let params = PoseParams {
        shape_coeffs: json_f64_list(&field(&doc, "shape_coeffs")?, "shape_coeffs", path)?,
        expr_coeffs: json_f64_list(&field(&doc, "expr_coeffs")?, "expr_coeffs", path)?,
        joint_rotations,
        camera: Camera {
            fx: num("fx")?,
            fy: num("fy")?,
            cx: num("cx")?,
            cy: num("cy")?,
            rot,
            trans: [t[0], t[1], t[2]],
        },
    };
    params.camera.validate()?;
    Ok(params)
}

/// Template vertices plus all blendshape offsets selected by the
/// concatenated `[shape_coeffs, expr_coeffs]` vector.
pub fn apply_blendshapes(mesh: &RiggedMesh, params: &PoseParams) -> Result<Vec<[f64; 3]>> {
    if params.shape_coeffs.len() + params.expr_coeffs.len() != mesh.n_blendshapes() {
        return Err(Error::invariant(format!(
            "coefficient split {}+{} does not cover the {}-blendshape basis",
            params.shape_coeffs.len(),
            params.expr_coeffs.len(),
            mesh.n_blendshapes()
        )));
    }
    let mut out = mesh.vertices.clone();
    let coeffs = params
        .shape_coeffs
        .iter()
        .chain(params.expr_coeffs.iter());
    for (k, &c) in coeffs.enumerate() {
        if c == 0.0 {
            continue;
        }
        let b = mesh.blendshape(k);
        for (v, p) in out.iter_mut().enumerate() {
            p[0] += c * b[v * 3];
            p[1] += c * b[v * 3 + 1];
            p[2] += c * b[v * 3 + 2];
        }
    }
    Ok(out)
}

/// Joint positions as the regressor applied to `verts`.
pub fn regress_joints(mesh: &RiggedMesh, verts: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut joints = vec![[0.0f64; 3]; mesh.n_joints()];
    for (jj, joint) in joints.iter_mut().enumerate() {
        for (w, v) in mesh.regressor_row(jj).iter().zip(verts) {
            joint[0] += w * v[0];
            joint[1] += w * v[1];
            joint[2] += w * v[2];
        }
    }
    joints
}

/// Rotation matrix for an axis-angle vector (angle is the vector norm);
/// exactly the identity for zero rotations.
pub fn rodrigues(aa: [f64; 3]) -> [[f64; 3]; 3] {
    let angle = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    if angle < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [aa[0] / angle, aa[1] / angle, aa[2] / angle];
    let (s, c) = angle.sin_cos();
    let mut r = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            r[i][j] = eye * c + (1.0 - c) * k[i] * k[j];
        }
    }
    r[0][1] += -s * k[2];
    r[0][2] += s * k[1];
    r[1][0] += s * k[2];
    r[1][2] += -s * k[0];
    r[2][0] += -s * k[1];
    r[2][1] += s * k[0];
    r
}

fn mat_mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec3(a: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Per-joint skinning transforms `(R, t)` mapping rest-space points: joint
/// `j` contributes `G_j = G_parent ∘ (T(j) R_j T(-j))`, i.e. each joint
/// rotates about its own rest position and transforms compose down the
/// kinematic tree. Parents form a rooted forest (`-1` marks roots); a cycle
/// is an error. Zero rotations yield exact identity transforms.
pub fn pose_transforms(
    joints: &[[f64; 3]],
    parents: &[i32],
    rotations: &[[f64; 3]],
) -> Result<Vec<([[f64; 3]; 3], [f64; 3])>> {
    let n = joints.len();
    if parents.len() != n || rotations.len() != n {
        return Err(Error::invariant(format!(
            "{n} joints with {} parents and {} rotations",
            parents.len(),
            rotations.len()
        )));
    }
    let mut out: Vec<Option<([[f64; 3]; 3], [f64; 3])>> = vec![None; n];
    for start in 0..n {
        // Walk up to the first resolved ancestor, then unwind.
        let mut chain = Vec::new();
        let mut j = start as i32;
        while j >= 0 && out[j as usize].is_none() {
            chain.push(j as usize);
            if chain.len() > n {
                return Err(Error::invariant("joint parents contain a cycle"));
            }
            j = parents[j as usize];
        }
        if j >= 0 && chain.contains(&(j as usize)) {
            return Err(Error::invariant("joint parents contain a cycle"));
        }
        for &jj in chain.iter().rev() {
            let r = rodrigues(rotations[jj]);
            let pivot = joints[jj];
            let local_t = [
                pivot[0] - (r[0][0] * pivot[0] + r[0][1] * pivot[1] + r[0][2] * pivot[2]),
                pivot[1] - (r[1][0] * pivot[0] + r[1][1] * pivot[1] + r[1][2] * pivot[2]),
                pivot[2] - (r[2][0] * pivot[0] + r[2][1] * pivot[1] + r[2][2] * pivot[2]),
            ];
            let p = parents[jj];
            out[jj] = Some(if p < 0 {
                (r, local_t)
            } else {
                let (pr, pt) = out[p as usize].expect("parent resolved first");
                let rt = mat_vec3(&pr, local_t);
                (
                    mat_mul3(&pr, &r),
                    [rt[0] + pt[0], rt[1] + pt[1], rt[2] + pt[2]],
                )
            });
        }
    }
    Ok(out.into_iter().map(|t| t.unwrap()).collect())
}

/// Linear blend skinning: `v' = Σ_j w_vj (R_j v + t_j)`. When every
/// transform is exactly the identity the input is returned bit-for-bit, so
/// the rest pose is an exact fixed point.
pub fn lbs_apply(
    verts: &[[f64; 3]],
    skin_weights: &[f64],
    transforms: &[([[f64; 3]; 3], [f64; 3])],
) -> Vec<[f64; 3]> {
    if transforms
        .iter()
        .all(|&(r, t)| r == IDENTITY3 && t == [0.0; 3])
    {
        return verts.to_vec();
    }
    let nj = transforms.len();
    verts
        .iter()
        .enumerate()
        .map(|(vi, &p)| {
            let mut out = [0.0f64; 3];
            for (jj, &(r, t)) in transforms.iter().enumerate() {
                let w = skin_weights[vi * nj + jj];
                if w == 0.0 {
                    continue;
                }
                let rp = mat_vec3(&r, p);
                out[0] += w * (rp[0] + t[0]);
                out[1] += w * (rp[1] + t[1]);
                out[2] += w * (rp[2] + t[2]);
            }
            out
        })
        .collect()
}

/// Free-standing skinning entry point: composes joint transforms down the
/// kinematic tree and applies them. Errors on a cyclic parent graph.
pub fn lbs(
    verts: &[[f64; 3]],
    skin_weights: &[f64],
    joints: &[[f64; 3]],
    rotations: &[[f64; 3]],
    parents: &[i32],
) -> Result<Vec<[f64; 3]>> {
    if skin_weights.len() != verts.len() * joints.len() {
        return Err(Error::invariant(format!(
            "{} weights for {} vertices x {} joints",
            skin_weights.len(),
            verts.len(),
            joints.len()
        )));
    }
    let transforms = pose_transforms(joints, parents, rotations)?;
    Ok(lbs_apply(verts, skin_weights, &transforms))
}

/// Poses a canonical-space vertex set (the rig's tables describe it): adds
/// expression blendshapes, regresses joints from the *unexpressed*
/// vertices, then skins.
pub fn animate_vertices(
    mesh: &RiggedMesh,
    verts: &[[f64; 3]],
    params: &PoseParams,
) -> Result<Vec<[f64; 3]>> {
    params.validate_for(mesh)?;
    if verts.len() != mesh.n_vertices() {
        return Err(Error::invariant(format!(
            "animating {} vertices with a {}-vertex rig",
            verts.len(),
            mesh.n_vertices()
        )));
    }
    let joints = regress_joints(mesh, verts);
    let transforms = pose_transforms(&joints, &mesh.joint_parents, &params.joint_rotations)?;
    let k_expr_base = mesh.n_blendshapes() - params.expr_coeffs.len();
    let mut expressed = verts.to_vec();
    for (e, &c) in params.expr_coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let b = mesh.blendshape(k_expr_base + e);
        for (v, p) in expressed.iter_mut().enumerate() {
            p[0] += c * b[v * 3];
            p[1] += c * b[v * 3 + 1];
            p[2] += c * b[v * 3 + 2];
        }
    }
    Ok(lbs_apply(&expressed, &mesh.skin_weights, &transforms))
}

/// Animates `verts` (canonical positions plus any accumulated deformation)
/// and returns a mesh sharing every attribute with `mesh` except the posed
/// vertex positions.
pub fn animate(mesh: &RiggedMesh, verts: &[[f64; 3]], params: &PoseParams) -> Result<RiggedMesh> {
    let posed = animate_vertices(mesh, verts, params)?;
    let mut out = mesh.clone();
    out.vertices = posed;
    Ok(out)
}

/// Per-vertex affine form of [`animate_vertices`] around fixed joint
/// states: returns `(mats, offs)` with `mats` flattened `n x 3 x 3`
/// row-major and `offs` `n x 3`, such that `posed_i = mats_i * v_i +
/// offs_i` exactly for the vertex set the affine was built from. Because
/// skinning is linear in vertex positions at fixed joint transforms,
/// posing can participate in gradient computations as a constant row map.
pub fn pose_affine(
    mesh: &RiggedMesh,
    verts: &[[f64; 3]],
    params: &PoseParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate_for(mesh)?;
    let n = mesh.n_vertices();
    let nj = mesh.n_joints();
    let joints = regress_joints(mesh, verts);
    let transforms = pose_transforms(&joints, &mesh.joint_parents, &params.joint_rotations)?;
    let k_expr_base = mesh.n_blendshapes() - params.expr_coeffs.len();
    let mut expr_off = vec![[0.0f64; 3]; n];
    for (e, &c) in params.expr_coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let b = mesh.blendshape(k_expr_base + e);
        for (v, p) in expr_off.iter_mut().enumerate() {
            p[0] += c * b[v * 3];
            p[1] += c * b[v * 3 + 1];
            p[2] += c * b[v * 3 + 2];
        }
    }
    let mut mats = vec![0.0f64; n * 9];
    let mut offs = vec![0.0f64; n * 3];
    for vi in 0..n {
        let mut a = [[0.0f64; 3]; 3];
        let mut t = [0.0f64; 3];
        for (jj, &(r, tj)) in transforms.iter().enumerate() {
            let w = mesh.skin_weights[vi * nj + jj];
            if w == 0.0 {
                continue;
            }
            for i in 0..3 {
                for k in 0..3 {
                    a[i][k] += w * r[i][k];
                }
                t[i] += w * tj[i];
            }
        }
        let ae = mat_vec3(&a, expr_off[vi]);
        for i in 0..3 {
            for k in 0..3 {
                mats[vi * 9 + i * 3 + k] = a[i][k];
            }
            offs[vi * 3 + i] = t[i] + ae[i];
        }
    }
    Ok((mats, offs))
}
