//! Wavefront OBJ geometry plus a JSON sidecar carrying the rig tables.
//!
//! The OBJ holds `v`/`vt`/`f` records with per-vertex UV (face records use
//! matching position and texture indices). The sidecar `<stem>.rig.json`
//! holds skinning weights, blendshapes, the joint regressor, joint parents
//! and part labels. Floats are written with 17 significant digits so a
//! save/load cycle is byte-stable.

use super::{PartLabel, RiggedMesh};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn sidecar_path(obj_path: &Path) -> PathBuf {
    obj_path.with_extension("rig.json")
}

/// Writes `mesh` as OBJ plus its rig sidecar next to it.
pub fn save_mesh(mesh: &RiggedMesh, path: &Path) -> Result<()> {
    let mut obj = String::with_capacity(mesh.n_vertices() * 64);
    for v in &mesh.vertices {
        writeln!(obj, "v {:.12} {:.12} {:.12}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.uv {
        writeln!(obj, "vt {:.12} {:.12}", t[0], t[1]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(
            obj,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            f[0] + 1,
            f[1] + 1,
            f[1] + 1,
            f[2] + 1,
            f[2] + 1
        )
        .unwrap();
    }
    std::fs::write(path, obj).map_err(|e| Error::io(path, e))?;

    let side = sidecar_path(path);
    let json = sidecar_to_json(mesh);
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn push_f64_array(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{v:.16e}").unwrap();
    }
    out.push(']');
}

fn sidecar_to_json(mesh: &RiggedMesh) -> String {
    let n = mesh.n_vertices();
    let j = mesh.n_joints();
    let mut s = String::with_capacity(mesh.skin_weights.len() * 26);
    s.push_str("{\n  \"schema\": 1,\n");
    write!(s, "  \"shape_count\": {},\n", mesh.n_shape).unwrap();
    s.push_str("  \"joint_parents\": [");
    for (i, p) in mesh.joint_parents.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{p}").unwrap();
    }
    s.push_str("],\n  \"part_labels\": [");
    for (i, l) in mesh.part_labels.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "\"{}\"", l.name()).unwrap();
    }
    s.push_str("],\n  \"skin_weights\": [");
    for v in 0..n {
        if v > 0 {
            s.push(',');
        }
        s.push_str("\n    ");
        push_f64_array(&mut s, mesh.weights_row(v));
    }
    s.push_str("\n  ],\n  \"joint_regressor\": [");
    for ji in 0..j {
        if ji > 0 {
            s.push(',');
        }
        s.push_str("\n    ");
        push_f64_array(&mut s, mesh.regressor_row(ji));
    }
    s.push_str("\n  ],\n  \"blendshapes\": [");
    for k in 0..mesh.n_blendshapes() {
        if k > 0 {
            s.push(',');
        }
        s.push_str("\n    ");
        push_f64_array(&mut s, mesh.blendshape(k));
    }
    s.push_str("\n  ]\n}\n");
    s
}

fn as_f64_vec(v: &serde_json::Value, what: &str, path: &Path) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::parse(path, format!("{what} is not an array")))?
        .iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::parse(path, format!("{what} holds a non-number")))
        })
        .collect()
}

/// Loads an OBJ written by [`save_mesh`] together with its rig sidecar.
pub fn load_mesh(path: &Path) -> Result<RiggedMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let mut it = line.split_whitespace();
        let bad = |msg: &str| Error::parse(path, format!("line {}: {msg}", lineno + 1));
        match it.next() {
            Some("v") => {
                let mut p = [0.0f64; 3];
                for c in &mut p {
                    *c = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("malformed vertex"))?;
                }
                vertices.push(p);
            }
            Some("vt") => {
                let mut t2 = [0.0f64; 2];
                for c in &mut t2 {
                    *c = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("malformed texture coordinate"))?;
                }
                uv.push(t2);
            }
            Some("f") => {
                let mut idx = [0usize; 3];
                for c in &mut idx {
                    let token = it.next().ok_or_else(|| bad("face needs 3 corners"))?;
                    let mut parts = token.split('/');
                    let vi: usize = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("malformed face index"))?;
                    if let Some(ti) = parts.next() {
                        if !ti.is_empty() && ti.parse::<usize>() != Ok(vi) {
                            return Err(bad("texture index must match vertex index"));
                        }
                    }
                    if vi == 0 {
                        return Err(bad("face indices are 1-based"));
                    }
                    *c = vi - 1;
                }
                if it.next().is_some() {
                    return Err(bad("only triangles are supported"));
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    if uv.is_empty() {
        uv = vec![[0.0, 0.0]; vertices.len()];
    }
    if uv.len() != vertices.len() {
        return Err(Error::parse(
            path,
            format!("{} uv records for {} vertices", uv.len(), vertices.len()),
        ));
    }

    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(&side, e.to_string()))?;
    let field = |name: &str| {
        doc.get(name)
            .ok_or_else(|| Error::parse(&side, format!("missing field {name}")))
    };
    let n_shape = field("shape_count")?
        .as_u64()
        .ok_or_else(|| Error::parse(&side, "shape_count is not an integer"))? as usize;
    let joint_parents: Vec<i32> = field("joint_parents")?
        .as_array()
        .ok_or_else(|| Error::parse(&side, "joint_parents is not an array"))?
        .iter()
        .map(|v| {
            v.as_i64()
                .map(|x| x as i32)
                .ok_or_else(|| Error::parse(&side, "joint_parents holds a non-integer"))
        })
        .collect::<Result<_>>()?;
    let part_labels: Vec<PartLabel> = field("part_labels")?
        .as_array()
        .ok_or_else(|| Error::parse(&side, "part_labels is not an array"))?
        .iter()
        .map(|v| {
            v.as_str()
                .and_then(PartLabel::from_name)
                .ok_or_else(|| Error::parse(&side, format!("unknown part label {v}")))
        })
        .collect::<Result<_>>()?;
    let rows = |name: &str| -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        for row in field(name)?
            .as_array()
            .ok_or_else(|| Error::parse(&side, format!("{name} is not an array")))?
        {
            flat.extend(as_f64_vec(row, name, &side)?);
        }
        Ok(flat)
    };
    let mesh = RiggedMesh {
        vertices,
        faces,
        uv,
        skin_weights: rows("skin_weights")?,
        blendshapes: rows("blendshapes")?,
        n_shape,
        joint_regressor: rows("joint_regressor")?,
        joint_parents,
        part_labels,
    };
    mesh.validate()?;
    Ok(mesh)
}
