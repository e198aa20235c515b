//! Procedural test-scale head rig: a shaped lat-long sphere (1001 vertices
//! at desk scale, back seam, 4 joints, 8 blendshapes) that is fully
//! deterministic so tests can rely on exact geometry.

use super::{PartLabel, RiggedMesh};
use crate::pipeline::Profile;

/// Tessellation per profile: latitude bands (rings sit at
/// `theta = PI * i / (rings + 1)` for `i = 1..=rings`) and longitude
/// segments (each ring stores `cols + 1` vertices so the seam at the back
/// of the head carries its own UV column).
fn grid_size(profile: Profile) -> (usize, usize) {
    match profile {
        Profile::Desk => (27, 36),
        Profile::Paper => (70, 72),
    }
}

pub(crate) fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Eye centers in `(theta, azimuth)`; azimuth 0 faces +z.
const EYES: [[f64; 2]; 2] = [[1.25, 0.38], [1.25, -0.38]];

fn unit_dir(theta: f64, azim: f64) -> [f64; 3] {
    [
        theta.sin() * azim.sin(),
        theta.cos(),
        theta.sin() * azim.cos(),
    ]
}

fn angle_to_nearest_eye(theta: f64, azim: f64) -> f64 {
    let d = unit_dir(theta, azim);
    EYES.iter()
        .map(|&[te, ae]| {
            let e = unit_dir(te, ae);
            (d[0] * e[0] + d[1] * e[1] + d[2] * e[2])
                .clamp(-1.0, 1.0)
                .acos()
        })
        .fold(f64::INFINITY, f64::min)
}

fn position(theta: f64, azim: f64) -> [f64; 3] {
    let d = unit_dir(theta, azim);
    // Ellipsoidal skull, narrowed toward the neck, slightly flattened back.
    let neck = smoothstep(2.30, 2.95, theta);
    let sx = 0.72 * (1.0 - 0.40 * neck);
    let sz = 0.80 * (1.0 - 0.40 * neck) * (1.0 - 0.06 * smoothstep(-0.2, -0.9, d[2]));
    let sy = 0.95;
    // Mild brow/cheek relief keeps the surface from being a pure quadric.
    let relief = 1.0 + 0.025 * (3.0 * theta).sin() * azim.cos().max(0.0);
    [sx * d[0] * relief, sy * d[1], sz * d[2] * relief]
}

fn label(theta: f64, azim: f64) -> PartLabel {
    let eye = angle_to_nearest_eye(theta, azim);
    if eye < 0.10 {
        PartLabel::Eyeball
    } else if eye < 0.17 {
        PartLabel::Eyelid
    } else if theta < 0.95 {
        PartLabel::Hair
    } else if theta > 2.45 {
        PartLabel::Neck
    } else if azim.abs() < 0.80 && theta < 2.15 {
        PartLabel::Face
    } else {
        PartLabel::Other
    }
}

fn skin_scores(theta: f64, azim: f64) -> [f64; 4] {
    let eye = angle_to_nearest_eye(theta, azim);
    let jaw = smoothstep(1.75, 2.05, theta)
        * (1.0 - smoothstep(2.30, 2.60, theta))
        * (1.0 - smoothstep(0.45, 0.85, azim.abs()));
    [
        0.35,
        1.6 * smoothstep(2.20, 2.75, theta),
        1.2 * jaw,
        2.0 * (1.0 - smoothstep(0.10, 0.18, eye)),
    ]
}

/// Per-vertex deformation budget by part; identity blendshapes are scaled
/// so that any coefficient vector in `[-1,1]^4` stays inside it.
fn shape_cap(l: PartLabel) -> f64 {
    l.deformation_limit()
}

/// Builds the deterministic test head at the given profile's tessellation.
/// Every call with the same profile returns the same rig.
pub fn make_mini_rig(profile: Profile) -> RiggedMesh {
    let (rings, cols) = grid_size(profile);
    let n_shape = 4usize;
    let n_expr = 4usize;
    let n_joints = 4usize;

    // Vertex layout: `rings` rings of `cols + 1` vertices, then two poles.
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut sphere = Vec::new(); // (theta, azimuth) per vertex
    for i in 1..=rings {
        let theta = std::f64::consts::PI * i as f64 / (rings + 1) as f64;
        for jj in 0..=cols {
            let u = jj as f64 / cols as f64;
            let azim = 2.0 * std::f64::consts::PI * (u - 0.5);
            vertices.push(position(theta, azim));
            uv.push([u, theta / std::f64::consts::PI]);
            sphere.push((theta, azim));
        }
    }
    let top = vertices.len();
    vertices.push(position(1e-9, 0.0));
    uv.push([0.5, 0.0]);
    sphere.push((1e-9, 0.0));
    let bottom = vertices.len();
    vertices.push(position(std::f64::consts::PI - 1e-9, 0.0));
    uv.push([0.5, 1.0]);
    sphere.push((std::f64::consts::PI - 1e-9, 0.0));
    let n = vertices.len();

    let ring = |i: usize, jj: usize| (i - 1) * (cols + 1) + jj;
    let mut faces = Vec::new();
    for i in 1..rings {
        for jj in 0..cols {
            let (t0, t1) = (ring(i, jj), ring(i, jj + 1));
            let (b0, b1) = (ring(i + 1, jj), ring(i + 1, jj + 1));
            faces.push([t0, b0, b1]);
            faces.push([t0, b1, t1]);
        }
    }
    for jj in 0..cols {
        faces.push([top, ring(1, jj), ring(1, jj + 1)]);
        faces.push([bottom, ring(rings, jj + 1), ring(rings, jj)]);
    }

    let part_labels: Vec<PartLabel> = sphere.iter().map(|&(t, a)| label(t, a)).collect();

    let mut skin_weights = vec![0.0f64; n * n_joints];
    for (v, &(t, a)) in sphere.iter().enumerate() {
        let s = skin_scores(t, a);
        let total: f64 = s.iter().sum();
        for (jj, &sv) in s.iter().enumerate() {
            skin_weights[v * n_joints + jj] = sv / total;
        }
    }

    // Joints are uniform averages over deterministic vertex bands, so each
    // regressed joint is a convex combination of vertices.
    let mut joint_regressor = vec![0.0f64; n_joints * n];
    let bands: [Box<dyn Fn(f64, f64) -> bool>; 4] = [
        Box::new(|t, _a| (1.9..2.35).contains(&t)),
        Box::new(|t, _a| t > 2.65),
        Box::new(|t, a| (1.9..2.2).contains(&t) && a.abs() < 0.6),
        Box::new(|t, a| angle_to_nearest_eye(t, a) < 0.17),
    ];
    for (jj, band) in bands.iter().enumerate() {
        let members: Vec<usize> = sphere
            .iter()
            .enumerate()
            .filter(|(_, &(t, a))| band(t, a))
            .map(|(v, _)| v)
            .collect();
        assert!(!members.is_empty());
        for v in members.iter() {
            joint_regressor[jj * n + v] = 1.0 / members.len() as f64;
        }
    }
    let joint_parents = vec![-1, 0, 0, 0];

    // Identity shapes: radial fields scaled per part so any coefficient in
    // [-1,1] stays within the part budget; expressions: jaw open, smile,
    // brow raise, blink. Eyeballs stay rigid under every blendshape.
    let k_total = n_shape + n_expr;
    let mut blendshapes = vec![0.0f64; k_total * n * 3];
    for (v, &(t, a)) in sphere.iter().enumerate() {
        let d = unit_dir(t, a);
        let cap = shape_cap(part_labels[v]);
        let amp = 0.8 * cap / n_shape as f64;
        let eye = angle_to_nearest_eye(t, a);
        let not_eye = smoothstep(0.17, 0.24, eye);
        let shape_profiles = [
            (2.0 * a).cos() * t.sin(),
            (3.0 * t).cos(),
            (2.0 * t).sin() * a.cos(),
            1.0 - smoothstep(0.80, 1.10, t),
        ];
        for (k, &p) in shape_profiles.iter().enumerate() {
            for ax in 0..3 {
                blendshapes[(k * n + v) * 3 + ax] = amp * p * d[ax];
            }
        }
        let jaw = smoothstep(1.75, 2.05, t)
            * (1.0 - smoothstep(2.30, 2.60, t))
            * (1.0 - smoothstep(0.45, 0.85, a.abs()))
            * not_eye;
        let corner = (-((t - 1.95) * (t - 1.95) / 0.02 + (a.abs() - 0.45) * (a.abs() - 0.45) / 0.03))
            .exp()
            * not_eye;
        let brow = (-((t - 1.10) * (t - 1.10) / 0.02)).exp()
            * (1.0 - smoothstep(0.8, 1.1, a.abs()))
            * not_eye;
        let lid = if part_labels[v] == PartLabel::Eyelid { 1.0 } else { 0.0 };
        let expr: [[f64; 3]; 4] = [
            [0.0, -0.050 * jaw, 0.010 * jaw],
            [0.020 * corner * a.signum(), 0.018 * corner, 0.0],
            [0.0, 0.015 * brow, 0.006 * brow],
            [-0.008 * lid * d[0], -0.008 * lid * d[1], -0.008 * lid * d[2]],
        ];
        for (e, off) in expr.iter().enumerate() {
            let k = n_shape + e;
            for ax in 0..3 {
                blendshapes[(k * n + v) * 3 + ax] = off[ax];
            }
        }
    }

    let mesh = RiggedMesh {
        vertices,
        faces,
        uv,
        skin_weights,
        blendshapes,
        n_shape,
        joint_regressor,
        joint_parents,
        part_labels,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_rig_satisfies_all_invariants() {
        let m = make_mini_rig(Profile::Desk);
        m.validate().unwrap();
        assert_eq!(m.n_vertices(), 27 * 37 + 2);
        assert_eq!(m.n_joints(), 4);
        assert_eq!(m.n_blendshapes(), 8);
        assert_eq!(m.n_shape, 4);
        assert!((800..=2000).contains(&m.n_vertices()));
    }

    #[test]
    fn paper_profile_rig_is_larger_and_still_valid() {
        let m = make_mini_rig(Profile::Paper);
        m.validate().unwrap();
        assert!(m.n_vertices() > 5000, "got {}", m.n_vertices());
    }

    #[test]
    fn mini_rig_is_deterministic() {
        let a = make_mini_rig(Profile::Desk);
        let b = make_mini_rig(Profile::Desk);
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.skin_weights, b.skin_weights);
        assert_eq!(a.blendshapes, b.blendshapes);
    }

    #[test]
    fn vertices_fit_in_unit_cube() {
        let m = make_mini_rig(Profile::Desk);
        for v in &m.vertices {
            for c in v {
                assert!(c.abs() <= 1.0, "{v:?}");
            }
        }
    }

    #[test]
    fn identity_shapes_respect_part_budgets() {
        let m = make_mini_rig(Profile::Desk);
        // Worst-case coefficient vector in [-1,1]^4: sum of magnitudes per
        // vertex must stay within the part budget.
        for v in 0..m.n_vertices() {
            let mut worst = 0.0f64;
            for k in 0..m.n_shape {
                let b = &m.blendshape(k)[v * 3..v * 3 + 3];
                worst += (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            }
            let cap = shape_cap(m.part_labels[v]);
            assert!(worst <= cap + 1e-12, "vertex {v}: {worst} > {cap}");
        }
    }

    #[test]
    fn eyeballs_are_rigid_under_all_blendshapes() {
        let m = make_mini_rig(Profile::Desk);
        for (v, &l) in m.part_labels.iter().enumerate() {
            if l != PartLabel::Eyeball {
                continue;
            }
            for k in 0..m.n_blendshapes() {
                let b = &m.blendshape(k)[v * 3..v * 3 + 3];
                assert_eq!(b, &[0.0, 0.0, 0.0], "shape {k} moves eyeball {v}");
            }
        }
    }

    #[test]
    fn every_vertex_is_referenced() {
        let m = make_mini_rig(Profile::Desk);
        let mut seen = vec![false; m.n_vertices()];
        for f in &m.faces {
            for &v in f {
                seen[v] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn all_part_labels_appear() {
        let m = make_mini_rig(Profile::Desk);
        for l in PartLabel::ALL {
            assert!(
                m.part_labels.iter().any(|&x| x == l),
                "missing label {}",
                l.name()
            );
        }
    }
}
