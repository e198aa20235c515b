//! Procedural ground-truth subjects: a seeded generator that shapes the
//! rig into a unique head, paints a detailed texture over its UV chart,
//! poses it, and renders the full supervision bundle (input image, mask,
//! normals, part map) with the same deterministic rasterizer the
//! reconstruction pipeline uses.

use super::{img_io, make_mini_rig, obj, Image, PartLabel, RiggedMesh};
use crate::headmodel::{animate, load_params, save_params, Camera, PoseParams};
use crate::raster::{
    rasterize, rasterize_uv, render_mask, render_normals, render_parts, shade_texture, UvImage,
};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// One generated subject: canonical ground-truth geometry (identity shapes
/// and hair variation baked into `gt_mesh.vertices`), its texture, the pose
/// and camera of the input view, and the rendered supervision images. The
/// `part_map` is a hard one-hot image in [`PartLabel::index`] channel order.
#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub gt_mesh: RiggedMesh,
    pub gt_texture: UvImage,
    pub pose_params: PoseParams,
    pub input_image: Image,
    pub fg_mask: Image,
    pub normal_map: Image,
    pub part_map: Image,
}

/// Extra radial displacement available to hair vertices on top of the
/// identity blendshapes. The blendshape budget already leaves this much
/// slack inside the hair deformation cap.
const HAIR_FIELD_AMP: f64 = 0.015;

fn unit_radial(p: [f64; 3]) -> [f64; 3] {
    let l = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt().max(1e-12);
    [p[0] / l, p[1] / l, p[2] / l]
}

/// Smooth scalar field in [-1, 1] over positions: a fixed low-order
/// trigonometric basis with subject-specific coefficients.
fn smooth_field(p: [f64; 3], coef: &[f64; 6]) -> f64 {
    let raw = coef[0] * (2.1 * p[0] + 0.7).sin()
        + coef[1] * (1.7 * p[1] - 0.3).cos()
        + coef[2] * (2.6 * p[2]).sin()
        + coef[3] * (1.9 * (p[0] + p[1])).cos()
        + coef[4] * (2.3 * (p[1] - p[2])).sin()
        + coef[5] * (1.5 * (p[0] * p[2]) + 1.1).cos();
    (raw / 6.0).clamp(-1.0, 1.0)
}

/// Per-part base colors for the texture (rgb in [0,1]).
fn part_tint(l: PartLabel) -> [f32; 3] {
    match l {
        PartLabel::Face => [0.78, 0.62, 0.54],
        PartLabel::Hair => [0.25, 0.17, 0.12],
        PartLabel::Neck => [0.72, 0.56, 0.48],
        PartLabel::Eyeball => [0.92, 0.92, 0.90],
        PartLabel::Eyelid => [0.70, 0.54, 0.47],
        PartLabel::Other => [0.65, 0.52, 0.46],
    }
}

/// Paints the ground-truth texture over the mesh's UV chart: per-part
/// tints, high-frequency stripes and checkers, band-limited noise (lightly
/// blurred), and a few glyph-like strips of random blocks. Texels outside
/// the chart are zero with validity 0.
fn paint_texture(mesh: &RiggedMesh, res: usize, rng: &mut ChaCha8Rng) -> UvImage {
    let uvr = rasterize_uv(&mesh.faces, &mesh.uv, res);
    // Per-texel part label from the chart (label of the max-bary corner).
    let mut label = vec![-1i32; res * res];
    for t in 0..res * res {
        let fi = uvr.face_id[t];
        if fi < 0 {
            continue;
        }
        let f = mesh.faces[fi as usize];
        let b = uvr.bary[t];
        let k = (0..3).max_by(|&i, &j| b[i].partial_cmp(&b[j]).unwrap()).unwrap();
        label[t] = mesh.part_labels[f[k]].index() as i32;
    }

    let stripe_freq = rng.gen_range(6.0..14.0);
    let stripe_dir = rng.gen_range(0.0..std::f64::consts::PI);
    let stripe_phase: [f64; 3] = [rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)];
    let checker_n = rng.gen_range(8..17) as f64;
    let tint_jitter: Vec<f32> = (0..PartLabel::ALL.len() * 3)
        .map(|_| rng.gen_range(-0.06f32..0.06))
        .collect();

    // Band-limited noise: white noise blurred twice with a 3x3 box.
    let mut noise: Vec<f32> = (0..res * res).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    for _ in 0..2 {
        let src = noise.clone();
        for y in 0..res {
            for x in 0..res {
                let mut acc = 0.0f32;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, res as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, res as i64 - 1) as usize;
                        acc += src[yy * res + xx];
                    }
                }
                noise[y * res + x] = acc / 9.0;
            }
        }
    }

    // Glyph-like strips: horizontal bands of random on/off blocks.
    let n_strips = 3usize;
    let strips: Vec<(f64, f64, Vec<bool>)> = (0..n_strips)
        .map(|_| {
            let v0 = rng.gen_range(0.15..0.75);
            let height = rng.gen_range(0.02..0.045);
            let blocks: Vec<bool> = (0..32).map(|_| rng.gen_bool(0.5)).collect();
            (v0, height, blocks)
        })
        .collect();

    let mut color = Image::new(res, res, 3);
    let mut validity = Image::new(res, res, 1);
    let (sdos, sdoc) = stripe_dir.sin_cos();
    for y in 0..res {
        for x in 0..res {
            let t = y * res + x;
            if label[t] < 0 {
                continue;
            }
            validity.data[t] = 1.0;
            let u = (x as f64 + 0.5) / res as f64;
            let v = (y as f64 + 0.5) / res as f64;
            let l = PartLabel::ALL[label[t] as usize];
            let tint = part_tint(l);
            let s = 2.0 * std::f64::consts::PI * stripe_freq * (u * sdoc + v * sdos);
            let checker = if ((u * checker_n) as i64 + (v * checker_n) as i64) % 2 == 0 {
                0.06f32
            } else {
                -0.06f32
            };
            let mut glyph = 0.0f32;
            for (v0, height, blocks) in &strips {
                if v >= *v0 && v < v0 + height {
                    let bi = ((u * blocks.len() as f64) as usize).min(blocks.len() - 1);
                    glyph = if blocks[bi] { 0.22 } else { -0.18 };
                }
            }
            let px = color.pixel_mut(y, x);
            for c in 0..3 {
                let stripe = 0.10 * (s + stripe_phase[c]).sin() as f32;
                let val = tint[c]
                    + tint_jitter[label[t] as usize * 3 + c]
                    + stripe
                    + checker
                    + 0.05 * noise[t]
                    + glyph;
                px[c] = val.clamp(0.05, 0.95);
            }
        }
    }
    UvImage { color, validity }
}

/// Generates the subject for `seed`: geometry within the per-part
/// deformation budgets, a painted texture at `resolution`, a sampled
/// expression/pose/camera, and the rendered `resolution x resolution`
/// supervision images. Identical seeds produce bit-identical subjects.
pub fn make_synthetic_subject(
    seed: u64,
    rig: &RiggedMesh,
    resolution: usize,
) -> Result<SyntheticSubject> {
    if resolution < 16 {
        return Err(Error::invariant(format!(
            "subject resolution {resolution} is too small"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Identity: blendshape coefficients plus a smooth hair-only field.
    let shape_coeffs: Vec<f64> = (0..rig.n_shape).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let hair_coef: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let mut gt_mesh = rig.clone();
    for (k, &c) in shape_coeffs.iter().enumerate() {
        let b = rig.blendshape(k);
        for (v, p) in gt_mesh.vertices.iter_mut().enumerate() {
            p[0] += c * b[v * 3];
            p[1] += c * b[v * 3 + 1];
            p[2] += c * b[v * 3 + 2];
        }
    }
    for (v, p) in gt_mesh.vertices.iter_mut().enumerate() {
        if rig.part_labels[v] != PartLabel::Hair {
            continue;
        }
        let d = unit_radial(rig.vertices[v]);
        let amp = HAIR_FIELD_AMP * smooth_field(rig.vertices[v], &hair_coef);
        p[0] += amp * d[0];
        p[1] += amp * d[1];
        p[2] += amp * d[2];
    }

    let gt_texture = paint_texture(rig, resolution, &mut rng);

    // Expression, skeletal pose, and camera of the input view.
    let expr_coeffs: Vec<f64> = (0..rig.n_expr()).map(|_| rng.gen_range(-0.6..0.6)).collect();
    let mut joint_rotations = vec![[0.0f64; 3]; rig.n_joints()];
    for r in joint_rotations.iter_mut().skip(1) {
        for a in r.iter_mut() {
            *a = rng.gen_range(-0.12..0.12);
        }
    }
    let yaw = rng.gen_range(-30.0f64..30.0).to_radians();
    let pitch = rng.gen_range(-10.0f64..10.0).to_radians();
    let dist = rng.gen_range(2.7..3.3);
    let eye = [
        dist * yaw.sin() * pitch.cos(),
        dist * pitch.sin(),
        dist * yaw.cos() * pitch.cos(),
    ];
    let camera = Camera::look_at(eye, [0.0, 0.05, 0.0], 40.0, resolution, resolution);
    let pose_params = PoseParams {
        shape_coeffs,
        expr_coeffs,
        joint_rotations,
        camera,
    };

    let posed = animate(&gt_mesh, &gt_mesh.vertices, &pose_params)?;
    let rm = rasterize(&posed, &pose_params.camera, resolution, resolution)?;
    let input_image = shade_texture(&rm, &gt_texture);
    let fg_mask = render_mask(&rm);
    let normal_map = render_normals(&rm);
    let part_map = render_parts(&rm);

    Ok(SyntheticSubject {
        gt_mesh,
        gt_texture,
        pose_params,
        input_image,
        fg_mask,
        normal_map,
        part_map,
    })
}

/// Convenience wrapper: desk-profile rig at the given resolution.
pub fn make_default_subject(seed: u64, resolution: usize) -> Result<SyntheticSubject> {
    let rig = make_mini_rig(crate::pipeline::Profile::Desk);
    make_synthetic_subject(seed, &rig, resolution)
}

/// Collapses a one-hot part image into a single-channel label-index map
/// (background -1), the storage form of the part supervision.
fn part_index_map(one_hot: &Image) -> Image {
    let c = one_hot.c;
    let mut out = Image::new(one_hot.h, one_hot.w, 1);
    for t in 0..one_hot.h * one_hot.w {
        let px = &one_hot.data[t * c..(t + 1) * c];
        out.data[t] = px
            .iter()
            .position(|&v| v > 0.5)
            .map(|i| i as f32)
            .unwrap_or(-1.0);
    }
    out
}

fn part_one_hot(index_map: &Image, channels: usize) -> Result<Image> {
    if index_map.c != 1 {
        return Err(Error::invariant("part index map must be single-channel"));
    }
    let mut out = Image::new(index_map.h, index_map.w, channels);
    for (t, &v) in index_map.data.iter().enumerate() {
        if v < 0.0 {
            continue;
        }
        let i = v as usize;
        if i >= channels || v.fract() != 0.0 {
            return Err(Error::invariant(format!("invalid part index {v}")));
        }
        out.data[t * channels + i] = 1.0;
    }
    Ok(out)
}

/// Writes the subject bundle into `dir` (created if missing): mesh + rig
/// sidecar, texture and supervision maps as float images, the pose/camera
/// JSON, and an 8-bit preview of the input view.
pub fn save_subject(subject: &SyntheticSubject, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    obj::save_mesh(&subject.gt_mesh, &dir.join("mesh.obj"))?;
    img_io::save_pfm(&subject.gt_texture.color, &dir.join("texture.pfm"))?;
    img_io::save_pfm(&subject.gt_texture.validity, &dir.join("texture_validity.pfm"))?;
    save_params(&subject.pose_params, &dir.join("params.json"))?;
    img_io::save_pfm(&subject.input_image, &dir.join("input.pfm"))?;
    img_io::save_image(&subject.input_image, &dir.join("input.png"))?;
    img_io::save_pfm(&subject.fg_mask, &dir.join("mask.pfm"))?;
    img_io::save_pfm(&subject.normal_map, &dir.join("normal.pfm"))?;
    img_io::save_pfm(&part_index_map(&subject.part_map), &dir.join("part.pfm"))?;
    Ok(())
}

/// Loads a bundle written by [`save_subject`]. Float maps round-trip
/// exactly; the part map is re-expanded to one-hot.
pub fn load_subject(dir: &Path) -> Result<SyntheticSubject> {
    let gt_mesh = obj::load_mesh(&dir.join("mesh.obj"))?;
    let color = img_io::load_pfm(&dir.join("texture.pfm"))?;
    let validity = img_io::load_pfm(&dir.join("texture_validity.pfm"))?;
    if validity.h != color.h || validity.w != color.w || validity.c != 1 {
        return Err(Error::invariant(
            "texture validity plane does not match the texture",
        ));
    }
    let pose_params = load_params(&dir.join("params.json"))?;
    let input_image = img_io::load_pfm(&dir.join("input.pfm"))?;
    let fg_mask = img_io::load_pfm(&dir.join("mask.pfm"))?;
    let normal_map = img_io::load_pfm(&dir.join("normal.pfm"))?;
    let part_map = part_one_hot(
        &img_io::load_pfm(&dir.join("part.pfm"))?,
        PartLabel::ALL.len(),
    )?;
    Ok(SyntheticSubject {
        gt_mesh,
        gt_texture: UvImage { color, validity },
        pose_params,
        input_image,
        fg_mask,
        normal_map,
        part_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Profile;

    fn rig() -> RiggedMesh {
        make_mini_rig(Profile::Desk)
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let rig = rig();
        let a = make_synthetic_subject(7, &rig, 64).unwrap();
        let b = make_synthetic_subject(7, &rig, 64).unwrap();
        assert_eq!(a.gt_mesh.vertices, b.gt_mesh.vertices);
        assert_eq!(a.gt_texture.color.data, b.gt_texture.color.data);
        assert_eq!(a.pose_params, b.pose_params);
        assert_eq!(a.input_image.data, b.input_image.data);
        assert_eq!(a.fg_mask.data, b.fg_mask.data);
        assert_eq!(a.normal_map.data, b.normal_map.data);
        assert_eq!(a.part_map.data, b.part_map.data);
    }

    #[test]
    fn different_seeds_differ() {
        let rig = rig();
        let a = make_synthetic_subject(1, &rig, 64).unwrap();
        let b = make_synthetic_subject(2, &rig, 64).unwrap();
        assert_ne!(a.gt_mesh.vertices, b.gt_mesh.vertices);
        assert_ne!(a.input_image.data, b.input_image.data);
    }

    #[test]
    fn geometry_respects_part_budgets_over_many_seeds() {
        let rig = rig();
        let caps = |l: PartLabel| match l {
            PartLabel::Face => 0.003,
            PartLabel::Hair => 0.08,
            PartLabel::Neck => 0.02,
            PartLabel::Eyeball | PartLabel::Eyelid => 0.0,
            PartLabel::Other => 0.02,
        };
        for seed in 0..100u64 {
            // Geometry only: re-run the deterministic prefix of the
            // generator without rendering.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape_coeffs: Vec<f64> =
                (0..rig.n_shape).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hair_coef: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mut verts = rig.vertices.clone();
            for (k, &c) in shape_coeffs.iter().enumerate() {
                let b = rig.blendshape(k);
                for (v, p) in verts.iter_mut().enumerate() {
                    for ax in 0..3 {
                        p[ax] += c * b[v * 3 + ax];
                    }
                }
            }
            for (v, p) in verts.iter_mut().enumerate() {
                if rig.part_labels[v] != PartLabel::Hair {
                    continue;
                }
                let d = unit_radial(rig.vertices[v]);
                let amp = HAIR_FIELD_AMP * smooth_field(rig.vertices[v], &hair_coef);
                for ax in 0..3 {
                    p[ax] += amp * d[ax];
                }
            }
            for (v, (p, q)) in verts.iter().zip(&rig.vertices).enumerate() {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .sqrt();
                let cap = caps(rig.part_labels[v]);
                assert!(
                    d <= cap + 1e-12,
                    "seed {seed} vertex {v} ({:?}) moved {d} > {cap}",
                    rig.part_labels[v]
                );
            }
        }
    }

    #[test]
    fn supervision_images_are_consistent() {
        let rig = rig();
        let s = make_synthetic_subject(11, &rig, 96).unwrap();
        let n_px = 96 * 96;
        let covered = s.fg_mask.data.iter().filter(|&&v| v == 1.0).count();
        assert!(
            covered > n_px / 5,
            "head should fill a good part of the frame, got {covered}/{n_px}"
        );
        for t in 0..n_px {
            let m = s.fg_mask.data[t];
            assert!(m == 0.0 || m == 1.0);
            let n = &s.normal_map.data[t * 3..t * 3 + 3];
            let parts = &s.part_map.data[t * 6..(t + 1) * 6];
            let part_sum: f32 = parts.iter().sum();
            if m == 0.0 {
                assert_eq!(n, &[0.0, 0.0, 0.0]);
                assert_eq!(part_sum, 0.0);
                let px = &s.input_image.data[t * 3..t * 3 + 3];
                assert_eq!(px, &[0.0, 0.0, 0.0]);
            } else {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() < 1e-5, "normal length {len}");
                assert_eq!(part_sum, 1.0, "one-hot rows sum to exactly one");
                assert!(parts.iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
        // The texture must carry fine detail: neighboring valid texels
        // should differ noticeably somewhere.
        let res = s.gt_texture.color.w;
        let mut max_jump = 0.0f32;
        for y in 0..res {
            for x in 1..res {
                let t0 = y * res + x - 1;
                let t1 = y * res + x;
                if s.gt_texture.validity.data[t0] > 0.0 && s.gt_texture.validity.data[t1] > 0.0 {
                    for c in 0..3 {
                        max_jump = max_jump
                            .max((s.gt_texture.color.data[t1 * 3 + c]
                                - s.gt_texture.color.data[t0 * 3 + c])
                                .abs());
                    }
                }
            }
        }
        assert!(max_jump > 0.15, "texture looks flat, max jump {max_jump}");
    }

    #[test]
    fn bundle_roundtrips_exactly() {
        let rig = rig();
        let s = make_synthetic_subject(3, &rig, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_subject(&s, dir.path()).unwrap();
        let back = load_subject(dir.path()).unwrap();
        // Mesh geometry goes through the 12-decimal text format; everything
        // else round-trips bit-exactly.
        for (p, q) in s.gt_mesh.vertices.iter().zip(&back.gt_mesh.vertices) {
            for ax in 0..3 {
                assert!((p[ax] - q[ax]).abs() < 1e-11);
            }
        }
        assert_eq!(s.gt_mesh.faces, back.gt_mesh.faces);
        assert_eq!(s.gt_mesh.skin_weights, back.gt_mesh.skin_weights);
        assert_eq!(s.gt_mesh.joint_regressor, back.gt_mesh.joint_regressor);
        assert_eq!(s.gt_mesh.part_labels, back.gt_mesh.part_labels);
        assert_eq!(s.gt_texture.color.data, back.gt_texture.color.data);
        assert_eq!(s.gt_texture.validity.data, back.gt_texture.validity.data);
        assert_eq!(s.pose_params, back.pose_params);
        assert_eq!(s.input_image.data, back.input_image.data);
        assert_eq!(s.fg_mask.data, back.fg_mask.data);
        assert_eq!(s.normal_map.data, back.normal_map.data);
        assert_eq!(s.part_map.data, back.part_map.data);
    }
}
