//! Training objectives and image quality metrics.
//!
//! Tape-valued losses (differentiable where the rendering path carries
//! gradients) and plain-`f64` evaluation metrics. All image tensors on the
//! tape are `[H, W, C]`; vertex tensors are `[n, 3]`.

use crate::assets::Image;
use crate::autodiff::{RowPlan, Scalar, Tape, TensorId};
use crate::{Error, Result};
use std::path::Path;
use std::sync::Arc;

/// Relative weights of the per-iteration objective terms, in the fixed
/// order image, mask, normal, part, smoothness.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub img: f64,
    pub mask: f64,
    pub normal: f64,
    pub part: f64,
    pub lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            img: 1.0,
            mask: 1.0,
            normal: 1.0,
            part: 0.5,
            lap: 2.0,
        }
    }
}

/// Discount applied to earlier iterations when summing per-iteration
/// losses: iteration `t` of `N` is weighted by `gamma^(N-t)`.
pub const ITERATION_DISCOUNT: f64 = 0.8;

/// Anchors that average each non-overlapping `f x f` block of an `h x w`
/// image (pixels as rows, row-major); `h` and `w` must divide by `f`.
pub fn pool_anchors(h: usize, w: usize, f: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::invariant(format!(
            "cannot pool {h}x{w} by factor {f}"
        )));
    }
    let inv = 1.0 / (f * f) as f64;
    let mut anchors = Vec::with_capacity((h / f) * (w / f));
    for by in 0..h / f {
        for bx in 0..w / f {
            let mut row = Vec::with_capacity(f * f);
            for dy in 0..f {
                for dx in 0..f {
                    row.push(((by * f + dy) * w + bx * f + dx, inv));
                }
            }
            anchors.push(row);
        }
    }
    Ok(anchors)
}

/// Mean of each `f x f` block as a tape op: `[H, W, C] -> [H/f, W/f, C]`.
pub fn avg_pool<E: Scalar>(
    tape: &mut Tape<E>,
    x: TensorId,
    f: usize,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("avg_pool", format!("{s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let plan = Arc::new(RowPlan::from_anchors(&pool_anchors(h, w, f)?, h * w));
    let flat = tape.reshape(x, &[h * w, c])?;
    let pooled = tape.row_interp(flat, plan)?;
    tape.reshape(pooled, &[h / f, w / f, c])
}

/// Photometric loss: mean squared error at full resolution plus at three
/// 2x-downsampled octaves, so low frequencies are weighted into the
/// objective. A constant all-ones vs all-zeros pair scores exactly 4 (one
/// per scale). Inputs must be same-shape `[H, W, C]` with H and W
/// divisible by 8.
pub fn loss_image<E: Scalar>(
    tape: &mut Tape<E>,
    rendered: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    let mut total = tape.mse(rendered, target)?;
    for s in 1..=3usize {
        let f = 1 << s;
        let pr = avg_pool(tape, rendered, f)?;
        let pt = avg_pool(tape, target, f)?;
        let level = tape.mse(pr, pt)?;
        total = tape.add(total, level)?;
    }
    Ok(total)
}

/// Coverage loss: plain mean squared error between the rendered and
/// target foreground masks; complementary binary masks score exactly 1.
pub fn loss_mask<E: Scalar>(
    tape: &mut Tape<E>,
    rendered: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    tape.mse(rendered, target)
}

/// Surface orientation loss: per-pixel squared normal difference summed
/// over channels, masked, averaged over the `masked_count` foreground
/// pixels. Antipodal unit normals everywhere score exactly 4. `mask3` is
/// the foreground mask replicated to 3 channels.
pub fn loss_normal<E: Scalar>(
    tape: &mut Tape<E>,
    rendered: TensorId,
    target: TensorId,
    mask3: TensorId,
    masked_count: usize,
) -> Result<TensorId> {
    let diff = tape.sub(rendered, target)?;
    let masked = tape.mul(diff, mask3)?;
    let sq = tape.mul(masked, masked)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, crate::autodiff::fl::<E>(1.0 / masked_count.max(1) as f64)))
}

/// Segmentation loss: mean squared error over all `H*W*C` one-hot
/// entries. Two swapped one-hot maps over 6 part channels score exactly
/// 1/3.
pub fn loss_part<E: Scalar>(
    tape: &mut Tape<E>,
    rendered: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    tape.mse(rendered, target)
}

/// Ring (one-neighborhood) averaging plan for the umbrella smoothness
/// term: row `v` holds uniform weights over the vertices sharing an edge
/// with `v`. A vertex no face references keeps itself as its only anchor,
/// which zeroes its term; such vertices are counted and logged.
pub fn ring_anchors(n_verts: usize, faces: &[[usize; 3]]) -> Vec<Vec<(usize, f64)>> {
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n_verts];
    for f in faces {
        for e in 0..3 {
            let (a, b) = (f[e], f[(e + 1) % 3]);
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            if !neighbors[b].contains(&a) {
                neighbors[b].push(a);
            }
        }
    }
    let mut isolated = 0usize;
    let anchors = neighbors
        .iter()
        .enumerate()
        .map(|(v, ns)| {
            if ns.is_empty() {
                isolated += 1;
                return vec![(v, 1.0)];
            }
            let mut ns = ns.clone();
            ns.sort_unstable();
            let w = 1.0 / ns.len() as f64;
            ns.into_iter().map(|u| (u, w)).collect()
        })
        .collect();
    if isolated > 0 {
        log::warn!("{isolated} isolated vertices excluded from the smoothness term");
    }
    anchors
}

/// Umbrella smoothness: the sum over vertices of the squared distance to
/// the mean of their edge-connected ring. `verts` is `[n, 3]`; `ring` is
/// the plan from [`ring_anchors`].
pub fn loss_laplacian<E: Scalar>(
    tape: &mut Tape<E>,
    verts: TensorId,
    ring: Arc<RowPlan<E>>,
) -> Result<TensorId> {
    let means = tape.row_interp(verts, ring)?;
    let diff = tape.sub(verts, means)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// The five per-iteration loss terms, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct IterationTerms {
    pub img: TensorId,
    pub mask: TensorId,
    pub normal: TensorId,
    pub part: TensorId,
    pub lap: TensorId,
}

/// Weighted sum of one iteration's terms; unit terms under the default
/// weights total exactly 5.5.
pub fn iteration_total<E: Scalar>(
    tape: &mut Tape<E>,
    terms: IterationTerms,
    weights: &LossWeights,
) -> Result<TensorId> {
    let fl = crate::autodiff::fl::<E>;
    let mut total = tape.scale(terms.img, fl(weights.img));
    for (t, w) in [
        (terms.mask, weights.mask),
        (terms.normal, weights.normal),
        (terms.part, weights.part),
        (terms.lap, weights.lap),
    ] {
        let scaled = tape.scale(t, fl(w));
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Discounted sum over the iteration sequence: iteration `t` (1-based) of
/// `N` is weighted `gamma^(N-t)`, so the final iteration has weight 1.
/// Two unit iteration losses at gamma 0.8 total exactly 1.8.
pub fn sequence_total<E: Scalar>(
    tape: &mut Tape<E>,
    iteration_losses: &[TensorId],
    gamma: f64,
) -> Result<TensorId> {
    let n = iteration_losses.len();
    if n == 0 {
        return Err(Error::invariant("no iteration losses to combine"));
    }
    let fl = crate::autodiff::fl::<E>;
    let mut total: Option<TensorId> = None;
    for (i, &l) in iteration_losses.iter().enumerate() {
        let w = gamma.powi((n - 1 - i) as i32);
        let scaled = tape.scale(l, fl(w));
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(total.unwrap())
}

fn check_metric_pair(a: &Image, b: &Image, mask: &Image) -> Result<()> {
    if a.h != b.h || a.w != b.w || a.c != b.c {
        return Err(Error::invariant(format!(
            "metric images differ in shape: {}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    if mask.h != a.h || mask.w != a.w || mask.c != 1 {
        return Err(Error::invariant("metric mask must be [H, W, 1]"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over the masked pixels, peak 1.0.
/// Identical (or numerically indistinguishable) inputs return the 99 dB
/// ceiling; an all-zero mask does too.
pub fn psnr(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    check_metric_pair(a, b, mask)?;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for t in 0..a.h * a.w {
        if mask.data[t] == 0.0 {
            continue;
        }
        count += 1;
        for c in 0..a.c {
            let d = a.data[t * a.c + c] as f64 - b.data[t * a.c + c] as f64;
            acc += d * d;
        }
    }
    if count == 0 {
        return Ok(99.0);
    }
    let mse = acc / (count * a.c) as f64;
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

fn gaussian_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut g = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in g.iter_mut() {
        *v /= sum;
    }
    g
}

/// Structural similarity over the masked pixels: 11x11 Gaussian window
/// (sigma 1.5, zero padding outside the frame), stabilizers C1 = 0.01^2
/// and C2 = 0.03^2, computed per channel and averaged. Identical inputs
/// score 1; an all-zero mask scores 1 by convention.
pub fn ssim(a: &Image, b: &Image, mask: &Image) -> Result<f64> {
    check_metric_pair(a, b, mask)?;
    let g = gaussian_window();
    let (h, w, cc) = (a.h as isize, a.w as isize, a.c);
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut per_channel = vec![0.0f64; cc];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let t = (y * w + x) as usize;
            if mask.data[t] == 0.0 {
                continue;
            }
            count += 1;
            for c in 0..cc {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5isize {
                    let yy = y + dy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    for dx in -5..=5isize {
                        let xx = x + dx;
                        if xx < 0 || xx >= w {
                            continue;
                        }
                        let wgt = g[(dy + 5) as usize] * g[(dx + 5) as usize];
                        let s = (yy * w + xx) as usize * cc + c;
                        let (va, vb) = (a.data[s] as f64, b.data[s] as f64);
                        mx += wgt * va;
                        my += wgt * vb;
                        mxx += wgt * va * va;
                        myy += wgt * vb * vb;
                        mxy += wgt * va * vb;
                    }
                }
                let (vx, vy, vxy) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                let s = ((2.0 * mx * my + C1) * (2.0 * vxy + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                per_channel[c] += s;
            }
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok(per_channel.iter().map(|s| s / count as f64).sum::<f64>() / cc as f64)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub l_img: f64,
    pub l_mask: f64,
    pub l_normal: f64,
    pub l_part: f64,
    pub l_lap: f64,
    pub l_total: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "step,L_img,L_mask,L_normal,L_part,L_lap,L_total,psnr,ssim";

/// Renders the training log as CSV (header plus one line per row).
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.6},{:.6}\n",
            r.step, r.l_img, r.l_mask, r.l_normal, r.l_part, r.l_lap, r.l_total, r.psnr, r.ssim
        ));
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Parses a CSV produced by [`metrics_to_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::parse(
                path,
                format!("bad metrics header: {other:?}"),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(Error::parse(path, format!("line {}: want 9 cells", i + 2)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(path, format!("bad number {s:?}")))
        };
        rows.push(MetricsRow {
            step: cells[0]
                .parse()
                .map_err(|_| Error::parse(path, format!("bad step {:?}", cells[0])))?,
            l_img: num(cells[1])?,
            l_mask: num(cells[2])?,
            l_normal: num(cells[3])?,
            l_part: num(cells[4])?,
            l_lap: num(cells[5])?,
            l_total: num(cells[6])?,
            psnr: num(cells[7])?,
            ssim: num(cells[8])?,
        });
    }
    Ok(rows)
}
