//! Trainable building blocks: positional encoding, linear stacks,
//! multi-head cross attention, convolutional and vector GRU cells, the
//! image patch encoder, and the texture decoder.
//!
//! Every block registers its weights in a [`ParamStore`] under a
//! dot-separated path (`"geo.gru.update.w"`), so checkpoints and
//! optimizer state line up by name. Blocks hold [`ParamId`]s only; the
//! actual tensors are mounted onto a [`Tape`] per forward pass.

use crate::autodiff::{
    fl, Mounts, PadMode, ParamId, ParamStore, RowPlan, Scalar, Tape, TensorId,
};
use crate::{Error, Result};
use rand::Rng;
use std::sync::Arc;

/// Kaiming-uniform samples: `n` values in `±sqrt(6 / fan_in)`, optionally
/// shrunk by `scale` for heads that must start near zero.
pub fn kaiming_uniform<E: Scalar>(
    rng: &mut impl Rng,
    fan_in: usize,
    n: usize,
    scale: f64,
) -> Vec<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() * scale;
    (0..n).map(|_| fl::<E>(rng.gen_range(-bound..bound))).collect()
}

/// Fully connected layer `[n, d_in] -> [n, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self::new_with(store, rng, name, d_in, d_out, 1.0, 0.0)
    }

    /// `weight_scale` shrinks the init; `bias` fills the bias vector
    /// (update gates start at -2 so cells begin by keeping their state).
    pub fn new_with<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight_scale: f64,
        bias: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[d_in, d_out],
            kaiming_uniform(rng, d_in, d_in * d_out, weight_scale),
        );
        let b = store.add(format!("{name}.b"), &[d_out], vec![fl::<E>(bias); d_out]);
        Linear { w, b }
    }

    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        x: TensorId,
    ) -> Result<TensorId> {
        let y = tape.matmul(x, m.get(self.w))?;
        tape.bias_add(y, m.get(self.b))
    }
}

/// Stack of [`Linear`] layers with relu between them and none after the
/// last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, rng, &format!("{name}.{i}"), d[0], d[1]))
            .collect();
        Mlp { layers }
    }

    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        x: TensorId,
    ) -> Result<TensorId> {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply(tape, m, cur)?;
            if i + 1 < self.layers.len() {
                cur = tape.relu(cur);
            }
        }
        Ok(cur)
    }
}

/// Same-padded stride-1 convolution layer over `[h, w, c]` maps.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: PadMode,
}

impl Conv {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        pad: PadMode,
    ) -> Self {
        Self::new_with(store, rng, name, k, c_in, c_out, pad, 0.0)
    }

    pub fn new_with<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        k: usize,
        c_in: usize,
        c_out: usize,
        pad: PadMode,
        bias: f64,
    ) -> Self {
        let fan_in = k * k * c_in;
        let w = store.add(
            format!("{name}.w"),
            &[k, k, c_in, c_out],
            kaiming_uniform(rng, fan_in, fan_in * c_out, 1.0),
        );
        let b = store.add(format!("{name}.b"), &[c_out], vec![fl::<E>(bias); c_out]);
        Conv { w, b, pad }
    }

    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        x: TensorId,
    ) -> Result<TensorId> {
        tape.conv2d(x, m.get(self.w), m.get(self.b), self.pad)
    }
}

/// Expands `[n, d]` coordinates into `[n, d * (1 + 2 * n_freq)]`: the raw
/// values followed by `sin(2^k pi p), cos(2^k pi p)` for each octave `k`.
pub fn positional_encoding<E: Scalar>(
    tape: &mut Tape<E>,
    x: TensorId,
    n_freq: usize,
) -> Result<TensorId> {
    let s = tape.shape(x);
    if s.len() != 2 {
        return Err(Error::shape("positional_encoding", format!("{s:?}")));
    }
    let mut parts = vec![x];
    for k in 0..n_freq {
        let arg = tape.scale(x, fl::<E>(std::f64::consts::PI * (1u64 << k) as f64));
        parts.push(tape.sin(arg));
        parts.push(tape.cos(arg));
    }
    tape.concat(&parts, 1)
}

/// Width of [`positional_encoding`] output for `d` input columns.
pub fn positional_encoding_width(d: usize, n_freq: usize) -> usize {
    d * (1 + 2 * n_freq)
}

/// Multi-head cross attention: queries attend over a separate context
/// set, followed by a residual per-token MLP. No normalization layers.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp: Mlp,
}

impl CrossAttention {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invariant(format!(
                "attention width {dim} must split into {heads} heads"
            )));
        }
        Ok(CrossAttention {
            heads,
            wq: Linear::new(store, rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(store, rng, &format!("{name}.wo"), dim, dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), &[dim, 2 * dim, dim]),
        })
    }

    /// `queries` is `[n_q, dim]`, `context` is `[n_c, dim]`; returns
    /// `[n_q, dim]`.
    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        queries: TensorId,
        context: TensorId,
    ) -> Result<TensorId> {
        let dim = tape.shape(queries)[1];
        let hd = dim / self.heads;
        let q = self.wq.apply(tape, m, queries)?;
        let k = self.wk.apply(tape, m, context)?;
        let v = self.wv.apply(tape, m, context)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * hd, hd)?;
            let kh = tape.slice(k, 1, h * hd, hd)?;
            let vh = tape.slice(v, 1, h * hd, hd)?;
            let kt = tape.transpose2d(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, fl::<E>(1.0 / (hd as f64).sqrt()));
            let attn = tape.softmax(scaled, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let mixed = tape.concat(&heads, 1)?;
        let proj = self.wo.apply(tape, m, mixed)?;
        let attended = tape.add(queries, proj)?;
        let refined = self.mlp.apply(tape, m, attended)?;
        tape.add(attended, refined)
    }
}

/// Convolutional GRU cell over `[h, w, c]` feature maps (3x3 kernels,
/// zero padding). The update gate bias starts at -2 so the cell initially
/// keeps most of its state.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub update: Conv,
    pub reset: Conv,
    pub candidate: Conv,
}

impl ConvGru {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_h: usize,
    ) -> Self {
        ConvGru {
            update: Conv::new_with(
                store,
                rng,
                &format!("{name}.update"),
                3,
                c_in + c_h,
                c_h,
                PadMode::Zero,
                -2.0,
            ),
            reset: Conv::new(store, rng, &format!("{name}.reset"), 3, c_in + c_h, c_h, PadMode::Zero),
            candidate: Conv::new(
                store,
                rng,
                &format!("{name}.cand"),
                3,
                c_in + c_h,
                c_h,
                PadMode::Zero,
            ),
        }
    }

    /// One step: `x` is `[h, w, c_in]`, `state` is `[h, w, c_h]`; returns
    /// the next state.
    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        x: TensorId,
        state: TensorId,
    ) -> Result<TensorId> {
        let xh = tape.concat(&[x, state], 2)?;
        let zc = self.update.apply(tape, m, xh)?;
        let z = tape.sigmoid(zc);
        let rc = self.reset.apply(tape, m, xh)?;
        let r = tape.sigmoid(rc);
        let gated = tape.mul(r, state)?;
        let xg = tape.concat(&[x, gated], 2)?;
        let cc = self.candidate.apply(tape, m, xg)?;
        let cand = tape.tanh(cc);
        // state + z * (cand - state) == (1 - z) * state + z * cand
        let diff = tape.sub(cand, state)?;
        let step = tape.mul(z, diff)?;
        tape.add(state, step)
    }
}

/// Per-row GRU cell over `[n, c]` vectors: the dense analog of
/// [`ConvGru`], sharing one set of weights across rows.
#[derive(Clone, Debug)]
pub struct VecGru {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
}

impl VecGru {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_h: usize,
    ) -> Self {
        VecGru {
            update: Linear::new_with(
                store,
                rng,
                &format!("{name}.update"),
                c_in + c_h,
                c_h,
                1.0,
                -2.0,
            ),
            reset: Linear::new(store, rng, &format!("{name}.reset"), c_in + c_h, c_h),
            candidate: Linear::new(store, rng, &format!("{name}.cand"), c_in + c_h, c_h),
        }
    }

    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        x: TensorId,
        state: TensorId,
    ) -> Result<TensorId> {
        let xh = tape.concat(&[x, state], 1)?;
        let zc = self.update.apply(tape, m, xh)?;
        let z = tape.sigmoid(zc);
        let rc = self.reset.apply(tape, m, xh)?;
        let r = tape.sigmoid(rc);
        let gated = tape.mul(r, state)?;
        let xg = tape.concat(&[x, gated], 1)?;
        let cc = self.candidate.apply(tape, m, xg)?;
        let cand = tape.tanh(cc);
        let diff = tape.sub(cand, state)?;
        let step = tape.mul(z, diff)?;
        tape.add(state, step)
    }
}

/// Anchors for 2x bilinear upsampling of an `h x w` grid (half-pixel
/// centers, edges clamped); rows are the `2h * 2w` output pixels.
pub fn upsample_anchors(h: usize, w: usize) -> Vec<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(4 * h * w);
    let taps = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = (o as f64 + 0.5) / 2.0 - 0.5;
        let f = s.floor();
        let frac = s - f;
        let i0 = (f.max(0.0) as usize).min(n - 1);
        let i1 = ((f + 1.0).max(0.0) as usize).min(n - 1);
        (i0, i1, frac)
    };
    for oy in 0..2 * h {
        let (y0, y1, fy) = taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, fx) = taps(ox, w);
            rows.push(vec![
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]);
        }
    }
    rows
}

/// Bilinear 2x upsample as a tape op: `[h, w, c] -> [2h, 2w, c]`.
pub fn upsample2x<E: Scalar>(tape: &mut Tape<E>, x: TensorId) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("upsample2x", format!("{s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let plan = Arc::new(RowPlan::from_anchors(&upsample_anchors(h, w), h * w));
    let flat = tape.reshape(x, &[h * w, c])?;
    let up = tape.row_interp(flat, plan)?;
    tape.reshape(up, &[2 * h, 2 * w, c])
}

/// Turns an image into a grid of context tokens: non-overlapping patches
/// are flattened and linearly embedded, then two residual stages mix
/// neighboring tokens with an edge-replicating 3x3 convolution and fuse
/// the result back per token.
#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub image_res: usize,
    pub patch: usize,
    pub grid: usize,
    pub c_in: usize,
    pub c: usize,
    pub embed: Linear,
    pub stages: Vec<(Conv, Mlp)>,
    patch_index: Arc<Vec<u32>>,
}

impl PatchEncoder {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        image_res: usize,
        patch: usize,
        c_in: usize,
        c: usize,
    ) -> Result<Self> {
        if patch == 0 || image_res % patch != 0 {
            return Err(Error::invariant(format!(
                "patch {patch} must divide image size {image_res}"
            )));
        }
        let grid = image_res / patch;
        let mut patch_index = Vec::with_capacity(grid * grid * patch * patch * c_in);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c_in {
                            let pix = (gy * patch + py) * image_res + gx * patch + px;
                            patch_index.push((pix * c_in + ch) as u32);
                        }
                    }
                }
            }
        }
        let embed = Linear::new(store, rng, &format!("{name}.embed"), patch * patch * c_in, c);
        let stages = (0..2)
            .map(|i| {
                (
                    Conv::new(
                        store,
                        rng,
                        &format!("{name}.stage{i}.conv"),
                        3,
                        c,
                        c,
                        PadMode::Replicate,
                    ),
                    Mlp::new(store, rng, &format!("{name}.stage{i}.fuse"), &[2 * c, c, c]),
                )
            })
            .collect();
        Ok(PatchEncoder {
            image_res,
            patch,
            grid,
            c_in,
            c,
            embed,
            stages,
        patch_index: Arc::new(patch_index),
        })
    }

    /// `image` is `[res, res, c_in]`; returns `[grid * grid, c]` tokens in
    /// row-major grid order.
    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        image: TensorId,
    ) -> Result<TensorId> {
        let s = tape.shape(image);
        if s != [self.image_res, self.image_res, self.c_in] {
            return Err(Error::shape("patch_encoder", format!("{s:?}")));
        }
        let n_tok = self.grid * self.grid;
        let patches = tape.gather(
            image,
            self.patch_index.clone(),
            &[n_tok, self.patch * self.patch * self.c_in],
        )?;
        let mut tokens = self.embed.apply(tape, m, patches)?;
        for (conv, fuse) in &self.stages {
            let grid_map = tape.reshape(tokens, &[self.grid, self.grid, self.c])?;
            let mixed = conv.apply(tape, m, grid_map)?;
            let mixed = tape.relu(mixed);
            let flat = tape.reshape(mixed, &[n_tok, self.c])?;
            let cat = tape.concat(&[tokens, flat], 1)?;
            tokens = fuse.apply(tape, m, cat)?;
        }
        Ok(tokens)
    }
}

/// Texture decoder output: the color map (sigmoid, `[res, res, 3]`) and
/// the raw appearance feature map (`[res, res, c_app]`).
#[derive(Clone, Copy, Debug)]
pub struct DecodedTexture {
    pub color: TensorId,
    pub features: TensorId,
}

/// Decodes a token grid into a texture: each stage doubles the side
/// (bilinear) and convolves, halving the channel width down to a floor of
/// 4; the last stage instead emits 3 color channels (sigmoid) plus
/// `c_app` raw appearance channels.
#[derive(Clone, Debug)]
pub struct TexDecoder {
    pub grid: usize,
    pub c: usize,
    pub c_app: usize,
    pub convs: Vec<Conv>,
}

impl TexDecoder {
    pub fn new<E: Scalar>(
        store: &mut ParamStore<E>,
        rng: &mut impl Rng,
        name: &str,
        grid: usize,
        c: usize,
        c_app: usize,
        n_stages: usize,
    ) -> Self {
        let width = |i: usize| if i == 0 { c } else { (c >> i).max(4) };
        let convs = (0..n_stages)
            .map(|i| {
                let c_out = if i + 1 == n_stages {
                    3 + c_app
                } else {
                    width(i + 1)
                };
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.up{i}"),
                    3,
                    width(i),
                    c_out,
                    PadMode::Replicate,
                )
            })
            .collect();
        TexDecoder {
            grid,
            c,
            c_app,
            convs,
        }
    }

    /// Output resolution per side.
    pub fn out_res(&self) -> usize {
        self.grid << self.convs.len()
    }

    /// `tokens` is `[grid * grid, c]` in row-major grid order.
    pub fn apply<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        m: &Mounts,
        tokens: TensorId,
    ) -> Result<DecodedTexture> {
        let s = tape.shape(tokens);
        if s != [self.grid * self.grid, self.c] {
            return Err(Error::shape("tex_decoder", format!("{s:?}")));
        }
        let mut x = tape.reshape(tokens, &[self.grid, self.grid, self.c])?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = upsample2x(tape, x)?;
            x = conv.apply(tape, m, x)?;
            if i + 1 < self.convs.len() {
                x = tape.relu(x);
            }
        }
        let raw_color = tape.slice(x, 2, 0, 3)?;
        let color = tape.sigmoid(raw_color);
        let features = tape.slice(x, 2, 3, self.c_app)?;
        Ok(DecodedTexture { color, features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn positional_encoding_matches_direct_evaluation() {
        let pts = vec![0.1, -0.4, 0.9, 0.0, 0.5, -1.2];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(pts.clone(), &[2, 3]);
        let enc = positional_encoding(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(enc), &[2, positional_encoding_width(3, 4)]);
        let d = tape.data(enc);
        for row in 0..2 {
            let p = &pts[row * 3..row * 3 + 3];
            let o = &d[row * 27..(row + 1) * 27];
            for c in 0..3 {
                assert_eq!(o[c], p[c]);
                for k in 0..4 {
                    let arg = std::f64::consts::PI * (1 << k) as f64 * p[c];
                    assert!((o[3 + 6 * k + c] - arg.sin()).abs() < 1e-15);
                    assert!((o[6 + 6 * k + c] - arg.cos()).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn positional_encoding_gradient_is_correct() {
        let mut store = ParamStore::<f64>::new();
        let mut inputs = vec![(vec![3, 3], vec![0.2, -0.1, 0.4, 0.8, -0.5, 0.3, 0.0, 0.6, -0.9])];
        let r = check_gradients("posenc", &mut store, &mut inputs, 1e-6, |t, _, ids| {
            positional_encoding(t, ids[0], 3)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-7, "max err {}", r.max_rel_err);
    }

    #[test]
    fn mlp_gradient_is_correct() {
        let mut r = rng(1);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, &mut r, "m", &[4, 6, 2]);
        let mut inputs = vec![(
            vec![3, 4],
            (0..12).map(|i| 0.3 + 0.1 * i as f64).collect(),
        )];
        let res = check_gradients("mlp", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            mlp.apply(t, m, ids[0])
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-6, "max err {}", res.max_rel_err);
    }

    #[test]
    fn attention_output_ignores_context_order() {
        let mut r = rng(2);
        let mut store = ParamStore::<f64>::new();
        let attn = CrossAttention::new(&mut store, &mut r, "a", 8, 2).unwrap();
        let mut data_rng = rng(3);
        let queries: Vec<f64> = (0..3 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let context: Vec<f64> = (0..5 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        // Reverse the context rows.
        let mut reversed = vec![0.0; context.len()];
        for row in 0..5 {
            reversed[row * 8..(row + 1) * 8]
                .copy_from_slice(&context[(4 - row) * 8..(5 - row) * 8]);
        }
        let run = |ctx: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let m = store.mount_all(&mut tape);
            let q = tape.constant(queries.clone(), &[3, 8]);
            let c = tape.constant(ctx, &[5, 8]);
            let out = attn.apply(&mut tape, &m, q, c).unwrap();
            tape.data(out).to_vec()
        };
        let a = run(context);
        let b = run(reversed);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradient_is_correct() {
        let mut r = rng(4);
        let mut store = ParamStore::<f64>::new();
        let attn = CrossAttention::new(&mut store, &mut r, "a", 4, 2).unwrap();
        let mut data_rng = rng(5);
        let mut inputs = vec![
            (vec![2, 4], (0..8).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
            (vec![3, 4], (0..12).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
        ];
        let res = check_gradients("attention", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            attn.apply(t, m, ids[0], ids[1])
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-5, "max err {}", res.max_rel_err);
    }

    #[test]
    fn zero_weight_gru_keeps_a_fixed_fraction_of_state() {
        // With all weights zero the update gate is exactly sigmoid(-2) and
        // the candidate is tanh(0) = 0, so the next state is
        // (1 - sigmoid(-2)) * state elementwise.
        let mut r = rng(6);
        let mut store = ParamStore::<f64>::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 2, 3);
        for pid in store.ids().collect::<Vec<_>>() {
            if store.name(pid).ends_with(".w") {
                store.values_mut(pid).fill(0.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let m = store.mount_all(&mut tape);
        let x = tape.constant(vec![0.7; 4 * 4 * 2], &[4, 4, 2]);
        let h0: Vec<f64> = (0..4 * 4 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = tape.constant(h0.clone(), &[4, 4, 3]);
        let h1 = gru.apply(&mut tape, &m, x, h).unwrap();
        let keep = 1.0 - 1.0 / (1.0 + (2.0f64).exp());
        for (got, want) in tape.data(h1).iter().zip(h0.iter().map(|v| v * keep)) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_gru_gradient_is_correct() {
        let mut r = rng(7);
        let mut store = ParamStore::<f64>::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 2, 2);
        let mut data_rng = rng(8);
        let mut inputs = vec![
            (vec![3, 3, 2], (0..18).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
            (vec![3, 3, 2], (0..18).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
        ];
        let res = check_gradients("conv_gru", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            gru.apply(t, m, ids[0], ids[1])
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-5, "max err {}", res.max_rel_err);
    }

    #[test]
    fn vec_gru_gradient_is_correct() {
        let mut r = rng(9);
        let mut store = ParamStore::<f64>::new();
        let gru = VecGru::new(&mut store, &mut r, "g", 3, 2);
        let mut data_rng = rng(10);
        let mut inputs = vec![
            (vec![4, 3], (0..12).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
            (vec![4, 2], (0..8).map(|_| data_rng.gen_range(-1.0..1.0)).collect()),
        ];
        let res = check_gradients("vec_gru", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            gru.apply(t, m, ids[0], ids[1])
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-5, "max err {}", res.max_rel_err);
    }

    #[test]
    fn upsample_preserves_corners_and_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2, 1]);
        let up = upsample2x(&mut tape, x).unwrap();
        assert_eq!(tape.shape(up), &[4, 4, 1]);
        let d = tape.data(up);
        // Half-pixel-center upsampling reproduces the corner samples.
        assert_eq!(d[0], 1.0);
        assert_eq!(d[3], 2.0);
        assert_eq!(d[12], 3.0);
        assert_eq!(d[15], 4.0);
        let mean: f64 = d.iter().sum::<f64>() / 16.0;
        assert!((mean - 2.5).abs() < 1e-12);
        // Interior is a proper blend.
        let center = d[5];
        assert!(center > 1.0 && center < 4.0);
    }

    #[test]
    fn patch_tokens_of_a_constant_image_are_identical() {
        let mut r = rng(11);
        let mut store = ParamStore::<f64>::new();
        let enc = PatchEncoder::new(&mut store, &mut r, "p", 32, 8, 3, 12).unwrap();
        let mut tape = Tape::<f64>::new();
        let m = store.mount_all(&mut tape);
        let img = tape.constant(vec![0.42; 32 * 32 * 3], &[32, 32, 3]);
        let tokens = enc.apply(&mut tape, &m, img).unwrap();
        assert_eq!(tape.shape(tokens), &[16, 12]);
        let d = tape.data(tokens);
        let first = &d[0..12];
        for row in 1..16 {
            for c in 0..12 {
                assert!(
                    (d[row * 12 + c] - first[c]).abs() < 1e-6,
                    "token {row} channel {c} differs"
                );
            }
        }
    }

    #[test]
    fn patch_tokens_depend_on_their_patch() {
        let mut r = rng(12);
        let mut store = ParamStore::<f64>::new();
        let enc = PatchEncoder::new(&mut store, &mut r, "p", 16, 8, 1, 6).unwrap();
        let mut base = vec![0.5; 16 * 16];
        // Perturb one pixel inside patch (1, 1).
        base[12 * 16 + 12] = 0.9;
        let mut tape = Tape::<f64>::new();
        let m = store.mount_all(&mut tape);
        let flat = tape.constant(vec![0.5; 16 * 16], &[16, 16, 1]);
        let bumped = tape.constant(base, &[16, 16, 1]);
        let t0 = enc.apply(&mut tape, &m, flat).unwrap();
        let t1 = enc.apply(&mut tape, &m, bumped).unwrap();
        let (d0, d1) = (tape.data(t0).to_vec(), tape.data(t1).to_vec());
        let delta: Vec<f64> = (0..4)
            .map(|tk| {
                (0..6)
                    .map(|c| (d1[tk * 6 + c] - d0[tk * 6 + c]).abs())
                    .sum()
            })
            .collect();
        // The containing token moves most; all move somewhat via mixing.
        assert!(delta[3] > delta[0]);
        assert!(delta[3] > 1e-6);
    }

    #[test]
    fn patch_encoder_gradient_is_correct() {
        let mut r = rng(13);
        let mut store = ParamStore::<f64>::new();
        let enc = PatchEncoder::new(&mut store, &mut r, "p", 4, 2, 1, 3).unwrap();
        let mut data_rng = rng(14);
        let mut inputs = vec![(
            vec![4, 4, 1],
            (0..16).map(|_| data_rng.gen_range(0.0..1.0)).collect(),
        )];
        let res = check_gradients("patch_encoder", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            enc.apply(t, m, ids[0])
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-5, "max err {}", res.max_rel_err);
    }

    #[test]
    fn tex_decoder_emits_color_in_range_and_feature_maps() {
        let mut r = rng(15);
        let mut store = ParamStore::<f64>::new();
        let dec = TexDecoder::new(&mut store, &mut r, "d", 4, 8, 5, 3);
        let mut data_rng = rng(16);
        let mut tape = Tape::<f64>::new();
        let m = store.mount_all(&mut tape);
        let tokens: Vec<f64> = (0..16 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let t = tape.constant(tokens, &[16, 8]);
        let out = dec.apply(&mut tape, &m, t).unwrap();
        assert_eq!(tape.shape(out.color), &[32, 32, 3]);
        assert_eq!(tape.shape(out.features), &[32, 32, 5]);
        assert!(tape.data(out.color).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tex_decoder_gradient_is_correct() {
        let mut r = rng(17);
        let mut store = ParamStore::<f64>::new();
        let dec = TexDecoder::new(&mut store, &mut r, "d", 2, 2, 1, 3);
        let mut data_rng = rng(18);
        let mut inputs = vec![(
            vec![4, 2],
            (0..8).map(|_| data_rng.gen_range(-1.0..1.0)).collect(),
        )];
        let res = check_gradients("tex_decoder", &mut store, &mut inputs, 1e-5, |t, m, ids| {
            let out = dec.apply(t, m, ids[0])?;
            t.concat(&[out.color, out.features], 2)
        })
        .unwrap();
        assert!(res.max_rel_err < 1e-5, "max err {}", res.max_rel_err);
    }
}
