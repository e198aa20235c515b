//! Named parameter storage, Adam, the learning-rate schedule and binary
//! checkpoint serialization.

use super::{fl, Grads, Scalar, Tape, TensorId};
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named trainable tensors.
///
/// Iteration order is insertion order everywhere (mounting, optimization,
/// serialization), which keeps training and checkpoints deterministic.
pub struct ParamStore<E: Scalar> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<E>>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<E>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: data does not match shape"
        );
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.data.push(data);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[E] {
        &self.data[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [E] {
        &mut self.data[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    /// Places every parameter on the tape as a gradient-requiring leaf.
    pub fn mount_all(&self, tape: &mut Tape<E>) -> Mounts {
        let ids = self
            .data
            .iter()
            .zip(&self.shapes)
            .map(|(d, s)| tape.leaf(d.clone(), s, true))
            .collect();
        Mounts { ids }
    }
}

/// Tape leaves for one mounted [`ParamStore`], aligned by parameter index.
pub struct Mounts {
    ids: Vec<TensorId>,
}

impl Mounts {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }

    /// Per-parameter gradient buffers in store order; parameters the loss
    /// did not reach get zero-filled buffers.
    pub fn collect<E: Scalar>(&self, store: &ParamStore<E>, grads: &Grads<E>) -> Vec<Vec<E>> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &tid)| match grads.get(tid) {
                Some(g) => g.to_vec(),
                None => vec![E::zero(); store.data[i].len()],
            })
            .collect()
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators with a shared step counter.
pub struct AdamState<E: Scalar> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        AdamState {
            m: store.data.iter().map(|d| vec![E::zero(); d.len()]).collect(),
            v: store.data.iter().map(|d| vec![E::zero(); d.len()]).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update over every parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &[Vec<E>],
        hp: AdamParams,
        lr: f64,
    ) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = fl::<E>(hp.beta1);
        let b2 = fl::<E>(hp.beta2);
        let one = E::one();
        let c1 = fl::<E>(1.0 / (1.0 - hp.beta1.powi(self.t as i32)));
        let c2 = fl::<E>(1.0 / (1.0 - hp.beta2.powi(self.t as i32)));
        let eps = fl::<E>(hp.eps);
        let lr = fl::<E>(lr);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.data[i];
            assert_eq!(g.len(), p.len(), "gradient shape mismatch for {}", store.names[i]);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] * c1;
                let vh = v[j] * c2;
                p[j] = p[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup followed by cosine decay to zero.
///
/// Returns 0 at step 0, `base_lr` at the end of warmup, and 0 at or beyond
/// `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    if warmup > 0 && step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let x = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AVFW";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes every parameter as little-endian `f32` with its name and shape.
pub fn save_checkpoint<E: Scalar>(store: &ParamStore<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for i in 0..store.len() {
        let name = store.names[i].as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = &store.shapes[i];
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &store.data[i] {
            buf.extend_from_slice(&v.to_f32v().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint into a store with identical parameter names and
/// shapes (in the same order).
pub fn load_checkpoint<E: Scalar>(store: &mut ParamStore<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::parse(path, "truncated checkpoint"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    let u32_at = |cur: &mut usize| -> Result<u32> {
        let b = take(cur, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    if take(&mut cur, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "bad magic"));
    }
    let version = u32_at(&mut cur)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(path, format!("unsupported version {version}")));
    }
    let count = u32_at(&mut cur)? as usize;
    if count != store.len() {
        return Err(Error::invariant(format!(
            "checkpoint holds {count} tensors, model has {}",
            store.len()
        )));
    }
    for i in 0..count {
        let name_len = u32_at(&mut cur)? as usize;
        let name = std::str::from_utf8(take(&mut cur, name_len)?)
            .map_err(|_| Error::parse(path, "non-utf8 tensor name"))?
            .to_string();
        if name != store.names[i] {
            return Err(Error::invariant(format!(
                "tensor {i} is {name:?} in checkpoint but {:?} in model",
                store.names[i]
            )));
        }
        let rank = u32_at(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut cur)? as usize);
        }
        if shape != store.shapes[i] {
            return Err(Error::invariant(format!(
                "tensor {name:?}: checkpoint shape {shape:?} vs model {:?}",
                store.shapes[i]
            )));
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut cur, n * 4)?;
        let dst = &mut store.data[i];
        for (j, ch) in payload.chunks_exact(4).enumerate() {
            dst[j] = E::from_f32v(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
        }
    }
    if cur != bytes.len() {
        return Err(Error::parse(path, "trailing bytes after last tensor"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let base = 2e-4;
        assert_eq!(lr_schedule(0, 1000, base, 100), 0.0);
        assert!((lr_schedule(100, 1000, base, 100) - base).abs() < 1e-18);
        assert!(lr_schedule(1000, 1000, base, 100).abs() < 1e-12);
        assert!(lr_schedule(5000, 1000, base, 100).abs() < 1e-12);
        // Monotone decay after warmup.
        let mut prev = f64::INFINITY;
        for s in (100..=1000).step_by(50) {
            let v = lr_schedule(s, 1000, base, 100);
            assert!(v <= prev + 1e-18);
            prev = v;
        }
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_steps() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("p", &[1], vec![0.0]);
        let mut state = AdamState::new(&store);
        let hp = AdamParams::default();
        let g = vec![vec![0.37]];
        let lr = 1e-3;
        let mut prev = store.values(ParamId(0))[0];
        let mut last_step = 0.0;
        for _ in 0..5000 {
            state.step(&mut store, &g, hp, lr);
            let cur = store.values(ParamId(0))[0];
            last_step = prev - cur;
            prev = cur;
        }
        assert!(
            (last_step - lr).abs() < lr * 0.02,
            "step size {last_step} should approach lr {lr}"
        );
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("block.w", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        store.add("block.b", &[3], vec![-1.0, 0.5, 0.25]);
        save_checkpoint(&store, &path).unwrap();

        let mut other: ParamStore<f32> = ParamStore::new();
        other.add("block.w", &[2, 3], vec![0.0; 6]);
        other.add("block.b", &[3], vec![0.0; 3]);
        load_checkpoint(&mut other, &path).unwrap();
        assert_eq!(other.values(ParamId(0)), store.values(ParamId(0)));
        assert_eq!(other.values(ParamId(1)), store.values(ParamId(1)));

        let mut wrong: ParamStore<f32> = ParamStore::new();
        wrong.add("block.w", &[3, 2], vec![0.0; 6]);
        wrong.add("block.b", &[3], vec![0.0; 3]);
        assert!(load_checkpoint(&mut wrong, &path).is_err());
    }
}
