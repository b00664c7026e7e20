//! Named parameter storage, tape binding, and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "FKAO" | u32 version | u32 count
//! count × ( u32 name_len | name bytes (UTF-8) | u32 rank | rank × u32 dim | f32 payload )
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FKAO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<f32>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the first dimension
    /// (or the product of all but the last for conv kernels).
    pub fn uniform(
        &mut self,
        rng: &mut impl Rng,
        name: impl Into<String>,
        shape: &[usize],
        trainable: bool,
    ) -> ParamId {
        let fan_in: usize = match shape.len() {
            0 | 1 => shape.first().copied().unwrap_or(1),
            _ => shape[..shape.len() - 1].iter().product(),
        };
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"), trainable)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), trainable)
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), 1.0), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Serializes every parameter in registration order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.num_elements() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in p.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Overwrites values from a checkpoint. The checkpoint must hold exactly
    /// this store's parameter names and shapes.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, value) in entries {
            let Some(&i) = self.index.get(&name) else {
                return Err(Error::Version(format!(
                    "checkpoint parameter {name} is not part of this model"
                )));
            };
            if self.params[i].value.shape() != value.shape() {
                return Err(Error::Version(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    self.params[i].value.shape()
                )));
            }
            self.params[i].value = value;
        }
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = read_checkpoint(path)?;
        self.load_values(entries)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|detail| match detail {
        Error::Version(_) => detail,
        other => Error::Parse {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    struct Cursor<'a>(&'a [u8]);
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            if self.0.len() < n {
                return Err(Error::Input("truncated checkpoint".into()));
            }
            let (head, tail) = self.0.split_at(n);
            self.0 = tail;
            Ok(head)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
        }
    }
    let mut cur = Cursor(bytes);
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Input("not a checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, supported {CHECKPOINT_VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Input(format!("parameter name is not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = cur
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if !cur.0.is_empty() {
        return Err(Error::Input(format!(
            "{} trailing bytes after checkpoint",
            cur.0.len()
        )));
    }
    Ok(entries)
}

/// Per-parameter gradient accumulators.
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            bufs: store
                .params
                .iter()
                .map(|p| {
                    if p.trainable {
                        vec![0.0; p.value.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.bufs[id.0]
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|x| x.is_finite())
    }
}

/// A forward pass over a [`ParamStore`]: parameters are bound onto the tape
/// lazily, trainable ones as differentiable leaves when `track_grad` is set.
pub struct Binder<'s> {
    pub tape: Tape<f32>,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track_grad: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, track_grad: bool) -> Self {
        Binder {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track_grad,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = &self.store.params[id.0];
        let v = self
            .tape
            .leaf(param.value.clone(), self.track_grad && param.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor<f32>) -> Var {
        self.tape.constant(value)
    }

    /// Adds `scale ×` the gradient of every bound trainable parameter.
    pub fn accumulate(&self, grads: &mut Grads, scale: f32) {
        for (i, v) in self.bound.iter().enumerate() {
            let (Some(v), true) = (v, self.store.params[i].trainable) else {
                continue;
            };
            if let Some(g) = self.tape.grad(*v) {
                for (acc, &x) in grads.bufs[i].iter_mut().zip(g) {
                    *acc += scale * x;
                }
            }
        }
    }
}
