//! Named parameters, the Adam optimizer, and the FACP checkpoint container.
//!
//! FACP layout (all integers little-endian):
//!
//! ```text
//! "FACP" | version u16 | count u32 | count × entry
//! entry = name_len u16 | name (UTF-8) | rank u8 | rank × extent u32 | values f64…
//! ```
//!
//! Parameter values come first in name order, followed by the optimizer
//! state of each parameter under the suffixes `@adam_m`, `@adam_v` and
//! `@adam_step` (a rank-0 entry holding the step count).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FACP_MAGIC: &[u8; 4] = b"FACP";
pub const FACP_VERSION: u16 = 1;

const SUFFIX_M: &str = "@adam_m";
const SUFFIX_V: &str = "@adam_v";
const SUFFIX_STEP: &str = "@adam_step";

/// A trainable tensor with its Adam accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
}

impl Parameter {
    fn fresh(value: Tensor) -> Self {
        let zeros = value.map(|_| 0.0);
        Parameter { first_moment: zeros.clone(), second_moment: zeros, value, step: 0 }
    }
}

pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.contains('@') {
            return Err(TensorError::Format(format!("parameter name `{name}` may not contain '@'")));
        }
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.params.insert(name, Parameter::fresh(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    /// Replace a value, keeping optimizer state. The shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParameter(name.into()))?;
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_parameter",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, p)| p.value.numel()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FACP_MAGIC);
        out.extend_from_slice(&FACP_VERSION.to_le_bytes());
        out.extend_from_slice(&((self.params.len() * 4) as u32).to_le_bytes());
        for (name, p) in &self.params {
            write_entry(&mut out, name, &p.value);
        }
        for (name, p) in &self.params {
            write_entry(&mut out, &format!("{name}{SUFFIX_M}"), &p.first_moment);
            write_entry(&mut out, &format!("{name}{SUFFIX_V}"), &p.second_moment);
            write_entry(&mut out, &format!("{name}{SUFFIX_STEP}"), &Tensor::scalar(p.step as f64));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != FACP_MAGIC {
            return Err(TensorError::Format("bad magic, expected FACP".into()));
        }
        let version = r.u16()?;
        if version != FACP_VERSION {
            return Err(TensorError::Format(format!("unsupported FACP version {version}")));
        }
        let count = r.u32()? as usize;
        let mut values = BTreeMap::new();
        let mut extras: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_entry(&mut r)?;
            if name.contains('@') {
                extras.insert(name, t);
            } else if values.insert(name.clone(), t).is_some() {
                return Err(TensorError::DuplicateParameter(name));
            }
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut params = BTreeMap::new();
        for (name, value) in values {
            let mut p = Parameter::fresh(value);
            if let Some(m) = extras.remove(&format!("{name}{SUFFIX_M}")) {
                p.first_moment = m;
            }
            if let Some(v) = extras.remove(&format!("{name}{SUFFIX_V}")) {
                p.second_moment = v;
            }
            if let Some(s) = extras.remove(&format!("{name}{SUFFIX_STEP}")) {
                p.step = s.item()? as u64;
            }
            if p.first_moment.shape() != p.value.shape() || p.second_moment.shape() != p.value.shape() {
                return Err(TensorError::Format(format!("optimizer state shape mismatch for `{name}`")));
            }
            params.insert(name, p);
        }
        if let Some(orphan) = extras.keys().next() {
            return Err(TensorError::Format(format!("optimizer entry `{orphan}` has no parameter")));
        }
        Ok(ParameterStore { params })
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_entry(r: &mut ByteReader<'_>) -> Result<(String, Tensor)> {
    let len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?
        .to_string();
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = r.take(n * 8)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let t = Tensor::new(shape, data).map_err(|e| TensorError::Format(format!("entry `{name}`: {e}")))?;
    Ok((name, t))
}

/// Length-prefixed JSON architecture header followed by a FACP block.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&self.store.encode());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TensorError::Format("header is not UTF-8".into()))?
            .to_string();
        let store = ParameterStore::decode(&bytes[r.pos..])?;
        Ok(Checkpoint { header, store })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Checkpoint::decode(&bytes)
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Adam::default() }
    }

    /// Update every parameter named in `grads`. Nothing is modified on error.
    pub fn step(&self, store: &mut ParameterStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            let p = store.params.get(name).ok_or_else(|| TensorError::UnknownParameter(name.clone()))?;
            if p.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
        }
        for (name, g) in grads {
            let p = store.params.get_mut(name).expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let n = g.numel();
            let mut m = p.first_moment.to_vec();
            let mut v = p.second_moment.to_vec();
            let mut w = p.value.to_vec();
            let gd = g.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            let shape = g.shape().to_vec();
            p.first_moment = Tensor::from_parts(shape.clone(), m);
            p.second_moment = Tensor::from_parts(shape.clone(), v);
            p.value = Tensor::from_parts(shape, w);
        }
        Ok(())
    }
}

/// Which bound parameters receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Everything,
    Prefixes(Vec<String>),
}

impl Trainable {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A tape with lazily bound parameters from a store.
///
/// Dereferences to [`Tape`], so tape operations can be called directly.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParameterStore,
    bound: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore, trainable: Trainable) -> Self {
        Graph { tape: Tape::new(), store, bound: BTreeMap::new(), trainable }
    }

    /// Evaluation only: nothing records, nothing is differentiable.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Graph { tape: Tape::no_grad(), store, bound: BTreeMap::new(), trainable: Trainable::Nothing }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name).ok_or_else(|| TensorError::UnknownParameter(name.into()))?.clone();
        let v = self.tape.leaf(value, self.trainable.admits(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    /// Gradients of `root` for every bound trainable parameter. Parameters
    /// that were bound but not reached get zeros.
    pub fn param_gradients(&mut self, root: Var) -> Result<GradMap> {
        let grads = self.tape.backward(root)?;
        let mut out = GradMap::new();
        for (name, &v) in &self.bound {
            if !self.tape.requires_grad(v) {
                continue;
            }
            let g = match grads.get(v) {
                Some(g) => g.clone(),
                None => self.tape.value(v).map(|_| 0.0),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
