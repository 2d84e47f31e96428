//! Named parameter sets, seeded initialization and the checkpoint format.
//!
//! A checkpoint is a flat sequence of records, one per tensor, in name order:
//! `u16` LE name length, UTF-8 name, `u8` rank, `u32` LE per extent, then the
//! values as `f64` LE. There is no header; the file ends after the last record.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, NodeId};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Shape and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    /// Weight and bias of a `K`-wide conv from `c_in` to `c_out` channels.
    pub fn conv(prefix: &str, c_in: usize, c_out: usize, k: usize) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{prefix}.weight"),
                shape: vec![c_out, c_in, k],
                fan_in: c_in * k,
            },
            ParamSpec {
                name: format!("{prefix}.bias"),
                shape: vec![c_out],
                fan_in: c_in * k,
            },
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform in `[-b, b]` with `b = 1/sqrt(fan_in)`, drawn in name order.
    pub fn init_uniform(specs: &[ParamSpec], rng: &mut SplitMix64) -> Self {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        let mut out = Self::new();
        for spec in sorted {
            let b = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let data = (0..n).map(|_| rng.uniform_in(-b, b)).collect();
            out.insert(&spec.name, Tensor::new(spec.shape.clone(), data).expect("spec shape"));
        }
        out
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let mut out = Self::new();
        for spec in specs {
            out.insert(&spec.name, Tensor::zeros(&spec.shape));
        }
        out
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidShape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Register `name` in `graph` as a trainable leaf.
    pub fn node(&self, graph: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(id) = graph.param_id(name) {
            return Ok(id);
        }
        let t = self.get(name)?.clone();
        Ok(graph.param(name, t))
    }

    /// Gradient tensors for every parameter in this set, zero where unreached.
    pub fn gradients_from(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in &self.tensors {
            let g = grads.param(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn encode(&self, w: &mut impl Write) -> Result<()> {
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &e in t.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::decode(&mut bytes.as_slice())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self> {
        let mut out = Self::new();
        loop {
            let mut len = [0u8; 2];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(truncated)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut e = [0u8; 4];
                r.read_exact(&mut e).map_err(truncated)?;
                shape.push(u32::from_le_bytes(e) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut v = [0u8; 8];
                r.read_exact(&mut v).map_err(truncated)?;
                data.push(f64::from_le_bytes(v));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            out.insert(&name, t);
        }
        Ok(out)
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated checkpoint record".into())
    } else {
        e.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_bounds_and_determinism() {
        let specs = ParamSpec::conv("head", 4, 2, 3);
        let a = ParamSet::init_uniform(&specs, &mut SplitMix64::new(5));
        let b = ParamSet::init_uniform(&specs, &mut SplitMix64::new(5));
        assert_eq!(a, b);
        let bound = 1.0 / 12f64.sqrt();
        for (_, t) in a.iter() {
            assert!(t.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn checkpoint_layout() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::vector(&[1.5]));
        let mut buf = Vec::new();
        p.encode(&mut buf).unwrap();
        let mut expect = vec![1u8, 0, b'b', 1, 1, 0, 0, 0];
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_rows(&[[1.0, 2.0]]));
        let mut buf = Vec::new();
        p.encode(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(ParamSet::decode(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
