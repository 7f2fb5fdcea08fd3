//! Named parameter registry with gradient accumulators and checkpoint IO.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matd;
use crate::tensor::{Precision, Tensor};

const CKPT_MAGIC: &[u8; 4] = b"MACK";
const CKPT_VERSION: u32 = 1;

/// Which part of a model a parameter belongs to; used to freeze subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    AdaptorT,
    AdaptorS,
    Head,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::AdaptorT => 1,
            ParamGroup::AdaptorS => 2,
            ParamGroup::Head => 3,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::AdaptorT,
            2 => ParamGroup::AdaptorS,
            3 => ParamGroup::Head,
            _ => return Err(Error::Format(format!("unknown parameter group {t}"))),
        })
    }

    pub fn is_adaptor(self) -> bool {
        matches!(self, ParamGroup::AdaptorT | ParamGroup::AdaptorS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            group,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Marks each parameter trainable iff `keep(group)` holds.
    pub fn set_trainable(&mut self, keep: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(p.group);
        }
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values of every parameter whose name exists in `other`.
    /// Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "load_matching",
                        format!("{}: {:?} vs {:?}", p.name, src.shape(), p.value.shape()),
                    ));
                }
                p.value = src.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.tag());
            out.extend_from_slice(&matd::encode(&p.value, Precision::F64));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut pos = 0usize;
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::Format("checkpoint: truncated".into()))?;
            *pos += n;
            Ok(s)
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        if take(bytes, &mut pos, 4)? != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32_at(take(bytes, &mut pos, 4)?);
        if version != CKPT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(take(bytes, &mut pos, 4)?) as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u32_at(take(bytes, &mut pos, 4)?) as usize;
            let name = std::str::from_utf8(take(bytes, &mut pos, len)?)
                .map_err(|_| bad("name is not utf-8"))?
                .to_string();
            let group = ParamGroup::from_tag(take(bytes, &mut pos, 1)?[0])?;
            let (value, _, used) = matd::decode_prefix(&bytes[pos..])?;
            pos += used;
            store.add(name, value, group);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), ParamGroup::Backbone);
        s.add("t.pos_w", Tensor::zeros(&[3]), ParamGroup::AdaptorT);
        s.add("head.b", Tensor::full(&[2], 0.1), ParamGroup::Head);
        s
    }

    #[test]
    fn counts_and_freeze() {
        let mut s = sample();
        assert_eq!(s.total_count(), 9);
        s.set_trainable(|g| g != ParamGroup::Backbone);
        assert_eq!(s.trainable_count(), 5);
        assert_eq!(s.group_count(ParamGroup::AdaptorT), 3);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = sample();
        let back = ParamStore::decode(&s.encode()).unwrap();
        assert_eq!(back, s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        s.save(&p).unwrap();
        assert_eq!(ParamStore::load(&p).unwrap(), s);
    }

    #[test]
    fn checkpoint_corruption() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(ParamStore::decode(&bytes), Err(Error::Format(_))));
        let bytes = sample().encode();
        assert!(ParamStore::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn load_matching_copies_by_name() {
        let mut a = sample();
        let mut b = ParamStore::new();
        b.add("head.b", Tensor::full(&[2], 7.0), ParamGroup::Head);
        b.add("other", Tensor::zeros(&[1]), ParamGroup::Head);
        assert_eq!(a.load_matching(&b).unwrap(), 1);
        assert_eq!(a.value(a.find("head.b").unwrap()).data(), &[7.0, 7.0]);
    }
}
