//! Named parameter collections and their versioned binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "AMNPSET\0"
//! version  u32      1
//! header   u32 length + UTF-8 bytes (free-form structured text, may be empty)
//! count    u32
//! count × { name_len u32, name bytes, rank u32, dims u64 × rank, data f64 × prod(dims) }
//! ```

use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AMNPSET\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar parameters across all tensors.
    pub fn total_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn replace_data(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Misaligned(format!("unknown parameter `{name}`")))?;
        *t = t.with_data(data)?;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()).with_requires_grad(t.requires_grad())))
            .collect();
        Self { tensors }
    }

    pub fn zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy with freshly allocated buffers, sharing nothing with `self`.
    pub fn deep_copy(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                    .expect("valid shape")
                    .with_requires_grad(t.requires_grad());
                (k.clone(), copy)
            })
            .collect();
        Self { tensors }
    }

    pub fn set_requires_grad(&mut self, name: &str, flag: bool) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Misaligned(format!("unknown parameter `{name}`")))?;
        *t = t.clone().with_requires_grad(flag);
        Ok(())
    }

    /// Errors unless `other` has exactly the same names, order and shapes.
    pub fn check_aligned(&self, other: &ParameterSet, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Misaligned(format!(
                "{what}: {} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b {
                return Err(Error::Misaligned(format!("{what}: `{a}` vs `{b}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::Misaligned(format!(
                    "{what}: `{a}` has shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += other` elementwise.
    pub fn accumulate(&mut self, other: &ParameterSet) -> Result<()> {
        self.check_aligned(other, "accumulate")?;
        for (t, o) in self.tensors.values_mut().zip(other.tensors.values()) {
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// All values concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_count());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.total_count() {
            return Err(Error::shape("unflatten", &[self.total_count()], &[flat.len()]));
        }
        let mut offset = 0;
        let mut tensors = IndexMap::with_capacity(self.len());
        for (k, t) in &self.tensors {
            let n = t.len();
            tensors.insert(k.clone(), t.with_data(flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { tensors })
    }

    /// Largest absolute elementwise difference; sets must be aligned.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> Result<f64> {
        self.check_aligned(other, "max_abs_diff")?;
        Ok(self
            .tensors
            .values()
            .zip(other.tensors.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn to_bytes(&self, header: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + header.len() + self.total_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes a container, returning the parameters and the header text.
    /// Loaded tensors are trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(r.err("magic", "not a parameter container"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.err("version", &format!("unsupported format version {version}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| r.err("header", "header is not UTF-8"))?
            .to_string();
        let count = r.u32("count")?;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| r.err("name", "parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64("dims")? as usize);
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| r.err("dims", "dimension product overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("data", "too large"))?, "data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| r.err("dims", &e.to_string()))?
                .with_requires_grad(true);
            set.insert(&name, t).map_err(|e| r.err("name", &e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailer", "unexpected trailing bytes"));
        }
        Ok((set, header))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, field: &str, message: &str) -> Error {
        Error::Parse {
            field: field.to_string(),
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(field, "truncated payload"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        p.insert("b", Tensor::new(vec![3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        assert!(p.insert("a", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let p = sample();
        let bytes = p.to_bytes("{\"stage\":\"pretrained\"}");
        let (q, header) = ParameterSet::from_bytes(&bytes).unwrap();
        assert_eq!(header, "{\"stage\":\"pretrained\"}");
        for ((na, ta), (nb, tb)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(q.to_bytes("{\"stage\":\"pretrained\"}"), bytes);
    }

    #[test]
    fn truncated_container_reports_offset() {
        let bytes = sample().to_bytes("");
        let err = ParameterSet::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { field, offset, .. } => {
                assert_eq!(field, "data");
                assert!(offset > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ParameterSet::from_bytes(b"NOTMAGIC").is_err());
    }

    #[test]
    fn deep_copy_is_independent() {
        let p = sample();
        let mut q = p.deep_copy();
        q.get_mut("a").unwrap().data_mut()[0] = 42.0;
        assert_eq!(p.get("a").unwrap().data()[0], 0.0);
        assert!(!p.get("b").unwrap().shares_buffer(q.get("b").unwrap()));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_identity(values in proptest::collection::vec(-1e6f64..1e6, 9)) {
            let template = sample();
            let restored = template.unflatten(&values).unwrap();
            prop_assert_eq!(restored.flatten(), values);
            let names: Vec<_> = restored.names().collect();
            prop_assert_eq!(names, vec!["a", "b"]);
        }
    }
}
