//! Named parameter storage, seeded initialization and the binary parameter file.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

const MAGIC: &[u8; 4] = b"RENE";
const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from parameter name to tensor. Also used to hold gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

macro_rules! typed_view {
    ($get:ident, $get_mut:ident, $view:ident, $view_mut:ident, $dim:ty) => {
        pub fn $get(&self, name: &str) -> Result<$view<'_, f64>> {
            self.get(name)?
                .view()
                .into_dimensionality::<$dim>()
                .map_err(|_| Error::invalid(format!("parameter {name} has the wrong rank")))
        }

        pub fn $get_mut(&mut self, name: &str) -> Result<$view_mut<'_, f64>> {
            self.get_mut(name)?
                .view_mut()
                .into_dimensionality::<$dim>()
                .map_err(|_| Error::invalid(format!("parameter {name} has the wrong rank")))
        }
    };
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates every spec in order, drawing from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::new();
        for spec in specs {
            if set.tensors.contains_key(&spec.name) {
                return Err(Error::invalid(format!("duplicate parameter {}", spec.name)));
            }
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(IxDyn(&spec.shape)),
                Init::Ones => Tensor::ones(IxDyn(&spec.shape)),
                Init::Xavier { fan_in, fan_out } => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    Tensor::from_shape_simple_fn(IxDyn(&spec.shape), || rng.gen_range(-bound..bound))
                }
            };
            set.tensors.insert(spec.name.clone(), t);
        }
        Ok(set)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    typed_view!(view1, view1_mut, ArrayView1, ArrayViewMut1, ndarray::Ix1);
    typed_view!(view2, view2_mut, ArrayView2, ArrayViewMut2, ndarray::Ix2);
    typed_view!(view3, view3_mut, ArrayView3, ArrayViewMut3, ndarray::Ix3);

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// `self += scale * other` for every tensor present in both.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        for (name, g) in &other.tensors {
            let t = self.get_mut(name)?;
            if t.shape() != g.shape() {
                return Err(Error::invalid(format!("shape mismatch for {name}")));
            }
            t.scaled_add(scale, g);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses the binary format. `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic, expected RENE"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.error(4, &format!("unsupported format version {version}")));
        }
        let mut set = Self::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error(at as u64, "parameter name is not UTF-8"))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let values: Vec<f64> = match dtype {
                DTYPE_F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                    .collect(),
                other => return Err(r.error(dtype_at as u64, &format!("unknown dtype tag {other}"))),
            };
            let t = Tensor::from_shape_vec(IxDyn(&dims), values).expect("length matches dims");
            set.tensors.insert(name, t);
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn error(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            path: self.origin.to_path_buf(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error(self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a.weight", &[3, 4], Init::Xavier { fan_in: 3, fan_out: 4 }),
            ParamSpec::new("a.bias", &[4], Init::Zeros),
            ParamSpec::new("n.gain", &[4], Init::Ones),
        ]
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParameterSet::init(&specs(), 7).unwrap();
        let b = ParameterSet::init(&specs(), 7).unwrap();
        let c = ParameterSet::init(&specs(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.get("a.weight").unwrap().iter().all(|v| v.abs() <= bound));
        assert!(a.get("a.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.get("n.gain").unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(a.numel(), 20);
    }

    #[test]
    fn binary_round_trip() {
        let a = ParameterSet::init(&specs(), 3).unwrap();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"RENE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let b = ParameterSet::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(a, b);
        let names: Vec<_> = b.names().collect();
        assert_eq!(names, ["a.weight", "a.bias", "n.gain"]);
    }

    #[test]
    fn reads_f32_payloads() {
        let mut bytes = b"RENE".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(DTYPE_F32);
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(2u32.to_le_bytes());
        bytes.extend(1.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let p = ParameterSet::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p.view1("x").unwrap().to_vec(), vec![1.5, -2.0]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let a = ParameterSet::init(&specs(), 3).unwrap();
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        match ParameterSet::from_bytes(&bytes, Path::new("p.bin")) {
            Err(Error::Format { offset, .. }) => assert!(offset > 8),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(ParameterSet::from_bytes(b"NOPE\x01\0\0\0", Path::new("p")).is_err());
    }

    #[test]
    fn add_scaled_updates() {
        let mut a = ParameterSet::init(&specs(), 3).unwrap();
        let mut g = a.zeros_like();
        g.get_mut("a.bias").unwrap().fill(1.0);
        a.add_scaled(&g, -0.5).unwrap();
        assert!(a.get("a.bias").unwrap().iter().all(|&v| v == -0.5));
    }
}
