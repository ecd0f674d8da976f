//! Versioned binary container shared by every saved model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DCK1"
//! u32       length of the key/value text block
//! [u8]      UTF-8 lines `key=value`; array directory lines are
//!           `array.<i>=<name>:<d0>x<d1>...`
//! u64       number of arrays
//! per array: u64 element count, then that many f64
//! u64       checksum: first 8 bytes of SHA-256 over everything before it
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::tensor::ParamSet;

pub const MAGIC: &[u8; 4] = b"DCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    meta: Vec<(String, String)>,
    arrays: Vec<NamedArray>,
}

pub(crate) fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corruption {
        context: "checkpoint".into(),
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.set("kind", kind);
        c
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(
            !key.contains(['=', '\n']) && !value.contains('\n'),
            "invalid checkpoint entry {key:?}"
        );
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks key '{key}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint key '{key}' has unparsable value '{raw}'")))
    }

    pub fn kind(&self) -> Result<&str> {
        self.require("kind")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        let got = self.kind()?;
        if got != kind {
            bail!(Format, "expected a '{kind}' checkpoint, found '{got}'");
        }
        Ok(())
    }

    pub fn meta(&self) -> &[(String, String)] {
        &self.meta
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert!(!name.contains([':', '\n', '=']), "invalid array name {name:?}");
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray { name, shape, data });
    }

    /// Appends every tensor of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push_array(format!("{prefix}.{name}"), t.shape().to_vec(), t.data().to_vec());
        }
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array '{name}'")))
    }

    /// Loads arrays written by [`Checkpoint::push_params`] into `params`.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let lead = format!("{prefix}.");
        let arrays: Vec<(Vec<usize>, Vec<f64>)> = self
            .arrays
            .iter()
            .filter(|a| a.name.starts_with(&lead))
            .map(|a| (a.shape.clone(), a.data.clone()))
            .collect();
        params.load_arrays(&arrays)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (i, a) in self.arrays.iter().enumerate() {
            let dims: Vec<String> = a.shape.iter().map(ToString::to_string).collect();
            text.push_str(&format!("array.{i}={}:{}\n", a.name, dims.join("x")));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.data.len() as u64).to_le_bytes());
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            bail!(Format, "not a DCK1 checkpoint (bad magic)");
        }
        if bytes.len() < 4 + 4 + 8 + 8 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != checksum(body) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| corrupt("key/value block is not UTF-8"))?;
        let mut meta = Vec::new();
        let mut directory = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("malformed line '{line}'")))?;
            if let Some(idx) = k.strip_prefix("array.") {
                let idx: usize = idx.parse().map_err(|_| corrupt(format!("bad array index '{k}'")))?;
                let (name, dims) = v
                    .rsplit_once(':')
                    .ok_or_else(|| corrupt(format!("bad array entry '{v}'")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| corrupt(format!("bad array shape '{dims}'")))?;
                directory.push((idx, name.to_string(), shape));
            } else {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        let count = r.u64()? as usize;
        if count != directory.len() {
            return Err(corrupt(format!(
                "directory lists {} arrays, payload has {}",
                directory.len(),
                count
            )));
        }
        let mut arrays = Vec::with_capacity(count);
        for (i, (idx, name, shape)) in directory.into_iter().enumerate() {
            if idx != i {
                return Err(corrupt("array directory out of order"));
            }
            let len = r.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(corrupt(format!("array '{name}' length {len} does not match shape {shape:?}")));
            }
            let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("array too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes before checksum"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test");
        c.set("horizon", 16);
        c.set("channels", "32,64");
        c.push_array("a", vec![2, 2], vec![1.0, -2.5, 3.0e-300, f64::MAX]);
        c.push_array("b", vec![1], vec![0.1]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.parse::<usize>("horizon").unwrap(), 16);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().to_bytes();
        for i in 4..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(
                matches!(Checkpoint::from_bytes(&b), Err(Error::Corruption { .. })),
                "flip at {i} went unnoticed"
            );
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
