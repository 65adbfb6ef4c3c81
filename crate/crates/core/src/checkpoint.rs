//! Binary tensor container, little-endian throughout:
//!
//! ```text
//! "VDSK" | version u32 | tag [u8; 4] | meta_len u32 | meta (UTF-8)
//! | count u32 | count × (name_len u32 | name | rank u32 | dims u64×rank | dtype u8 | payload)
//! ```
//!
//! Metadata is `key<TAB>value` lines in key order. Tensors keep insertion order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 4] = b"VDSK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTag {
    Uvit,
    Aenc,
    Adpt,
    Embd,
}

impl SectionTag {
    pub fn bytes(self) -> &'static [u8; 4] {
        match self {
            SectionTag::Uvit => b"UVIT",
            SectionTag::Aenc => b"AENC",
            SectionTag::Adpt => b"ADPT",
            SectionTag::Embd => b"EMBD",
        }
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        match b {
            b"UVIT" => Ok(SectionTag::Uvit),
            b"AENC" => Ok(SectionTag::Aenc),
            b"ADPT" => Ok(SectionTag::Adpt),
            b"EMBD" => Ok(SectionTag::Embd),
            other => Err(Error::Format(format!("unknown section tag {:?}", String::from_utf8_lossy(other)))),
        }
    }
}

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub tag: SectionTag,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(tag: SectionTag) -> Self {
        Self { tag, metadata: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn with_store(tag: SectionTag, store: &ParamStore) -> Self {
        let mut ck = Self::new(tag);
        ck.add_store("", store);
        ck
    }

    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, var) in store.iter() {
            self.tensors.push((format!("{prefix}{name}"), var.as_tensor().clone()));
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Format(format!("bad metadata value {key}={raw:?}")))
    }

    /// Tensors whose names start with `prefix`, prefix stripped, as a store.
    pub fn store(&self, prefix: &str) -> Result<ParamStore> {
        let mut dtype = None;
        let mut pairs = vec![];
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                dtype.get_or_insert(t.dtype());
                pairs.push((rest, t));
            }
        }
        let mut store = ParamStore::new(dtype.unwrap_or(DType::F32));
        for (name, t) in pairs {
            store.insert(name, t.clone())?;
        }
        Ok(store)
    }

    /// `(name, tensor)` pairs under `prefix`, prefix stripped.
    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|r| (r.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(self.tag.bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\t', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata entry {k:?} contains a separator")));
            }
            meta.push_str(k);
            meta.push('\t');
            meta.push_str(v);
            meta.push('\n');
        }
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank())?;
            for d in t.dims() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F32 => {
                    out.push(DTYPE_F32);
                    for v in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    out.push(DTYPE_F64);
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => return Err(Error::Format(format!("tensor {name} has unsupported dtype {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let tag = SectionTag::from_bytes(r.take(4)?)?;
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('\t').ok_or_else(|| Error::Format(format!("bad metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let t = match r.u8()? {
                DTYPE_F32 => {
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tag, metadata, tensors })
    }

    /// Written to a sibling temp file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_tagged(path: &Path, tag: SectionTag) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.tag != tag {
            return Err(Error::Format(format!(
                "{}: expected section {:?}, found {:?}",
                path.display(),
                tag,
                ck.tag
            )));
        }
        Ok(ck)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Write `bytes` to `path` via a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(SectionTag::Aenc);
        ck.set_meta("step", 12);
        ck.set_meta("latent_scale", 0.3665f64);
        ck.add("a.w", Tensor::from_vec(vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0], (2, 2), &Device::Cpu).unwrap());
        ck.add("b", Tensor::from_vec(vec![std::f64::consts::PI], (1,), &Device::Cpu).unwrap());
        ck.add("scalar", Tensor::new(2.5f32, &Device::Cpu).unwrap());
        ck
    }

    #[test]
    fn layout_matches_format() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"VDSK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[8..12], b"AENC");
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + meta_len], b"latent_scale\t0.3665\nstep\t12\n");
        let p = 16 + meta_len;
        assert_eq!(u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()), 3);
        // First tensor: name "a.w", rank 2, dims 2 2, f32.
        assert_eq!(u32::from_le_bytes(bytes[p + 4..p + 8].try_into().unwrap()), 3);
        assert_eq!(&bytes[p + 8..p + 11], b"a.w");
        assert_eq!(u32::from_le_bytes(bytes[p + 11..p + 15].try_into().unwrap()), 2);
        assert_eq!(bytes[p + 31], DTYPE_F32);
        assert_eq!(&bytes[p + 32..p + 36], &1.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = sample().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.meta_parse::<usize>("step").unwrap(), 12);
        assert_eq!(back.tensors[2].1.rank(), 0);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut tag = bytes.clone();
        tag[8..12].copy_from_slice(b"XXXX");
        assert!(Checkpoint::from_bytes(&tag).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn save_load_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        Checkpoint::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert!(Checkpoint::load_tagged(&p, SectionTag::Uvit).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            vals in proptest::collection::vec(any::<u32>(), 0..40),
            wide in any::<bool>(),
            key in "[a-z_]{1,8}",
            value in "[ -~]{0,12}",
        ) {
            let mut ck = Checkpoint::new(SectionTag::Embd);
            ck.set_meta(&key, &value);
            let n = vals.len();
            let t = if wide {
                Tensor::from_vec(vals.iter().map(|v| f64::from_bits((*v as u64) << 20)).collect::<Vec<_>>(), n, &Device::Cpu).unwrap()
            } else {
                Tensor::from_vec(vals.iter().map(|v| f32::from_bits(*v)).collect::<Vec<_>>(), n, &Device::Cpu).unwrap()
            };
            ck.add("t", t);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            prop_assert_eq!(back.meta(&key).unwrap(), value.as_str());
        }
    }
}
