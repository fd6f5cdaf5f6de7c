//! The MODK binary container shared by datasets and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MODK"  u32 version
//! repeated until end of file:
//!   u32 name_len  name (UTF-8)  u8 dtype  u32 rank  u64 extent × rank  payload
//! ```
//!
//! Payload elements are little-endian in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MODK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U8 = 2,
    U32 = 3,
    U64 = 4,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::U32,
            4 => DType::U64,
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            DType::F64 | DType::U64 => 8,
            DType::U32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::U8(_) => DType::U8,
            Payload::U32(_) => DType::U32,
            Payload::U64(_) => DType::U64,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

/// Ordered list of named sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) {
        debug_assert_eq!(shape.iter().product::<usize>(), payload.len());
        self.sections.push(Section {
            name: name.into(),
            shape,
            payload,
        });
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.push(name, t.shape().to_vec(), Payload::F64(t.data().to_vec()));
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: &str) {
        let bytes = text.as_bytes().to_vec();
        self.push(name, vec![bytes.len()], Payload::U8(bytes));
    }

    pub fn put_u32(&mut self, name: impl Into<String>, v: &[u32]) {
        self.push(name, vec![v.len()], Payload::U32(v.to_vec()));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, v: &[u64]) {
        self.push(name, vec![v.len()], Payload::U64(v.to_vec()));
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Format(format!("missing section {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let s = self.get(name)?;
        match &s.payload {
            Payload::F64(v) => Tensor::new(s.shape.clone(), v.clone()),
            _ => Err(Error::Format(format!("section {name:?} is not f64"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.get(name)?.payload {
            Payload::U8(v) => String::from_utf8(v.clone()).map_err(|e| Error::Format(format!("{name}: {e}"))),
            _ => Err(Error::Format(format!("section {name:?} is not text"))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        match &self.get(name)?.payload {
            Payload::U32(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("section {name:?} is not u32"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match &self.get(name)?.payload {
            Payload::U64(v) => Ok(v.clone()),
            _ => Err(Error::Format(format!("section {name:?} is not u64"))),
        }
    }

    /// Sections whose name starts with `prefix`, prefix stripped.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        self.sections
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| Ok((s.name[prefix.len()..].to_string(), self.tensor(&s.name)?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.payload.dtype() as u8);
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &e in &s.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match &s.payload {
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
                Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut c = Container::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Format(format!("section name: {e}")))?
                .to_string();
            let dtype = DType::from_tag(r.take(1)?[0])?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Format("extent overflow".into()))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let payload = match dtype {
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                DType::U8 => Payload::U8(raw.to_vec()),
                DType::U32 => Payload::U32(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()),
                DType::U64 => Payload::U64(raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
            };
            c.sections.push(Section { name, shape, payload });
        }
        Ok(c)
    }

    /// Writes to a sibling temporary file and renames it over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Temp file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.put_tensor("w", &Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 1e-300]).unwrap());
        c.put_text("caption", "a red circle");
        c.put_u32("codes", &[1, 2, 3]);
        c.put_u64("count", &[7]);
        c
    }

    #[test]
    fn exact_header_layout() {
        let mut c = Container::new();
        c.put_u32("ab", &[5]);
        let b = c.to_bytes();
        let mut want = b"MODK".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(3);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&5u32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn bytes_roundtrip() {
        let c = sample();
        assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncation_inside_a_section_fails() {
        let b = sample().to_bytes();
        for cut in [3, 7, 12, b.len() - 1] {
            assert!(Container::from_bytes(&b[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = sample().to_bytes();
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
        let mut b = sample().to_bytes();
        b[4] = 9;
        assert!(Container::from_bytes(&b).is_err());
    }

    #[test]
    fn file_roundtrip_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.modk");
        sample().write(&p).unwrap();
        assert_eq!(Container::read(&p).unwrap(), sample());
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let r = sample().write(Path::new("/nonexistent-dir/x.modk"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
