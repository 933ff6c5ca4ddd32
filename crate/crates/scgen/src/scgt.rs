//! Single-tensor binary format.
//!
//! ```text
//! "SCGT"  u8 version=1  u8 dtype (0 f32, 1 f64)  u32 ndim  ndim x u64 dims  payload
//! ```
//!
//! All integers and the payload are little-endian. Tensors are written
//! with four dimensions; files with fewer are read with leading ones.

use scgen_core::{DType, Scalar, Shape, Tensor4};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SCGT";
pub const VERSION: u8 = 1;

/// Little-endian cursor that reports the offset of the first failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn fail(&self, detail: impl Into<String>) -> Error {
        Error::format(self.what, self.pos as u64, detail)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn encode<T: Scalar>(t: &Tensor4<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 32 + t.len() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match T::DTYPE {
        DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.as_f64().to_le_bytes())),
    }
    out
}

pub(crate) fn read_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor4<T>> {
    let start = r.pos();
    if r.take(4)? != MAGIC {
        return Err(Error::format(r.what, start as u64, "bad magic, expected SCGT"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let code = r.u8()?;
    let dtype = DType::from_code(code).ok_or_else(|| r.fail(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(r.fail(format!("stored {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let ndim = r.u32()? as usize;
    if ndim > 4 {
        return Err(r.fail(format!("{ndim} dimensions, at most 4 supported")));
    }
    let mut dims = [1usize; 4];
    for d in &mut dims[4 - ndim..] {
        *d = usize::try_from(r.u64()?).map_err(|_| r.fail("dimension overflows usize"))?;
    }
    let shape = Shape::from_dims(dims);
    let bytes = shape
        .numel()
        .checked_mul(dtype.size())
        .ok_or_else(|| r.fail("payload size overflows"))?;
    let payload = r.take(bytes)?;
    let data: Vec<T> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    Ok(Tensor4::from_vec(shape, data)?)
}

/// Decodes exactly one tensor; trailing bytes are an error.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor4<T>> {
    let mut r = Reader::new(bytes, "SCGT");
    let t = read_tensor(&mut r)?;
    if !r.at_end() {
        return Err(r.fail("trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn save<T: Scalar>(path: &std::path::Path, t: &Tensor4<T>) -> Result<()> {
    crate::error::write_file(path, &encode(t))
}

pub fn load<T: Scalar>(path: &std::path::Path) -> Result<Tensor4<T>> {
    decode(&crate::error::read_file(path)?)
}
