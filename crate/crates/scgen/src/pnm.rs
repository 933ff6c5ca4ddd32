//! Binary PPM (P6, RGB) and PGM (P5, gray) images with 8-bit samples.

use std::path::Path;

use crate::error::{read_file, write_file, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Image { width, height, channels: 3, data }
    }

    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Image { width, height, channels: 1, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        assert_eq!(self.data.len(), self.width * self.height * self.channels, "pixel buffer size");
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |pos: usize, d: &str| Error::format("PNM", pos as u64, d);
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(fail(0, "expected P5 or P6 magic")),
        };
        let mut pos = 2;
        let field = |pos: &mut usize| -> Result<usize> {
            loop {
                match bytes.get(*pos) {
                    Some(c) if c.is_ascii_whitespace() => *pos += 1,
                    Some(b'#') => {
                        while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                            *pos += 1;
                        }
                    }
                    Some(c) if c.is_ascii_digit() => break,
                    Some(_) => return Err(fail(*pos, "expected a decimal header field")),
                    None => return Err(fail(*pos, "truncated header")),
                }
            }
            let start = *pos;
            while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
                *pos += 1;
            }
            std::str::from_utf8(&bytes[start..*pos])
                .expect("ascii digits")
                .parse()
                .map_err(|_| fail(start, "header field out of range"))
        };
        if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(2, "expected whitespace after magic"));
        }
        let width = field(&mut pos)?;
        let height = field(&mut pos)?;
        let maxval_at = pos;
        let maxval = field(&mut pos)?;
        if maxval != 255 {
            return Err(fail(maxval_at, "only 8-bit images with maxval 255 are supported"));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail(pos, "expected one whitespace byte before pixel data"));
        }
        pos += 1;
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| fail(pos, "image dimensions overflow"))?;
        let rest = &bytes[pos..];
        if rest.len() < need {
            return Err(fail(bytes.len(), &format!("truncated pixel data: {} of {need} bytes", rest.len())));
        }
        if rest.len() > need {
            return Err(fail(pos + need, "trailing bytes after pixel data"));
        }
        Ok(Image { width, height, channels, data: rest.to_vec() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Image::decode(&read_file(path)?).map_err(|e| match e {
            Error::Format { what, offset, detail } => {
                Error::Format { what, offset, detail: format!("{detail} in {}", path.display()) }
            }
            other => other,
        })
    }
}
