//! Little-endian helpers shared by the binary file formats.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Bounds-checked cursor over an in-memory payload.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::PayloadLength {
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let found = self.take(8).map_err(|_| Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(LittleEndian::read_f32(self.take(4)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        let mut out = vec![0f32; n];
        LittleEndian::read_f32_into(bytes, &mut out);
        if let Some(bad) = out.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                value: *bad as f64,
                context: context.to_string(),
            });
        }
        Ok(out)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::InvalidArgument(format!("invalid UTF-8 string: {e}")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::PayloadLength {
                expected: self.pos as u64,
                actual: self.buf.len() as u64,
            });
        }
        Ok(())
    }
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_f32s<W: Write>(
    w: &mut W,
    xs: impl IntoIterator<Item = f32>,
) -> std::io::Result<()> {
    for x in xs {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}
