//! Little-endian cursor shared by the binary file decoders.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn read_bytes(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "file ends at byte {} but {len} more bytes were expected at byte {}",
                    self.bytes.len(),
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn read_u8(&mut self) -> Result<u8> {
        Ok(self.read_bytes(1)?[0])
    }

    pub(crate) fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.read_bytes(8)?.try_into().unwrap()))
    }

    /// Reads one finite f64; non-finite values are reported with their offset.
    pub(crate) fn read_f64(&mut self) -> Result<f64> {
        let at = self.pos;
        let v = f64::from_le_bytes(self.read_bytes(8)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("byte {at}")));
        }
        Ok(v)
    }

    /// Reads a row-major matrix.
    pub(crate) fn read_rows(&mut self, nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(nrows, ncols);
        for i in 0..nrows {
            for j in 0..ncols {
                m[(i, j)] = self.read_f64()?;
            }
        }
        Ok(m)
    }
}
