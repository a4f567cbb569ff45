//! Named-tensor binary encoding used inside checkpoint files.
//!
//! Layout per tensor: `u32` name length, UTF-8 name, `u32` rows, `u32` cols,
//! then `rows·cols` little-endian scalars. Integers are little-endian.

use ndarray::Array2;

use crate::{NnError, Scalar};

pub fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Array2<T>) {
    write_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    write_u32(out, t.nrows() as u32);
    write_u32(out, t.ncols() as u32);
    for v in t.iter() {
        v.write_le(out);
    }
}

/// Cursor over an encoded byte buffer.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.remaining() < n {
            return Err(NnError::Decode(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn tensor<T: Scalar>(&mut self, expect_name: &str) -> Result<Array2<T>, NnError> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|e| NnError::Decode(e.to_string()))?;
        if name != expect_name {
            return Err(NnError::Decode(format!(
                "expected tensor `{expect_name}`, found `{name}`"
            )));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * T::BYTES)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Array2::from_shape_vec((rows, cols), data).map_err(|e| NnError::Decode(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tensor_round_trip_and_name_check() {
        let t = array![[1.5_f32, -0.25], [3.0, f32::MIN_POSITIVE]];
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w0", &t);
        assert_eq!(Reader::new(&buf).tensor::<f32>("w0").unwrap(), t);
        assert!(Reader::new(&buf).tensor::<f32>("w1").is_err());
        assert!(Reader::new(&buf[..buf.len() - 1]).tensor::<f32>("w0").is_err());
    }

    proptest::proptest! {
        #[test]
        fn any_tensor_round_trips_bit_exactly(
            rows in 1usize..6,
            cols in 1usize..6,
            bits in proptest::collection::vec(proptest::num::u64::ANY, 36),
        ) {
            // Arbitrary bit patterns, NaN payloads included.
            let t = Array2::from_shape_fn((rows, cols), |(r, c)| f64::from_bits(bits[r * cols + c]));
            let mut buf = Vec::new();
            write_tensor(&mut buf, "t", &t);
            let back: Array2<f64> = Reader::new(&buf).tensor("t").unwrap();
            proptest::prop_assert!(t.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
