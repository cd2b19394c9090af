//! The "CTF1" raw array container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes   "CTF1\0\0\0\0"
//! rank    u32
//! dims    rank x u32
//! dtype   u8        0 real f32 | 1 complex f32 | 2 real f64 | 3 complex f64 | 4 u8
//! payload           row-major samples; complex values interleaved (re, im)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use num_complex::{Complex32, Complex64};

use super::ComplexImage;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTF1\0\0\0\0";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    RealF32(Vec<f32>),
    ComplexF32(Vec<Complex32>),
    RealF64(Vec<f64>),
    ComplexF64(Vec<Complex64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::RealF32(v) => v.len(),
            ArrayData::ComplexF32(v) => v.len(),
            ArrayData::RealF64(v) => v.len(),
            ArrayData::ComplexF64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::RealF32(_) => 0,
            ArrayData::ComplexF32(_) => 1,
            ArrayData::RealF64(_) => 2,
            ArrayData::ComplexF64(_) => 3,
            ArrayData::U8(_) => 4,
        }
    }

    /// Widens any element type to complex double precision.
    pub fn to_complex64(&self) -> Vec<Complex64> {
        match self {
            ArrayData::RealF32(v) => v.iter().map(|&x| Complex64::new(x as f64, 0.0)).collect(),
            ArrayData::ComplexF32(v) => v
                .iter()
                .map(|z| Complex64::new(z.re as f64, z.im as f64))
                .collect(),
            ArrayData::RealF64(v) => v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
            ArrayData::ComplexF64(v) => v.clone(),
            ArrayData::U8(v) => v.iter().map(|&x| Complex64::new(x as f64, 0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {count} samples, payload has {}",
                data.len()
            )));
        }
        Ok(Array { dims, data })
    }

    pub fn from_image(img: &ComplexImage) -> Self {
        Array {
            dims: vec![img.height(), img.width()],
            data: ArrayData::ComplexF64(img.data().to_vec()),
        }
    }

    pub fn to_image(&self) -> Result<ComplexImage> {
        match self.dims.as_slice() {
            &[h, w] => ComplexImage::new(h, w, self.data.to_complex64()),
            other => Err(Error::Shape(format!(
                "expected a rank-2 array, got dims {other:?}"
            ))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[self.data.tag()])?;
        let mut buf = Vec::new();
        match &self.data {
            ArrayData::RealF32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            ArrayData::ComplexF32(v) => v.iter().for_each(|z| {
                buf.extend(z.re.to_le_bytes());
                buf.extend(z.im.to_le_bytes());
            }),
            ArrayData::RealF64(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            ArrayData::ComplexF64(v) => v.iter().for_each(|z| {
                buf.extend(z.re.to_le_bytes());
                buf.extend(z.im.to_le_bytes());
            }),
            ArrayData::U8(v) => buf.extend_from_slice(v),
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one array from the front of `r`, leaving any trailing bytes.
    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| format!("magic: {e}"))?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(format!("rank {rank} too large"));
        }
        let dims = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|e| format!("dtype: {e}"))?;
        let count: usize = dims.iter().product();
        let width = match tag[0] {
            0 => 4,
            1 => 8,
            2 => 8,
            3 => 16,
            4 => 1,
            t => return Err(format!("unknown dtype tag {t}")),
        };
        let mut bytes = vec![0u8; count * width];
        r.read_exact(&mut bytes)
            .map_err(|e| format!("payload: {e}"))?;
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let data = match tag[0] {
            0 => ArrayData::RealF32((0..count).map(|k| f32_at(4 * k)).collect()),
            1 => ArrayData::ComplexF32(
                (0..count)
                    .map(|k| Complex32::new(f32_at(8 * k), f32_at(8 * k + 4)))
                    .collect(),
            ),
            2 => ArrayData::RealF64((0..count).map(|k| f64_at(8 * k)).collect()),
            3 => ArrayData::ComplexF64(
                (0..count)
                    .map(|k| Complex64::new(f64_at(16 * k), f64_at(16 * k + 8)))
                    .collect(),
            ),
            _ => ArrayData::U8(bytes.clone()),
        };
        Ok(Array { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = bytes.as_slice();
        let arr = Self::read_from(&mut cursor).map_err(|e| Error::format(path, e))?;
        if !cursor.is_empty() {
            return Err(Error::format(
                path,
                format!("{} trailing bytes", cursor.len()),
            ));
        }
        Ok(arr)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| format!("header: {e}"))?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_image(img: &ComplexImage, path: impl AsRef<Path>) -> Result<()> {
    Array::from_image(img).save(path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ComplexImage> {
    let path = path.as_ref();
    Array::load(path)?
        .to_image()
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let arr = Array::new(vec![2], ArrayData::U8(vec![1, 0])).unwrap();
        let bytes = arr.to_bytes();
        assert_eq!(&bytes[..8], b"CTF1\0\0\0\0");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(bytes[16], 4);
        assert_eq!(&bytes[17..], &[1, 0]);

        let arr = Array::new(
            vec![1, 1],
            ArrayData::ComplexF64(vec![Complex64::new(1.5, -2.0)]),
        )
        .unwrap();
        let bytes = arr.to_bytes();
        assert_eq!(bytes[20], 3);
        assert_eq!(&bytes[21..29], &1.5f64.to_le_bytes());
        assert_eq!(&bytes[29..37], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Array::read_from(&b"CTF2\0\0\0\0"[..]).is_err());
        let mut bytes = Array::new(vec![3], ArrayData::RealF64(vec![1.0, 2.0, 3.0]))
            .unwrap()
            .to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Array::read_from(bytes.as_slice()).is_err());
        assert!(Array::new(vec![2, 2], ArrayData::RealF32(vec![0.0; 3])).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(values in prop::collection::vec(any::<f64>(), 1..64), f32s in prop::collection::vec(any::<f32>(), 1..16)) {
            let n = values.len() / 2;
            let complex: Vec<Complex64> = (0..n).map(|k| Complex64::new(values[2 * k], values[2 * k + 1])).collect();
            for arr in [
                Array::new(vec![values.len()], ArrayData::RealF64(values.clone())).unwrap(),
                Array::new(vec![n, 1], ArrayData::ComplexF64(complex)).unwrap(),
                Array::new(vec![f32s.len()], ArrayData::RealF32(f32s.clone())).unwrap(),
            ] {
                let back = Array::read_from(arr.to_bytes().as_slice()).unwrap();
                prop_assert_eq!(arr.to_bytes(), back.to_bytes());
            }
        }
    }
}
