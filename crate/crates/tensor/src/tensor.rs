use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Result, TensorError};
use crate::scalar::{DType, Scalar};

/// Dense row-major array. Values only; gradient tracking lives in [`crate::Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub const DUMP_MAGIC: &[u8; 4] = b"GPTN";
pub const DUMP_VERSION: u8 = 1;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries; draws are made in f64 so f32 and f64 tensors
    /// built from the same generator state agree up to rounding.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Row-major element access.
    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            );
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    #[allow(clippy::eq_op)]
    pub fn all_finite(&self) -> bool {
        // v - v is zero for finite v and NaN otherwise; lane sums keep the loop vectorizable
        let mut lanes = [T::zero(); 8];
        let mut chunks = self.data.chunks_exact(8);
        for c in &mut chunks {
            for (l, &v) in lanes.iter_mut().zip(c) {
                *l += v - v;
            }
        }
        let tail = chunks.remainder().iter().fold(T::zero(), |a, &v| a + (v - v));
        lanes.iter().fold(tail, |a, &l| a + l).is_finite()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Serialise in the `GPTN` fixture format: magic, version, dtype, rank,
    /// little-endian u64 extents, then the little-endian payload.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(TensorError::Format(format!(
                "rank {} does not fit in a u8",
                self.shape.len()
            )));
        }
        let mut buf = Vec::with_capacity(8 + 8 * self.shape.len() + self.data.len() * 8);
        buf.extend_from_slice(DUMP_MAGIC);
        buf.push(DUMP_VERSION);
        buf.push(T::DTYPE.code());
        buf.push(self.shape.len() as u8);
        for &e in &self.shape {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let fmt = |m: &str| TensorError::Format(m.to_string());
        if bytes.len() < 7 || &bytes[..4] != DUMP_MAGIC {
            return Err(fmt("bad magic"));
        }
        if bytes[4] != DUMP_VERSION {
            return Err(TensorError::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])
            .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", bytes[5])))?;
        if dtype != T::DTYPE {
            return Err(TensorError::Format(format!(
                "dump holds {}, requested {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let rank = bytes[6] as usize;
        let mut pos = 7;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let raw = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| fmt("truncated extents"))?;
            shape.push(u64::from_le_bytes(raw.try_into().unwrap()) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        let width = dtype.size_of();
        let payload = &bytes[pos..];
        if payload.len() != n * width {
            return Err(TensorError::Format(format!(
                "payload holds {} bytes, shape {shape:?} needs {}",
                payload.len(),
                n * width
            )));
        }
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Self::new(shape, data)
    }
}

/// Broadcast result shape under trailing-axis alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err("broadcast", format!("{a:?} vs {b:?}")),
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_len() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_trailing_alignment() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 3], &[5, 1]).unwrap(), vec![2, 5, 3]);
        assert!(broadcast_shape(&[4, 3], &[4]).is_err());
    }

    #[test]
    fn dump_round_trip_and_errors() {
        let t = Tensor::<f64>::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GPTN");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], DType::F64.code());
        assert_eq!(buf[6], 2);
        let back = Tensor::<f64>::read_dump(&buf[..]).unwrap();
        assert_eq!(back, t);

        assert!(Tensor::<f32>::read_dump(&buf[..]).is_err());
        assert!(Tensor::<f64>::read_dump(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::<f64>::read_dump(&bad[..]).is_err());
    }
}
