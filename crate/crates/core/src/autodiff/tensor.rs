//! Dense row-major tensors and the `FBT1` binary format.

use std::io::{Read, Write};

use super::AutodiffError;

const FBT_MAGIC: &[u8; 4] = b"FBT1";

/// Dense n-dimensional array of `f64` scalars stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {n} scalars, data has {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Build a rows x cols matrix. Panics if the data length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::matrix(1, 1, vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (all leading extents collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(AutodiffError::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Round every scalar to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Serialize as `FBT1`: magic, u8 rank, rank x u32 LE extents, f32 LE payload.
    pub fn write_fbt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"));
        }
        let mut buf = Vec::with_capacity(5 + 4 * self.shape.len() + 4 * self.data.len());
        buf.extend_from_slice(FBT_MAGIC);
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_fbt<R: Read>(mut r: R) -> std::io::Result<Self> {
        let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FBT_MAGIC {
            return Err(invalid(format!("bad magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))
    }
}
