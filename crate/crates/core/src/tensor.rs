//! Dense row-major tensors.
//!
//! Two element types cover the whole engine: `f32` for the float domain the
//! operations run in, and a wide signed integer tagged with a logical bit
//! width for the quantized values that faults act on.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extent of the last axis.
    pub fn last(&self) -> usize {
        *self.0.last().expect("shape has rank >= 1")
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                expected: shape.numel(),
                shape: shape.0,
            });
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        FloatTensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        FloatTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape.0,
                right: shape.0,
            });
        }
        Ok(FloatTensor {
            shape,
            data: self.data,
        })
    }

    /// Largest absolute value, 0 for an all-zero tensor.
    pub fn abs_max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        FloatTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `a + b`, where `b` either has the same shape as `a` or is a per-channel
/// vector broadcast along axis 1 (the bias-add case).
pub fn elementwise_add(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(FloatTensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let dims = a.dims();
    if b.shape.rank() == 1 && dims.len() >= 2 && dims[1] == b.len() {
        let channels = dims[1];
        let inner: usize = dims[2..].iter().product();
        let mut data = a.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b.data[(i / inner) % channels];
        }
        return Ok(FloatTensor {
            shape: a.shape.clone(),
            data,
        });
    }
    Err(Error::ShapeMismatch {
        left: a.dims().to_vec(),
        right: b.dims().to_vec(),
    })
}

/// Index of the maximum along the last axis for every row; ties go to the
/// lowest index.
pub fn argmax_last_axis(x: &FloatTensor) -> Result<Vec<usize>> {
    if x.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let width = x.shape.last();
    Ok(x.data.chunks_exact(width).map(argmax).collect())
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Signed integers in a wide container, tagged with the logical width the
/// values must fit in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Shape,
    data: Vec<i32>,
    width: u32,
}

impl IntTensor {
    pub fn new(shape: Shape, data: Vec<i32>, width: u32) -> Result<Self> {
        let (lo, hi) = int_range(width)?;
        if data.len() != shape.numel() {
            return Err(Error::LengthMismatch {
                len: data.len(),
                expected: shape.numel(),
                shape: shape.0,
            });
        }
        if let Some(index) = data.iter().position(|&v| v < lo || v > hi) {
            return Err(Error::OutOfRange {
                index,
                value: data[index] as i64,
                width,
            });
        }
        Ok(IntTensor { shape, data, width })
    }

    /// Caller guarantees the range invariant.
    pub(crate) fn new_unchecked(shape: Shape, data: Vec<i32>, width: u32) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        IntTensor { shape, data, width }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Inclusive two's-complement range of a supported width.
pub fn int_range(width: u32) -> Result<(i32, i32)> {
    match width {
        8 => Ok((i8::MIN as i32, i8::MAX as i32)),
        32 => Ok((i32::MIN, i32::MAX)),
        w => Err(Error::BitWidth(w)),
    }
}
