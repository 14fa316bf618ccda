use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H×W` foreground indicator: 1 marks anomaly pixels, 0 background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl AnomalyMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(u8::from(f(i, j)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Values must be 0 or 1.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![data.len()],
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidRange("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j] != 0
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize) -> f64 {
        f64::from(self.data[i * self.width + j])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Mask as a `1×H×W` tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            1,
            self.height,
            self.width,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("mask length matches its shape")
    }

    pub fn ensure_matches(&self, x: &Tensor) -> Result<()> {
        if x.height() != self.height || x.width() != self.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![x.height(), x.width()],
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &AnomalyMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(())
    }
}
