//! Channel-major single-sample feature maps.

use serde::{Deserialize, Serialize};

/// Feature map of shape `(channels, z, y, x)`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Tensor {
            channels,
            dims,
            data,
        }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.dims, b.dims);
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        }
    }

    /// Splits a channel-concatenated gradient into its two halves.
    pub fn split(self, first_channels: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let mut data = self.data;
        let tail = data.split_off(first_channels * n);
        (
            Tensor {
                channels: first_channels,
                dims: self.dims,
                data,
            },
            Tensor {
                channels: self.channels - first_channels,
                dims: self.dims,
                data: tail,
            },
        )
    }

    /// Zero-pads spatially, placing `self` at offset `before`.
    pub fn pad(&self, before: [usize; 3], dims: [usize; 3]) -> Tensor {
        let mut out = Tensor::zeros(self.channels, dims);
        let [sx, sy, sz] = self.dims;
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..sz {
                for y in 0..sy {
                    let s = (z * sy + y) * sx;
                    let d = ((z + before[2]) * dims[1] + y + before[1]) * dims[0] + before[0];
                    dst[d..d + sx].copy_from_slice(&src[s..s + sx]);
                }
            }
        }
        out
    }

    /// Inverse of [`Tensor::pad`].
    pub fn crop(&self, before: [usize; 3], dims: [usize; 3]) -> Tensor {
        let mut out = Tensor::zeros(self.channels, dims);
        let [px, py, _] = self.dims;
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for z in 0..dims[2] {
                for y in 0..dims[1] {
                    let s = ((z + before[2]) * py + y + before[1]) * px + before[0];
                    let d = (z * dims[1] + y) * dims[0];
                    dst[d..d + dims[0]].copy_from_slice(&src[s..s + dims[0]]);
                }
            }
        }
        out
    }
}

/// A trainable parameter with its gradient and Adam moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f32>,
    #[serde(skip)]
    pub grad: Vec<f32>,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Restores gradient and moment buffers after deserialization.
    pub(crate) fn ensure_buffers(&mut self) {
        let n = self.value.len();
        for buf in [&mut self.grad, &mut self.m, &mut self.v] {
            if buf.len() != n {
                *buf = vec![0.0; n];
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
