//! Layers with hand-written backward passes.
//!
//! Training-mode forward calls cache what the backward pass needs inside the
//! layer; inference calls take `&self` and cache nothing.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Param, Tensor};

/// Valid output index range `[lo, hi)` along one axis for kernel offset
/// `off = k - pad` and stride `s`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, off: isize, s: usize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = n_in as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(n_out as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Output voxels per patch-matrix block.
const SLAB_VOXELS: usize = 4096;

/// 3D convolution with cubic kernel, stride and zero padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    #[serde(skip)]
    input: Option<Tensor>,
}

impl Conv3d {
    /// He-normal initialised weights, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel.pow(3)) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = out_channels * in_channels * kernel.pow(3);
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new((0..n).map(|_| normal.sample(rng)).collect()),
            bias: Param::new(vec![0.0; out_channels]),
            input: None,
        }
    }

    pub fn output_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| (n + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    /// Patch matrix of shape `(in_channels * k^3, output voxels)`; rows are
    /// ordered like the weights so the convolution is one matrix product.
    fn im2col(&self, x: &Tensor, od: [usize; 3], zr: (usize, usize)) -> Array2<f32> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let [ix, iy, _] = x.dims;
        let [ox, oy, _] = od;
        let n = od[0] * od[1] * (zr.1 - zr.0);
        let mut cols = Array2::<f32>::zeros((self.in_channels * k * k * k, n));
        let mut rows = cols.rows_mut().into_iter();
        for i in 0..self.in_channels {
            let xi = x.channel(i);
            for kz in 0..k {
                let (z0, z1) = valid_range(od[2], x.dims[2], kz as isize - p, s);
                let (z0, z1) = (z0.max(zr.0), z1.min(zr.1));
                for ky in 0..k {
                    let (y0, y1) = valid_range(oy, iy, ky as isize - p, s);
                    for kx in 0..k {
                        let mut row = rows.next().expect("row per tap");
                        let row = row.as_slice_mut().expect("standard layout");
                        let (x0, x1) = valid_range(ox, ix, kx as isize - p, s);
                        if x0 >= x1 {
                            continue;
                        }
                        for z in z0..z1 {
                            let zi = (z * s) as isize + kz as isize - p;
                            for yy in y0..y1 {
                                let yi = (yy * s) as isize + ky as isize - p;
                                let ibase = (zi as usize * iy + yi as usize) * ix;
                                let orow = &mut row[((z - zr.0) * oy + yy) * ox..][..ox];
                                if s == 1 {
                                    let start = (ibase as isize + kx as isize - p + x0 as isize) as usize;
                                    orow[x0..x1].copy_from_slice(&xi[start..start + (x1 - x0)]);
                                } else {
                                    for (xx, ov) in orow.iter_mut().enumerate().take(x1).skip(x0) {
                                        *ov = xi[ibase + ((xx * s) as isize + kx as isize - p) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv3d::im2col`]: scatters patch rows back onto the input grid.
    fn col2im(&self, cols: &Array2<f32>, gx: &mut Tensor, od: [usize; 3], zr: (usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let in_dims = gx.dims;
        let [ix, iy, _] = in_dims;
        let [ox, oy, _] = od;
        let mut rows = cols.rows().into_iter();
        for i in 0..self.in_channels {
            let gxi = gx.channel_mut(i);
            for kz in 0..k {
                let (z0, z1) = valid_range(od[2], in_dims[2], kz as isize - p, s);
                let (z0, z1) = (z0.max(zr.0), z1.min(zr.1));
                for ky in 0..k {
                    let (y0, y1) = valid_range(oy, iy, ky as isize - p, s);
                    for kx in 0..k {
                        let row = rows.next().expect("row per tap");
                        let row = row.as_slice().expect("standard layout");
                        let (x0, x1) = valid_range(ox, ix, kx as isize - p, s);
                        if x0 >= x1 {
                            continue;
                        }
                        for z in z0..z1 {
                            let zi = (z * s) as isize + kz as isize - p;
                            for yy in y0..y1 {
                                let yi = (yy * s) as isize + ky as isize - p;
                                let ibase = (zi as usize * iy + yi as usize) * ix;
                                let grow = &row[((z - zr.0) * oy + yy) * ox..][..ox];
                                if s == 1 {
                                    let start = (ibase as isize + kx as isize - p + x0 as isize) as usize;
                                    for (g, v) in gxi[start..start + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                                        *g += v;
                                    }
                                } else {
                                    for (xx, v) in grow.iter().enumerate().take(x1).skip(x0) {
                                        gxi[ibase + ((xx * s) as isize + kx as isize - p) as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Output z-ranges holding about `SLAB_VOXELS` voxels each.
    fn slabs(od: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
        let step = (SLAB_VOXELS / (od[0] * od[1]).max(1)).max(1);
        (0..od[2]).step_by(step).map(move |z| (z, (z + step).min(od[2])))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let cols = self.in_channels * self.kernel.pow(3);
        ArrayView2::from_shape((self.out_channels, cols), &self.weight.value).expect("weight shape")
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels);
        let od = self.output_dims(x.dims);
        let mut y = Tensor::zeros(self.out_channels, od);
        let n = y.spatial();
        for o in 0..self.out_channels {
            y.channel_mut(o).fill(self.bias.value[o]);
        }
        let plane = od[0] * od[1];
        let w = self.weight_matrix();
        let mut ym = ArrayViewMut2::from_shape((self.out_channels, n), &mut y.data).expect("output shape");
        for zr in Self::slabs(od) {
            let cols = self.im2col(x, od, zr);
            let mut block = ym.slice_mut(s![.., zr.0 * plane..zr.1 * plane]);
            general_mat_mul(1.0, &w, &cols, 1.0, &mut block);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.take().expect("forward_train before backward");
        let od = gy.dims;
        let n = gy.spatial();
        let g = ArrayView2::from_shape((self.out_channels, n), &gy.data).expect("gradient shape");
        for o in 0..self.out_channels {
            self.bias.grad[o] += gy.channel(o).iter().sum::<f32>();
        }
        let plane = od[0] * od[1];
        let mut gx = Tensor::zeros(x.channels, x.dims);
        let wshape = (self.out_channels, self.in_channels * self.kernel.pow(3));
        let mut gw = Array2::<f32>::zeros(wshape);
        for zr in Self::slabs(od) {
            let cols = self.im2col(&x, od, zr);
            let gb = g.slice(s![.., zr.0 * plane..zr.1 * plane]);
            general_mat_mul(1.0, &gb, &cols.t(), 1.0, &mut gw);
            let gcols = self.weight_matrix().t().dot(&gb);
            self.col2im(&gcols, &mut gx, od, zr);
        }
        for (a, b) in self.weight.grad.iter_mut().zip(gw.iter()) {
            *a += b;
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvTranspose3d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Layout `[in][out][kz][ky][kx]`.
    pub weight: Param,
    pub bias: Param,
    #[serde(skip)]
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = in_channels * out_channels * 8;
        ConvTranspose3d {
            in_channels,
            out_channels,
            weight: Param::new((0..n).map(|_| normal.sample(rng)).collect()),
            bias: Param::new(vec![0.0; out_channels]),
            input: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels);
        let [ix, iy, iz] = x.dims;
        let od = [2 * ix, 2 * iy, 2 * iz];
        let mut y = Tensor::zeros(self.out_channels, od);
        for o in 0..self.out_channels {
            let yo = y.channel_mut(o);
            yo.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for i in 0..self.in_channels {
                let xi = x.channel(i);
                let wb = (i * self.out_channels + o) * 8;
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let w = self.weight.value[wb + (kz * 2 + ky) * 2 + kx];
                            for z in 0..iz {
                                for yy in 0..iy {
                                    let irow = &xi[(z * iy + yy) * ix..][..ix];
                                    let obase = ((2 * z + kz) * od[1] + 2 * yy + ky) * od[0] + kx;
                                    for (xx, v) in irow.iter().enumerate() {
                                        yo[obase + 2 * xx] += w * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let y = self.forward(x);
        self.input = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.take().expect("forward_train before backward");
        let [ix, iy, iz] = x.dims;
        let od = gy.dims;
        let mut gx = Tensor::zeros(x.channels, x.dims);
        for o in 0..self.out_channels {
            let go = gy.channel(o);
            self.bias.grad[o] += go.iter().sum::<f32>();
            for i in 0..self.in_channels {
                let xi = x.channel(i);
                let n = x.spatial();
                let gxi = &mut gx.data[i * n..(i + 1) * n];
                let wb = (i * self.out_channels + o) * 8;
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let widx = wb + (kz * 2 + ky) * 2 + kx;
                            let w = self.weight.value[widx];
                            let mut gw = 0.0f32;
                            for z in 0..iz {
                                for yy in 0..iy {
                                    let base = (z * iy + yy) * ix;
                                    let obase = ((2 * z + kz) * od[1] + 2 * yy + ky) * od[0] + kx;
                                    for xx in 0..ix {
                                        let g = go[obase + 2 * xx];
                                        gw += g * xi[base + xx];
                                        gxi[base + xx] += w * g;
                                    }
                                }
                            }
                            self.weight.grad[widx] += gw;
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

const NORM_EPS: f32 = 1e-5;

/// Per-channel normalisation over the spatial extent of one sample, with a
/// learned scale and shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    #[serde(skip)]
    cache: Option<(Tensor, Vec<f32>)>,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
        let n = x.spatial() as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let xc = x.channel(c);
            let mean = xc.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = xc.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let is = (1.0 / (var + NORM_EPS as f64).sqrt()) as f32;
            let mean = mean as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for (h, v) in xhat.channel_mut(c).iter_mut().zip(xc) {
                *h = (v - mean) * is;
            }
            for (o, h) in y.channel_mut(c).iter_mut().zip(xhat.channel(c)) {
                *o = g * h + b;
            }
            inv_std.push(is);
        }
        (y, xhat, inv_std)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.normalize(x).0
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let (y, xhat, inv_std) = self.normalize(x);
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("forward_train before backward");
        let n = gy.spatial() as f32;
        let mut gx = Tensor::zeros(gy.channels, gy.dims);
        for c in 0..self.channels {
            let g = gy.channel(c);
            let h = xhat.channel(c);
            let mut sum_g = 0.0f64;
            let mut sum_gh = 0.0f64;
            for (&gv, &hv) in g.iter().zip(h) {
                sum_g += gv as f64;
                sum_gh += (gv * hv) as f64;
            }
            self.beta.grad[c] += sum_g as f32;
            self.gamma.grad[c] += sum_gh as f32;
            let gamma = self.gamma.value[c];
            // d xhat = gamma * gy
            let sum_dh = gamma * sum_g as f32;
            let sum_dh_h = gamma * sum_gh as f32;
            let scale = inv_std[c] / n;
            for ((o, &gv), &hv) in gx.channel_mut(c).iter_mut().zip(g).zip(h) {
                *o = scale * (n * gamma * gv - sum_dh - hv * sum_dh_h);
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..x.clone()
    }
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        data: out
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
        ..gy.clone()
    }
}

/// Convolution (3x3x3, same padding), instance normalisation, ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvUnit {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
    #[serde(skip)]
    out: Option<Tensor>,
}

impl ConvUnit {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        ConvUnit {
            conv: Conv3d::new(in_channels, out_channels, 3, 1, 1, rng),
            norm: InstanceNorm::new(out_channels),
            out: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        relu(&self.norm.forward(&self.conv.forward(x)))
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.conv.forward_train(x);
        let h = self.norm.forward_train(&h);
        let out = relu(&h);
        self.out = Some(out.clone());
        out
    }

    pub fn backward(&mut self, gy: &Tensor) -> Tensor {
        let out = self.out.take().expect("forward_train before backward");
        let g = relu_backward(&out, gy);
        let g = self.norm.backward(&g);
        self.conv.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv.params_mut().into_iter().collect();
        v.extend(self.norm.params_mut());
        v
    }

    /// Zeroes convolution weights and bias.
    pub fn zero_conv(&mut self) {
        self.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
        self.conv.bias.value.iter_mut().for_each(|w| *w = 0.0);
    }
}
