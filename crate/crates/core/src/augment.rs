//! Training-set augmentation: axial zoom and rotation, additive Gaussian
//! noise, elastic deformation and line-kernel motion blur.
//!
//! Geometric transforms resample the image with cubic convolution and the
//! mask with nearest neighbour, so both see exactly the same mapping.
//! Voxels mapped from outside the grid become air (-1000 HU) and background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, CtVolume};

pub const AIR_HU: f32 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    /// Augmented copies produced per input pair.
    pub factor: usize,
    pub zoom_factors: Vec<f64>,
    pub rotation_angles_deg: Vec<f64>,
    pub noise_mean_range_hu: [f64; 2],
    pub noise_std_choices_hu: Vec<f64>,
    /// Gaussian width of the displacement smoothing, in voxels.
    pub elastic_coefficient: f64,
    /// Displacement amplitude.
    pub elastic_scale: f64,
    /// Line-kernel lengths along (anterior-posterior, left-right, cranio-caudal).
    pub blur_kernel: [usize; 3],
    pub rng_seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            factor: 2,
            zoom_factors: vec![1.05, 1.1, 1.15, 1.2],
            rotation_angles_deg: vec![-15.0, -10.0, -5.0, 5.0, 10.0, 15.0],
            noise_mean_range_hu: [-400.0, 200.0],
            noise_std_choices_hu: vec![25.0, 50.0, 75.0],
            elastic_coefficient: 12.0,
            elastic_scale: 1000.0,
            blur_kernel: [4, 3, 3],
            rng_seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("augmentation: {m}")));
        if self.zoom_factors.is_empty() || self.zoom_factors.iter().any(|&z| !(z.is_finite() && z > 0.0)) {
            return bad("zoom factors must be positive and nonempty");
        }
        if self.rotation_angles_deg.is_empty() || self.rotation_angles_deg.iter().any(|a| !a.is_finite()) {
            return bad("rotation angles must be finite and nonempty");
        }
        let [lo, hi] = self.noise_mean_range_hu;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("noise mean range must satisfy lo <= hi");
        }
        if self.noise_std_choices_hu.is_empty() || self.noise_std_choices_hu.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
            return bad("noise std choices must be >= 0 and nonempty");
        }
        if !(self.elastic_coefficient > 0.0 && self.elastic_scale >= 0.0) {
            return bad("elastic coefficient must be > 0 and scale >= 0");
        }
        if self.blur_kernel.contains(&0) {
            return bad("blur kernel lengths must be >= 1");
        }
        Ok(())
    }
}

fn check_pair(vol: &CtVolume, mask: &BinaryMask3D) -> Result<()> {
    vol.ensure_same_dims(mask)
}

/// Keys cubic convolution weights (a = -0.5) for taps at floor-1 ..= floor+2.
fn cubic_weights(t: f64) -> [f64; 4] {
    let a = -0.5;
    let near = |d: f64| ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0;
    let far = |d: f64| ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a;
    [far(1.0 + t), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Tap indices (edge clamped) and weights, or `None` outside the grid.
fn cubic_taps(s: f64, n: usize) -> Option<([usize; 4], [f64; 4])> {
    if !(s >= -0.5 && s <= n as f64 - 0.5) {
        return None;
    }
    let f = s.floor();
    let w = cubic_weights(s - f);
    let f = f as isize;
    let idx = [0, 1, 2, 3].map(|k| (f - 1 + k as isize).clamp(0, n as isize - 1) as usize);
    Some((idx, w))
}

fn nearest(s: f64, n: usize) -> Option<usize> {
    let r = (s + 0.5).floor();
    (r >= 0.0 && r < n as f64).then_some(r as usize)
}

/// Resamples an image/mask pair through `source(x, y, z)`, which returns the
/// (fractional) source voxel each output voxel reads from.
fn warp(
    vol: &CtVolume,
    mask: &BinaryMask3D,
    source: impl Fn(usize, usize, usize) -> [f64; 3],
) -> (CtVolume, BinaryMask3D) {
    let d = vol.dims();
    let src = vol.data();
    let mut out_v = vol.clone();
    let mut out_m = mask.clone();
    let mut i = 0;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let s = source(x, y, z);
                out_v.data_mut()[i] = match (cubic_taps(s[0], d[0]), cubic_taps(s[1], d[1]), cubic_taps(s[2], d[2])) {
                    (Some((ix, wx)), Some((iy, wy)), Some((iz, wz))) => {
                        let mut acc = 0.0f64;
                        for c in 0..4 {
                            if wz[c] == 0.0 {
                                continue;
                            }
                            for b in 0..4 {
                                let wzy = wz[c] * wy[b];
                                if wzy == 0.0 {
                                    continue;
                                }
                                let row = d[0] * (iy[b] + d[1] * iz[c]);
                                for a in 0..4 {
                                    acc += wzy * wx[a] * src[row + ix[a]] as f64;
                                }
                            }
                        }
                        acc as f32
                    }
                    _ => AIR_HU,
                };
                out_m.data_mut()[i] = match (nearest(s[0], d[0]), nearest(s[1], d[1]), nearest(s[2], d[2])) {
                    (Some(a), Some(b), Some(c)) => *mask.get(a, b, c),
                    _ => false,
                };
                i += 1;
            }
        }
    }
    (out_v, out_m)
}

fn axial_centre(d: [usize; 3]) -> (f64, f64) {
    ((d[0] as f64 - 1.0) / 2.0, (d[1] as f64 - 1.0) / 2.0)
}

/// Zooms every axial slice about its centre and crops back to the input size.
pub fn zoom(vol: &CtVolume, mask: &BinaryMask3D, factor: f64) -> Result<(CtVolume, BinaryMask3D)> {
    check_pair(vol, mask)?;
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("zoom factor must be > 0, got {factor}")));
    }
    let (cx, cy) = axial_centre(vol.dims());
    Ok(warp(vol, mask, |x, y, z| {
        [cx + (x as f64 - cx) / factor, cy + (y as f64 - cy) / factor, z as f64]
    }))
}

/// Rotates every axial slice about its centre by `angle_deg` (x towards y).
pub fn rotate(vol: &CtVolume, mask: &BinaryMask3D, angle_deg: f64) -> Result<(CtVolume, BinaryMask3D)> {
    check_pair(vol, mask)?;
    let (cx, cy) = axial_centre(vol.dims());
    let [sx, sy, _] = vol.spacing();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    // inverse rotation in millimetres
    Ok(warp(vol, mask, |x, y, z| {
        let px = (x as f64 - cx) * sx;
        let py = (y as f64 - cy) * sy;
        let qx = cos * px + sin * py;
        let qy = -sin * px + cos * py;
        [cx + qx / sx, cy + qy / sy, z as f64]
    }))
}

/// Adds i.i.d. normal noise to the image.
pub fn add_gaussian_noise(vol: &CtVolume, mean_hu: f64, std_hu: f64, rng: &mut impl Rng) -> Result<CtVolume> {
    let normal = Normal::new(mean_hu, std_hu)
        .map_err(|e| Error::InvalidArgument(format!("noise N({mean_hu}, {std_hu}): {e}")))?;
    Ok(vol.map(|&v| (v as f64 + normal.sample(rng)) as f32))
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter with mirrored borders.
fn gaussian_smooth(field: &mut [f64], dims: [usize; 3], sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                line.clear();
                line.extend((0..n).map(|i| field[base + i * stride]));
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        acc += w * line[reflect(i as isize + j as isize - r, n)];
                    }
                    field[base + i * stride] = acc;
                }
            }
        }
    }
}

/// Elastic distortion: a uniform random displacement field per axis is
/// smoothed with a Gaussian of width `coefficient` voxels and scaled by
/// `scale`.
pub fn elastic_deform(
    vol: &CtVolume,
    mask: &BinaryMask3D,
    coefficient: f64,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<(CtVolume, BinaryMask3D)> {
    check_pair(vol, mask)?;
    if !(coefficient > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "elastic deformation needs coefficient > 0, got {coefficient}"
        )));
    }
    let d = vol.dims();
    let n = vol.len();
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let mut f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            gaussian_smooth(&mut f, d, coefficient);
            f.iter_mut().for_each(|v| *v *= scale);
            f
        })
        .collect();
    Ok(warp(vol, mask, |x, y, z| {
        let i = x + d[0] * (y + d[1] * z);
        [x as f64 + fields[0][i], y as f64 + fields[1][i], z as f64 + fields[2][i]]
    }))
}

/// Normalised line blur of length `k` along one axis, with the kernel anchor
/// at `k / 2` and mirrored borders that do not repeat the edge sample.
pub fn motion_blur_axis(vol: &CtVolume, axis: usize, k: usize) -> Result<CtVolume> {
    if axis > 2 || k == 0 {
        return Err(Error::InvalidArgument(format!("blur axis {axis} length {k}")));
    }
    let d = vol.dims();
    let n = d[axis] as isize;
    if k == 1 {
        return Ok(vol.clone());
    }
    let anchor = (k / 2) as isize;
    let reflect101 = |i: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let src = vol.data();
    let strides = [1, d[0], d[0] * d[1]];
    let mut out = vol.clone();
    for (idx, o) in out.data_mut().iter_mut().enumerate() {
        let c = [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])];
        let base = idx - c[axis] * strides[axis];
        let mut acc = 0.0f64;
        for j in 0..k as isize {
            let p = reflect101(c[axis] as isize + j - anchor);
            acc += src[base + p * strides[axis]] as f64;
        }
        *o = (acc / k as f64) as f32;
    }
    Ok(out)
}

/// Slice-wise motion blur with kernel lengths given along
/// (anterior-posterior, left-right, cranio-caudal).
pub fn motion_blur(vol: &CtVolume, kernel: [usize; 3]) -> Result<CtVolume> {
    let [ap, lr, cc] = kernel;
    let v = motion_blur_axis(vol, 1, ap)?;
    let v = motion_blur_axis(&v, 0, lr)?;
    motion_blur_axis(&v, 2, cc)
}

/// One sampled transform with everything needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformParams {
    Zoom { factor: f64 },
    Rotate { angle_deg: f64 },
    GaussianNoise { mean_hu: f64, std_hu: f64, seed: u64 },
    ElasticDeform { coefficient: f64, scale: f64, seed: u64 },
    MotionBlur { kernel: [usize; 3] },
}

impl TransformParams {
    pub fn is_geometric(&self) -> bool {
        matches!(self, Self::Zoom { .. } | Self::Rotate { .. } | Self::ElasticDeform { .. })
    }

    pub fn apply(&self, vol: &CtVolume, mask: &BinaryMask3D) -> Result<(CtVolume, BinaryMask3D)> {
        match *self {
            Self::Zoom { factor } => zoom(vol, mask, factor),
            Self::Rotate { angle_deg } => rotate(vol, mask, angle_deg),
            Self::GaussianNoise { mean_hu, std_hu, seed } => {
                check_pair(vol, mask)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok((add_gaussian_noise(vol, mean_hu, std_hu, &mut rng)?, mask.clone()))
            }
            Self::ElasticDeform { coefficient, scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                elastic_deform(vol, mask, coefficient, scale, &mut rng)
            }
            Self::MotionBlur { kernel } => {
                check_pair(vol, mask)?;
                Ok((motion_blur(vol, kernel)?, mask.clone()))
            }
        }
    }
}

const MENU: usize = 5;

fn sample_transform(which: usize, spec: &AugmentationSpec, rng: &mut impl Rng) -> TransformParams {
    let pick = |v: &[f64], rng: &mut dyn rand::RngCore| v[rng.random_range(0..v.len())];
    match which {
        0 => TransformParams::Zoom {
            factor: pick(&spec.zoom_factors, rng),
        },
        1 => TransformParams::Rotate {
            angle_deg: pick(&spec.rotation_angles_deg, rng),
        },
        2 => {
            let [lo, hi] = spec.noise_mean_range_hu;
            TransformParams::GaussianNoise {
                mean_hu: if lo < hi { rng.random_range(lo..=hi) } else { lo },
                std_hu: pick(&spec.noise_std_choices_hu, rng),
                seed: rng.random(),
            }
        }
        3 => TransformParams::ElasticDeform {
            coefficient: spec.elastic_coefficient,
            scale: spec.elastic_scale,
            seed: rng.random(),
        },
        _ => TransformParams::MotionBlur {
            kernel: spec.blur_kernel,
        },
    }
}

/// Manifest entry for one augmented pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_index: usize,
    pub copy: usize,
    pub transforms: Vec<TransformParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub vol: CtVolume,
    pub mask: BinaryMask3D,
    pub record: AugmentationRecord,
}

/// Draws the two transforms for copy `copy` of pair `index`. Each pair has
/// its own stream so results do not depend on processing order.
pub fn sample_record(spec: &AugmentationSpec, index: usize, copy: usize) -> AugmentationRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    rng.set_stream((index * spec.factor.max(1) + copy) as u64);
    let first = rng.random_range(0..MENU);
    let mut second = rng.random_range(0..MENU - 1);
    if second >= first {
        second += 1;
    }
    AugmentationRecord {
        source_index: index,
        copy,
        transforms: vec![
            sample_transform(first, spec, &mut rng),
            sample_transform(second, spec, &mut rng),
        ],
    }
}

/// Produces `spec.factor` augmented pairs per input pair.
pub fn augment_dataset(pairs: &[(CtVolume, BinaryMask3D)], spec: &AugmentationSpec) -> Result<Vec<AugmentedPair>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(pairs.len() * spec.factor);
    for (index, (vol, mask)) in pairs.iter().enumerate() {
        check_pair(vol, mask)?;
        for copy in 0..spec.factor {
            let record = sample_record(spec, index, copy);
            let (mut v, mut m) = (vol.clone(), mask.clone());
            for t in &record.transforms {
                (v, m) = t.apply(&v, &m)?;
            }
            out.push(AugmentedPair { vol: v, mask: m, record });
        }
    }
    Ok(out)
}
