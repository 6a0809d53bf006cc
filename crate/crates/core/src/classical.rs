//! Classical lung segmentation used to build reference masks:
//!
//! 1. Otsu thresholding of each slice and removal of air connected to the
//!    image border gives a rough 2D lung mask.
//! 2. The rough mask of the central coronal slice fixes the cranio-caudal
//!    extent of the lungs.
//! 3. Rough axial masks inside that extent form a 3D seed.
//! 4. A region-based (Chan-Vese) active contour grows the seed to the lung
//!    boundary.
//! 5. A 3D closing fills vessels and airway walls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage, StageExt};
use crate::preprocess::{window_and_normalize, HuWindow};
use crate::volume::{BinaryMask3D, CtVolume, Grid};

pub const OTSU_BINS: usize = 256;

/// A 2D image, row-major with `u` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidGeometry(format!(
                "plane {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[u + self.width * v]
    }
}

impl Plane<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// The `(x, y)` plane at height `z`.
pub fn axial_slice<T: Clone>(grid: &Grid<T>, z: usize) -> Plane<T> {
    let [nx, ny, _] = grid.dims();
    let start = nx * ny * z;
    Plane {
        width: nx,
        height: ny,
        data: grid.data()[start..start + nx * ny].to_vec(),
    }
}

/// The `(x, z)` plane at depth `y`.
pub fn coronal_slice<T: Clone>(grid: &Grid<T>, y: usize) -> Plane<T> {
    let [nx, _, nz] = grid.dims();
    let mut data = Vec::with_capacity(nx * nz);
    for z in 0..nz {
        for x in 0..nx {
            data.push(grid.get(x, y, z).clone());
        }
    }
    Plane { width: nx, height: nz, data }
}

/// Histogram of `values` over `[min, max]` in [`OTSU_BINS`] bins.
fn histogram(values: &[f32]) -> Result<(Vec<u64>, f32, f32)> {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::InvalidArgument(
            "Otsu threshold needs at least two distinct finite values".into(),
        ));
    }
    let mut hist = vec![0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v, lo, hi)] += 1;
    }
    Ok((hist, lo, hi))
}

fn bin_of(v: f32, lo: f32, hi: f32) -> usize {
    (((v - lo) / (hi - lo) * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1)
}

/// Between-class variance of cutting after bin `k`, as an exact fraction
/// `(num, den)` proportional to `w0 w1 (mu0 - mu1)^2` with bin indices as
/// intensities.
fn otsu_score(n0: u64, s0: u64, n: u64, s: u64) -> Option<(u128, u128)> {
    let n1 = n - n0;
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let diff = (n as i128 * s0 as i128 - n0 as i128 * s as i128).unsigned_abs();
    Some((diff * diff, n0 as u128 * n1 as u128))
}

/// Index of the last bin in the lower class.
fn otsu_cut(hist: &[u64]) -> usize {
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, (u128, u128))> = None;
    for (k, &c) in hist.iter().enumerate() {
        n0 += c;
        s0 += k as u64 * c;
        if let Some(score) = otsu_score(n0, s0, n, s) {
            let better = match best {
                None => true,
                Some((_, (bn, bd))) => score.0 * bd > bn * score.1,
            };
            if better {
                best = Some((k, score));
            }
        }
    }
    best.map_or(0, |(k, _)| k)
}

/// Otsu threshold over a 256-bin histogram spanning the slice's range.
/// Values strictly below the returned threshold form the lower class.
pub fn otsu_threshold(slice: &Plane<f32>) -> Result<f32> {
    let (hist, lo, hi) = histogram(slice.data())?;
    let k = otsu_cut(&hist);
    Ok(lo + (k + 1) as f32 * (hi - lo) / OTSU_BINS as f32)
}

/// Which image borders count as "outside" when removing background air.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Borders {
    All,
    /// Only the first and last columns.
    Lateral,
}

fn rough_lung(slice: &Plane<f32>, window: HuWindow, borders: Borders) -> Plane<bool> {
    let (w, h) = (slice.width, slice.height);
    let windowed: Vec<f32> = slice.data.iter().map(|&v| window.apply(v)).collect();
    let Ok((hist, lo, hi)) = histogram(&windowed) else {
        // constant slice: nothing separates air from tissue
        return Plane { width: w, height: h, data: vec![false; w * h] };
    };
    let k = otsu_cut(&hist);
    let mut low: Vec<bool> = windowed.iter().map(|&v| bin_of(v, lo, hi) <= k).collect();
    let mut stack: Vec<usize> = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let edge = match borders {
                Borders::All => u == 0 || v == 0 || u == w - 1 || v == h - 1,
                Borders::Lateral => u == 0 || u == w - 1,
            };
            let i = u + w * v;
            if edge && low[i] {
                low[i] = false;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        let (u, v) = ((i % w) as isize, (i / w) as isize);
        for dv in -1..=1 {
            for du in -1..=1 {
                let (uu, vv) = (u + du, v + dv);
                if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                    continue;
                }
                let j = uu as usize + w * vv as usize;
                if low[j] {
                    low[j] = false;
                    stack.push(j);
                }
            }
        }
    }
    Plane { width: w, height: h, data: low }
}

/// Air-like pixels below the Otsu threshold that are not 8-connected to the
/// image border.
pub fn rough_lung_2d(slice: &Plane<f32>, window: HuWindow) -> Plane<bool> {
    rough_lung(slice, window, Borders::All)
}

/// Inclusive z range of the lungs from the central coronal slice.
///
/// Only air reaching the left or right image edge is discarded, so lungs
/// running through the top or bottom slice are kept.
pub fn axial_extent(vol: &CtVolume, window: HuWindow) -> Result<(usize, usize)> {
    let [_, ny, _] = vol.dims();
    let rough = rough_lung(&coronal_slice(vol, ny / 2), window, Borders::Lateral);
    let rows: Vec<usize> = (0..rough.height)
        .filter(|&z| (0..rough.width).any(|x| *rough.get(x, z)))
        .collect();
    match (rows.first(), rows.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(Error::EmptyMask),
    }
}

/// Rough axial masks stacked over the lung extent.
pub fn seed_mask_3d(vol: &CtVolume, window: HuWindow) -> Result<BinaryMask3D> {
    let (z0, z1) = axial_extent(vol, window).at_stage(Stage::AxialExtent)?;
    let [nx, ny, _] = vol.dims();
    let mut seed = vol.like(false);
    for z in z0..=z1 {
        let rough = rough_lung_2d(&axial_slice(vol, z), window);
        seed.data_mut()[nx * ny * z..nx * ny * (z + 1)].copy_from_slice(rough.data());
    }
    Ok(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveContourParams {
    pub iterations: usize,
    /// Stop once fewer than this fraction of foreground voxels change.
    pub tolerance: f64,
    pub lambda_inside: f64,
    pub lambda_outside: f64,
}

impl Default for ActiveContourParams {
    fn default() -> Self {
        ActiveContourParams {
            iterations: 100,
            tolerance: 1e-3,
            lambda_inside: 1.0,
            lambda_outside: 1.0,
        }
    }
}

/// 3x3x3 box counts of a binary field, out-of-range counted as background.
fn box_counts(u: &[bool], d: [usize; 3]) -> Vec<u8> {
    let mut a: Vec<u8> = u.iter().map(|&b| b as u8).collect();
    let strides = [1, d[0], d[0] * d[1]];
    let mut tmp = vec![0u8; a.len()];
    for axis in 0..3 {
        let n = d[axis];
        let s = strides[axis];
        for (i, t) in tmp.iter_mut().enumerate() {
            let c = (i / s) % n;
            let mut v = a[i];
            if c > 0 {
                v += a[i - s];
            }
            if c + 1 < n {
                v += a[i + s];
            }
            *t = v;
        }
        std::mem::swap(&mut a, &mut tmp);
    }
    a
}

/// Morphological Chan-Vese evolution of `seed` on the windowed image.
///
/// Each iteration recomputes the inside and outside means, moves contour
/// voxels to the region whose mean fits them better, then applies a 3x3x3
/// majority vote to keep the surface smooth.
pub fn active_contour_segment(image: &CtVolume, seed: &BinaryMask3D, params: &ActiveContourParams) -> Result<BinaryMask3D> {
    image.ensure_same_dims(seed)?;
    if seed.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let d = image.dims();
    let img = image.data();
    let mut u = seed.data().to_vec();
    let strides = [1isize, d[0] as isize, (d[0] * d[1]) as isize];
    for _ in 0..params.iterations {
        let (mut s_in, mut n_in, mut s_out) = (0.0f64, 0usize, 0.0f64);
        for (&v, &b) in img.iter().zip(&u) {
            if b {
                s_in += v as f64;
                n_in += 1;
            } else {
                s_out += v as f64;
            }
        }
        let n_out = u.len() - n_in;
        if n_in == 0 {
            return Err(Error::EmptyMask);
        }
        let c1 = s_in / n_in as f64;
        let c0 = if n_out > 0 { s_out / n_out as f64 } else { c1 };

        let mut next = u.clone();
        for (i, nv) in next.iter_mut().enumerate() {
            let c = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
            let on_contour = (0..3).any(|a| {
                (c[a] > 0 && u[(i as isize - strides[a]) as usize] != u[i])
                    || (c[a] + 1 < d[a] && u[(i as isize + strides[a]) as usize] != u[i])
            });
            if !on_contour {
                continue;
            }
            let v = img[i] as f64;
            let force = params.lambda_inside * (v - c1).powi(2) - params.lambda_outside * (v - c0).powi(2);
            if force < 0.0 {
                *nv = true;
            } else if force > 0.0 {
                *nv = false;
            }
        }
        let counts = box_counts(&next, d);
        for (nv, &cnt) in next.iter_mut().zip(&counts) {
            *nv = cnt >= 14;
        }
        let changed = next.iter().zip(&u).filter(|(a, b)| a != b).count();
        let fg = next.iter().filter(|&&b| b).count();
        u = next;
        if fg == 0 {
            return Err(Error::EmptyMask);
        }
        if (changed as f64) < params.tolerance * fg as f64 {
            break;
        }
    }
    let mut out = seed.clone();
    out.data_mut().copy_from_slice(&u);
    Ok(out)
}

fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for z in -r..=r {
        for y in -r..=r {
            for x in -r..=r {
                if x * x + y * y + z * z <= r * r {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Sets every voxel within the ball of a `value` voxel to `value`.
fn spread(src: &[bool], d: [usize; 3], offsets: &[[isize; 3]], value: bool) -> Vec<bool> {
    let mut out = src.to_vec();
    for (i, &s) in src.iter().enumerate() {
        if s != value {
            continue;
        }
        let c = [(i % d[0]) as isize, ((i / d[0]) % d[1]) as isize, (i / (d[0] * d[1])) as isize];
        for o in offsets {
            let p = [c[0] + o[0], c[1] + o[1], c[2] + o[2]];
            if (0..3).all(|a| p[a] >= 0 && p[a] < d[a] as isize) {
                out[p[0] as usize + d[0] * (p[1] as usize + d[1] * p[2] as usize)] = value;
            }
        }
    }
    out
}

/// Closing with a ball of `radius` voxels. The grid is padded by the radius
/// first so the result never loses foreground at the edges.
pub fn morphological_close_3d(mask: &BinaryMask3D, radius: usize) -> BinaryMask3D {
    if radius == 0 {
        return mask.clone();
    }
    let d = mask.dims();
    let pd = d.map(|v| v + 2 * radius);
    let mut padded = vec![false; pd[0] * pd[1] * pd[2]];
    for z in 0..d[2] {
        for y in 0..d[1] {
            let src = d[0] * (y + d[1] * z);
            let dst = radius + pd[0] * (y + radius + pd[1] * (z + radius));
            padded[dst..dst + d[0]].copy_from_slice(&mask.data()[src..src + d[0]]);
        }
    }
    let offsets = ball_offsets(radius);
    let dilated = spread(&padded, pd, &offsets, true);
    let closed = spread(&dilated, pd, &offsets, false);
    let mut out = mask.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let [x, y, z] = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
        *v = closed[x + radius + pd[0] * (y + radius + pd[1] * (z + radius))];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalParams {
    pub window: HuWindow,
    pub contour: ActiveContourParams,
    pub closing_radius: usize,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        ClassicalParams {
            window: HuWindow::LUNG,
            contour: ActiveContourParams::default(),
            closing_radius: 3,
        }
    }
}

pub fn classical_lung_segmentation(vol: &CtVolume) -> Result<BinaryMask3D> {
    classical_lung_segmentation_with(vol, &ClassicalParams::default())
}

pub fn classical_lung_segmentation_with(vol: &CtVolume, params: &ClassicalParams) -> Result<BinaryMask3D> {
    vol.ensure_finite().at_stage(Stage::Windowing)?;
    let seed = seed_mask_3d(vol, params.window).at_stage(Stage::SeedMask)?;
    let image = window_and_normalize(vol, params.window);
    let grown = active_contour_segment(&image, &seed, &params.contour).at_stage(Stage::ActiveContour)?;
    Ok(morphological_close_3d(&grown, params.closing_radius))
}
