//! Intensity windowing and grid resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, CtVolume, Grid};

/// A Hounsfield-unit window `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWindow", into = "RawWindow")]
pub struct HuWindow {
    lo: f32,
    hi: f32,
}

#[derive(Serialize, Deserialize)]
struct RawWindow {
    lo: f32,
    hi: f32,
}

impl TryFrom<RawWindow> for HuWindow {
    type Error = Error;
    fn try_from(w: RawWindow) -> Result<Self> {
        HuWindow::new(w.lo, w.hi)
    }
}

impl From<HuWindow> for RawWindow {
    fn from(w: HuWindow) -> Self {
        RawWindow { lo: w.lo, hi: w.hi }
    }
}

impl HuWindow {
    /// Window used for lung segmentation.
    pub const LUNG: HuWindow = HuWindow {
        lo: -1000.0,
        hi: 1000.0,
    };
    /// Window used for lesion segmentation.
    pub const LESION: HuWindow = HuWindow {
        lo: -1000.0,
        hi: 300.0,
    };

    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidArgument(format!(
                "window requires finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(HuWindow { lo, hi })
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }

    /// Maps one HU value into `[0, 1]`.
    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        (hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

/// Clips to the window and rescales so `lo -> 0` and `hi -> 1`.
pub fn window_and_normalize(vol: &CtVolume, w: HuWindow) -> CtVolume {
    vol.map(|&v| w.apply(v))
}

/// Grids that can be resampled onto a new voxel lattice covering the same
/// physical extent.
pub trait Resample: Sized {
    fn resample(&self, target_dims: [usize; 3]) -> Result<Self>;
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "target dims must be >= 1, got {target:?}"
        )));
    }
    Ok(())
}

fn scaled_spacing<T>(grid: &Grid<T>, target: [usize; 3]) -> [f64; 3] {
    let d = grid.dims();
    let s = grid.spacing();
    [0, 1, 2].map(|a| s[a] * d[a] as f64 / target[a] as f64)
}

/// Source coordinate of output voxel `i` when voxel centres are aligned and
/// the outer faces of both lattices coincide.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Nearest source index for output voxel `i`.
#[inline]
fn nearest_index(i: usize, n_in: usize, n_out: usize) -> usize {
    (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Per-axis linear interpolation taps: `(i0, i1, frac)`.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|i| {
            let s = source_coord(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

impl Resample for CtVolume {
    /// Trilinear interpolation.
    fn resample(&self, target: [usize; 3]) -> Result<Self> {
        check_target(target)?;
        let d = self.dims();
        if d == target {
            return Ok(self.clone());
        }
        let tx = linear_taps(d[0], target[0]);
        let ty = linear_taps(d[1], target[1]);
        let tz = linear_taps(d[2], target[2]);
        let src = self.data();
        let at = |x: usize, y: usize, z: usize| src[x + d[0] * (y + d[1] * z)];
        let out = Grid::from_fn(target, scaled_spacing(self, target), |x, y, z| {
            let (x0, x1, fx) = tx[x];
            let (y0, y1, fy) = ty[y];
            let (z0, z1, fz) = tz[z];
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
            let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
            let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
            let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
            lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
        })?;
        Ok(out.with_origin(self.origin()))
    }
}

impl Resample for BinaryMask3D {
    /// Nearest-neighbour interpolation; the result stays binary.
    fn resample(&self, target: [usize; 3]) -> Result<Self> {
        check_target(target)?;
        let d = self.dims();
        if d == target {
            return Ok(self.clone());
        }
        let ix: Vec<usize> = (0..target[0]).map(|i| nearest_index(i, d[0], target[0])).collect();
        let iy: Vec<usize> = (0..target[1]).map(|i| nearest_index(i, d[1], target[1])).collect();
        let iz: Vec<usize> = (0..target[2]).map(|i| nearest_index(i, d[2], target[2])).collect();
        let out = Grid::from_fn(target, scaled_spacing(self, target), |x, y, z| {
            *self.get(ix[x], iy[y], iz[z])
        })?;
        Ok(out.with_origin(self.origin()))
    }
}

/// Maps a mask computed on a resampled grid back onto `reference`'s lattice.
pub fn resample_mask_to_original<T>(mask: &BinaryMask3D, reference: &Grid<T>) -> Result<BinaryMask3D> {
    let out = mask.resample(reference.dims())?;
    Ok(out.with_spacing(reference.spacing())?.with_origin(reference.origin()))
}

/// Windowed, normalised and resampled input for a network with `input_dims`.
pub fn network_input(vol: &CtVolume, window: HuWindow, input_dims: [usize; 3]) -> Result<CtVolume> {
    window_and_normalize(vol, window).resample(input_dims)
}
