//! Voxel grids with physical geometry.
//!
//! Storage is x-fastest: the voxel `(x, y, z)` lives at `x + nx * (y + ny * z)`.
//! Axes follow a fixed anatomical convention: x runs left-right, y runs
//! anterior-posterior and z runs cranio-caudal. Axial slices are therefore
//! `(x, y)` planes at fixed `z`, coronal slices are `(x, z)` planes at fixed `y`.

use crate::error::{Error, Result};

/// A dense 3D grid carrying voxel spacing (mm) and a world origin (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<T>,
}

/// CT intensities in Hounsfield units.
pub type CtVolume = Grid<f32>;

/// A binary mask; `true` marks foreground.
pub type BinaryMask3D = Grid<bool>;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidGeometry(format!(
            "spacing must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

impl<T: Clone> Grid<T> {
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        check_geometry(dims, spacing)?;
        Ok(Grid {
            dims,
            spacing,
            origin: [0.0; 3],
            data: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }

    /// A grid with the same geometry as `self`, filled with `value`.
    pub fn like<U: Clone>(&self, value: U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: vec![value; self.len()],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Ok(Grid {
            dims,
            spacing,
            origin: [0.0; 3],
            data,
        })
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// Replaces spacing, e.g. after resampling.
    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(self.dims, spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Errors unless `other` has the same dims.
    pub fn ensure_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                actual: other.dims,
            });
        }
        Ok(())
    }
}

impl CtVolume {
    /// Errors if any voxel is NaN or infinite.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::InvalidGeometry(format!(
                "non-finite voxel value at {:?}",
                self.coords(i)
            ))),
            None => Ok(()),
        }
    }
}

impl BinaryMask3D {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Voxelwise OR.
    pub fn union(&self, other: &BinaryMask3D) -> Result<BinaryMask3D> {
        self.ensure_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect();
        Ok(Grid {
            data,
            ..self.clone()
        })
    }

    /// Voxelwise AND.
    pub fn intersection(&self, other: &BinaryMask3D) -> Result<BinaryMask3D> {
        self.ensure_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect();
        Ok(Grid {
            data,
            ..self.clone()
        })
    }

    /// True if every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask3D) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Mask as 0/1 bytes, the on-disk representation.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    /// Inclusive min/max voxel corners of the foreground, `None` when empty.
    pub fn foreground_extent(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (i, &v) in self.data.iter().enumerate() {
            if v {
                any = true;
                let c = self.coords(i);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        any.then_some((lo, hi))
    }
}
