//! Connected-component cleanup of predicted lung masks and the padded lung
//! bounding box used to crop inputs for the lesion network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, Grid};

/// Foreground fraction a component needs to survive the first pass.
pub const PRIMARY_THRESHOLD: f64 = 0.40;
/// Relaxed fraction used when the first pass keeps too little.
pub const RELAXED_THRESHOLD: f64 = 0.30;
/// Minimum retained fraction for the first pass to be accepted.
pub const MIN_RETAINED: f64 = 0.65;
/// Default physical padding around the lungs.
pub const DEFAULT_PADDING_MM: f64 = 25.0;

/// One 26-connected foreground component, as linear voxel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

/// Labels the 26-connected components of `mask`, largest first.
pub fn connected_components(mask: &BinaryMask3D) -> Vec<Component> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if !data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut voxels = Vec::new();
        while let Some(i) = stack.pop() {
            voxels.push(i);
            let [x, y, z] = mask.coords(i);
            for dz in -1isize..=1 {
                let zz = z as isize + dz;
                if zz < 0 || zz >= nz as isize {
                    continue;
                }
                for dy in -1isize..=1 {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= ny as isize {
                        continue;
                    }
                    for dx in -1isize..=1 {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= nx as isize {
                            continue;
                        }
                        let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                        if data[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        out.push(Component { voxels });
    }
    // stable: equal sizes keep scan order
    out.sort_by_key(|c| std::cmp::Reverse(c.size()));
    out
}

/// Which rule produced a refined mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementPass {
    Primary,
    Relaxed,
    /// Both thresholds removed everything; only the largest component kept.
    LargestComponent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub mask: BinaryMask3D,
    pub pass: RefinementPass,
}

impl Refinement {
    pub fn warning(&self) -> Option<String> {
        (self.pass == RefinementPass::LargestComponent).then(|| {
            format!(
                "lung refinement removed every component at {:.0}%; kept the largest ({} voxels)",
                RELAXED_THRESHOLD * 100.0,
                self.mask.count()
            )
        })
    }
}

fn keep(mask: &BinaryMask3D, comps: &[Component]) -> BinaryMask3D {
    let mut out = mask.like(false);
    for c in comps {
        for &i in &c.voxels {
            out.data_mut()[i] = true;
        }
    }
    out
}

/// Drops small connected components from a predicted lung mask.
///
/// Components under 40% of the foreground are removed. If what remains is
/// under 65% of the foreground the pass is redone at 30%.
pub fn refine_lung_mask(mask: &BinaryMask3D) -> Result<Refinement> {
    let comps = connected_components(mask);
    let total: usize = comps.iter().map(Component::size).sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    let survivors = |frac: f64| -> Vec<Component> {
        let threshold = frac * total as f64;
        comps.iter().filter(|c| c.size() as f64 >= threshold).cloned().collect()
    };
    let first = survivors(PRIMARY_THRESHOLD);
    let kept: usize = first.iter().map(Component::size).sum();
    if kept as f64 >= MIN_RETAINED * total as f64 {
        return Ok(Refinement {
            mask: keep(mask, &first),
            pass: RefinementPass::Primary,
        });
    }
    let second = survivors(RELAXED_THRESHOLD);
    if !second.is_empty() {
        return Ok(Refinement {
            mask: keep(mask, &second),
            pass: RefinementPass::Relaxed,
        });
    }
    log::warn!("lung refinement fell back to the largest component");
    Ok(Refinement {
        mask: keep(mask, &comps[..1]),
        pass: RefinementPass::LargestComponent,
    })
}

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_voxel: [usize; 3],
    pub max_voxel: [usize; 3],
    pub padding_mm: f64,
}

impl BoundingBox {
    /// The box covering a whole grid.
    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox {
            min_voxel: [0; 3],
            max_voxel: dims.map(|d| d.saturating_sub(1)),
            padding_mm: 0.0,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max_voxel[a] - self.min_voxel[a] + 1)
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let c = [x, y, z];
        (0..3).all(|a| self.min_voxel[a] <= c[a] && c[a] <= self.max_voxel[a])
    }

    fn check_within(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.min_voxel[a] > self.max_voxel[a] || self.max_voxel[a] >= dims[a] {
                return Err(Error::InvalidArgument(format!(
                    "box {:?}..={:?} outside grid {dims:?}",
                    self.min_voxel, self.max_voxel
                )));
            }
        }
        Ok(())
    }
}

/// Tight box around the foreground grown by `padding_mm` per side and clipped
/// to the grid. The padding in voxels is rounded half-up per axis.
pub fn bounding_box(mask: &BinaryMask3D, spacing: [f64; 3], padding_mm: f64) -> Result<BoundingBox> {
    if !(padding_mm.is_finite() && padding_mm >= 0.0) {
        return Err(Error::InvalidArgument(format!("padding must be >= 0 mm, got {padding_mm}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidGeometry(format!("bad spacing {spacing:?}")));
    }
    let (lo, hi) = mask.foreground_extent().ok_or(Error::EmptyMask)?;
    let dims = mask.dims();
    let pad = spacing.map(|s| (padding_mm / s + 0.5).floor() as usize);
    Ok(BoundingBox {
        min_voxel: [0, 1, 2].map(|a| lo[a].saturating_sub(pad[a])),
        max_voxel: [0, 1, 2].map(|a| (hi[a] + pad[a]).min(dims[a] - 1)),
        padding_mm,
    })
}

/// Copies the sub-grid under `bbox`. Spacing is unchanged and the origin
/// moves to the box corner.
pub fn crop<T: Clone>(grid: &Grid<T>, bbox: &BoundingBox) -> Result<Grid<T>> {
    bbox.check_within(grid.dims())?;
    let lo = bbox.min_voxel;
    let s = grid.spacing();
    let o = grid.origin();
    let out = Grid::from_fn(bbox.dims(), s, |x, y, z| {
        grid.get(x + lo[0], y + lo[1], z + lo[2]).clone()
    })?;
    Ok(out.with_origin([0, 1, 2].map(|a| o[a] + lo[a] as f64 * s[a])))
}

/// Pastes a cropped mask back into an empty grid of `original_dims`.
pub fn uncrop_mask(cropped: &BinaryMask3D, bbox: &BoundingBox, original_dims: [usize; 3]) -> Result<BinaryMask3D> {
    bbox.check_within(original_dims)?;
    if cropped.dims() != bbox.dims() {
        return Err(Error::DimensionMismatch {
            expected: bbox.dims(),
            actual: cropped.dims(),
        });
    }
    let lo = bbox.min_voxel;
    let s = cropped.spacing();
    let mut out = BinaryMask3D::filled(original_dims, s, false)?;
    let [cx, cy, cz] = cropped.dims();
    for z in 0..cz {
        for y in 0..cy {
            for x in 0..cx {
                if *cropped.get(x, y, z) {
                    out.set(x + lo[0], y + lo[1], z + lo[2], true);
                }
            }
        }
    }
    let o = cropped.origin();
    Ok(out.with_origin([0, 1, 2].map(|a| o[a] - lo[a] as f64 * s[a])))
}
