//! Synthetic chest phantoms with exact lung and lesion masks.
//!
//! A soft-tissue body ellipsoid sits in air and spans the whole cranio-caudal
//! range. Two lung ellipsoids with Gaussian texture sit inside it, each with a
//! few small vessels. Lesions are blobs grown inside the lungs until they
//! cover the requested fraction of lung voxels; each blob is densest at its
//! core and fades towards the lower end of the lesion range at its rim.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, CtVolume};

pub const AIR_HU: f32 = -1000.0;
pub const BODY_HU: f32 = 20.0;
pub const LUNG_HU: f32 = -820.0;
pub const VESSEL_HU: f32 = 40.0;
/// Lesion intensity range. Each blob rises from the lower bound at its rim
/// to a core value drawn from [`LESION_CORE_HU`].
pub const LESION_HU: [f32; 2] = [-600.0, -100.0];
pub const LESION_CORE_HU: [f32; 2] = [-350.0, -100.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Lung ellipsoid semi-axes as fractions of the grid size.
    pub lung_radii: [f64; 3],
    /// Vessels per lung.
    pub vessels: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [96, 72, 48],
            spacing: [3.5, 3.5, 6.0],
            lung_radii: [0.16, 0.30, 0.38],
            vessels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: CtVolume,
    pub lungs: BinaryMask3D,
    pub lesions: BinaryMask3D,
}

impl Phantom {
    /// `100 * |lesions| / |lungs|`.
    pub fn lesion_percentage(&self) -> f64 {
        100.0 * self.lesions.count() as f64 / self.lungs.count() as f64
    }
}

pub fn generate_phantom(seed: u64, lesion_fraction: f64) -> Result<Phantom> {
    generate_phantom_with(&PhantomSpec::default(), seed, lesion_fraction)
}

fn ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

pub fn generate_phantom_with(spec: &PhantomSpec, seed: u64, lesion_fraction: f64) -> Result<Phantom> {
    if !(0.0..1.0).contains(&lesion_fraction) {
        return Err(Error::InvalidArgument(format!(
            "lesion fraction must lie in [0, 1), got {lesion_fraction}"
        )));
    }
    let d = spec.dims;
    let n = d.map(|v| v as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // small per-case shape jitter keeps phantoms distinct
    let mut jitter = |s: f64| 1.0 + rng.random_range(-s..s);
    let body_c = [(n[0] - 1.0) / 2.0, (n[1] - 1.0) / 2.0];
    let body_r = [0.46 * n[0] * jitter(0.03), 0.44 * n[1] * jitter(0.03)];
    let lung_r = [0, 1, 2].map(|a| spec.lung_radii[a] * n[a] * jitter(0.05));
    let offset = 0.21 * n[0] * jitter(0.03);
    let z_c = (n[2] - 1.0) / 2.0;
    let lung_c = [
        [body_c[0] - offset, body_c[1], z_c],
        [body_c[0] + offset, body_c[1], z_c],
    ];
    if lung_r[0] >= offset || offset + lung_r[0] >= body_r[0] || lung_r[1] >= body_r[1] {
        return Err(Error::InvalidConfig("lung radii do not fit inside the body".into()));
    }

    let body = BinaryMask3D::from_fn(d, spec.spacing, |x, y, _| {
        ellipsoid([x as f64, y as f64, 0.0], [body_c[0], body_c[1], 0.0], [body_r[0], body_r[1], 1.0]) <= 1.0
    })?;
    let lungs = BinaryMask3D::from_fn(d, spec.spacing, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        lung_c.iter().any(|&c| ellipsoid(p, c, lung_r) <= 1.0)
    })?;
    if lungs.count() == 0 {
        return Err(Error::InvalidConfig("phantom grid too small for lungs".into()));
    }
    let lung_voxels: Vec<usize> = (0..lungs.len()).filter(|&i| lungs.data()[i]).collect();

    let mut vessels = lungs.like(false);
    for _ in 0..2 * spec.vessels {
        let c = lungs.coords(lung_voxels[rng.random_range(0..lung_voxels.len())]).map(|v| v as f64);
        for &i in &lung_voxels {
            let p = lungs.coords(i).map(|v| v as f64);
            if ellipsoid(p, c, [1.5; 3]) <= 1.0 {
                vessels.data_mut()[i] = true;
            }
        }
    }

    // lesions: the `target` lung voxels closest (in blob-scaled distance) to
    // randomly placed blob centres
    let target = (lesion_fraction * lung_voxels.len() as f64).round() as usize;
    let mut lesions = lungs.like(false);
    let mut lesion_hu = vec![0.0f32; lungs.len()];
    if target > 0 {
        let blobs = 2 + (lesion_fraction * 10.0) as usize;
        let centres: Vec<([f64; 3], f64, f32)> = (0..blobs)
            .map(|_| {
                let c = lungs.coords(lung_voxels[rng.random_range(0..lung_voxels.len())]).map(|v| v as f64);
                let scale = rng.random_range(0.6..1.4);
                let hu = rng.random_range(LESION_CORE_HU[0]..LESION_CORE_HU[1]);
                (c, scale, hu)
            })
            .collect();
        let sp = spec.spacing;
        let mut scored: Vec<(f64, usize, f32)> = lung_voxels
            .iter()
            .map(|&i| {
                let p = lungs.coords(i).map(|v| v as f64);
                centres
                    .iter()
                    .map(|(c, s, hu)| {
                        let dist = (0..3).map(|a| ((p[a] - c[a]) * sp[a]).powi(2)).sum::<f64>().sqrt();
                        (dist / s, i, *hu)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("at least one blob")
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let reach = scored[target - 1].0.max(f64::MIN_POSITIVE);
        for &(d, i, core) in &scored[..target] {
            lesions.data_mut()[i] = true;
            let t = (d / reach).min(1.0) as f32;
            lesion_hu[i] = core + (LESION_HU[0] - core) * t;
        }
    }

    let texture = Normal::new(0.0f32, 25.0).expect("valid sd");
    let tissue = Normal::new(0.0f32, 12.0).expect("valid sd");
    let volume = CtVolume::from_vec(
        d,
        spec.spacing,
        (0..lungs.len())
            .map(|i| {
                if lesions.data()[i] {
                    lesion_hu[i] + texture.sample(&mut rng)
                } else if vessels.data()[i] {
                    VESSEL_HU + tissue.sample(&mut rng)
                } else if lungs.data()[i] {
                    LUNG_HU + texture.sample(&mut rng)
                } else if body.data()[i] {
                    BODY_HU + tissue.sample(&mut rng)
                } else {
                    AIR_HU + rng.random_range(0.0..3.0)
                }
            })
            .collect(),
    )?;
    Ok(Phantom { volume, lungs, lesions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hits_target_fraction() {
        for (seed, f) in [(1, 0.10), (2, 0.025), (3, 0.62), (4, 0.87)] {
            let p = generate_phantom(seed, f).unwrap();
            let got = p.lesion_percentage();
            assert!((got - 100.0 * f).abs() <= 0.5, "target {f}: {got}");
            assert!(p.lesions.is_subset_of(&p.lungs));
        }
        let clean = generate_phantom(5, 0.0).unwrap();
        assert_eq!(clean.lesions.count(), 0);
        assert!(generate_phantom(5, 1.0).is_err());
        assert!(generate_phantom(5, -0.1).is_err());
    }

    #[test]
    fn deterministic_and_distinct() {
        assert_eq!(generate_phantom(9, 0.3).unwrap(), generate_phantom(9, 0.3).unwrap());
        assert_ne!(generate_phantom(9, 0.3).unwrap().lungs, generate_phantom(10, 0.3).unwrap().lungs);
    }

    #[test]
    fn intensities_are_separable() {
        let p = generate_phantom(7, 0.2).unwrap();
        let v = p.volume.data();
        for i in 0..v.len() {
            if p.lesions.data()[i] {
                assert!(v[i] > -750.0);
            } else if !p.lungs.data()[i] {
                // outside the lungs is either air or tissue
                assert!(v[i] < -990.0 || v[i] > -100.0);
            }
        }
        // lungs never touch the air outside the body
        let air = p.volume.map(|&h| h < -990.0);
        assert_eq!(air.intersection(&p.lungs).unwrap().count(), 0);
    }
}
