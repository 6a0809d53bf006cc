//! NIfTI-1 input and output.
//!
//! Volumes are reoriented at load time so that the in-memory axes follow the
//! canonical order documented in [`crate::volume`]: the voxel axis closest to
//! world x becomes axis 0, and so on, each flipped so indices increase along
//! the world axis. Files written here always carry an axis-aligned sform, so a
//! save/load cycle is the identity.

use std::path::Path;

use ndarray::{Array3, IxDyn, ShapeBuilder};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, NiftiType, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, CtVolume, Grid};

/// Voxel-to-world layout recovered from a header.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Orientation {
    /// `perm[world_axis]` is the file voxel axis that runs along `world_axis`.
    perm: [usize; 3],
    flip: [bool; 3],
    /// 3x3 direction-times-spacing matrix, rows are world axes.
    matrix: [[f64; 3]; 3],
    offset: [f64; 3],
}

fn quaternion_matrix(h: &NiftiHeader) -> ([[f64; 3]; 3], [f64; 3]) {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let scale = [
        h.pixdim[1].abs() as f64,
        h.pixdim[2].abs() as f64,
        h.pixdim[3].abs() as f64 * qfac,
    ];
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = r[i][j] * scale[j];
        }
    }
    (
        m,
        [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64],
    )
}

fn orientation(h: &NiftiHeader) -> Orientation {
    let (matrix, offset) = if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let mut m = [[0.0; 3]; 3];
        let mut o = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rows[i][j] as f64;
            }
            o[i] = rows[i][3] as f64;
        }
        (m, o)
    } else if h.qform_code > 0 {
        quaternion_matrix(h)
    } else {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = h.pixdim[i + 1].abs() as f64;
        }
        (m, [0.0; 3])
    };

    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    let mut used = [false; 3];
    for j in 0..3 {
        // dominant world axis of voxel axis j
        let i = (0..3)
            .max_by(|&a, &b| matrix[a][j].abs().total_cmp(&matrix[b][j].abs()))
            .unwrap_or(j);
        if used[i] || matrix[i][j] == 0.0 {
            return Orientation {
                perm: [0, 1, 2],
                flip: [false; 3],
                matrix,
                offset,
            };
        }
        used[i] = true;
        perm[i] = j;
        flip[i] = matrix[i][j] < 0.0;
    }
    Orientation {
        perm,
        flip,
        matrix,
        offset,
    }
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::NiftiParse {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn read_raw(path: &Path) -> Result<(NiftiHeader, ndarray::Array<f64, IxDyn>)> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| parse_err(path, e))?;
    let header = obj.header().clone();
    let data_type = header.data_type().map_err(|e| parse_err(path, e))?;
    if matches!(data_type, NiftiType::Uint8 | NiftiType::Int8 | NiftiType::Rgb24) {
        return Err(Error::EightBitVolume {
            path: path.to_owned(),
        });
    }
    let array = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| parse_err(path, e))?;
    Ok((header, array))
}

fn read_mask_raw(path: &Path) -> Result<(NiftiHeader, ndarray::Array<f64, IxDyn>)> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| match e {
            nifti::NiftiError::Io(source) => Error::io(path, source),
            e => parse_err(path, e),
        })?;
    let header = obj.header().clone();
    let array = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| parse_err(path, e))?;
    Ok((header, array))
}

fn to_canonical<T: Copy>(
    path: &Path,
    header: &NiftiHeader,
    array: &ndarray::Array<f64, IxDyn>,
    convert: impl Fn(f64) -> T,
) -> Result<Grid<T>> {
    let shape = array.shape();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(parse_err(
            path,
            format!("expected a 3D volume, got shape {shape:?}"),
        ));
    }
    let file_dims = [shape[0], shape[1], shape[2]];
    let o = orientation(header);
    let dims = [file_dims[o.perm[0]], file_dims[o.perm[1]], file_dims[o.perm[2]]];
    let spacing = [
        header.pixdim[o.perm[0] + 1].abs() as f64,
        header.pixdim[o.perm[1] + 1].abs() as f64,
        header.pixdim[o.perm[2] + 1].abs() as f64,
    ];
    // trailing singleton dims (e.g. a one-frame time axis) stay at index 0
    let mut file_idx = vec![0usize; shape.len()];
    let grid = Grid::from_fn(dims, sanitize_spacing(spacing), |x, y, z| {
        let c = [x, y, z];
        for w in 0..3 {
            let j = o.perm[w];
            file_idx[j] = if o.flip[w] { file_dims[j] - 1 - c[w] } else { c[w] };
        }
        convert(array[IxDyn(&file_idx)])
    })
    .map_err(|e| parse_err(path, e))?;

    // world position of canonical voxel (0, 0, 0)
    let mut first = [0.0f64; 3];
    for w in 0..3 {
        let j = o.perm[w];
        if o.flip[w] {
            first[j] = (file_dims[j] - 1) as f64;
        }
    }
    let mut origin = o.offset;
    for (i, oi) in origin.iter_mut().enumerate() {
        for j in 0..3 {
            *oi += o.matrix[i][j] * first[j];
        }
    }
    Ok(grid.with_origin(origin))
}

fn sanitize_spacing(spacing: [f64; 3]) -> [f64; 3] {
    spacing.map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 })
}

/// Loads a CT volume in Hounsfield units.
///
/// Header scale and intercept are applied. Files storing 8-bit intensities
/// are rejected with [`Error::EightBitVolume`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let (header, array) = read_raw(path)?;
    let vol = to_canonical(path, &header, &array, |v| v as f32)?;
    vol.ensure_finite().map_err(|e| parse_err(path, e))?;
    Ok(vol)
}

/// Loads a mask. Any nonzero label counts as foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask3D> {
    let path = path.as_ref();
    let (header, array) = read_mask_raw(path)?;
    to_canonical(path, &header, &array, |v| v != 0.0)
}

fn header_for<T>(grid: &Grid<T>) -> NiftiHeader {
    let s = grid.spacing();
    let o = grid.origin();
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2; // mm
    h.sform_code = 1;
    h.qform_code = 1;
    h.srow_x = [s[0] as f32, 0.0, 0.0, o[0] as f32];
    h.srow_y = [0.0, s[1] as f32, 0.0, o[1] as f32];
    h.srow_z = [0.0, 0.0, s[2] as f32, o[2] as f32];
    h.quatern_b = 0.0;
    h.quatern_c = 0.0;
    h.quatern_d = 0.0;
    h.quatern_x = o[0] as f32;
    h.quatern_y = o[1] as f32;
    h.quatern_z = o[2] as f32;
    h
}

fn write<A>(path: &Path, header: &NiftiHeader, data: Array3<A>) -> Result<()>
where
    A: nifti::DataElement + bytemuck::Pod,
{
    nifti::writer::WriterOptions::new(path)
        .reference_header(header)
        .write_nifti(&data)
        .map_err(|e| match e {
            nifti::NiftiError::Io(source) => Error::io(path, source),
            e => parse_err(path, e),
        })
}

/// Writes a volume as 32-bit float NIfTI (`.nii` or `.nii.gz` by extension).
pub fn save_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    let [nx, ny, nz] = vol.dims();
    let data = Array3::from_shape_vec((nx, ny, nz).f(), vol.data().to_vec())
        .expect("grid length matches dims");
    let mut h = header_for(vol);
    h.scl_slope = 1.0;
    write(path.as_ref(), &h, data)
}

/// Writes a mask as unsigned 8-bit NIfTI with values {0, 1}.
pub fn save_mask(mask: &BinaryMask3D, path: impl AsRef<Path>) -> Result<()> {
    let [nx, ny, nz] = mask.dims();
    let data = Array3::from_shape_vec((nx, ny, nz).f(), mask.to_u8())
        .expect("grid length matches dims");
    write(path.as_ref(), &header_for(mask), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3], spacing: [f64; 3]) -> CtVolume {
        CtVolume::from_fn(dims, spacing, |x, y, z| (x as f32) * 3.25 - (y as f32) * 7.5 + z as f32 * 0.125 - 900.0)
            .unwrap()
    }

    #[test]
    fn phantom_sized_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ct.nii.gz");
        let v = ramp([200, 150, 100], [1.6, 1.6, 2.5]).with_origin([-160.0, 12.5, -300.0]);
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), [1.6f32 as f64, 1.6f32 as f64, 2.5]);
        for (a, b) in v.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(back.origin(), [-160.0, 12.5, -300.0]);
    }

    #[test]
    fn anisotropic_spacing_passthrough() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("thick.nii");
        save_volume(&ramp([6, 5, 4], [0.7, 0.7, 8.0]), &p).unwrap();
        let s = load_volume(&p).unwrap().spacing();
        for (got, want) in s.iter().zip([0.7, 0.7, 8.0]) {
            assert!((got - want).abs() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn eight_bit_volume_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u8.nii");
        let data = Array3::<u8>::from_elem((4, 4, 4), 7);
        nifti::writer::WriterOptions::new(&p).write_nifti(&data).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::EightBitVolume { .. })));
        // the same file is acceptable as a mask
        assert_eq!(load_mask(&p).unwrap().count(), 64);
    }

    #[test]
    fn masks_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [23, 17, 11];
        let mut m = BinaryMask3D::filled(dims, [0.8, 0.9, 3.0], false).unwrap();
        let mut placed = 0;
        while placed < 1234 {
            let i = rng.random_range(0..m.len());
            if !m.data()[i] {
                m.data_mut()[i] = true;
                placed += 1;
            }
        }
        let p = dir.path().join("m.nii.gz");
        save_mask(&m, &p).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back.count(), 1234);
        assert_eq!(back.data(), m.data());

        let zeros = m.like(false);
        save_mask(&zeros, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap().count(), 0);
    }

    #[test]
    fn saved_mask_is_unsigned_eight_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii");
        save_mask(&BinaryMask3D::filled([2, 2, 2], [1.0; 3], true).unwrap(), &p).unwrap();
        let obj = ReaderOptions::new().read_file(&p).unwrap();
        assert_eq!(obj.header().data_type().unwrap(), NiftiType::Uint8);
    }

    #[test]
    fn corrupt_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.nii");
        std::fs::write(&p, vec![0x42u8; 500]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NiftiParse { .. })));
        assert!(matches!(load_volume(dir.path().join("missing.nii")), Err(Error::Io { .. })));
    }

    #[test]
    fn flipped_and_permuted_header_is_canonicalised() {
        // file axes: (z, x, y) with x running right-to-left
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lps.nii");
        let file_dims = (4usize, 3usize, 2usize);
        let data = Array3::from_shape_fn(file_dims, |(i, j, k)| (100 * i + 10 * j + k) as f32);
        let mut h = NiftiHeader::default();
        h.pixdim = [1.0, 2.5, 0.5, 0.75, 1.0, 1.0, 1.0, 1.0];
        h.sform_code = 1;
        h.srow_x = [0.0, -0.5, 0.0, 10.0];
        h.srow_y = [0.0, 0.0, 0.75, 0.0];
        h.srow_z = [2.5, 0.0, 0.0, 0.0];
        nifti::writer::WriterOptions::new(&p)
            .reference_header(&h)
            .write_nifti(&data)
            .unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [3, 2, 4]);
        assert_eq!(v.spacing(), [0.5, 0.75, 2.5]);
        // canonical (x, y, z) reads file (i = z, j = 2 - x, k = y)
        for z in 0..4 {
            for y in 0..2 {
                for x in 0..3 {
                    let want = (100 * z + 10 * (2 - x) + y) as f32;
                    assert_eq!(*v.get(x, y, z), want);
                }
            }
        }
        assert_eq!(v.origin(), [9.0, 0.0, 0.0]);
    }
}
