//! Synthetic LGE-like phantoms with exact ground truth, per-slice mean
//! normalization, multiview reslicing and the raw volume file format.

use std::f64::consts::PI;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::WALL_THICKNESS_MM;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// A 3D scalar grid with physical voxel spacing. Dims are (Z, Y, X) and the
/// values are row-major with Z the slowest axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub kind: VolumeKind,
    values: Vec<f64>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        kind: VolumeKind,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::invalid("volume dims must be >= 1 per axis"));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        if values.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::invalid(format!(
                "volume dims {:?} imply {} voxels but {} were given",
                dims,
                dims.0 * dims.1 * dims.2,
                values.len()
            )));
        }
        if kind == VolumeKind::Label && values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("label volume must contain only {0,1}"));
        }
        Ok(Volume {
            dims,
            spacing_mm,
            kind,
            values,
        })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing_mm: (f64, f64, f64), kind: VolumeKind) -> Self {
        Volume {
            dims,
            spacing_mm,
            kind,
            values: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[self.index(z, y, x)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.0 * self.spacing_mm.1 * self.spacing_mm.2
    }

    pub fn num_voxels(&self) -> usize {
        self.values.len()
    }
}

/// Parameters of one synthetic phantom: an ellipsoidal blood pool with
/// attached vein stubs, bright scar patches on the anatomy boundary band,
/// and Gaussian intensity texture. The seed fully determines the output
/// (ChaCha8 stream, Box-Muller normals).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub semi_axes_mm: (f64, f64, f64),
    pub center_mm: (f64, f64, f64),
    pub pv_stub_count: usize,
    pub pv_radius_mm: f64,
    pub scar_patch_count: usize,
    pub scar_angular_extent_rad: f64,
    pub scar_thickness_mm: f64,
    pub background_mean: f64,
    pub background_sd: f64,
    pub blood_mean: f64,
    pub blood_sd: f64,
    pub scar_mean: f64,
    pub scar_sd: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// A 16x32x32 desk-scale phantom with 2 mm slices and 1 mm in-plane spacing.
    pub fn desk_scale(seed: u64) -> Self {
        PhantomSpec {
            dims: (16, 32, 32),
            spacing_mm: (2.0, 1.0, 1.0),
            semi_axes_mm: (10.0, 10.0, 10.0),
            center_mm: (16.0, 16.0, 16.0),
            pv_stub_count: 2,
            pv_radius_mm: 3.0,
            scar_patch_count: 3,
            scar_angular_extent_rad: 0.9,
            scar_thickness_mm: 2.0,
            background_mean: 0.1,
            background_sd: 0.02,
            blood_mean: 0.5,
            blood_sd: 0.03,
            scar_mean: 0.95,
            scar_sd: 0.02,
            noise_sd: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (z, y, x) = self.dims;
        if z == 0 || y == 0 || x == 0 {
            return Err(Error::invalid("phantom dims must be >= 1 per axis"));
        }
        let extent = (
            z as f64 * self.spacing_mm.0,
            y as f64 * self.spacing_mm.1,
            x as f64 * self.spacing_mm.2,
        );
        let fits = self.center_mm.0 - self.semi_axes_mm.0 >= 0.0
            && self.center_mm.0 + self.semi_axes_mm.0 <= extent.0
            && self.center_mm.1 - self.semi_axes_mm.1 >= 0.0
            && self.center_mm.1 + self.semi_axes_mm.1 <= extent.1
            && self.center_mm.2 - self.semi_axes_mm.2 >= 0.0
            && self.center_mm.2 + self.semi_axes_mm.2 <= extent.2;
        if !fits {
            return Err(Error::invalid("ellipsoid does not fit inside the grid"));
        }
        Ok(())
    }
}

pub struct Phantom {
    pub intensity: Volume,
    pub anatomy_gt: Volume,
    pub scar_gt: Volume,
    /// Exact scar burden in percent of the wall volume at 2.25 mm thickness.
    pub scar_fraction: f64,
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; fixed algorithm keeps phantoms portable across platforms.
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn unit_direction(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let z: f64 = rng.gen::<f64>() * 2.0 - 1.0;
    let phi: f64 = rng.gen::<f64>() * 2.0 * PI;
    let r = (1.0 - z * z).sqrt();
    (z, r * phi.sin(), r * phi.cos())
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (nz, ny, nx) = spec.dims;
    let (sz, sy, sx) = spec.spacing_mm;
    let (az, ay, ax) = spec.semi_axes_mm;
    let (cz, cy, cx) = spec.center_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // PV stub centers sit on the ellipsoid surface.
    let mut stubs = Vec::new();
    for _ in 0..spec.pv_stub_count {
        let (dz, dy, dx) = unit_direction(&mut rng);
        stubs.push((cz + dz * az, cy + dy * ay, cx + dx * ax));
    }
    let scar_dirs: Vec<(f64, f64, f64)> = (0..spec.scar_patch_count)
        .map(|_| unit_direction(&mut rng))
        .collect();

    let voxel_mm = |z: usize, y: usize, x: usize| {
        (
            (z as f64 + 0.5) * sz,
            (y as f64 + 0.5) * sy,
            (x as f64 + 0.5) * sx,
        )
    };

    let mut anatomy = vec![0.0f64; nz * ny * nx];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (pz, py, px) = voxel_mm(z, y, x);
                let e = ((pz - cz) / az).powi(2)
                    + ((py - cy) / ay).powi(2)
                    + ((px - cx) / ax).powi(2);
                let mut inside = e <= 1.0;
                if !inside {
                    for (qz, qy, qx) in &stubs {
                        let d2 = (pz - qz).powi(2) + (py - qy).powi(2) + (px - qx).powi(2);
                        if d2 <= spec.pv_radius_mm * spec.pv_radius_mm {
                            inside = true;
                            break;
                        }
                    }
                }
                if inside {
                    anatomy[(z * ny + y) * nx + x] = 1.0;
                }
            }
        }
    }

    // Boundary band: anatomy voxels within scar_thickness_mm of the outside.
    let rz = (spec.scar_thickness_mm / sz).ceil() as isize;
    let ry = (spec.scar_thickness_mm / sy).ceil() as isize;
    let rx = (spec.scar_thickness_mm / sx).ceil() as isize;
    let is_anat = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
            return false;
        }
        anatomy[(z as usize * ny + y as usize) * nx + x as usize] == 1.0
    };
    let mut band = vec![false; nz * ny * nx];
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !is_anat(z, y, x) {
                    continue;
                }
                'scan: for dz in -rz..=rz {
                    for dy in -ry..=ry {
                        for dx in -rx..=rx {
                            let dist2 = (dz as f64 * sz).powi(2)
                                + (dy as f64 * sy).powi(2)
                                + (dx as f64 * sx).powi(2);
                            if dist2 > spec.scar_thickness_mm * spec.scar_thickness_mm {
                                continue;
                            }
                            if !is_anat(z + dz, y + dy, x + dx) {
                                band[(z as usize * ny + y as usize) * nx + x as usize] = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut scar = vec![0.0f64; nz * ny * nx];
    let half_extent = spec.scar_angular_extent_rad / 2.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !band[i] {
                    continue;
                }
                let (pz, py, px) = voxel_mm(z, y, x);
                let v = (pz - cz, py - cy, px - cx);
                let n = (v.0 * v.0 + v.1 * v.1 + v.2 * v.2).sqrt();
                if n == 0.0 {
                    continue;
                }
                for d in &scar_dirs {
                    let cos = (v.0 * d.0 + v.1 * d.1 + v.2 * d.2) / n;
                    if cos.clamp(-1.0, 1.0).acos() <= half_extent {
                        scar[i] = 1.0;
                        break;
                    }
                }
            }
        }
    }

    let mut intensity = vec![0.0f64; nz * ny * nx];
    for (i, val) in intensity.iter_mut().enumerate() {
        let (mean, sd) = if scar[i] == 1.0 {
            (spec.scar_mean, spec.scar_sd)
        } else if anatomy[i] == 1.0 {
            (spec.blood_mean, spec.blood_sd)
        } else {
            (spec.background_mean, spec.background_sd)
        };
        *val = mean + sd * normal_sample(&mut rng) + spec.noise_sd * normal_sample(&mut rng);
        // Keep the stored values exactly representable in the f32 file format.
        *val = *val as f32 as f64;
    }

    // Exact scar burden under the fixed-thickness wall model: exposed face
    // area of the anatomy times the wall thickness.
    let mut area = 0.0f64;
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !is_anat(z, y, x) {
                    continue;
                }
                if !is_anat(z - 1, y, x) {
                    area += sy * sx;
                }
                if !is_anat(z + 1, y, x) {
                    area += sy * sx;
                }
                if !is_anat(z, y - 1, x) {
                    area += sz * sx;
                }
                if !is_anat(z, y + 1, x) {
                    area += sz * sx;
                }
                if !is_anat(z, y, x - 1) {
                    area += sz * sy;
                }
                if !is_anat(z, y, x + 1) {
                    area += sz * sy;
                }
            }
        }
    }
    let scar_vox = scar.iter().filter(|v| **v == 1.0).count() as f64;
    let scar_volume = scar_vox * sz * sy * sx;
    let wall_volume = area * WALL_THICKNESS_MM;
    let scar_fraction = if wall_volume > 0.0 {
        100.0 * scar_volume / wall_volume
    } else {
        0.0
    };

    Ok(Phantom {
        intensity: Volume::new(spec.dims, spec.spacing_mm, VolumeKind::Intensity, intensity)?,
        anatomy_gt: Volume::new(spec.dims, spec.spacing_mm, VolumeKind::Label, anatomy)?,
        scar_gt: Volume::new(spec.dims, spec.spacing_mm, VolumeKind::Label, scar)?,
        scar_fraction,
    })
}

/// Per-slice mean normalization: each axial slice is shifted to zero mean
/// and divided by its intensity range. A constant slice maps to zeros.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    if volume.kind != VolumeKind::Intensity {
        return Err(Error::invalid("normalize expects an intensity volume"));
    }
    let (nz, ny, nx) = volume.dims;
    let mut out = volume.values().to_vec();
    for z in 0..nz {
        let slice = &mut out[z * ny * nx..(z + 1) * ny * nx];
        let mean = slice.iter().sum::<f64>() / slice.len() as f64;
        let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        if range == 0.0 {
            slice.iter_mut().for_each(|v| *v = 0.0);
        } else {
            slice.iter_mut().for_each(|v| *v = (*v - mean) / range);
        }
    }
    Volume::new(volume.dims, volume.spacing_mm, VolumeKind::Intensity, out)
}

/// The three orthogonal slice stacks of one volume; pure axis permutations,
/// no interpolation. Axial slice z is (Y, X); sagittal slice x is (Y, Z);
/// coronal slice y is (X, Z).
pub struct MultiviewSlices {
    pub axial: Vec<Tensor>,
    pub sagittal: Vec<Tensor>,
    pub coronal: Vec<Tensor>,
}

pub fn reslice(volume: &Volume) -> MultiviewSlices {
    let (nz, ny, nx) = volume.dims;
    let mut axial = Vec::with_capacity(nz);
    for z in 0..nz {
        let data = volume.values()[z * ny * nx..(z + 1) * ny * nx].to_vec();
        axial.push(Tensor::new(vec![ny, nx], data).expect("slice shape"));
    }
    let mut sagittal = Vec::with_capacity(nx);
    for x in 0..nx {
        let mut data = Vec::with_capacity(ny * nz);
        for y in 0..ny {
            for z in 0..nz {
                data.push(volume.at(z, y, x));
            }
        }
        sagittal.push(Tensor::new(vec![ny, nz], data).expect("slice shape"));
    }
    let mut coronal = Vec::with_capacity(ny);
    for y in 0..ny {
        let mut data = Vec::with_capacity(nx * nz);
        for x in 0..nx {
            for z in 0..nz {
                data.push(volume.at(z, y, x));
            }
        }
        coronal.push(Tensor::new(vec![nx, nz], data).expect("slice shape"));
    }
    MultiviewSlices {
        axial,
        sagittal,
        coronal,
    }
}

impl MultiviewSlices {
    /// Rebuild the axial-order volume values from one view.
    pub fn reassemble_from_sagittal(&self) -> Vec<f64> {
        let nx = self.sagittal.len();
        let (ny, nz) = (self.sagittal[0].shape()[0], self.sagittal[0].shape()[1]);
        let mut out = vec![0.0f64; nz * ny * nx];
        for (x, slice) in self.sagittal.iter().enumerate() {
            for y in 0..ny {
                for z in 0..nz {
                    out[(z * ny + y) * nx + x] = slice.data()[y * nz + z];
                }
            }
        }
        out
    }

    pub fn reassemble_from_coronal(&self) -> Vec<f64> {
        let ny = self.coronal.len();
        let (nx, nz) = (self.coronal[0].shape()[0], self.coronal[0].shape()[1]);
        let mut out = vec![0.0f64; nz * ny * nx];
        for (y, slice) in self.coronal.iter().enumerate() {
            for x in 0..nx {
                for z in 0..nz {
                    out[(z * ny + y) * nx + x] = slice.data()[x * nz + z];
                }
            }
        }
        out
    }

    pub fn reassemble_from_axial(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.axial {
            out.extend_from_slice(s.data());
        }
        out
    }

    /// Stack a view into an (N, 1, H, W) batch tensor for the network.
    pub fn batch(slices: &[Tensor]) -> Tensor {
        let (h, w) = (slices[0].shape()[0], slices[0].shape()[1]);
        let mut data = Vec::with_capacity(slices.len() * h * w);
        for s in slices {
            data.extend_from_slice(s.data());
        }
        Tensor::new(vec![slices.len(), 1, h, w], data).expect("batch shape")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    format_version: u32,
    kind: VolumeKind,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    blob: String,
}

/// Write `<path>` (a .vjson header) plus the sibling .vraw blob.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let blob_path = path.with_extension("vraw");
    let blob_name = blob_path
        .file_name()
        .ok_or_else(|| Error::invalid("volume path has no file name"))?
        .to_string_lossy()
        .to_string();
    let (dtype, bytes): (&str, Vec<u8>) = match volume.kind {
        VolumeKind::Intensity => {
            let mut b = Vec::with_capacity(volume.num_voxels() * 4);
            for v in volume.values() {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            ("f32le", b)
        }
        VolumeKind::Label => (
            "u8",
            volume.values().iter().map(|v| *v as u8).collect::<Vec<u8>>(),
        ),
    };
    let header = VolumeHeader {
        format_version: 1,
        kind: volume.kind,
        dims: [volume.dims.0, volume.dims.1, volume.dims.2],
        spacing_mm: [
            volume.spacing_mm.0,
            volume.spacing_mm.1,
            volume.spacing_mm.2,
        ],
        dtype: dtype.to_string(),
        blob: blob_name,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut f = std::fs::File::create(&blob_path).map_err(|e| Error::Io {
        path: blob_path.display().to_string(),
        source: e,
    })?;
    f.write_all(&bytes).map_err(|e| Error::Io {
        path: blob_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.display().to_string(),
        reason: format!("bad header: {}", e),
    })?;
    if header.format_version != 1 {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            reason: format!("unknown format_version {}", header.format_version),
        });
    }
    let expected_dtype = match header.kind {
        VolumeKind::Intensity => "f32le",
        VolumeKind::Label => "u8",
    };
    if header.dtype != expected_dtype {
        return Err(Error::Malformed {
            path: path.display().to_string(),
            reason: format!(
                "dtype '{}' does not match kind (expected '{}')",
                header.dtype, expected_dtype
            ),
        });
    }
    let blob_path: PathBuf = match path.parent() {
        Some(dir) => dir.join(&header.blob),
        None => PathBuf::from(&header.blob),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io {
            path: blob_path.display().to_string(),
            source: e,
        })?;
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let elem = match header.kind {
        VolumeKind::Intensity => 4,
        VolumeKind::Label => 1,
    };
    if bytes.len() != n * elem {
        return Err(Error::Malformed {
            path: blob_path.display().to_string(),
            reason: format!("expected {} bytes, found {}", n * elem, bytes.len()),
        });
    }
    let values: Vec<f64> = match header.kind {
        VolumeKind::Intensity => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        VolumeKind::Label => {
            for (i, b) in bytes.iter().enumerate() {
                if *b > 1 {
                    return Err(Error::Malformed {
                        path: blob_path.display().to_string(),
                        reason: format!("label voxel {} has value {} (only 0/1 allowed)", i, b),
                    });
                }
            }
            bytes.iter().map(|b| *b as f64).collect()
        }
    };
    Volume::new(
        (header.dims[0], header.dims[1], header.dims[2]),
        (
            header.spacing_mm[0],
            header.spacing_mm[1],
            header.spacing_mm[2],
        ),
        header.kind,
        values,
    )
}
