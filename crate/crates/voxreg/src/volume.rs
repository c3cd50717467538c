//! Dense volumetric grids: geometry, scalar images, label maps, sampling,
//! smoothing, resampling and pyramid construction.
//!
//! Voxel data is stored x-fastest (`idx = x + nx*(y + ny*z)`). Continuous
//! positions are in voxel coordinates unless a function says otherwise; the
//! voxel→world map is `world = origin + direction · diag(spacing) · v`.

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Placement of a regular 3-D grid in world (scanner) space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    /// Grid size per axis; every entry ≥ 1.
    pub dims: [usize; 3],
    /// Voxel edge length per axis in mm; every entry > 0.
    pub spacing: [f64; 3],
    /// World position of the center of voxel (0,0,0).
    pub origin: [f64; 3],
    /// Direction cosines, columns = world directions of the voxel axes.
    pub direction: Mat3,
}

impl GridGeometry {
    /// Axis-aligned geometry at the world origin.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        GridGeometry { dims, spacing, origin: [0.0; 3], direction: math::MAT3_IDENTITY }
    }

    /// Checks the structural invariants (positive dims/spacing, invertible
    /// direction matrix).
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("non-positive spacing in {:?}", self.spacing)));
        }
        if math::det(&self.direction).abs() < 1e-12 {
            return Err(Error::Shape("singular direction matrix".into()));
        }
        Ok(())
    }

    /// Total number of voxels.
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of an integer voxel coordinate.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// `direction · diag(spacing)`: the linear part of the voxel→world map.
    pub fn world_matrix(&self) -> Mat3 {
        let mut m = self.direction;
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] *= self.spacing[c];
            }
        }
        m
    }

    /// Inverse of [`world_matrix`](Self::world_matrix).
    pub fn world_matrix_inv(&self) -> Result<Mat3> {
        math::inverse(&self.world_matrix())
            .ok_or_else(|| Error::Shape("singular direction matrix".into()))
    }

    /// Continuous voxel coordinate → world coordinate (mm).
    pub fn voxel_to_world(&self, v: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.world_matrix(), v), self.origin)
    }

    /// World coordinate (mm) → continuous voxel coordinate.
    pub fn world_to_voxel(&self, w: Vec3) -> Result<Vec3> {
        Ok(math::mat_vec(&self.world_matrix_inv()?, math::sub(w, self.origin)))
    }

    /// World coordinate of the grid's center.
    pub fn world_center(&self) -> Vec3 {
        let c = [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ];
        self.voxel_to_world(c)
    }

    /// Loose equality: identical dims, float fields within `tol`.
    pub fn approx_eq(&self, other: &GridGeometry, tol: f64) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        for a in 0..3 {
            if !close(self.spacing[a], other.spacing[a]) || !close(self.origin[a], other.origin[a])
            {
                return false;
            }
            for b in 0..3 {
                if !close(self.direction[a][b], other.direction[a][b]) {
                    return false;
                }
            }
        }
        true
    }
}

/// Scalar-valued volume (intensities stored as f64).
#[derive(Debug, Clone)]
pub struct ImageVolume {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
}

/// Integer label map sharing the grid conventions of [`ImageVolume`].
/// Label 0 is background by convention.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub geometry: GridGeometry,
    pub data: Vec<u32>,
}

impl ImageVolume {
    /// Builds a volume, checking that the buffer matches the geometry.
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(ImageVolume { geometry, data })
    }

    /// Zero-filled volume on the given grid.
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        ImageVolume { geometry, data: vec![0.0; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// (min, max) over all voxels.
    pub fn intensity_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Trilinear interpolation at a continuous voxel coordinate with
    /// border replication (coordinates clamp to the grid).
    pub fn sample_trilinear(&self, p: Vec3) -> f64 {
        self.sample_trilinear_with_gradient(p).0
    }

    /// Trilinear value plus its spatial derivative with respect to the voxel
    /// coordinate. The derivative along an axis is 0 wherever the coordinate
    /// is clamped (strictly outside the grid on that axis).
    pub fn sample_trilinear_with_gradient(&self, p: Vec3) -> (f64, Vec3) {
        let dims = self.geometry.dims;
        let mut i = [0usize; 3];
        let mut f = [0.0f64; 3];
        let mut live = [true; 3]; // axis derivative survives clamping
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                i[a] = 0;
                f[a] = 0.0;
                live[a] = false;
                continue;
            }
            let hi = (n - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            live[a] = p[a] >= 0.0 && p[a] <= hi;
            let mut i0 = c.floor() as usize;
            if i0 > n - 2 {
                i0 = n - 2;
            }
            i[a] = i0;
            f[a] = c - i0 as f64;
        }
        let nx = dims[0];
        let nxy = dims[0] * dims[1];
        let base = i[0] + nx * i[1] + nxy * i[2];
        let d = &self.data;
        let c000 = d[base];
        let c100 = d[base + 1];
        let c010 = d[base + nx];
        let c110 = d[base + nx + 1];
        let c001 = d[base + nxy];
        let c101 = d[base + nxy + 1];
        let c011 = d[base + nx + nxy];
        let c111 = d[base + nx + nxy + 1];
        let (fx, fy, fz) = (f[0], f[1], f[2]);
        let (gx0, gy0, gz0) = (1.0 - fx, 1.0 - fy, 1.0 - fz);

        // Collapse x first; the two-weight form is exact at both fx = 0 and
        // fx = 1, which keeps lattice points (including far faces) bit-exact.
        let c00 = c000 * gx0 + c100 * fx;
        let c10 = c010 * gx0 + c110 * fx;
        let c01 = c001 * gx0 + c101 * fx;
        let c11 = c011 * gx0 + c111 * fx;
        let c0 = c00 * gy0 + c10 * fy;
        let c1 = c01 * gy0 + c11 * fy;
        let value = c0 * gz0 + c1 * fz;

        let gx = {
            let g00 = c100 - c000;
            let g10 = c110 - c010;
            let g01 = c101 - c001;
            let g11 = c111 - c011;
            let g0 = g00 + (g10 - g00) * fy;
            let g1 = g01 + (g11 - g01) * fy;
            g0 + (g1 - g0) * fz
        };
        let gy = {
            let g0 = c10 - c00;
            let g1 = c11 - c01;
            g0 + (g1 - g0) * fz
        };
        let gz = c1 - c0;

        let mut grad = [gx, gy, gz];
        for a in 0..3 {
            if !live[a] {
                grad[a] = 0.0;
            }
        }
        (value, grad)
    }

    /// Gaussian smoothing with a separable kernel (per-axis σ in voxels,
    /// radius 3σ, border replication). `sigma = 0` is a no-op on that axis.
    pub fn gaussian_smooth(&self, sigma: [f64; 3]) -> ImageVolume {
        ImageVolume {
            geometry: self.geometry.clone(),
            data: gaussian_smooth_raw(&self.data, self.geometry.dims, sigma),
        }
    }

    /// Resamples onto an isotropic grid with the given voxel size, keeping
    /// origin and orientation. New dims are `ceil(dim · spacing / target)`
    /// so the world extent never shrinks.
    pub fn resample_iso(&self, target_mm: f64) -> Result<ImageVolume> {
        let geometry = iso_geometry(&self.geometry, target_mm)?;
        let mut out = ImageVolume::zeros(geometry);
        let map = grid_to_grid(&out.geometry, &self.geometry)?;
        let mut idx = 0;
        for z in 0..out.geometry.dims[2] {
            for y in 0..out.geometry.dims[1] {
                for x in 0..out.geometry.dims[0] {
                    let p = apply_voxel_map(&map, [x as f64, y as f64, z as f64]);
                    out.data[idx] = self.sample_trilinear(p);
                    idx += 1;
                }
            }
        }
        Ok(out)
    }

    /// One pyramid level: Gaussian smoothing (σ in voxels) followed by
    /// decimation that keeps every `shrink`-th voxel starting at 0.
    pub fn pyramid_level(&self, shrink: usize, sigma: f64) -> Result<ImageVolume> {
        if shrink == 0 {
            return Err(Error::InvalidInput("shrink factor must be ≥ 1".into()));
        }
        let smoothed =
            if sigma > 0.0 { self.gaussian_smooth([sigma; 3]) } else { self.clone() };
        if shrink == 1 {
            return Ok(smoothed);
        }
        let dims = self.geometry.dims;
        let new_dims = [div_ceil(dims[0], shrink), div_ceil(dims[1], shrink), div_ceil(dims[2], shrink)];
        let mut geometry = self.geometry.clone();
        geometry.dims = new_dims;
        for a in 0..3 {
            geometry.spacing[a] *= shrink as f64;
        }
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for z in (0..dims[2]).step_by(shrink) {
            for y in (0..dims[1]).step_by(shrink) {
                for x in (0..dims[0]).step_by(shrink) {
                    data.push(smoothed.at(x, y, z));
                }
            }
        }
        ImageVolume::new(geometry, data)
    }
}

impl LabelVolume {
    /// Builds a label map, checking that the buffer matches the geometry.
    pub fn new(geometry: GridGeometry, data: Vec<u32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxel_count() {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(LabelVolume { geometry, data })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Nearest-neighbor lookup at a continuous voxel coordinate. Half-integer
    /// coordinates round toward +∞ per axis; out-of-bounds clamps to the grid.
    pub fn sample_nearest(&self, p: Vec3) -> u32 {
        let dims = self.geometry.dims;
        let mut i = [0usize; 3];
        for a in 0..3 {
            let r = (p[a] + 0.5).floor();
            i[a] = (r.max(0.0) as usize).min(dims[a] - 1);
        }
        self.data[self.geometry.index(i[0], i[1], i[2])]
    }

    /// Nearest-neighbor resampling onto an isotropic grid; see
    /// [`ImageVolume::resample_iso`] for the grid construction.
    pub fn resample_iso(&self, target_mm: f64) -> Result<LabelVolume> {
        let geometry = iso_geometry(&self.geometry, target_mm)?;
        let map = grid_to_grid(&geometry, &self.geometry)?;
        let mut data = Vec::with_capacity(geometry.voxel_count());
        for z in 0..geometry.dims[2] {
            for y in 0..geometry.dims[1] {
                for x in 0..geometry.dims[0] {
                    let p = apply_voxel_map(&map, [x as f64, y as f64, z as f64]);
                    data.push(self.sample_nearest(p));
                }
            }
        }
        LabelVolume::new(geometry, data)
    }
}

/// Affine map between the voxel coordinates of two grids (through world
/// space): `v_to = linear · v_from + offset`.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub linear: Mat3,
    pub offset: Vec3,
}

/// Voxel-coordinate map from `from`'s grid into `to`'s grid.
pub fn grid_to_grid(from: &GridGeometry, to: &GridGeometry) -> Result<VoxelMap> {
    let a = from.world_matrix();
    let b_inv = to.world_matrix_inv()?;
    Ok(VoxelMap {
        linear: math::mat_mul(&b_inv, &a),
        offset: math::mat_vec(&b_inv, math::sub(from.origin, to.origin)),
    })
}

#[inline]
pub fn apply_voxel_map(m: &VoxelMap, p: Vec3) -> Vec3 {
    math::add(math::mat_vec(&m.linear, p), m.offset)
}

/// Gaussian smoothing on a raw x-fastest buffer; shared by scalar volumes
/// and the per-component smoothing of vector fields. `sigma` is per-axis in
/// voxels; 0 skips that axis.
pub fn gaussian_smooth_raw(data: &[f64], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    for axis in 0..3 {
        if sigma[axis] <= 0.0 {
            continue;
        }
        let (kernel, radius) = gaussian_kernel(sigma[axis]);
        convolve_axis(&cur, &mut next, dims, axis, &kernel, radius);
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Normalized 1-D Gaussian kernel truncated at radius ceil(3σ).
fn gaussian_kernel(sigma: f64) -> (Vec<f64>, usize) {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for k in -(radius as isize)..=(radius as isize) {
        kernel.push((-(k as f64) * (k as f64) * inv).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for w in &mut kernel {
        *w /= sum;
    }
    (kernel, radius)
}

/// Convolves one axis with border replication.
fn convolve_axis(
    src: &[f64],
    dst: &mut [f64],
    dims: [usize; 3],
    axis: usize,
    kernel: &[f64],
    radius: usize,
) {
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    } as isize;
    let (ou, ov) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (nu, nv) = (dims[ou], dims[ov]);
    let (su, sv) = (
        match ou {
            0 => 1isize,
            1 => dims[0] as isize,
            _ => (dims[0] * dims[1]) as isize,
        },
        match ov {
            0 => 1isize,
            1 => dims[0] as isize,
            _ => (dims[0] * dims[1]) as isize,
        },
    );
    for v in 0..nv as isize {
        for u in 0..nu as isize {
            let line = u * su + v * sv;
            for i in 0..n {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let j = (i + ki as isize - radius as isize).clamp(0, n - 1);
                    acc += w * src[(line + j * stride) as usize];
                }
                dst[(line + i * stride) as usize] = acc;
            }
        }
    }
}

fn iso_geometry(src: &GridGeometry, target_mm: f64) -> Result<GridGeometry> {
    if !(target_mm > 0.0) || !target_mm.is_finite() {
        return Err(Error::InvalidInput(format!("target spacing must be > 0, got {target_mm}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = src.dims[a] as f64 * src.spacing[a];
        dims[a] = ((extent / target_mm).ceil() as usize).max(1);
    }
    Ok(GridGeometry {
        dims,
        spacing: [target_mm; 3],
        origin: src.origin,
        direction: src.direction,
    })
}

fn div_ceil(a: usize, b: usize) -> usize {
    (a + b - 1) / b
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_volume() -> ImageVolume {
        // value = x + 2y + 4z on a 2^3 grid: trilinear in each axis.
        let geom = GridGeometry::axis_aligned([2, 2, 2], [1.0; 3]);
        let mut data = vec![0.0; 8];
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    data[geom.index(x, y, z)] = x as f64 + 2.0 * y as f64 + 4.0 * z as f64;
                }
            }
        }
        ImageVolume::new(geom, data).unwrap()
    }

    #[test]
    fn trilinear_center_of_unit_cube() {
        let vol = ramp_volume();
        let v = vol.sample_trilinear([0.5, 0.5, 0.5]);
        assert!((v - 3.5).abs() < 1e-15);
    }

    #[test]
    fn trilinear_is_exact_on_lattice_points() {
        let geom = GridGeometry::axis_aligned([4, 3, 5], [1.0; 3]);
        let data: Vec<f64> = (0..geom.voxel_count()).map(|i| (i as f64).sin() * 10.0).collect();
        let vol = ImageVolume::new(geom, data).unwrap();
        for z in 0..5 {
            for y in 0..3 {
                for x in 0..4 {
                    let s = vol.sample_trilinear([x as f64, y as f64, z as f64]);
                    assert_eq!(s, vol.at(x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_clamps_outside_the_grid() {
        let vol = ramp_volume();
        assert_eq!(vol.sample_trilinear([-3.0, 0.0, 0.0]), vol.at(0, 0, 0));
        assert_eq!(vol.sample_trilinear([5.0, 1.0, 1.0]), vol.at(1, 1, 1));
        // Gradient dies on the clamped axis but survives on in-range axes.
        let (_, g) = vol.sample_trilinear_with_gradient([-3.0, 0.5, 0.5]);
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 2.0).abs() < 1e-12);
        assert!((g[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn trilinear_gradient_matches_ramp_coefficients() {
        let vol = ramp_volume();
        let (v, g) = vol.sample_trilinear_with_gradient([0.3, 0.7, 0.2]);
        assert!((v - (0.3 + 1.4 + 0.8)).abs() < 1e-12);
        assert!((g[0] - 1.0).abs() < 1e-12);
        assert!((g[1] - 2.0).abs() < 1e-12);
        assert!((g[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_rounds_half_up_and_clamps() {
        let geom = GridGeometry::axis_aligned([3, 1, 1], [1.0; 3]);
        let labels = LabelVolume::new(geom, vec![10, 20, 30]).unwrap();
        assert_eq!(labels.sample_nearest([0.49, 0.0, 0.0]), 10);
        assert_eq!(labels.sample_nearest([0.5, 0.0, 0.0]), 20);
        assert_eq!(labels.sample_nearest([-7.0, 0.0, 0.0]), 10);
        assert_eq!(labels.sample_nearest([9.0, 0.0, 0.0]), 30);
    }

    #[test]
    fn smoothing_preserves_constants_and_range() {
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let constant = ImageVolume::new(geom.clone(), vec![5.25; 512]).unwrap();
        let sm = constant.gaussian_smooth([1.5; 3]);
        for &v in &sm.data {
            assert!((v - 5.25).abs() < 1e-12);
        }

        let data: Vec<f64> = (0..512).map(|i| ((i * 37) % 101) as f64).collect();
        let vol = ImageVolume::new(geom, data).unwrap();
        let (lo, hi) = vol.intensity_range();
        let sm = vol.gaussian_smooth([2.0, 1.0, 0.5]);
        for &v in &sm.data {
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn smoothing_zero_sigma_is_identity() {
        let geom = GridGeometry::axis_aligned([4, 4, 4], [1.0; 3]);
        let data: Vec<f64> = (0..64).map(|i| (i as f64) * 0.7 - 3.0).collect();
        let vol = ImageVolume::new(geom, data.clone()).unwrap();
        assert_eq!(vol.gaussian_smooth([0.0; 3]).data, data);
    }

    #[test]
    fn impulse_center_weight_is_kernel_product() {
        let geom = GridGeometry::axis_aligned([9, 9, 9], [1.0; 3]);
        let mut data = vec![0.0; 729];
        data[geom.index(4, 4, 4)] = 1.0;
        let vol = ImageVolume::new(geom, data).unwrap();
        let sm = vol.gaussian_smooth([1.0; 3]);
        // Expected: the normalized 1-D kernel center cubed.
        let radius = 3usize;
        let mut k = Vec::new();
        for i in -(radius as isize)..=(radius as isize) {
            k.push((-(i as f64).powi(2) / 2.0).exp());
        }
        let sum: f64 = k.iter().sum();
        let center = k[radius] / sum;
        let expect = center * center * center;
        assert!((sm.at(4, 4, 4) - expect).abs() < 1e-10);
    }

    #[test]
    fn resample_iso_dims_and_extent() {
        let geom = GridGeometry::axis_aligned([64, 64, 64], [1.0; 3]);
        let vol = ImageVolume::zeros(geom);
        let out = vol.resample_iso(1.5).unwrap();
        assert_eq!(out.geometry.dims, [43, 43, 43]);
        for a in 0..3 {
            let old_extent = 64.0;
            let new_extent = out.geometry.dims[a] as f64 * 1.5;
            assert!(new_extent >= old_extent && new_extent - old_extent <= 1.5);
        }

        let small = ImageVolume::zeros(GridGeometry::axis_aligned([4, 4, 4], [1.0; 3]));
        let out = small.resample_iso(2.0).unwrap();
        assert_eq!(out.geometry.dims, [2, 2, 2]);
    }

    #[test]
    fn resample_to_own_spacing_keeps_values() {
        let geom = GridGeometry::axis_aligned([6, 6, 6], [1.0; 3]);
        let data: Vec<f64> = (0..216).map(|i| ((i * 13) % 29) as f64).collect();
        let vol = ImageVolume::new(geom, data).unwrap();
        let out = vol.resample_iso(1.0).unwrap();
        assert_eq!(out.geometry.dims, vol.geometry.dims);
        for i in 0..out.data.len() {
            assert!((out.data[i] - vol.data[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn resample_tracks_an_analytic_linear_field() {
        // value(world) = 2x − 0.5y + 3z + 1; trilinear reproduces it exactly,
        // so resampled voxels must match the analytic field at their world
        // positions.
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let field = |w: Vec3| 2.0 * w[0] - 0.5 * w[1] + 3.0 * w[2] + 1.0;
        let mut data = vec![0.0; 512];
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let w = geom.voxel_to_world([x as f64, y as f64, z as f64]);
                    data[geom.index(x, y, z)] = field(w);
                }
            }
        }
        let vol = ImageVolume::new(geom, data).unwrap();
        let out = vol.resample_iso(1.5).unwrap();
        for z in 0..out.geometry.dims[2] {
            for y in 0..out.geometry.dims[1] {
                for x in 0..out.geometry.dims[0] {
                    let w = out.geometry.voxel_to_world([x as f64, y as f64, z as f64]);
                    // Border replication clamps positions past the source
                    // grid, so only check samples inside the original extent.
                    if w.iter().any(|&c| c > 7.0) {
                        continue;
                    }
                    assert!((out.at(x, y, z) - field(w)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn trilinear_reproduces_affine_fields_exactly() {
        let geom = GridGeometry::axis_aligned([5, 6, 7], [1.0; 3]);
        let f = |p: Vec3| 1.5 * p[0] - 2.25 * p[1] + 0.75 * p[2] + 4.0;
        let mut data = vec![0.0; geom.voxel_count()];
        for z in 0..7 {
            for y in 0..6 {
                for x in 0..5 {
                    data[geom.index(x, y, z)] = f([x as f64, y as f64, z as f64]);
                }
            }
        }
        let vol = ImageVolume::new(geom, data).unwrap();
        for i in 0..200 {
            let p = [
                (i as f64 * 0.618).fract() * 4.0,
                (i as f64 * 0.414).fract() * 5.0,
                (i as f64 * 0.732).fract() * 6.0,
            ];
            assert!((vol.sample_trilinear(p) - f(p)).abs() < 1e-9);
        }
    }

    #[test]
    fn pyramid_level_dims_and_spacing() {
        let geom = GridGeometry::axis_aligned([64, 48, 32], [1.0, 1.0, 2.0]);
        let vol = ImageVolume::zeros(geom);
        let lvl = vol.pyramid_level(4, 2.0).unwrap();
        assert_eq!(lvl.geometry.dims, [16, 12, 8]);
        assert_eq!(lvl.geometry.spacing, [4.0, 4.0, 8.0]);
    }

    #[test]
    fn pyramid_shrink_one_keeps_grid() {
        let geom = GridGeometry::axis_aligned([5, 5, 5], [1.0; 3]);
        let data: Vec<f64> = (0..125).map(|i| i as f64).collect();
        let vol = ImageVolume::new(geom, data.clone()).unwrap();
        let lvl = vol.pyramid_level(1, 0.0).unwrap();
        assert_eq!(lvl.geometry.dims, [5, 5, 5]);
        assert_eq!(lvl.data, data);
    }

    #[test]
    fn pyramid_preserves_constants() {
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let vol = ImageVolume::new(geom, vec![-2.5; 512]).unwrap();
        let lvl = vol.pyramid_level(2, 1.5).unwrap();
        assert_eq!(lvl.geometry.dims, [4, 4, 4]);
        for &v in &lvl.data {
            assert!((v + 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_matches_brute_force_search() {
        let geom = GridGeometry::axis_aligned([5, 5, 5], [1.0; 3]);
        let data: Vec<u32> = (0..125).map(|i| ((i * 7 + 3) % 23) as u32).collect();
        let labels = LabelVolume::new(geom.clone(), data).unwrap();
        for i in 0..100 {
            let p = [
                (i as f64 * 0.618).fract() * 6.0 - 0.5,
                (i as f64 * 0.414).fract() * 6.0 - 0.5,
                (i as f64 * 0.151).fract() * 6.0 - 0.5,
            ];
            // Brute force: find the minimum distance, collect every lattice
            // point achieving it (the tie set is a per-axis product set), and
            // resolve ties toward +∞ by taking the coordinate-wise maximum.
            let mut min_d2 = f64::INFINITY;
            let mut ties: Vec<[usize; 3]> = Vec::new();
            for z in 0..5 {
                for y in 0..5 {
                    for x in 0..5 {
                        let q = [x as f64, y as f64, z as f64];
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
                            + (p[2] - q[2]).powi(2);
                        if d2 < min_d2 - 1e-12 {
                            min_d2 = d2;
                            ties = vec![[x, y, z]];
                        } else if (d2 - min_d2).abs() <= 1e-12 {
                            ties.push([x, y, z]);
                        }
                    }
                }
            }
            let mut pick = [0usize; 3];
            for t in &ties {
                for a in 0..3 {
                    pick[a] = pick[a].max(t[a]);
                }
            }
            let expect = labels.at(pick[0], pick[1], pick[2]);
            assert_eq!(labels.sample_nearest(p), expect, "point {p:?}");
        }
    }

    #[test]
    fn world_roundtrip_with_rotation() {
        let c = (0.3f64).cos();
        let s = (0.3f64).sin();
        let geom = GridGeometry {
            dims: [4, 4, 4],
            spacing: [1.5, 2.0, 2.5],
            origin: [10.0, -4.0, 2.0],
            direction: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        };
        let p = [1.2, 3.4, 0.7];
        let w = geom.voxel_to_world(p);
        let back = geom.world_to_voxel(w).unwrap();
        for a in 0..3 {
            assert!((back[a] - p[a]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn nearest_returns_an_existing_label(
            px in -2.0f64..6.0, py in -2.0f64..6.0, pz in -2.0f64..6.0,
            seed in 0u32..1000
        ) {
            let geom = GridGeometry::axis_aligned([4, 4, 4], [1.0; 3]);
            let data: Vec<u32> = (0..64).map(|i| ((i as u32).wrapping_mul(seed + 1)) % 7).collect();
            let labels = LabelVolume::new(geom, data.clone()).unwrap();
            let l = labels.sample_nearest([px, py, pz]);
            prop_assert!(data.contains(&l));
        }

        #[test]
        fn trilinear_stays_within_input_range(
            px in -1.0f64..5.0, py in -1.0f64..5.0, pz in -1.0f64..5.0,
            seed in 0u64..1000
        ) {
            let geom = GridGeometry::axis_aligned([4, 4, 4], [1.0; 3]);
            let data: Vec<f64> =
                (0..64).map(|i| (((i as u64 + 1) * (seed + 3)) % 97) as f64).collect();
            let vol = ImageVolume::new(geom, data).unwrap();
            let (lo, hi) = vol.intensity_range();
            let v = vol.sample_trilinear([px, py, pz]);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }
}
