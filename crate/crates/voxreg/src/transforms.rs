//! Spatial transforms: rigid/affine world maps, dense displacement fields,
//! stationary-velocity-field exponentials, composition and Jacobians.
//!
//! A displacement field `u` lives on the fixed grid in **voxel units**; the
//! warp it induces is `φ(v) = v + u(v)` in fixed voxel coordinates. Warping
//! routes through world space, so fixed and moving volumes may sit on
//! entirely different grids.

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::volume::{apply_voxel_map, grid_to_grid, GridGeometry, ImageVolume, LabelVolume};

/// Six-parameter rigid transform: Euler angles plus a world translation.
///
/// The rotation is applied about a supplied world center, Z first, then Y,
/// then X (`R = Rx · Ry · Rz`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidParams {
    /// Angles in radians about the world x, y and z axes.
    pub rotation: [f64; 3],
    /// World translation in mm.
    pub translation: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        RigidParams { rotation: [0.0; 3], translation: [0.0; 3] }
    }

    /// The 3×3 rotation matrix `Rx · Ry · Rz`.
    pub fn rotation_matrix(&self) -> Mat3 {
        let [ax, ay, az] = self.rotation;
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx: Mat3 = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry: Mat3 = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz: Mat3 = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        math::mat_mul(&rx, &math::mat_mul(&ry, &rz))
    }

    /// Matrix form `p ↦ R(p − c) + c + t` for rotation center `c`.
    pub fn to_affine(&self, center: Vec3) -> AffineMatrix {
        let r = self.rotation_matrix();
        let rc = math::mat_vec(&r, center);
        AffineMatrix {
            linear: r,
            translation: math::add(math::sub(center, rc), self.translation),
        }
    }
}

/// General affine world transform `p ↦ linear · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl AffineMatrix {
    pub fn identity() -> Self {
        AffineMatrix { linear: math::MAT3_IDENTITY, translation: [0.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.linear, p), self.translation)
    }

    /// `self ∘ other`: `other` is applied first.
    pub fn compose(&self, other: &AffineMatrix) -> AffineMatrix {
        AffineMatrix {
            linear: math::mat_mul(&self.linear, &other.linear),
            translation: math::add(math::mat_vec(&self.linear, other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> Result<AffineMatrix> {
        let inv = math::inverse(&self.linear)
            .ok_or_else(|| Error::InvalidTransform("singular linear part".into()))?;
        Ok(AffineMatrix {
            linear: inv,
            translation: math::scale(math::mat_vec(&inv, self.translation), -1.0),
        })
    }

    pub fn determinant(&self) -> f64 {
        math::det(&self.linear)
    }
}

/// Dense displacement field on a fixed grid, voxel units, x-fastest layout.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub geometry: GridGeometry,
    pub vectors: Vec<Vec3>,
}

/// Stationary velocity field; same layout as [`DisplacementField`] but its
/// warp is obtained through [`integrate_svf`].
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub geometry: GridGeometry,
    pub vectors: Vec<Vec3>,
}

impl VelocityField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        VelocityField { geometry, vectors: vec![[0.0; 3]; n] }
    }
}

impl DisplacementField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        DisplacementField { geometry, vectors: vec![[0.0; 3]; n] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.vectors[self.geometry.index(x, y, z)]
    }

    /// Trilinear interpolation of all three components at a continuous voxel
    /// coordinate, with border replication.
    pub fn sample(&self, p: Vec3) -> Vec3 {
        let dims = self.geometry.dims;
        let mut i = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let c = p[a].clamp(0.0, (n - 1) as f64);
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
        let step = |dx: usize, dy: usize, dz: usize| -> usize {
            base + dx * (dims[0] > 1) as usize
                + nx * dy * (dims[1] > 1) as usize
                + nxy * dz * (dims[2] > 1) as usize
        };
        let (fx, fy, fz) = (f[0], f[1], f[2]);
        let w = [
            (1.0 - fx) * (1.0 - fy) * (1.0 - fz),
            fx * (1.0 - fy) * (1.0 - fz),
            (1.0 - fx) * fy * (1.0 - fz),
            fx * fy * (1.0 - fz),
            (1.0 - fx) * (1.0 - fy) * fz,
            fx * (1.0 - fy) * fz,
            (1.0 - fx) * fy * fz,
            fx * fy * fz,
        ];
        let idx = [
            step(0, 0, 0),
            step(1, 0, 0),
            step(0, 1, 0),
            step(1, 1, 0),
            step(0, 0, 1),
            step(1, 0, 1),
            step(0, 1, 1),
            step(1, 1, 1),
        ];
        let mut out = [0.0; 3];
        for k in 0..8 {
            let v = self.vectors[idx[k]];
            out[0] += w[k] * v[0];
            out[1] += w[k] * v[1];
            out[2] += w[k] * v[2];
        }
        out
    }

    /// Largest displacement magnitude on the grid.
    pub fn max_magnitude(&self) -> f64 {
        self.vectors.iter().map(|v| math::norm(*v)).fold(0.0, f64::max)
    }

    /// Mean displacement magnitude on the grid.
    pub fn mean_magnitude(&self) -> f64 {
        if self.vectors.is_empty() {
            return 0.0;
        }
        self.vectors.iter().map(|v| math::norm(*v)).sum::<f64>() / self.vectors.len() as f64
    }
}

/// Converts a world-space affine into a dense displacement field on `geometry`
/// (`u(v) = voxel(T(world(v))) − v`).
pub fn linear_to_displacement(t: &AffineMatrix, geometry: &GridGeometry) -> Result<DisplacementField> {
    if t.determinant().abs() < 1e-300 {
        return Err(Error::InvalidTransform("singular linear part".into()));
    }
    geometry.validate()?;
    // Fold world(v) → T → voxel into a single voxel-space affine.
    let wm = geometry.world_matrix();
    let wm_inv = geometry.world_matrix_inv()?;
    let linear = math::mat_mul(&wm_inv, &math::mat_mul(&t.linear, &wm));
    let off_world = math::add(math::mat_vec(&t.linear, geometry.origin), t.translation);
    let offset = math::mat_vec(&wm_inv, math::sub(off_world, geometry.origin));
    let mut field = DisplacementField::zeros(geometry.clone());
    let mut idx = 0;
    for z in 0..geometry.dims[2] {
        for y in 0..geometry.dims[1] {
            for x in 0..geometry.dims[0] {
                let v = [x as f64, y as f64, z as f64];
                let mapped = math::add(math::mat_vec(&linear, v), offset);
                field.vectors[idx] = math::sub(mapped, v);
                idx += 1;
            }
        }
    }
    Ok(field)
}

/// Warps a scalar image with a displacement field: the output lives on the
/// field's (fixed) grid and reads `M(voxM(worldF(v + u(v))))` with trilinear
/// interpolation and border replication.
pub fn warp_image(moving: &ImageVolume, field: &DisplacementField) -> Result<ImageVolume> {
    let map = grid_to_grid(&field.geometry, &moving.geometry)?;
    let mut out = ImageVolume::zeros(field.geometry.clone());
    let mut idx = 0;
    for z in 0..field.geometry.dims[2] {
        for y in 0..field.geometry.dims[1] {
            for x in 0..field.geometry.dims[0] {
                let u = field.vectors[idx];
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                out.data[idx] = moving.sample_trilinear(apply_voxel_map(&map, p));
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Label-map analogue of [`warp_image`] using nearest-neighbor lookup.
pub fn warp_labels(moving: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    let map = grid_to_grid(&field.geometry, &moving.geometry)?;
    let mut data = Vec::with_capacity(field.geometry.voxel_count());
    for z in 0..field.geometry.dims[2] {
        for y in 0..field.geometry.dims[1] {
            for x in 0..field.geometry.dims[0] {
                let u = field.at(x, y, z);
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                data.push(moving.sample_nearest(apply_voxel_map(&map, p)));
            }
        }
    }
    LabelVolume::new(field.geometry.clone(), data)
}

/// The source geometry re-gridded at a new voxel spacing: same origin and
/// axes, dims chosen so the physical extent along each axis is preserved
/// as closely as the new spacing allows.
fn respaced_geometry(source: &GridGeometry, spacing: [f64; 3]) -> Result<GridGeometry> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "resample spacing must be positive, got {spacing:?}"
        )));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let extent = (source.dims[a] - 1) as f64 * source.spacing[a];
        dims[a] = (extent / spacing[a]).round() as usize + 1;
    }
    let target = GridGeometry {
        dims,
        spacing,
        origin: source.origin,
        direction: source.direction,
    };
    target.validate()?;
    Ok(target)
}

/// Resamples an image onto a grid with the given voxel spacing (same origin
/// and axes, matching physical extent) by trilinear interpolation. A
/// spacing equal to the current one returns an unchanged copy.
pub fn resample_to_spacing(image: &ImageVolume, spacing: [f64; 3]) -> Result<ImageVolume> {
    if image
        .geometry
        .spacing
        .iter()
        .zip(&spacing)
        .all(|(a, b)| (a - b).abs() < 1e-9)
    {
        return Ok(image.clone());
    }
    let target = respaced_geometry(&image.geometry, spacing)?;
    warp_image(image, &DisplacementField::zeros(target))
}

/// Label-map analogue of [`resample_to_spacing`] using nearest-neighbor
/// lookup.
pub fn resample_labels_to_spacing(
    labels: &LabelVolume,
    spacing: [f64; 3],
) -> Result<LabelVolume> {
    if labels
        .geometry
        .spacing
        .iter()
        .zip(&spacing)
        .all(|(a, b)| (a - b).abs() < 1e-9)
    {
        return Ok(labels.clone());
    }
    let target = respaced_geometry(&labels.geometry, spacing)?;
    warp_labels(labels, &DisplacementField::zeros(target))
}

/// Composition `φ_outer ∘ φ_inner` of two fields on the same grid:
/// `u_c(v) = u_inner(v) + u_outer(v + u_inner(v))`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    if !outer.geometry.approx_eq(&inner.geometry, 1e-9) {
        return Err(Error::Shape("compose requires fields on the same grid".into()));
    }
    let mut out = DisplacementField::zeros(inner.geometry.clone());
    let mut idx = 0;
    for z in 0..inner.geometry.dims[2] {
        for y in 0..inner.geometry.dims[1] {
            for x in 0..inner.geometry.dims[0] {
                let ui = inner.vectors[idx];
                let p = [x as f64 + ui[0], y as f64 + ui[1], z as f64 + ui[2]];
                let uo = outer.sample(p);
                out.vectors[idx] = math::add(ui, uo);
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Exponentiates a stationary velocity field by scaling and squaring:
/// `u₀ = v / 2^steps`, then `u ← u ∘ u` `steps` times.
pub fn integrate_svf(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    let scale = 1.0 / (1u64 << steps) as f64;
    let mut u = DisplacementField {
        geometry: v.geometry.clone(),
        vectors: v.vectors.iter().map(|w| math::scale(*w, scale)).collect(),
    };
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    Ok(u)
}

/// Per-voxel determinant of `J = I + ∂u/∂v` (central differences inside,
/// one-sided on the faces). Requires at least 3 voxels per axis.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<ImageVolume> {
    let dims = field.geometry.dims;
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::Shape(format!(
            "jacobian needs ≥ 3 voxels per axis, got {dims:?}"
        )));
    }
    let mut out = ImageVolume::zeros(field.geometry.clone());
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let idx = field.geometry.index(x, y, z);
                let pos = [x, y, z];
                let mut j = math::MAT3_IDENTITY;
                for axis in 0..3 {
                    let (lo, hi, h) = if pos[axis] == 0 {
                        (idx, idx + strides[axis], 1.0)
                    } else if pos[axis] == dims[axis] - 1 {
                        (idx - strides[axis], idx, 1.0)
                    } else {
                        (idx - strides[axis], idx + strides[axis], 2.0)
                    };
                    let a = field.vectors[lo];
                    let b = field.vectors[hi];
                    for comp in 0..3 {
                        j[comp][axis] += (b[comp] - a[comp]) / h;
                    }
                }
                out.data[idx] = math::det(&j);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::gaussian_smooth_raw;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random velocity field that decays to zero at the grid boundary
    /// (flow trajectories must stay inside the grid for the exponential to be
    /// meaningful; replication clamping would otherwise distort edge voxels).
    /// Random smooth test field: component-wise white noise smoothed with a
    /// Gaussian, rescaled so the largest vector magnitude equals `max_mag`.
    fn smooth_velocity(dims: [usize; 3], max_mag: f64, sigma: f64, seed: u64) -> VelocityField {
        let geometry = GridGeometry::axis_aligned(dims, [1.0; 3]);
        let n = geometry.voxel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut comps: Vec<Vec<f64>> = Vec::new();
        for _ in 0..3 {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            comps.push(gaussian_smooth_raw(&raw, dims, [sigma; 3]));
        }
        let mut field = VelocityField::zeros(geometry);
        let mut peak = 0.0f64;
        for i in 0..n {
            let v = [comps[0][i], comps[1][i], comps[2][i]];
            peak = peak.max(math::norm(v));
            field.vectors[i] = v;
        }
        let s = max_mag / peak;
        for v in &mut field.vectors {
            *v = math::scale(*v, s);
        }
        field
    }

    /// Random smooth test field that vanishes on every boundary face: the
    /// fundamental separable sine mode with a random amplitude direction.
    /// Trajectories of such a field never leave the volume, so both the
    /// exponential and its inverse are fully representable on the grid —
    /// unlike fields that push boundary voxels outside, where clamping
    /// discards the information an inverse would need.
    fn boundary_vanishing_velocity(dims: [usize; 3], max_mag: f64, seed: u64) -> VelocityField {
        let geometry = GridGeometry::axis_aligned(dims, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amps: [f64; 3] =
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let mut field = VelocityField::zeros(geometry);
        let mut peak = 0.0f64;
        let mut idx = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut m = 1.0;
                    for (a, &p) in [x, y, z].iter().enumerate() {
                        m *= (std::f64::consts::PI * p as f64 / (dims[a] - 1) as f64).sin();
                    }
                    let v = math::scale(amps, m);
                    peak = peak.max(math::norm(v));
                    field.vectors[idx] = v;
                    idx += 1;
                }
            }
        }
        let s = max_mag / peak;
        for v in &mut field.vectors {
            *v = math::scale(*v, s);
        }
        field
    }

    #[test]
    fn rigid_matrix_is_orthonormal() {
        let r = RigidParams { rotation: [0.3, -0.7, 1.1], translation: [1.0, 2.0, 3.0] };
        let m = r.rotation_matrix();
        let mt_m = math::mat_mul(
            &[[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]],
            &m,
        );
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((mt_m[a][b] - expect).abs() < 1e-9);
            }
        }
        assert!((math::det(&m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rigid_rotation_centers_correctly() {
        let r = RigidParams { rotation: [0.0, 0.0, 0.5], translation: [0.0; 3] };
        let center = [10.0, 20.0, 30.0];
        let t = r.to_affine(center);
        let moved = t.apply(center);
        for a in 0..3 {
            assert!((moved[a] - center[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_compose_and_inverse() {
        let a = AffineMatrix {
            linear: [[1.1, 0.1, 0.0], [0.0, 0.9, 0.05], [0.02, 0.0, 1.0]],
            translation: [3.0, -2.0, 1.0],
        };
        let inv = a.inverse().unwrap();
        let id = a.compose(&inv);
        let p = [3.7, -1.2, 5.5];
        let q = id.apply(p);
        for c in 0..3 {
            assert!((q[c] - p[c]).abs() < 1e-10);
        }
    }

    #[test]
    fn scale_about_center_fixes_the_center_voxel() {
        let geom = GridGeometry::axis_aligned([5, 5, 5], [1.0; 3]);
        let center = geom.world_center();
        let mut t = AffineMatrix::identity();
        for a in 0..3 {
            t.linear[a][a] = 1.1;
        }
        t.translation = math::sub(center, math::scale(center, 1.1));
        let field = linear_to_displacement(&t, &geom).unwrap();
        let u_center = field.at(2, 2, 2);
        assert!(math::norm(u_center) < 1e-12);
        // A linear field: u(v) = 0.1 (v − c); check a corner.
        let u_corner = field.at(0, 0, 0);
        for a in 0..3 {
            assert!((u_corner[a] - (-0.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn world_translation_becomes_voxel_translation() {
        let geom = GridGeometry::axis_aligned([4, 4, 4], [2.0; 3]);
        let t = AffineMatrix { linear: math::MAT3_IDENTITY, translation: [3.0, -2.0, 1.0] };
        let field = linear_to_displacement(&t, &geom).unwrap();
        for v in &field.vectors {
            assert!((v[0] - 1.5).abs() < 1e-12);
            assert!((v[1] + 1.0).abs() < 1e-12);
            assert!((v[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_translation_warp_is_exact_on_interior() {
        let geom = GridGeometry::axis_aligned([6, 6, 6], [1.0; 3]);
        let data: Vec<f64> = (0..216).map(|i| ((i * 31) % 17) as f64).collect();
        let moving = ImageVolume::new(geom.clone(), data).unwrap();
        let mut field = DisplacementField::zeros(geom);
        for v in &mut field.vectors {
            *v = [1.0, 2.0, 1.0];
        }
        let warped = warp_image(&moving, &field).unwrap();
        for z in 0..5 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(warped.at(x, y, z), moving.at(x + 1, y + 2, z + 1));
                }
            }
        }
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let geom = GridGeometry::axis_aligned([5, 4, 3], [1.0; 3]);
        let mut f = DisplacementField::zeros(geom.clone());
        for (i, v) in f.vectors.iter_mut().enumerate() {
            *v = [(i % 3) as f64 * 0.25, (i % 5) as f64 * -0.1, (i % 7) as f64 * 0.05];
        }
        let zero = DisplacementField::zeros(geom);
        let a = compose(&f, &zero).unwrap();
        let b = compose(&zero, &f).unwrap();
        for i in 0..f.vectors.len() {
            assert_eq!(a.vectors[i], f.vectors[i]);
            assert_eq!(b.vectors[i], f.vectors[i]);
        }
    }

    #[test]
    fn compose_matches_double_warp() {
        // Two non-commuting affine warps: composing the fields must equal
        // warping twice. Affine fields keep every interpolation step exact,
        // so any disagreement is a composition-order bug.
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let center = geom.world_center();
        let rot = RigidParams { rotation: [0.0, 0.0, 0.15], translation: [0.4, -0.3, 0.2] }
            .to_affine(center);
        let mut scl = AffineMatrix::identity();
        scl.linear[0][0] = 1.05;
        scl.linear[1][1] = 0.95;
        scl.translation = [0.3, 0.1, -0.2];
        let a = linear_to_displacement(&rot, &geom).unwrap();
        let b = linear_to_displacement(&scl, &geom).unwrap();

        let f = |p: [f64; 3]| 0.8 * p[0] - 1.1 * p[1] + 0.5 * p[2] + 2.0;
        let mut data = vec![0.0; 512];
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    data[geom.index(x, y, z)] = f([x as f64, y as f64, z as f64]);
                }
            }
        }
        let m = ImageVolume::new(geom.clone(), data).unwrap();

        let once = warp_image(&m, &compose(&a, &b).unwrap()).unwrap();
        let twice = warp_image(&warp_image(&m, &a).unwrap(), &b).unwrap();
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    assert!(
                        (once.at(x, y, z) - twice.at(x, y, z)).abs() < 1e-6,
                        "voxel ({x},{y},{z})"
                    );
                }
            }
        }
    }

    #[test]
    fn constant_velocity_integrates_to_translation() {
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let mut v = VelocityField::zeros(geom);
        for w in &mut v.vectors {
            *w = [0.75, -1.25, 2.0];
        }
        let u = integrate_svf(&v, 7).unwrap();
        for w in &u.vectors {
            assert!((w[0] - 0.75).abs() < 1e-6);
            assert!((w[1] + 1.25).abs() < 1e-6);
            assert!((w[2] - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn svf_matches_explicit_euler_flow() {
        let v = smooth_velocity([16, 16, 16], 2.0, 3.0, 11);
        let u = integrate_svf(&v, 7).unwrap();
        let vel_as_field =
            DisplacementField { geometry: v.geometry.clone(), vectors: v.vectors.clone() };
        let steps = 1024;
        let dt = 1.0 / steps as f64;
        let mut sq_err = 0.0;
        let mut count = 0usize;
        for z in 2..14 {
            for y in 2..14 {
                for x in 2..14 {
                    let start = [x as f64, y as f64, z as f64];
                    let mut p = start;
                    for _ in 0..steps {
                        let w = vel_as_field.sample(p);
                        p = math::add(p, math::scale(w, dt));
                    }
                    let euler_u = math::sub(p, start);
                    let ss_u = u.at(x, y, z);
                    let d = math::sub(euler_u, ss_u);
                    sq_err += math::dot(d, d);
                    count += 1;
                }
            }
        }
        let rms = (sq_err / count as f64).sqrt();
        assert!(rms < 1e-3, "scaling-squaring vs Euler RMS {rms}");
    }

    #[test]
    fn svf_negation_gives_an_inverse() {
        let v = boundary_vanishing_velocity([16, 16, 16], 2.0, 5);
        let mut neg = v.clone();
        for w in &mut neg.vectors {
            *w = math::scale(*w, -1.0);
        }
        let fwd = integrate_svf(&v, 7).unwrap();
        let bwd = integrate_svf(&neg, 7).unwrap();
        let round = compose(&fwd, &bwd).unwrap();
        assert!(
            round.max_magnitude() <= 0.05,
            "inverse-consistency residual {}",
            round.max_magnitude()
        );
    }

    #[test]
    fn svf_fields_never_fold() {
        for seed in 0..3u64 {
            let v = smooth_velocity([12, 12, 12], 3.0, 2.5, 100 + seed);
            let u = integrate_svf(&v, 7).unwrap();
            let jd = jacobian_determinant(&u).unwrap();
            let min = jd.data.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "folded SVF warp (seed {seed}, min JD {min})");
        }
    }

    #[test]
    fn jacobian_of_identity_and_translation_is_one() {
        let geom = GridGeometry::axis_aligned([5, 5, 5], [1.0; 3]);
        let zero = DisplacementField::zeros(geom.clone());
        let jd = jacobian_determinant(&zero).unwrap();
        assert!(jd.data.iter().all(|&d| d == 1.0));

        let mut trans = DisplacementField::zeros(geom);
        for v in &mut trans.vectors {
            *v = [4.0, -1.0, 0.5];
        }
        let jd = jacobian_determinant(&trans).unwrap();
        assert!(jd.data.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn jacobian_of_uniform_scale_field() {
        let geom = GridGeometry::axis_aligned([7, 7, 7], [1.0; 3]);
        let mut field = DisplacementField::zeros(geom);
        let c = 3.0;
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..7 {
                    let idx = field.geometry.index(x, y, z);
                    field.vectors[idx] = [
                        0.1 * (x as f64 - c),
                        0.1 * (y as f64 - c),
                        0.1 * (z as f64 - c),
                    ];
                }
            }
        }
        let jd = jacobian_determinant(&field).unwrap();
        let expect = 1.1f64.powi(3);
        for &d in &jd.data {
            assert!((d - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_requires_three_voxels_per_axis() {
        let geom = GridGeometry::axis_aligned([2, 5, 5], [1.0; 3]);
        let f = DisplacementField::zeros(geom);
        assert!(jacobian_determinant(&f).is_err());
    }

    #[test]
    fn resampling_preserves_extent_and_linear_ramps() {
        // A world-linear intensity ramp survives trilinear resampling
        // exactly, so interior values at the new spacing are predictable.
        let geom = GridGeometry::axis_aligned([13, 9, 9], [1.0; 3]);
        let mut image = ImageVolume::zeros(geom);
        let mut idx = 0;
        for z in 0..9 {
            for y in 0..9 {
                for x in 0..13 {
                    image.data[idx] = 2.0 * x as f64 + 0.5 * y as f64 - z as f64;
                    idx += 1;
                }
            }
        }
        let coarse = resample_to_spacing(&image, [1.5, 1.5, 1.5]).unwrap();
        assert_eq!(coarse.geometry.dims, [9, 6, 6], "12mm/4mm extents at 1.5mm");
        assert_eq!(coarse.geometry.spacing, [1.5; 3]);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..8 {
                    let world_linear =
                        2.0 * (1.5 * x as f64) + 0.5 * (1.5 * y as f64) - 1.5 * z as f64;
                    let got = coarse.data[coarse.geometry.index(x, y, z)];
                    assert!(
                        (got - world_linear).abs() < 1e-9,
                        "({x},{y},{z}): {got} vs {world_linear}"
                    );
                }
            }
        }
        // Matching spacing is a no-op copy.
        let same = resample_to_spacing(&image, [1.0; 3]).unwrap();
        assert_eq!(same.data, image.data);
        assert!(resample_to_spacing(&image, [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn label_resampling_keeps_labels_nearest() {
        let geom = GridGeometry::axis_aligned([8, 8, 8], [1.0; 3]);
        let mut data = vec![0u32; 512];
        for (i, v) in data.iter_mut().enumerate() {
            // Two half-space labels split along x.
            *v = if i % 8 < 4 { 1 } else { 2 };
        }
        let labels = LabelVolume::new(geom, data).unwrap();
        let coarse = resample_labels_to_spacing(&labels, [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(coarse.geometry.dims, [5, 5, 5], "7mm extent at 2mm rounds to 4+1");
        // Every output label must be one of the inputs (nearest, no blends).
        assert!(coarse.data.iter().all(|&l| l == 1 || l == 2));
        assert_eq!(coarse.data[coarse.geometry.index(0, 0, 0)], 1);
        assert_eq!(coarse.data[coarse.geometry.index(4, 0, 0)], 2);
    }
}
