//! Synthetic ground-truth generator: nested-ellipsoid label/intensity
//! phantoms with surface landmarks, random smooth deformations with known
//! inverses, and simulated region growth between "timepoints".
//!
//! Ellipsoidal shells are used instead of template anatomy because every
//! oracle is then analytic: shell volumes, surface points, and the exact
//! radial map a growth factor induces. All deformations are built in
//! stationary-velocity space so the ground-truth inverse is the integral of
//! the negated velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::transforms::{
    integrate_svf, warp_image, warp_labels, DisplacementField, VelocityField,
};
use crate::volume::{gaussian_smooth_raw, GridGeometry, ImageVolume, LabelVolume};

/// Intensity assigned to the outermost shell's innermost sibling scale: the
/// brightest region mean. Shell m of K gets mean `m/K` of this value;
/// background stays at zero, so the full dynamic range is [0, 100].
const INTENSITY_RANGE: f64 = 100.0;

/// Number of surface landmarks every phantom carries.
const LANDMARK_COUNT: usize = 20;

/// Parameters of a synthetic phantom.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Number of nested shells (labels 1..=region_count); label 0 is
    /// background.
    pub region_count: usize,
    /// Noise standard deviation as a fraction of the intensity range.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { dims: [64; 3], region_count: 6, noise_sigma: 0.02, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.region_count < 2 {
            return Err(Error::InvalidInput(format!(
                "phantom needs at least 2 regions, got {}",
                self.region_count
            )));
        }
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidInput(format!(
                "phantom dims must be at least 16 per axis, got {:?}",
                self.dims
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "noise_sigma must be non-negative and finite, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// A labeled point on a shell surface, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: usize,
    pub position: Vec3,
}

/// The analytic shell model behind a phantom: concentric ellipsoids at
/// decreasing fractions of a base ellipsoid. Shell m occupies normalized
/// radii (fraction[m], fraction[m−1]]; the innermost shell is solid.
#[derive(Debug, Clone)]
struct EllipsoidModel {
    center: Vec3,
    semi_axes: Vec3,
    /// fractions[m−1] is the outer surface of shell m; strictly decreasing.
    fractions: Vec<f64>,
}

impl EllipsoidModel {
    fn new(dims: [usize; 3], region_count: usize) -> Self {
        let extent = [
            (dims[0] - 1) as f64,
            (dims[1] - 1) as f64,
            (dims[2] - 1) as f64,
        ];
        let center = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];
        // Unequal axes so nothing accidentally relies on spherical symmetry;
        // the largest axis leaves a background margin inside the grid.
        let semi_axes = [0.44 * extent[0], 0.37 * extent[1], 0.31 * extent[2]];
        let k = region_count;
        let fractions: Vec<f64> = (1..=k)
            .map(|m| 0.25 + 0.75 * (k - m) as f64 / (k - 1) as f64)
            .collect();
        Self { center, semi_axes, fractions }
    }

    /// Normalized ellipsoid radius: 1.0 on the outermost surface.
    fn rho(&self, p: Vec3) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.semi_axes[a];
            s += t * t;
        }
        s.sqrt()
    }

    /// Innermost shell containing the point, or 0 for background.
    fn label_at(&self, p: Vec3) -> u32 {
        let rho = self.rho(p);
        let mut label = 0u32;
        for (i, &f) in self.fractions.iter().enumerate() {
            if rho <= f {
                label = (i + 1) as u32;
            }
        }
        label
    }

    /// Analytic voxel volume of shell m (1-based).
    #[cfg(test)]
    fn shell_volume(&self, m: usize) -> f64 {
        let outer = self.fractions[m - 1];
        let inner = if m < self.fractions.len() { self.fractions[m] } else { 0.0 };
        let base = 4.0 / 3.0
            * std::f64::consts::PI
            * self.semi_axes[0]
            * self.semi_axes[1]
            * self.semi_axes[2];
        base * (outer.powi(3) - inner.powi(3))
    }
}

/// A generated phantom: noisy image, labels, landmarks, and the noise-free
/// intensity volume growth simulation re-noises from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: ImageVolume,
    /// The image before noise; region means only.
    pub clean_image: ImageVolume,
    pub labels: LabelVolume,
    pub landmarks: Vec<Landmark>,
    pub spec: PhantomSpec,
    model: EllipsoidModel,
}

/// Builds a nested-ellipsoid phantom: labels from the analytic shell model,
/// intensities at evenly spaced region means plus Gaussian noise, and 20
/// landmarks on shell surfaces. Deterministic per seed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = GridGeometry::axis_aligned(spec.dims, [1.0; 3]);
    let model = EllipsoidModel::new(spec.dims, spec.region_count);
    let k = spec.region_count as f64;
    let count = geometry.voxel_count();

    let mut labels = vec![0u32; count];
    let mut clean = vec![0.0f64; count];
    let mut idx = 0;
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let label = model.label_at([x as f64, y as f64, z as f64]);
                labels[idx] = label;
                clean[idx] = INTENSITY_RANGE * label as f64 / k;
                idx += 1;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = clean.clone();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma * INTENSITY_RANGE)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }

    let mut landmarks = Vec::with_capacity(LANDMARK_COUNT);
    for id in 0..LANDMARK_COUNT {
        let shell = id % spec.region_count;
        let f = model.fractions[shell];
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let position = [
            model.center[0] + f * model.semi_axes[0] * dir[0],
            model.center[1] + f * model.semi_axes[1] * dir[1],
            model.center[2] + f * model.semi_axes[2] * dir[2],
        ];
        landmarks.push(Landmark { id, position });
    }

    Ok(Phantom {
        image: ImageVolume::new(geometry.clone(), data)?,
        clean_image: ImageVolume::new(geometry.clone(), clean)?,
        labels: LabelVolume::new(geometry, labels)?,
        landmarks,
        spec: spec.clone(),
        model,
    })
}

/// Random folding-free deformation: white-noise vectors smoothed with a
/// Gaussian, rescaled so the largest velocity magnitude equals `max_disp`,
/// then exponentiated by scaling and squaring. Deterministic per seed.
pub fn generate_smooth_deformation(
    geometry: &GridGeometry,
    max_disp: f64,
    smoothness_sigma: f64,
    seed: u64,
) -> Result<DisplacementField> {
    Ok(smooth_velocity_pair(geometry, max_disp, smoothness_sigma, seed)?.0)
}

/// Same construction as [`generate_smooth_deformation`] but also returns
/// the integral of the negated velocity — the ground-truth inverse.
pub fn generate_smooth_deformation_with_inverse(
    geometry: &GridGeometry,
    max_disp: f64,
    smoothness_sigma: f64,
    seed: u64,
) -> Result<(DisplacementField, DisplacementField)> {
    smooth_velocity_pair(geometry, max_disp, smoothness_sigma, seed)
}

fn smooth_velocity_pair(
    geometry: &GridGeometry,
    max_disp: f64,
    smoothness_sigma: f64,
    seed: u64,
) -> Result<(DisplacementField, DisplacementField)> {
    if !(max_disp >= 0.0) || !max_disp.is_finite() {
        return Err(Error::InvalidInput(format!(
            "max displacement must be non-negative, got {max_disp}"
        )));
    }
    let mut velocity = VelocityField::zeros(geometry.clone());
    if max_disp > 0.0 {
        let dims = geometry.dims;
        let n = geometry.voxel_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut comps: Vec<Vec<f64>> = Vec::new();
        for _ in 0..3 {
            let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            comps.push(gaussian_smooth_raw(&raw, dims, [smoothness_sigma; 3]));
        }
        let mut peak = 0.0f64;
        for i in 0..n {
            let v = [comps[0][i], comps[1][i], comps[2][i]];
            peak = peak.max(math::norm(v));
            velocity.vectors[i] = v;
        }
        let scale = max_disp / peak;
        for v in &mut velocity.vectors {
            *v = math::scale(*v, scale);
        }
    }
    let forward = integrate_svf(&velocity, 7)?;
    for v in &mut velocity.vectors {
        *v = math::scale(*v, -1.0);
    }
    let inverse = integrate_svf(&velocity, 7)?;
    Ok((forward, inverse))
}

/// One simulated later timepoint: the warped pair plus the ground-truth
/// pull-back field (warping the original with `field` reproduces `image`)
/// and its inverse.
#[derive(Debug, Clone)]
pub struct GrowthResult {
    pub image: ImageVolume,
    pub labels: LabelVolume,
    pub field: DisplacementField,
    pub inverse_field: DisplacementField,
}

/// Expands everything inside the chosen region's outer surface by `scale`,
/// feathered to zero over a shell-radius margin so the map is smooth and
/// the region itself scales exactly. The expansion is the exponential of
/// the radial velocity −ln(scale)·(p − c) masked by the feather, so the
/// grown region's volume is scale³ times the original and the inverse is
/// the exponential of the negated velocity. Fresh per-seed noise replaces
/// the original image noise in the warped volume.
pub fn simulate_growth(
    phantom: &Phantom,
    region: u32,
    scale: f64,
    seed: u64,
) -> Result<GrowthResult> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidInput(format!("growth scale must be positive, got {scale}")));
    }
    if region == 0 || region as usize > phantom.spec.region_count {
        return Err(Error::InvalidInput(format!(
            "region {region} does not exist; phantom has labels 1..={}",
            phantom.spec.region_count
        )));
    }
    let model = &phantom.model;
    let geometry = phantom.image.geometry.clone();
    let dims = geometry.dims;
    let f_region = model.fractions[region as usize - 1];
    // Uniform scaling out to just past the region surface, feathered to
    // zero by +0.35 normalized radii.
    let rho_one = f_region + 0.05;
    let rho_zero = f_region + 0.35;
    let ln_scale = scale.ln();

    let mut velocity = VelocityField::zeros(geometry.clone());
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let rho = model.rho(p);
                let w = if rho <= rho_one {
                    1.0
                } else if rho >= rho_zero {
                    0.0
                } else {
                    let t = (rho - rho_one) / (rho_zero - rho_one);
                    1.0 - t * t * (3.0 - 2.0 * t)
                };
                velocity.vectors[idx] =
                    math::scale(math::sub(p, model.center), -ln_scale * w);
                idx += 1;
            }
        }
    }
    let field = integrate_svf(&velocity, 7)?;
    for v in &mut velocity.vectors {
        *v = math::scale(*v, -1.0);
    }
    let inverse_field = integrate_svf(&velocity, 7)?;

    let image = add_acquisition_noise(
        &warp_image(&phantom.clean_image, &field)?,
        phantom.spec.noise_sigma * INTENSITY_RANGE,
        seed,
    )?;
    let labels = warp_labels(&phantom.labels, &field)?;
    Ok(GrowthResult { image, labels, field, inverse_field })
}

/// Region table scoring a phantom's shells one region per label: the
/// outermost shell as CSF, the innermost as WM, everything between as GM
/// (mirroring the rough CSF-rind / cortex / deep-tissue layering of a
/// head scan).
pub fn shell_region_table(region_count: usize) -> crate::evaluation::RegionTable {
    use crate::evaluation::{RegionEntry, RegionTable, Tissue};
    let entries = (1..=region_count as u32)
        .map(|label| RegionEntry {
            label_ids: vec![label],
            region_name: format!("shell {label}"),
            tissue: if label == 1 {
                Tissue::CSF
            } else if label == region_count as u32 {
                Tissue::WM
            } else {
                Tissue::GM
            },
        })
        .collect();
    RegionTable { entries }
}

/// A synthetic later acquisition of the same anatomy: the phantom's
/// noise-free image and labels warped with `field`, the image re-noised
/// from `seed` at the phantom's own noise level.
pub fn deformed_timepoint(
    phantom: &Phantom,
    field: &DisplacementField,
    seed: u64,
) -> Result<(ImageVolume, LabelVolume)> {
    let image = add_acquisition_noise(
        &warp_image(&phantom.clean_image, field)?,
        phantom.spec.noise_sigma * INTENSITY_RANGE,
        seed,
    )?;
    let labels = warp_labels(&phantom.labels, field)?;
    Ok((image, labels))
}

/// Copy of `image` with zero-mean Gaussian acquisition noise of standard
/// deviation `sigma` added, drawn reproducibly from `seed`. Synthetic pairs
/// should noise each side independently: resampling an already-noisy image
/// smooths its noise, and that smoothing pattern — not the anatomy — is
/// what a registration would then lock onto.
pub fn add_acquisition_noise(image: &ImageVolume, sigma: f64, seed: u64) -> Result<ImageVolume> {
    let mut out = image.clone();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut out.data {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(out)
}
