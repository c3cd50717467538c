//! Similarity metrics, the smoothness penalty, and the composite
//! registration loss with its analytic gradient.
//!
//! The similarity term is squared local normalized cross-correlation
//! (LNCC) over a cubic box window: per voxel, cov²(F, M) divided by
//! var(F)·var(M) + ε, averaged over the volume. Local moments come from
//! separable clamped moving sums, so one evaluation is O(N) in the voxel
//! count regardless of window size. The composite loss is
//! −LNCC(f, m∘φ) + λ·‖∇u‖² with φ = Id + u; its gradient is assembled
//! analytically by chaining the moment-level LNCC derivatives through the
//! trilinear sampler's spatial derivative and adding the divergence-form
//! adjoint of the penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::transforms::{warp_image, DisplacementField};
use crate::volume::{apply_voxel_map, grid_to_grid, ImageVolume};

/// Tolerance for "same grid" checks between metric operands.
const GEOMETRY_TOL: f64 = 1e-9;

/// Parameters of the composite registration loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Edge length of the cubic LNCC window, in voxels. Must be odd and ≥ 3.
    pub lncc_window: usize,
    /// Weight of the displacement-gradient penalty.
    pub lambda: f64,
    /// Floor added to the product of local variances so flat regions score
    /// zero instead of dividing by zero.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lncc_window: 9, lambda: 1.0, epsilon: 1e-5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lncc_window < 3 || self.lncc_window % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "lncc_window must be odd and >= 3, got {}",
                self.lncc_window
            )));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "epsilon must be a positive finite number, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda must be a non-negative finite number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// The composite loss value together with its two terms, as recorded in
/// optimizer traces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// −similarity + λ·regularizer; lower is better.
    pub loss: f64,
    /// LNCC of the fixed image against the warped moving image.
    pub similarity: f64,
    /// Displacement-gradient penalty of the field.
    pub regularizer: f64,
}

fn require_same_grid(a: &ImageVolume, b: &ImageVolume, what: &str) -> Result<()> {
    if !a.geometry.approx_eq(&b.geometry, GEOMETRY_TOL) {
        return Err(Error::Shape(format!("{what} requires both volumes on the same grid")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Box-window moving sums and their adjoint
// ---------------------------------------------------------------------------

/// Sliding cubic-window sum with replicated borders, applied separably along
/// all three axes. Every output voxel is the sum of (2·radius+1)³ samples,
/// with out-of-range samples replaced by the nearest in-range voxel.
fn box_sum(data: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for axis in 0..3 {
        box_pass(&mut out, dims, axis, radius, false);
    }
    out
}

/// Adjoint of `box_sum` under the standard inner product: scatters each
/// window value back onto the voxels that fed it (border voxels receive the
/// replicated multiplicity). Used to push window-level derivatives of the
/// similarity back to image space.
fn box_sum_adjoint(data: &[f64], dims: [usize; 3], radius: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for axis in 0..3 {
        box_pass(&mut out, dims, axis, radius, true);
    }
    out
}

fn box_pass(data: &mut [f64], dims: [usize; 3], axis: usize, radius: usize, adjoint: bool) {
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let (ou, ov) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let axis_stride = |a: usize| match a {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let (nu, nv) = (dims[ou], dims[ov]);
    let (su, sv) = (axis_stride(ou), axis_stride(ov));
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for v in 0..nv {
        for u in 0..nu {
            let base = u * su + v * sv;
            for i in 0..n {
                line[i] = data[base + i * stride];
            }
            if adjoint {
                adjoint_line(&line, &mut out, radius);
            } else {
                forward_line(&line, &mut out, radius);
            }
            for i in 0..n {
                data[base + i * stride] = out[i];
            }
        }
    }
}

/// Clamped moving sum over one line: dst[i] = Σ_{j=i−r..i+r} src[clamp(j)].
fn forward_line(src: &[f64], dst: &mut [f64], radius: usize) {
    let n = src.len() as isize;
    let r = radius as isize;
    let at = |j: isize| src[j.clamp(0, n - 1) as usize];
    let mut s = 0.0;
    for j in -r..=r {
        s += at(j);
    }
    dst[0] = s;
    for i in 1..n {
        s += at(i + r) - at(i - 1 - r);
        dst[i as usize] = s;
    }
}

/// Adjoint of `forward_line`: a zero-padded clipped moving sum, plus border
/// folds accounting for the extra multiplicity replication gives the first
/// and last voxels.
fn adjoint_line(src: &[f64], dst: &mut [f64], radius: usize) {
    let n = src.len() as isize;
    let r = radius as isize;
    let mut prefix = vec![0.0; n as usize + 1];
    for i in 0..n as usize {
        prefix[i + 1] = prefix[i] + src[i];
    }
    let range_sum = |a: isize, b: isize| {
        let a = a.max(0) as usize;
        let b = ((b + 1).min(n)).max(0) as usize;
        if a >= b {
            0.0
        } else {
            prefix[b] - prefix[a]
        }
    };
    for x in 0..n {
        dst[x as usize] = range_sum(x - r, x + r);
    }
    for i in 0..=r.min(n - 1) {
        dst[0] += (r - i) as f64 * src[i as usize];
    }
    for i in (n - 1 - r).max(0)..n {
        dst[(n - 1) as usize] += (i - (n - 1) + r) as f64 * src[i as usize];
    }
}

// ---------------------------------------------------------------------------
// LNCC
// ---------------------------------------------------------------------------

/// Squared local normalized cross-correlation: the mean over voxels of
/// cov²(f, m) / (var(f)·var(m) + epsilon) with box-window local moments.
/// Symmetric in its arguments, invariant to affine intensity maps, and 0 for
/// flat volumes by the variance-floor convention.
pub fn lncc(f: &ImageVolume, m: &ImageVolume, window: usize, epsilon: f64) -> Result<f64> {
    require_same_grid(f, m, "lncc")?;
    let config = LossConfig { lncc_window: window, epsilon, lambda: 0.0 };
    config.validate()?;
    let (score, _) = lncc_score(&f.data, &m.data, f.geometry.dims, window, epsilon, false);
    Ok(score)
}

/// Computes the LNCC score and, when requested, the derivative of the score
/// with respect to every voxel of `m`.
///
/// Writing S = (1/N) Σ_v c_v²/d_v with c the local covariance and
/// d = var_f·var_m + ε, the chain rule through the window sums
/// (s_m, s_mm, s_fm) gives per-voxel factors that the adjoint window sum
/// scatters back to image space:
///   ∂S/∂m = (1/N)·[ Bᵀ(g_m) + 2·m ⊙ Bᵀ(g_mm) + f ⊙ Bᵀ(g_fm) ]
/// where Bᵀ is `box_sum_adjoint` and the g-fields are the derivatives of
/// c²/d with respect to the three m-dependent window sums.
fn lncc_score(
    f: &[f64],
    m: &[f64],
    dims: [usize; 3],
    window: usize,
    epsilon: f64,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let radius = (window - 1) / 2;
    let count = f.len();
    let n = (window * window * window) as f64;

    let ff: Vec<f64> = f.iter().map(|a| a * a).collect();
    let mm: Vec<f64> = m.iter().map(|a| a * a).collect();
    let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
    let sf = box_sum(f, dims, radius);
    let sm = box_sum(m, dims, radius);
    let sff = box_sum(&ff, dims, radius);
    let smm = box_sum(&mm, dims, radius);
    let sfm = box_sum(&fm, dims, radius);

    let mut g_m = if want_grad { vec![0.0; count] } else { Vec::new() };
    let mut g_mm = if want_grad { vec![0.0; count] } else { Vec::new() };
    let mut g_fm = if want_grad { vec![0.0; count] } else { Vec::new() };

    let mut total = 0.0;
    for v in 0..count {
        let mu_f = sf[v] / n;
        let mu_m = sm[v] / n;
        let var_f = sff[v] / n - mu_f * mu_f;
        let var_m = smm[v] / n - mu_m * mu_m;
        let c = sfm[v] / n - mu_f * mu_m;
        let d = var_f * var_m + epsilon;
        total += c * c / d;
        if want_grad {
            g_fm[v] = 2.0 * c / d / n;
            g_m[v] = (-2.0 * c * mu_f / d + 2.0 * c * c * var_f * mu_m / (d * d)) / n;
            g_mm[v] = -c * c * var_f / (d * d) / n;
        }
    }
    let inv_count = 1.0 / count as f64;
    let score = total * inv_count;

    if !want_grad {
        return (score, None);
    }
    let bt_m = box_sum_adjoint(&g_m, dims, radius);
    let bt_mm = box_sum_adjoint(&g_mm, dims, radius);
    let bt_fm = box_sum_adjoint(&g_fm, dims, radius);
    let grad: Vec<f64> = (0..count)
        .map(|v| inv_count * (bt_m[v] + 2.0 * m[v] * bt_mm[v] + f[v] * bt_fm[v]))
        .collect();
    (score, Some(grad))
}

// ---------------------------------------------------------------------------
// Displacement-gradient penalty
// ---------------------------------------------------------------------------

/// Smoothness penalty: for each axis, the mean squared forward difference
/// of the displacement components over the voxels that have an in-range
/// forward neighbor, summed over the three axes. Constant fields score 0;
/// axes shorter than two voxels contribute nothing.
pub fn l2_gradient_penalty(u: &DisplacementField) -> f64 {
    penalty_terms(u, None)
}

/// Computes the penalty and accumulates 2·diff/count divergence-form terms
/// into `grad` when provided.
fn penalty_terms(u: &DisplacementField, mut grad: Option<&mut [Vec3]>) -> f64 {
    let dims = u.geometry.dims;
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let mut total = 0.0;
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let mut included = [dims[0], dims[1], dims[2]];
        included[axis] -= 1;
        let count = (3 * included[0] * included[1] * included[2]) as f64;
        let step = strides[axis];
        let mut sum = 0.0;
        for z in 0..included[2] {
            for y in 0..included[1] {
                for x in 0..included[0] {
                    let idx = u.geometry.index(x, y, z);
                    let a = u.vectors[idx];
                    let b = u.vectors[idx + step];
                    for c in 0..3 {
                        let d = b[c] - a[c];
                        sum += d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            let w = 2.0 * d / count;
                            g[idx + step][c] += w;
                            g[idx][c] -= w;
                        }
                    }
                }
            }
        }
        total += sum / count;
    }
    total
}

// ---------------------------------------------------------------------------
// Composite loss
// ---------------------------------------------------------------------------

/// −lncc(f, m∘φ) + λ·penalty(u) with φ = Id + u; lower is better.
pub fn composite_loss(
    f: &ImageVolume,
    m: &ImageVolume,
    u: &DisplacementField,
    config: &LossConfig,
) -> Result<f64> {
    Ok(composite_loss_parts(f, m, u, config)?.loss)
}

/// Composite loss with both terms reported separately (for optimizer traces).
pub fn composite_loss_parts(
    f: &ImageVolume,
    m: &ImageVolume,
    u: &DisplacementField,
    config: &LossConfig,
) -> Result<LossParts> {
    config.validate()?;
    if !u.geometry.approx_eq(&f.geometry, GEOMETRY_TOL) {
        return Err(Error::Shape(
            "composite loss requires the displacement field on the fixed grid".into(),
        ));
    }
    let warped = warp_image(m, u)?;
    let similarity = lncc(f, &warped, config.lncc_window, config.epsilon)?;
    let regularizer = l2_gradient_penalty(u);
    Ok(LossParts { loss: -similarity + config.lambda * regularizer, similarity, regularizer })
}

/// Analytic gradient of `composite_loss` with respect to every displacement
/// component.
pub fn composite_loss_gradient(
    f: &ImageVolume,
    m: &ImageVolume,
    u: &DisplacementField,
    config: &LossConfig,
) -> Result<DisplacementField> {
    Ok(composite_loss_and_gradient(f, m, u, config)?.1)
}

/// Loss terms and gradient from one shared warp, the form the optimizer
/// consumes each iteration.
///
/// The similarity chain is: LNCC derivative with respect to the warped
/// image (moment-level chain rule), times the moving image's spatial
/// gradient at the sampled position, mapped through the transpose of the
/// fixed-voxel→moving-voxel linear map. Sampler clamping zeroes the spatial
/// gradient on clamped axes, so voxels warped outside the moving volume
/// contribute no similarity force.
pub fn composite_loss_and_gradient(
    f: &ImageVolume,
    m: &ImageVolume,
    u: &DisplacementField,
    config: &LossConfig,
) -> Result<(LossParts, DisplacementField)> {
    config.validate()?;
    if !u.geometry.approx_eq(&f.geometry, GEOMETRY_TOL) {
        return Err(Error::Shape(
            "composite loss requires the displacement field on the fixed grid".into(),
        ));
    }
    let dims = f.geometry.dims;
    let count = f.geometry.voxel_count();
    let map = grid_to_grid(&u.geometry, &m.geometry)?;

    let mut warped = vec![0.0; count];
    let mut spatial = vec![[0.0; 3]; count];
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let disp = u.vectors[idx];
                let p = [x as f64 + disp[0], y as f64 + disp[1], z as f64 + disp[2]];
                let q = apply_voxel_map(&map, p);
                let (value, grad) = m.sample_trilinear_with_gradient(q);
                warped[idx] = value;
                spatial[idx] = grad;
                idx += 1;
            }
        }
    }

    let (similarity, sim_grad) =
        lncc_score(&f.data, &warped, dims, config.lncc_window, config.epsilon, true);
    let sim_grad = sim_grad.expect("gradient requested");

    let mut grad = DisplacementField::zeros(u.geometry.clone());
    let regularizer = penalty_terms(u, Some(&mut grad.vectors));
    for v in &mut grad.vectors {
        *v = math::scale(*v, config.lambda);
    }
    for v in 0..count {
        // ∂(warped value)/∂u_c = (Aᵀ·∇m)_c with A the voxel-map linear part.
        let chain = math::mat_t_vec(&map.linear, spatial[v]);
        grad.vectors[v] = math::add(grad.vectors[v], math::scale(chain, -sim_grad[v]));
    }
    let loss = -similarity + config.lambda * regularizer;
    Ok((LossParts { loss, similarity, regularizer }, grad))
}

// ---------------------------------------------------------------------------
// Auxiliary metrics
// ---------------------------------------------------------------------------

/// Mean squared intensity difference.
pub fn mse(f: &ImageVolume, m: &ImageVolume) -> Result<f64> {
    require_same_grid(f, m, "mse")?;
    let n = f.data.len() as f64;
    let sum: f64 = f.data.iter().zip(&m.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n)
}

/// Mutual information in nats from a joint histogram with linear
/// (partial-volume) bin weighting over each image's own intensity range.
/// Nonnegative, bounded by the smaller marginal entropy.
pub fn mutual_information(f: &ImageVolume, m: &ImageVolume, bins: usize) -> Result<f64> {
    require_same_grid(f, m, "mutual_information")?;
    if bins < 2 {
        return Err(Error::InvalidInput(format!("mutual_information needs bins >= 2, got {bins}")));
    }
    let (fmin, fmax) = f.intensity_range();
    let (mmin, mmax) = m.intensity_range();
    let mut joint = vec![0.0; bins * bins];
    for (&a, &b) in f.data.iter().zip(&m.data) {
        let (i, wi) = pv_weights(a, fmin, fmax, bins);
        let (j, wj) = pv_weights(b, mmin, mmax, bins);
        for (di, &wa) in wi.iter().enumerate() {
            for (dj, &wb) in wj.iter().enumerate() {
                joint[(i + di) * bins + (j + dj)] += wa * wb;
            }
        }
    }
    let total = f.data.len() as f64;
    for p in &mut joint {
        *p /= total;
    }
    let mut pf = vec![0.0; bins];
    let mut pm = vec![0.0; bins];
    for i in 0..bins {
        for j in 0..bins {
            pf[i] += joint[i * bins + j];
            pm[j] += joint[i * bins + j];
        }
    }
    let entropy = |p: &[f64]| -> f64 {
        p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
    };
    let mi = entropy(&pf) + entropy(&pm) - entropy(&joint);
    Ok(mi.max(0.0))
}

/// Splits an intensity into two adjacent-bin weights: bin index and the
/// (1−frac, frac) pair. A flat image puts all mass in bin 0.
fn pv_weights(value: f64, min: f64, max: f64, bins: usize) -> (usize, [f64; 2]) {
    if !(max > min) {
        return (0, [1.0, 0.0]);
    }
    let t = (value - min) / (max - min) * (bins - 1) as f64;
    let i = (t.floor() as usize).min(bins - 2);
    let frac = t - i as f64;
    (i, [1.0 - frac, frac])
}
