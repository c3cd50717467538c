//! Linear (rigid/affine) initialization and the deformable registration
//! engine, chained into the three initialization presets.
//!
//! The linear stage is a coarse-to-fine local search: at each pyramid level
//! it ascends a central finite-difference gradient of the image metric over
//! the 6 or 12 transform parameters, normalizing parameter sensitivities so
//! one unit of search step moves points about one millimeter regardless of
//! whether the parameter is an angle, a matrix entry, or a translation. The
//! step halves whenever a move fails to improve the metric, and a level
//! stops when the best value seen improves by less than the configured
//! threshold across a trailing window.
//!
//! The deformable stage minimizes the composite loss (negative LNCC plus a
//! weighted displacement-gradient penalty) by Adam, optimizing either the
//! displacement field directly or a stationary velocity field that is
//! exponentiated by scaling and squaring before every evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::objectives::{
    composite_loss_and_gradient, mse, mutual_information, LossConfig, LossParts,
};
use crate::transforms::{
    compose, integrate_svf, linear_to_displacement, warp_image, AffineMatrix, DisplacementField,
    RigidParams, VelocityField,
};
use crate::volume::{GridGeometry, ImageVolume};

/// Transform family of one linear stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Rigid,
    Affine,
}

/// Image metric the linear search maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearMetric {
    Mi,
    Mse,
}

/// Configuration of one linear registration stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearStageConfig {
    pub kind: LinearKind,
    /// Search step in scaled parameter units (≈ millimeters of motion).
    pub step: f64,
    pub iterations_per_level: Vec<usize>,
    pub shrink_factors: Vec<usize>,
    /// Pre-decimation smoothing per level, in voxels.
    pub smoothing_sigmas: Vec<f64>,
    pub convergence_threshold: f64,
    pub convergence_window: usize,
    pub metric: LinearMetric,
    pub bins: usize,
}

impl Default for LinearStageConfig {
    fn default() -> Self {
        Self {
            kind: LinearKind::Rigid,
            step: 0.1,
            iterations_per_level: vec![500, 250, 100],
            shrink_factors: vec![4, 2, 1],
            smoothing_sigmas: vec![2.0, 1.0, 0.0],
            convergence_threshold: 1e-6,
            convergence_window: 10,
            metric: LinearMetric::Mi,
            bins: 32,
        }
    }
}

impl LinearStageConfig {
    pub fn affine_default() -> Self {
        Self { kind: LinearKind::Affine, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.iterations_per_level.len();
        if levels == 0
            || self.shrink_factors.len() != levels
            || self.smoothing_sigmas.len() != levels
        {
            return Err(Error::InvalidInput(
                "iterations_per_level, shrink_factors, and smoothing_sigmas must share one non-zero length"
                    .into(),
            ));
        }
        if self.shrink_factors.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput("shrink factors must be non-increasing".into()));
        }
        if self.shrink_factors.iter().any(|&s| s == 0) {
            return Err(Error::InvalidInput("shrink factors must be at least 1".into()));
        }
        if self.convergence_window < 2 {
            return Err(Error::InvalidInput("convergence window must be at least 2".into()));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidInput(format!("step must be positive, got {}", self.step)));
        }
        if self.bins < 2 {
            return Err(Error::InvalidInput(format!("metric bins must be >= 2, got {}", self.bins)));
        }
        Ok(())
    }
}

/// Field parameterization of the deformable stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Displacement,
    Svf,
}

/// Configuration of the deformable stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformableConfig {
    pub loss: LossConfig,
    /// Adam step size in voxels per iteration.
    pub learning_rate: f64,
    pub iterations: usize,
    pub parameterization: Parameterization,
    pub squaring_steps: u32,
    pub seed: u64,
}

impl Default for DeformableConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 0.1,
            iterations: 500,
            parameterization: Parameterization::Svf,
            squaring_steps: 7,
            seed: 0,
        }
    }
}

impl DeformableConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidInput("deformable stage needs at least 1 iteration".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Output of a registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Total transform: initialization composed with the deformable part.
    pub field: DisplacementField,
    /// The deformable stage's own field, before composition with the
    /// initialization (useful for judging how much work it did).
    pub deformable_field: DisplacementField,
    /// Linear initialization, when one ran.
    pub linear: Option<AffineMatrix>,
    /// Per-iteration loss terms of the deformable stage.
    pub loss_trace: Vec<LossParts>,
    /// Total wall-clock seconds across all stages.
    pub wall_time: f64,
    /// Wall-clock seconds per stage, in execution order.
    pub stage_seconds: Vec<(String, f64)>,
}

/// The three initialization schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Deformable only.
    NR,
    /// Rigid, then deformable.
    RR,
    /// Rigid, then affine warm-started from the rigid result, then
    /// deformable.
    RAR,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::NR => "NR",
            Preset::RR => "RR",
            Preset::RAR => "RAR",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NR" => Ok(Preset::NR),
            "RR" => Ok(Preset::RR),
            "RAR" => Ok(Preset::RAR),
            other => Err(Error::InvalidInput(format!(
                "unknown preset {other:?}; expected NR, RR, or RAR"
            ))),
        }
    }
}

/// Stage configurations a preset draws from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PresetConfigs {
    pub rigid: LinearStageConfig,
    pub affine: LinearStageConfig,
    pub deformable: DeformableConfig,
}

impl Default for PresetConfigs {
    fn default() -> Self {
        Self {
            rigid: LinearStageConfig::default(),
            affine: LinearStageConfig::affine_default(),
            deformable: DeformableConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Linear stage
// ---------------------------------------------------------------------------

/// Parameter vector layout for one transform family, anchored at the fixed
/// volume's world center so rotation and translation stay decoupled.
struct ParamSpace {
    kind: LinearKind,
    center: Vec3,
    /// Scale applied to each parameter so a unit scaled step moves points
    /// about one millimeter: angles and matrix entries act through the
    /// physical radius, translations are already millimeters.
    scales: Vec<f64>,
}

impl ParamSpace {
    fn new(kind: LinearKind, fixed: &GridGeometry) -> Self {
        let center = fixed.world_center();
        let mut radius: f64 = 0.0;
        for a in 0..3 {
            radius = radius.max(0.5 * fixed.dims[a] as f64 * fixed.spacing[a]);
        }
        let radius = radius.max(1.0);
        let scales = match kind {
            LinearKind::Rigid => {
                let mut s = vec![1.0 / radius; 3];
                s.extend_from_slice(&[1.0; 3]);
                s
            }
            LinearKind::Affine => {
                let mut s = vec![1.0 / radius; 9];
                s.extend_from_slice(&[1.0; 3]);
                s
            }
        };
        Self { kind, center, scales }
    }

    fn identity_params(&self) -> Vec<f64> {
        match self.kind {
            LinearKind::Rigid => vec![0.0; 6],
            LinearKind::Affine => {
                let mut p = vec![0.0; 12];
                p[0] = 1.0;
                p[4] = 1.0;
                p[8] = 1.0;
                p
            }
        }
    }

    /// Expresses an existing transform in this space (affine only; a rigid
    /// stage always starts from identity).
    fn params_from_affine(&self, a: &AffineMatrix) -> Vec<f64> {
        debug_assert_eq!(self.kind, LinearKind::Affine);
        let mut p = Vec::with_capacity(12);
        for row in &a.linear {
            p.extend_from_slice(row);
        }
        let at_center = a.apply(self.center);
        p.extend_from_slice(&math::sub(at_center, self.center));
        p
    }

    fn to_affine(&self, p: &[f64]) -> AffineMatrix {
        match self.kind {
            LinearKind::Rigid => RigidParams {
                rotation: [p[0], p[1], p[2]],
                translation: [p[3], p[4], p[5]],
            }
            .to_affine(self.center),
            LinearKind::Affine => {
                let linear = [[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]];
                let t = [p[9], p[10], p[11]];
                // T(x) = C + L(x − C) + t
                let lc = math::mat_vec(&linear, self.center);
                AffineMatrix {
                    linear,
                    translation: math::add(math::sub(self.center, lc), t),
                }
            }
        }
    }
}

/// Voxel→voxel form of the world transform `t` between two grids: target
/// voxel v maps to moving voxel `linear·v + offset`.
fn voxel_composite(
    target: &GridGeometry,
    moving: &GridGeometry,
    t: &AffineMatrix,
) -> Result<(math::Mat3, Vec3)> {
    let wf = target.world_matrix();
    let wmi = moving.world_matrix_inv()?;
    let linear = math::mat_mul(&wmi, &math::mat_mul(&t.linear, &wf));
    let moved_origin = math::add(math::mat_vec(&t.linear, target.origin), t.translation);
    let offset = math::mat_vec(&wmi, math::sub(moved_origin, moving.origin));
    Ok((linear, offset))
}

/// Resamples `moving` onto `target` through the world-space transform `t`.
fn resample_through_affine(
    moving: &ImageVolume,
    target: &GridGeometry,
    t: &AffineMatrix,
) -> Result<ImageVolume> {
    let (linear, offset) = voxel_composite(target, &moving.geometry, t)?;
    let mut out = ImageVolume::zeros(target.clone());
    let dims = target.dims;
    let mut idx = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = [x as f64, y as f64, z as f64];
                let s = math::add(math::mat_vec(&linear, v), offset);
                out.data[idx] = moving.sample_trilinear(s);
                idx += 1;
            }
        }
    }
    Ok(out)
}

fn eval_linear_metric(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    t: &AffineMatrix,
    config: &LinearStageConfig,
) -> Result<f64> {
    let warped = resample_through_affine(moving, &fixed.geometry, t)?;
    match config.metric {
        LinearMetric::Mi => mutual_information(fixed, &warped, config.bins),
        LinearMetric::Mse => Ok(-mse(fixed, &warped)?),
    }
}

/// Fraction of fixed-grid voxels whose mapped position lands inside the
/// moving volume under `t`.
fn overlap_fraction(fixed: &GridGeometry, moving: &GridGeometry, t: &AffineMatrix) -> Result<f64> {
    let (linear, offset) = voxel_composite(fixed, moving, t)?;
    let dims = fixed.dims;
    let mut inside = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = [x as f64, y as f64, z as f64];
                let s = math::add(math::mat_vec(&linear, v), offset);
                if (0..3).all(|a| s[a] >= -0.5 && s[a] <= moving.dims[a] as f64 - 0.5) {
                    inside += 1;
                }
            }
        }
    }
    Ok(inside as f64 / fixed.voxel_count() as f64)
}

/// Coarse-to-fine linear registration starting from identity. Returns the
/// transform mapping fixed-volume world points to moving-volume world
/// points (the resampling map).
pub fn register_linear(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    config: &LinearStageConfig,
) -> Result<AffineMatrix> {
    register_linear_impl(fixed, moving, config, None)
}

/// Coarse-to-fine linear registration warm-started from an existing
/// transform; only affine stages accept a warm start (a rigid stage has no
/// faithful representation of a general affine).
pub fn register_linear_from(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    config: &LinearStageConfig,
    init: &AffineMatrix,
) -> Result<AffineMatrix> {
    if config.kind != LinearKind::Affine {
        return Err(Error::InvalidInput(
            "only affine stages can warm-start from a previous transform".into(),
        ));
    }
    register_linear_impl(fixed, moving, config, Some(init))
}

fn register_linear_impl(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    config: &LinearStageConfig,
    init: Option<&AffineMatrix>,
) -> Result<AffineMatrix> {
    config.validate()?;
    fixed.geometry.validate()?;
    moving.geometry.validate()?;
    let space = ParamSpace::new(config.kind, &fixed.geometry);
    let mut params = match init {
        Some(a) => space.params_from_affine(a),
        None => space.identity_params(),
    };
    let levels = config.iterations_per_level.len();
    for level in 0..levels {
        let shrink = config.shrink_factors[level];
        let sigma = config.smoothing_sigmas[level];
        let f_level = fixed.pyramid_level(shrink, sigma)?;
        let m_level = moving.pyramid_level(shrink, sigma)?;
        if level == 0 {
            let t0 = space.to_affine(&params);
            if overlap_fraction(&f_level.geometry, &m_level.geometry, &t0)? == 0.0 {
                return Err(Error::RegistrationFailed(
                    "volumes do not overlap at the coarsest pyramid level".into(),
                ));
            }
        }
        optimize_level(
            &f_level,
            &m_level,
            &space,
            &mut params,
            config,
            config.iterations_per_level[level],
        )?;
    }
    Ok(space.to_affine(&params))
}

/// One pyramid level of scaled central-difference ascent with step halving.
fn optimize_level(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    space: &ParamSpace,
    params: &mut Vec<f64>,
    config: &LinearStageConfig,
    iterations: usize,
) -> Result<()> {
    let np = params.len();
    let mut step = config.step;
    let mut current = eval_linear_metric(fixed, moving, &space.to_affine(params), config)?;
    let mut best = current;
    let mut best_params = params.clone();
    let mut best_history: Vec<f64> = Vec::with_capacity(iterations);
    let mut grad = vec![0.0; np];

    for _ in 0..iterations {
        for i in 0..np {
            let h = step * space.scales[i];
            let saved = params[i];
            params[i] = saved + h;
            let up = eval_linear_metric(fixed, moving, &space.to_affine(params), config)?;
            params[i] = saved - h;
            let down = eval_linear_metric(fixed, moving, &space.to_affine(params), config)?;
            params[i] = saved;
            grad[i] = (up - down) / (2.0 * step);
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > 0.0 {
            let mut candidate = params.clone();
            for i in 0..np {
                candidate[i] += step * space.scales[i] * grad[i] / norm;
            }
            let value =
                eval_linear_metric(fixed, moving, &space.to_affine(&candidate), config)?;
            if value > current {
                *params = candidate;
                current = value;
                if value > best {
                    best = value;
                    best_params = params.clone();
                }
            } else {
                step *= 0.5;
            }
        } else {
            step *= 0.5;
        }
        best_history.push(best);
        let n = best_history.len();
        if n > config.convergence_window
            && best_history[n - 1] - best_history[n - 1 - config.convergence_window]
                < config.convergence_threshold
        {
            break;
        }
    }
    *params = best_params;
    Ok(())
}

// ---------------------------------------------------------------------------
// Deformable stage
// ---------------------------------------------------------------------------

/// Optimizes a dense field minimizing the composite loss with Adam
/// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8). With an initialization, the moving
/// image is first resampled through it and the returned total field is the
/// initialization's field composed with the optimized deformable field.
pub fn register_deformable(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    init: Option<&AffineMatrix>,
    config: &DeformableConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    let start = Instant::now();
    let (moving_eff, init_field) = match init {
        Some(a) => {
            let field = linear_to_displacement(a, &fixed.geometry)?;
            (warp_image(moving, &field)?, Some(field))
        }
        None => (moving.clone(), None),
    };

    let count = fixed.geometry.voxel_count();
    let mut param = DisplacementField::zeros(fixed.geometry.clone());
    let mut m1 = vec![[0.0f64; 3]; count];
    let mut m2 = vec![[0.0f64; 3]; count];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut trace = Vec::with_capacity(config.iterations);

    for t in 1..=config.iterations {
        let u_eval = realize_field(&param, config)?;
        let (parts, grad) =
            composite_loss_and_gradient(fixed, &moving_eff, &u_eval, &config.loss)?;
        if !parts.loss.is_finite() {
            return Err(Error::Diverged { iteration: t - 1 });
        }
        trace.push(parts);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for v in 0..count {
            for c in 0..3 {
                let g = grad.vectors[v][c];
                m1[v][c] = b1 * m1[v][c] + (1.0 - b1) * g;
                m2[v][c] = b2 * m2[v][c] + (1.0 - b2) * g * g;
                let mh = m1[v][c] / bc1;
                let vh = m2[v][c] / bc2;
                param.vectors[v][c] -= config.learning_rate * mh / (vh.sqrt() + eps);
            }
        }
    }

    let deformable_field = realize_field(&param, config)?;
    let field = match &init_field {
        Some(fi) => compose(fi, &deformable_field)?,
        None => deformable_field.clone(),
    };
    let wall = start.elapsed().as_secs_f64();
    Ok(RegistrationResult {
        field,
        deformable_field,
        linear: init.cloned(),
        loss_trace: trace,
        wall_time: wall,
        stage_seconds: vec![("deformable".into(), wall)],
    })
}

/// The displacement a parameter field currently represents: itself, or its
/// exponential under the svf parameterization.
fn realize_field(param: &DisplacementField, config: &DeformableConfig) -> Result<DisplacementField> {
    match config.parameterization {
        Parameterization::Displacement => Ok(param.clone()),
        Parameterization::Svf => {
            let velocity = VelocityField {
                geometry: param.geometry.clone(),
                vectors: param.vectors.clone(),
            };
            integrate_svf(&velocity, config.squaring_steps)
        }
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Runs one initialization schedule end to end and reports per-stage times.
pub fn run_preset(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    preset: Preset,
    configs: &PresetConfigs,
) -> Result<RegistrationResult> {
    if configs.rigid.kind != LinearKind::Rigid {
        return Err(Error::InvalidInput("preset rigid stage must have kind = rigid".into()));
    }
    if configs.affine.kind != LinearKind::Affine {
        return Err(Error::InvalidInput("preset affine stage must have kind = affine".into()));
    }
    let mut stages: Vec<(String, f64)> = Vec::new();
    let init = match preset {
        Preset::NR => None,
        Preset::RR => {
            let t = Instant::now();
            let rigid = register_linear(fixed, moving, &configs.rigid)?;
            stages.push(("rigid".into(), t.elapsed().as_secs_f64()));
            Some(rigid)
        }
        Preset::RAR => {
            let t = Instant::now();
            let rigid = register_linear(fixed, moving, &configs.rigid)?;
            stages.push(("rigid".into(), t.elapsed().as_secs_f64()));
            let t = Instant::now();
            let affine = register_linear_from(fixed, moving, &configs.affine, &rigid)?;
            stages.push(("affine".into(), t.elapsed().as_secs_f64()));
            Some(affine)
        }
    };
    let mut result = register_deformable(fixed, moving, init.as_ref(), &configs.deformable)?;
    let linear_time: f64 = stages.iter().map(|(_, s)| s).sum();
    stages.extend(result.stage_seconds.drain(..));
    result.stage_seconds = stages;
    result.wall_time += linear_time;
    Ok(result)
}
