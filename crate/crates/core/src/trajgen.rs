//! Variable-density spiral, uniform spiral and tiny-golden-angle radial
//! trajectories.
//!
//! Coordinates are normalized k-space positions in cycles per pixel, so the
//! sampled disk has radius 0.5 and one Nyquist step is `1 / matrix`.
//!
//! A spiral interleave follows `dr/dθ = U(r) Δk / 2π`, where `U(r)` is the
//! per-interleave undersampling factor at fractional radius `r / 0.5`. With
//! `N` rotated interleaves the spacing between neighbouring arms is
//! `U Δk / N`, so `U / N` is the local acceleration.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorfile::Tensor;

/// Increment between successive tiny-golden-angle acquisitions, in degrees.
pub const TINY_GOLDEN_DEG: f64 = 47.3;
/// Per-interleave undersampling of the uniform-density reference spiral.
pub const UNIFORM_UNDERSAMPLING: f64 = 92.0;
/// Frame budget used throughout the search.
pub const DEFAULT_T_ACQ_MS: f64 = 55.0;
/// Gyromagnetic ratio of 1H in cycles per ms per mT.
const GAMMA_BAR: f64 = 42.577;
/// Integration steps in r for one interleave.
const ODE_STEPS: usize = 20_000;
/// Positivity guard for density weights, relative to the largest one.
const WEIGHT_FLOOR: f64 = 1e-6;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Linear,
    Hanning,
    Quadratic,
}

impl Transition {
    pub const ALL: [Transition; 3] = [Transition::Linear, Transition::Hanning, Transition::Quadratic];

    /// Transition shape on `x ∈ [0, 1]`, rising from 0 to 1.
    pub fn shape(self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match self {
            Transition::Linear => x,
            Transition::Quadratic => x * x,
            Transition::Hanning => 0.5 * (1.0 - (PI * x).cos()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterleaveOrdering {
    Linear,
    TinyGolden,
}

impl InterleaveOrdering {
    pub const ALL: [InterleaveOrdering; 2] = [InterleaveOrdering::Linear, InterleaveOrdering::TinyGolden];
}

/// One point of the spiral search space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralConfig {
    /// End of the densely sampled core, as a fraction of k_max.
    pub r_inner: f64,
    /// Per-interleave undersampling inside `r_inner`.
    pub u_inner: f64,
    /// Start of the sparse periphery, as a fraction of k_max.
    pub r_outer: f64,
    /// Outer density relative to inner density; outer undersampling is `u_inner / rho`.
    pub rho: f64,
    pub transition: Transition,
    pub ordering: InterleaveOrdering,
    pub tr_ms: f64,
    pub t_acq_ms: f64,
}

pub mod bounds {
    pub const R_INNER: (f64, f64) = (0.1, 0.3);
    pub const U_INNER: (f64, f64) = (12.0, 24.0);
    pub const RHO: (f64, f64) = (0.01, 0.35);
    pub const TR_MS: (f64, f64) = (2.88, 3.7);
    pub const T_ACQ_MAX_MS: f64 = 55.0;
}

fn check(field: &'static str, value: f64, (min, max): (f64, f64)) -> Result<()> {
    if value.is_finite() && value >= min && value <= max {
        Ok(())
    } else {
        Err(Error::OutOfBounds { field, value, min, max })
    }
}

impl SpiralConfig {
    /// The selected trajectory: inner radius 0.15, inner undersampling 16,
    /// outer radius 0.56, relative density 0.07, Hanning transition, linear
    /// ordering. TR is kept at full precision (55/15 ms) so that exactly 15
    /// interleaves fit the 55 ms frame.
    pub fn optimized() -> Self {
        SpiralConfig {
            r_inner: 0.15,
            u_inner: 16.0,
            r_outer: 0.56,
            rho: 0.07,
            transition: Transition::Hanning,
            ordering: InterleaveOrdering::Linear,
            tr_ms: DEFAULT_T_ACQ_MS / 15.0,
            t_acq_ms: DEFAULT_T_ACQ_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check("r_inner", self.r_inner, bounds::R_INNER)?;
        check("u_inner", self.u_inner, bounds::U_INNER)?;
        check("r_outer", self.r_outer, (self.r_inner, 1.0 - self.r_inner))?;
        check("rho", self.rho, bounds::RHO)?;
        check("tr_ms", self.tr_ms, bounds::TR_MS)?;
        check("t_acq_ms", self.t_acq_ms, (f64::MIN_POSITIVE, bounds::T_ACQ_MAX_MS))?;
        Ok(())
    }

    pub fn n_interleaves(&self) -> Result<usize> {
        interleave_count(self.t_acq_ms, self.tr_ms)
    }

    /// `U(r)` without range checks; `r` is clamped to `[0, 1]`.
    pub fn undersampling(&self, r: f64) -> f64 {
        let r = r.clamp(0.0, 1.0);
        if r <= self.r_inner {
            return self.u_inner;
        }
        if r >= self.r_outer {
            return self.u_inner / self.rho;
        }
        let x = (r - self.r_inner) / (self.r_outer - self.r_inner);
        let density = (1.0 - (1.0 - self.rho) * self.transition.shape(x)) / self.u_inner;
        1.0 / density
    }
}

/// Interleaves per frame: `floor(t_acq / tr)` with no tolerance.
pub fn interleave_count(t_acq_ms: f64, tr_ms: f64) -> Result<usize> {
    if !(t_acq_ms > 0.0) {
        return Err(Error::ZeroOrNegativeInput { what: "t_acq_ms", value: t_acq_ms });
    }
    if !(tr_ms > 0.0) {
        return Err(Error::ZeroOrNegativeInput { what: "tr_ms", value: tr_ms });
    }
    let n = (t_acq_ms / tr_ms).floor();
    if n < 1.0 {
        return Err(Error::ResultBelowOne { t_acq_ms, tr_ms });
    }
    Ok(n as usize)
}

/// Undersampling factor at fractional radius `r ∈ [0, 1]` of k_max.
///
/// Density `1/U` is interpolated across the transition band:
/// `d(r) = (1 - (1 - rho) T(x)) / u_inner` with
/// `x = (r - r_inner) / (r_outer - r_inner)`.
pub fn undersampling_profile(config: &SpiralConfig, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::RadiusOutOfRange(r));
    }
    Ok(config.undersampling(r))
}

/// Radial density law of a spiral interleave.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DensityDesign {
    Variable(SpiralConfig),
    Constant(f64),
}

impl DensityDesign {
    pub fn undersampling(&self, r_frac: f64) -> f64 {
        match self {
            DensityDesign::Variable(c) => c.undersampling(r_frac),
            DensityDesign::Constant(u) => *u,
        }
    }
}

/// Local acceleration `U(r) / N` at fractional radius `r_frac`.
pub fn effective_acceleration(design: &DensityDesign, r_frac: f64, n_interleaves: usize) -> f64 {
    design.undersampling(r_frac) / n_interleaves as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSystem {
    pub fov_mm: f64,
    /// Pixels per side; also the image size used for simulation.
    pub matrix: usize,
    pub dwell_us: f64,
    /// Per-TR time not available for the readout.
    pub readout_overhead_ms: f64,
    /// Gradient amplitude limit, which caps the k-space traversal speed.
    pub max_gradient_mt_per_m: f64,
}

impl Default for GradientSystem {
    fn default() -> Self {
        GradientSystem {
            fov_mm: 400.0,
            matrix: 96,
            dwell_us: 2.5,
            readout_overhead_ms: 1.0,
            max_gradient_mt_per_m: 24.0,
        }
    }
}

impl GradientSystem {
    /// Full-resolution scanner geometry (400 mm field of view, 240 matrix).
    pub fn scanner() -> Self {
        GradientSystem { matrix: 240, ..Default::default() }
    }

    /// Desk geometry at a reduced matrix with a dwell time scaled so that the
    /// readout sample count stays proportional to the matrix.
    pub fn desk(matrix: usize) -> Self {
        GradientSystem {
            matrix,
            dwell_us: 2.5 * 240.0 / matrix as f64,
            ..Default::default()
        }
    }

    /// Maximum k-space radius in cycles/mm.
    pub fn k_max(&self) -> f64 {
        self.matrix as f64 / (2.0 * self.fov_mm)
    }

    /// Nyquist step in normalized units.
    pub fn delta_k(&self) -> f64 {
        1.0 / self.matrix as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("fov_mm", self.fov_mm),
            ("matrix", self.matrix as f64),
            ("dwell_us", self.dwell_us),
            ("readout_overhead_ms", self.readout_overhead_ms),
            ("max_gradient_mt_per_m", self.max_gradient_mt_per_m),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::ZeroOrNegativeInput { what, value: v });
            }
        }
        Ok(())
    }

    /// Readout samples that fit in one TR.
    pub fn n_samples(&self, tr_ms: f64) -> Result<usize> {
        let readout = tr_ms - self.readout_overhead_ms;
        if !(readout > 0.0) {
            return Err(Error::Config(format!(
                "readout overhead {} ms leaves no readout time in TR {} ms",
                self.readout_overhead_ms, tr_ms
            )));
        }
        let n = (readout * 1000.0 / self.dwell_us).floor() as usize;
        if n < 2 {
            return Err(Error::Config(format!("readout of {readout} ms holds fewer than two samples")));
        }
        Ok(n)
    }

    /// Fastest traversal in normalized k-space units per millisecond.
    pub fn max_speed(&self) -> f64 {
        GAMMA_BAR * self.max_gradient_mt_per_m / 1000.0 * self.fov_mm / self.matrix as f64
    }
}

/// One unrotated interleave.
#[derive(Clone, Debug, PartialEq)]
pub struct Interleave {
    /// `(kx, ky)` in normalized units, starting at the origin.
    pub points: Vec<[f64; 2]>,
    pub radius: Vec<f64>,
    pub theta: Vec<f64>,
    /// Mean-normalized density compensation weights.
    pub weights: Vec<f64>,
    pub arc_length: f64,
}

/// Designs one variable-density interleave for `config` on `sys`.
pub fn generate_interleave(config: &SpiralConfig, sys: &GradientSystem) -> Result<Interleave> {
    for (field, value, range) in [
        ("u_inner", config.u_inner, bounds::U_INNER),
        ("rho", config.rho, bounds::RHO),
    ] {
        if check(field, value, range).is_err() {
            return Err(Error::DegenerateDensity(format!(
                "{field} = {value} is outside [{}, {}]",
                range.0, range.1
            )));
        }
    }
    config.validate()?;
    design_interleave(&DensityDesign::Variable(*config), sys, config.tr_ms)
}

/// Integrates `dθ/dr = 2π / (U(r) Δk)` from the centre to radius 0.5 and
/// resamples the curve at uniform arc length.
pub fn design_interleave(design: &DensityDesign, sys: &GradientSystem, tr_ms: f64) -> Result<Interleave> {
    sys.validate()?;
    let n_samples = sys.n_samples(tr_ms)?;
    let dk = sys.delta_k();
    let dtheta_dr = |r: f64| 2.0 * PI / (design.undersampling(r / 0.5) * dk);
    if let DensityDesign::Constant(u) = design {
        if !(*u > 0.0) {
            return Err(Error::DegenerateDensity(format!("constant undersampling {u}")));
        }
    }

    let h = 0.5 / ODE_STEPS as f64;
    let mut r_nodes = Vec::with_capacity(ODE_STEPS + 1);
    let mut theta_nodes = Vec::with_capacity(ODE_STEPS + 1);
    let mut s_nodes = Vec::with_capacity(ODE_STEPS + 1);
    let (mut theta, mut s) = (0.0f64, 0.0f64);
    let speed = |r: f64| {
        let g = r * dtheta_dr(r);
        (1.0 + g * g).sqrt()
    };
    r_nodes.push(0.0);
    theta_nodes.push(0.0);
    s_nodes.push(0.0);
    for i in 0..ODE_STEPS {
        let r0 = i as f64 * h;
        let r1 = if i + 1 == ODE_STEPS { 0.5 } else { (i + 1) as f64 * h };
        let rm = 0.5 * (r0 + r1);
        let step = r1 - r0;
        // The right-hand side depends on r only, so RK4 reduces to Simpson's rule.
        theta += step / 6.0 * (dtheta_dr(r0) + 4.0 * dtheta_dr(rm) + dtheta_dr(r1));
        s += step / 6.0 * (speed(r0) + 4.0 * speed(rm) + speed(r1));
        r_nodes.push(r1);
        theta_nodes.push(theta);
        s_nodes.push(s);
    }
    let arc_length = s;

    let readout_ms = tr_ms - sys.readout_overhead_ms;
    let required = arc_length / readout_ms;
    let max = sys.max_speed();
    if required > max {
        return Err(Error::InfeasibleReadout { required, max });
    }

    let mut radius = Vec::with_capacity(n_samples);
    let mut thetas = Vec::with_capacity(n_samples);
    let mut seg = 0usize;
    for i in 0..n_samples {
        let target = arc_length * i as f64 / (n_samples - 1) as f64;
        while seg + 1 < ODE_STEPS && s_nodes[seg + 1] < target {
            seg += 1;
        }
        let (sa, sb) = (s_nodes[seg], s_nodes[seg + 1]);
        let f = if sb > sa { ((target - sa) / (sb - sa)).clamp(0.0, 1.0) } else { 0.0 };
        radius.push(r_nodes[seg] + f * (r_nodes[seg + 1] - r_nodes[seg]));
        thetas.push(theta_nodes[seg] + f * (theta_nodes[seg + 1] - theta_nodes[seg]));
    }
    radius[n_samples - 1] = 0.5;
    thetas[n_samples - 1] = theta;

    let points = radius
        .iter()
        .zip(&thetas)
        .map(|(&r, &t)| [r * t.cos(), r * t.sin()])
        .collect();

    // Each of the N rotated copies crosses every annulus exactly once (radius
    // is monotone), so a sample's share of k-space is the annulus between the
    // midpoints to its neighbours. In the ring regime this equals U·r·Δθ.
    let mut weights: Vec<f64> = (0..n_samples)
        .map(|i| {
            let lo = if i == 0 { 0.0 } else { 0.5 * (radius[i - 1] + radius[i]) };
            let hi = if i + 1 == n_samples { radius[i] } else { 0.5 * (radius[i] + radius[i + 1]) };
            PI * (hi * hi - lo * lo)
        })
        .collect();
    floor_and_normalize(&mut weights);

    Ok(Interleave { points, radius, theta: thetas, weights, arc_length })
}

fn floor_and_normalize(w: &mut [f64]) {
    let max = w.iter().cloned().fold(0.0, f64::max);
    let floor = WEIGHT_FLOOR * max;
    for x in w.iter_mut() {
        *x = x.max(floor);
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for x in w.iter_mut() {
        *x /= mean;
    }
}

/// Rotation of interleave `j` in frame `frame`, degrees in `[0, 360)`.
pub fn interleave_angle_deg(ordering: InterleaveOrdering, n_interleaves: usize, frame: usize, j: usize) -> f64 {
    match ordering {
        InterleaveOrdering::Linear => j as f64 * 360.0 / n_interleaves as f64,
        InterleaveOrdering::TinyGolden => {
            let m = (frame * n_interleaves + j) as f64;
            (m * TINY_GOLDEN_DEG).rem_euclid(360.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryMeta {
    VariableDensitySpiral {
        config: SpiralConfig,
    },
    UniformSpiral {
        undersampling: f64,
        tr_ms: f64,
        t_acq_ms: f64,
        ordering: InterleaveOrdering,
    },
    Radial {
        spokes_per_frame: usize,
        angle_increment_deg: f64,
    },
}

impl TrajectoryMeta {
    pub fn ordering(&self) -> InterleaveOrdering {
        match self {
            TrajectoryMeta::VariableDensitySpiral { config } => config.ordering,
            TrajectoryMeta::UniformSpiral { ordering, .. } => *ordering,
            TrajectoryMeta::Radial { .. } => InterleaveOrdering::TinyGolden,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            TrajectoryMeta::VariableDensitySpiral { .. } => "variable_density_spiral",
            TrajectoryMeta::UniformSpiral { .. } => "uniform_spiral",
            TrajectoryMeta::Radial { .. } => "radial",
        }
    }
}

/// Per-frame sample positions and the shared density weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[frames, interleaves, samples, 2]`, last axis `(kx, ky)`.
    pub coords: Array4<f64>,
    /// `[interleaves, samples]`, identical for every frame.
    pub density_weights: Array2<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn n_interleaves(&self) -> usize {
        self.coords.shape()[1]
    }

    pub fn n_samples(&self) -> usize {
        self.coords.shape()[2]
    }

    /// All samples of one frame, interleave-major.
    pub fn frame_coords(&self, frame: usize) -> Vec<[f64; 2]> {
        let c = self.coords.index_axis(ndarray::Axis(0), frame);
        let (ni, ns) = (self.n_interleaves(), self.n_samples());
        let mut out = Vec::with_capacity(ni * ns);
        for i in 0..ni {
            for s in 0..ns {
                out.push([c[[i, s, 0]], c[[i, s, 1]]]);
            }
        }
        out
    }

    /// Density weights flattened in the same order as [`Trajectory::frame_coords`].
    pub fn flat_weights(&self) -> Vec<f64> {
        self.density_weights.iter().copied().collect()
    }

    /// Samples per frame.
    pub fn samples_per_frame(&self) -> usize {
        self.n_interleaves() * self.n_samples()
    }

    /// Writes `<stem>.json` and the `<stem>.tnsr` sidecar (coords then weights).
    pub fn save(&self, dir: &Path, stem: &str, sys: &GradientSystem) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = TrajectoryManifest {
            format_version: MANIFEST_VERSION,
            meta: self.meta.clone(),
            system: *sys,
            n_frames: self.n_frames(),
            n_interleaves: self.n_interleaves(),
            n_samples: self.n_samples(),
            ordering: self.meta.ordering(),
            tensor_file: format!("{stem}.tnsr"),
        };
        let mut w = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        w.write_all(b"\n")?;
        w.flush()?;
        let mut t = BufWriter::new(File::create(dir.join(&manifest.tensor_file))?);
        Tensor::from_f64(&self.coords).write_to(&mut t)?;
        Tensor::from_f64(&self.density_weights).write_to(&mut t)?;
        t.flush()?;
        Ok(())
    }

    /// Loads a trajectory from its manifest path.
    pub fn load(manifest_path: &Path) -> Result<(Self, TrajectoryManifest)> {
        let manifest: TrajectoryManifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported trajectory manifest version {}",
                manifest.format_version
            )));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let mut r = BufReader::new(File::open(dir.join(&manifest.tensor_file))?);
        let coords = Tensor::read_from(&mut r)?.to_f64()?;
        let weights = Tensor::read_from(&mut r)?.to_f64()?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes in trajectory sidecar".into()));
        }
        let coords = coords
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| Error::Format(format!("coords: {e}")))?;
        let density_weights = weights
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::Format(format!("weights: {e}")))?;
        let expect = [manifest.n_frames, manifest.n_interleaves, manifest.n_samples, 2];
        if coords.shape() != expect || density_weights.shape() != [manifest.n_interleaves, manifest.n_samples] {
            return Err(Error::ShapeMismatch("trajectory sidecar disagrees with manifest".into()));
        }
        Ok((Trajectory { coords, density_weights, meta: manifest.meta.clone() }, manifest))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub format_version: u32,
    pub meta: TrajectoryMeta,
    pub system: GradientSystem,
    pub n_frames: usize,
    pub n_interleaves: usize,
    pub n_samples: usize,
    pub ordering: InterleaveOrdering,
    pub tensor_file: String,
}

fn rotate_into(coords: &mut Array4<f64>, frame: usize, j: usize, base: &[[f64; 2]], angle_deg: f64) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    for (k, p) in base.iter().enumerate() {
        coords[[frame, j, k, 0]] = (p[0] * c - p[1] * s).clamp(-0.5, 0.5);
        coords[[frame, j, k, 1]] = (p[0] * s + p[1] * c).clamp(-0.5, 0.5);
    }
}

fn rotated_spiral(
    base: &Interleave,
    n_interleaves: usize,
    n_frames: usize,
    ordering: InterleaveOrdering,
    meta: TrajectoryMeta,
) -> Trajectory {
    let ns = base.points.len();
    let mut coords = Array4::zeros((n_frames, n_interleaves, ns, 2));
    for f in 0..n_frames {
        for j in 0..n_interleaves {
            let angle = interleave_angle_deg(ordering, n_interleaves, f, j);
            rotate_into(&mut coords, f, j, &base.points, angle);
        }
    }
    let density_weights = Array2::from_shape_fn((n_interleaves, ns), |(_, s)| base.weights[s]);
    Trajectory { coords, density_weights, meta }
}

/// Builds `n_frames` frames of the variable-density spiral described by `config`.
pub fn assemble_trajectory(config: &SpiralConfig, sys: &GradientSystem, n_frames: usize) -> Result<Trajectory> {
    if n_frames == 0 {
        return Err(Error::InvalidDims("n_frames must be at least 1".into()));
    }
    let base = generate_interleave(config, sys)?;
    let n = config.n_interleaves()?;
    Ok(rotated_spiral(
        &base,
        n,
        n_frames,
        config.ordering,
        TrajectoryMeta::VariableDensitySpiral { config: *config },
    ))
}

/// Uniform-density spiral with the default undersampling of 92.
pub fn uniform_spiral(
    sys: &GradientSystem,
    tr_ms: f64,
    t_acq_ms: f64,
    ordering: InterleaveOrdering,
    n_frames: usize,
) -> Result<Trajectory> {
    uniform_spiral_with(sys, UNIFORM_UNDERSAMPLING, tr_ms, t_acq_ms, ordering, n_frames)
}

pub fn uniform_spiral_with(
    sys: &GradientSystem,
    undersampling: f64,
    tr_ms: f64,
    t_acq_ms: f64,
    ordering: InterleaveOrdering,
    n_frames: usize,
) -> Result<Trajectory> {
    if n_frames == 0 {
        return Err(Error::InvalidDims("n_frames must be at least 1".into()));
    }
    let n = interleave_count(t_acq_ms, tr_ms)?;
    let base = design_interleave(&DensityDesign::Constant(undersampling), sys, tr_ms)?;
    Ok(rotated_spiral(
        &base,
        n,
        n_frames,
        ordering,
        TrajectoryMeta::UniformSpiral { undersampling, tr_ms, t_acq_ms, ordering },
    ))
}

/// Full-diameter radial spokes with tiny-golden-angle increments taken mod 180°.
///
/// Each spoke has `2 * (matrix / 2) + 1` equispaced samples on `[-0.5, 0.5]`,
/// so the centre sample lies exactly at the origin. Weights follow the ramp
/// `|k|`, floored at a quarter of the sample spacing (the share of the central
/// disk each spoke covers).
pub fn radial_trajectory(sys: &GradientSystem, spokes_per_frame: usize, n_frames: usize) -> Result<Trajectory> {
    sys.validate()?;
    if spokes_per_frame == 0 || n_frames == 0 {
        return Err(Error::InvalidDims("spokes_per_frame and n_frames must be at least 1".into()));
    }
    let ns = 2 * (sys.matrix / 2) + 1;
    let step = 1.0 / (ns - 1) as f64;
    let t: Vec<f64> = (0..ns).map(|i| -0.5 + i as f64 * step).collect();
    let mut coords = Array4::zeros((n_frames, spokes_per_frame, ns, 2));
    for f in 0..n_frames {
        for j in 0..spokes_per_frame {
            let m = (f * spokes_per_frame + j) as f64;
            let angle = (m * TINY_GOLDEN_DEG).rem_euclid(180.0).to_radians();
            let (s, c) = angle.sin_cos();
            for (k, &tk) in t.iter().enumerate() {
                coords[[f, j, k, 0]] = (tk * c).clamp(-0.5, 0.5);
                coords[[f, j, k, 1]] = (tk * s).clamp(-0.5, 0.5);
            }
        }
    }
    let mut w: Vec<f64> = t.iter().map(|tk| tk.abs().max(0.25 * step)).collect();
    let mean = w.iter().sum::<f64>() / ns as f64;
    w.iter_mut().for_each(|x| *x /= mean);
    let density_weights = Array2::from_shape_fn((spokes_per_frame, ns), |(_, k)| w[k]);
    Ok(Trajectory {
        coords,
        density_weights,
        meta: TrajectoryMeta::Radial { spokes_per_frame, angle_increment_deg: TINY_GOLDEN_DEG },
    })
}

/// Spoke count giving the same peripheral undersampling at `matrix` as
/// `reference_spokes` full spokes give at a 240 matrix.
pub fn radial_spokes_for_matrix(reference_spokes: usize, matrix: usize) -> usize {
    ((reference_spokes as f64 * matrix as f64 / 240.0).round() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn interleave_count_examples() {
        assert_eq!(interleave_count(55.0, 3.6).unwrap(), 15);
        assert_eq!(interleave_count(55.0, 2.88).unwrap(), 19);
        assert_eq!(interleave_count(55.0, 3.7).unwrap(), 14);
        assert_eq!(interleave_count(55.0, 3.67).unwrap(), 14);
        assert_eq!(interleave_count(55.0, 55.0 / 15.0).unwrap(), 15);
    }

    #[test]
    fn interleave_count_errors() {
        assert!(matches!(interleave_count(0.0, 3.0), Err(Error::ZeroOrNegativeInput { .. })));
        assert!(matches!(interleave_count(55.0, -1.0), Err(Error::ZeroOrNegativeInput { .. })));
        assert!(matches!(interleave_count(3.0, 3.5), Err(Error::ResultBelowOne { .. })));
    }

    #[test]
    fn profile_examples() {
        let c = SpiralConfig::optimized();
        assert_eq!(undersampling_profile(&c, 0.05).unwrap(), 16.0);
        assert_relative_eq!(undersampling_profile(&c, 0.9).unwrap(), 16.0 / 0.07, epsilon = 1e-12);
        let mid = undersampling_profile(&c, (0.15 + 0.56) / 2.0).unwrap();
        let halfway = 0.5 * (1.0 / 16.0 + 0.07 / 16.0);
        assert_relative_eq!(1.0 / mid, halfway, epsilon = 1e-12);
        assert!(matches!(undersampling_profile(&c, 1.2), Err(Error::RadiusOutOfRange(_))));
        assert!(matches!(undersampling_profile(&c, -0.1), Err(Error::RadiusOutOfRange(_))));
    }

    #[test]
    fn profile_with_coincident_radii_is_a_step() {
        let c = SpiralConfig { r_outer: 0.2, r_inner: 0.2, ..SpiralConfig::optimized() };
        assert_eq!(c.undersampling(0.2), 16.0);
        assert_relative_eq!(c.undersampling(0.2000001), 16.0 / 0.07);
    }

    #[test]
    fn validation_names_the_field() {
        let c = SpiralConfig { rho: 0.5, ..SpiralConfig::optimized() };
        match c.validate() {
            Err(Error::OutOfBounds { field, .. }) => assert_eq!(field, "rho"),
            other => panic!("{other:?}"),
        }
        let c = SpiralConfig { r_outer: 0.95, ..SpiralConfig::optimized() };
        assert!(matches!(c.validate(), Err(Error::OutOfBounds { field: "r_outer", .. })));
        assert!(SpiralConfig::optimized().validate().is_ok());
    }

    #[test]
    fn degenerate_density_is_reported() {
        let sys = GradientSystem::desk(64);
        let c = SpiralConfig { u_inner: 40.0, ..SpiralConfig::optimized() };
        assert!(matches!(generate_interleave(&c, &sys), Err(Error::DegenerateDensity(_))));
    }

    #[test]
    fn infeasible_readout_is_rejected() {
        let sys = GradientSystem { max_gradient_mt_per_m: 1.0, ..GradientSystem::scanner() };
        let c = SpiralConfig { u_inner: 12.0, r_inner: 0.3, r_outer: 0.7, rho: 0.35, ..SpiralConfig::optimized() };
        assert!(matches!(generate_interleave(&c, &sys), Err(Error::InfeasibleReadout { .. })));
    }

    #[test]
    fn optimized_interleave_ends_on_the_edge() {
        let sys = GradientSystem::scanner();
        let il = generate_interleave(&SpiralConfig::optimized(), &sys).unwrap();
        let last = il.points.last().unwrap();
        assert!(((last[0].powi(2) + last[1].powi(2)).sqrt() - 0.5).abs() < 1e-3);
        assert!(il.radius.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(il.points.len(), sys.n_samples(55.0 / 15.0).unwrap());
        assert_eq!(il.points[0], [0.0, 0.0]);
    }

    #[test]
    fn radius_gain_per_turn_matches_fine_euler_oracle() {
        // Independent oracle: forward Euler in θ with a tiny step.
        let sys = GradientSystem::desk(128);
        let u = 20.0;
        let il = design_interleave(&DensityDesign::Constant(u), &sys, 3.6).unwrap();
        let dk = sys.delta_k();
        let (mut r, mut th) = (0.0f64, 0.0f64);
        let dth = 1e-4;
        let mut at_turn = Vec::new();
        let mut next = 2.0 * PI;
        while r < 0.5 {
            r += u * dk / (2.0 * PI) * dth;
            th += dth;
            if th >= next {
                at_turn.push(r);
                next += 2.0 * PI;
            }
        }
        let gain_oracle = at_turn[1] - at_turn[0];
        assert!((gain_oracle - u * dk).abs() / (u * dk) < 1e-3);
        // Measured from the designed interleave: radius at θ and θ + 2π.
        let radius_at = |t: f64| {
            let i = il.theta.partition_point(|&x| x < t);
            let f = (t - il.theta[i - 1]) / (il.theta[i] - il.theta[i - 1]);
            il.radius[i - 1] + f * (il.radius[i] - il.radius[i - 1])
        };
        let gain = radius_at(4.0 * PI) - radius_at(2.0 * PI);
        assert!((gain - gain_oracle).abs() / gain_oracle < 0.02, "{gain} vs {gain_oracle}");
    }

    #[test]
    fn realized_pitch_is_bracketed_by_design_limits() {
        let sys = GradientSystem::desk(128);
        let c = SpiralConfig::optimized();
        let il = generate_interleave(&c, &sys).unwrap();
        let dk = sys.delta_k();
        let last = *il.theta.last().unwrap();
        let radius_at = |t: f64| {
            let i = il.theta.partition_point(|&x| x < t).max(1);
            let f = (t - il.theta[i - 1]) / (il.theta[i] - il.theta[i - 1]);
            il.radius[i - 1] + f * (il.radius[i] - il.radius[i - 1])
        };
        let mut t = 0.1;
        while t + 2.0 * PI < last {
            let pitch = (radius_at(t + 2.0 * PI) - radius_at(t)) / dk;
            assert!(pitch >= c.u_inner * 0.99 && pitch <= c.u_inner / c.rho * 1.01, "{pitch}");
            t += 0.25;
        }
    }

    #[test]
    fn assemble_linear_angles() {
        let sys = GradientSystem::desk(64);
        let c = SpiralConfig { tr_ms: 3.6, ..SpiralConfig::optimized() };
        let t = assemble_trajectory(&c, &sys, 2).unwrap();
        assert_eq!(t.n_interleaves(), 15);
        for j in 0..15 {
            assert_relative_eq!(interleave_angle_deg(c.ordering, 15, 1, j), 24.0 * j as f64, epsilon = 1e-12);
        }
        let f0 = t.coords.index_axis(ndarray::Axis(0), 0);
        let f1 = t.coords.index_axis(ndarray::Axis(0), 1);
        assert_eq!(f0, f1);
    }

    #[test]
    fn tiny_golden_second_frame_start() {
        assert_relative_eq!(
            interleave_angle_deg(InterleaveOrdering::TinyGolden, 15, 1, 0),
            349.5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn optimized_trajectory_has_fifteen_interleaves() {
        let sys = GradientSystem::scanner();
        let t = assemble_trajectory(&SpiralConfig::optimized(), &sys, 1).unwrap();
        assert_eq!(t.n_interleaves(), 15);
        // (3.667 - 1.0) ms at 2.5 µs dwell
        assert_eq!(t.n_samples(), 1066);
    }

    #[test]
    fn radial_examples() {
        let sys = GradientSystem::desk(64);
        let t = radial_trajectory(&sys, 17, 2).unwrap();
        let mut angles: Vec<f64> = (0..34).map(|m| (m as f64 * TINY_GOLDEN_DEG).rem_euclid(180.0)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(angles.windows(2).all(|w| w[1] - w[0] > 1e-9));
        let centre = t.n_samples() / 2;
        for f in 0..2 {
            for j in 0..17 {
                assert_eq!(t.coords[[f, j, centre, 0]], 0.0);
                assert_eq!(t.coords[[f, j, centre, 1]], 0.0);
            }
        }
        assert!(t.density_weights[[0, centre]] < t.density_weights[[0, 0]]);
        assert!(t.density_weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn uniform_spiral_weights_follow_swept_area() {
        let sys = GradientSystem::scanner();
        let t = uniform_spiral(&sys, 55.0 / 15.0, 55.0, InterleaveOrdering::Linear, 1).unwrap();
        assert_eq!(t.n_interleaves(), 15);
        assert_relative_eq!(UNIFORM_UNDERSAMPLING / 15.0, 6.1333, epsilon = 1e-4);
        let il = design_interleave(&DensityDesign::Constant(UNIFORM_UNDERSAMPLING), &sys, 55.0 / 15.0).unwrap();
        // Ring regime: the annulus share approaches U·r·Δθ, constant U here.
        let n = il.radius.len();
        let ratio: Vec<f64> = (n / 4..n - 1)
            .map(|i| il.weights[i] / (il.radius[i] * (il.theta[i + 1] - il.theta[i - 1]) / 2.0))
            .collect();
        let first = ratio[0];
        assert!(ratio.iter().all(|r| (r / first - 1.0).abs() < 1e-2), "{ratio:?}");
        assert_relative_eq!(il.weights.iter().sum::<f64>(), n as f64, epsilon = 1e-9);
    }

    #[test]
    fn trajectory_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sys = GradientSystem::desk(32);
        let t = assemble_trajectory(&SpiralConfig::optimized(), &sys, 3).unwrap();
        t.save(dir.path(), "traj", &sys).unwrap();
        let (back, manifest) = Trajectory::load(&dir.path().join("traj.json")).unwrap();
        assert_eq!(back, t);
        assert_eq!(manifest.n_interleaves, 15);
    }

    fn arb_config() -> impl Strategy<Value = SpiralConfig> {
        (0.1f64..=0.3, 12f64..=24.0, 0.0f64..=1.0, 0.01f64..=0.35, 0usize..3, 0usize..2, 2.88f64..=3.7).prop_map(
            |(ri, u, t, rho, tr_i, ord, tr)| SpiralConfig {
                r_inner: ri,
                u_inner: u,
                r_outer: ri + t * (1.0 - 2.0 * ri),
                rho,
                transition: Transition::ALL[tr_i],
                ordering: InterleaveOrdering::ALL[ord],
                tr_ms: tr,
                t_acq_ms: 55.0,
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn admissible_configs_stay_in_bounds(c in arb_config()) {
            let sys = GradientSystem::desk(48);
            let t = assemble_trajectory(&c, &sys, 2).unwrap();
            prop_assert!(t.coords.iter().all(|x| x.abs() <= 0.5));
            let ns = t.n_samples();
            for f in 0..2 {
                for j in 0..t.n_interleaves() {
                    let r = (t.coords[[f, j, ns - 1, 0]].powi(2) + t.coords[[f, j, ns - 1, 1]].powi(2)).sqrt();
                    prop_assert!((r - 0.5).abs() < 1e-3);
                }
            }
            prop_assert!(t.density_weights.iter().all(|&w| w > 0.0));
        }

        #[test]
        fn profile_is_monotone_and_continuous(c in arb_config()) {
            let mut prev = c.undersampling(0.0);
            for i in 1..=2000 {
                let r = i as f64 / 2000.0;
                let u = c.undersampling(r);
                prop_assert!(u >= prev - 1e-9);
                // Continuity: the density slope is bounded by (π/2)(1 - rho) / (u_inner · band).
                let band = c.r_outer - c.r_inner;
                if band > 1e-3 {
                    let bound = 2.0 * (1.0 - c.rho) / (c.u_inner * band) / 2000.0;
                    prop_assert!((1.0 / u - 1.0 / prev).abs() <= bound);
                }
                prev = u;
            }
        }

        #[test]
        fn generation_is_deterministic(c in arb_config()) {
            let sys = GradientSystem::desk(32);
            let a = assemble_trajectory(&c, &sys, 2).unwrap();
            let b = assemble_trajectory(&c, &sys, 2).unwrap();
            prop_assert!(a.coords.iter().zip(b.coords.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn tiny_golden_window_has_no_repeats() {
        let n = 15;
        let window = (360.0 / TINY_GOLDEN_DEG).ceil() as usize * n;
        let mut angles: Vec<f64> = (0..window)
            .map(|m| interleave_angle_deg(InterleaveOrdering::TinyGolden, n, m / n, m % n))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(angles.windows(2).all(|w| w[1] - w[0] > 1e-9));
    }
}
