//! Planar sector array, broadcast-beam synthesis and the candidate beam pool.
//!
//! Angle conventions used throughout the crate:
//!
//! * azimuth is measured from the sector boresight, positive counter-clockwise;
//! * elevation is measured from the horizontal plane, positive *below* the
//!   horizon, so an e-tilt of `ζ` degrees points the main lobe at elevation `ζ`.
//!
//! Element `(n1, n2)` (elevation row `n1`, azimuth column `n2`) lives at
//! vector index `n1 + n_elev * n2`: the elevation index runs fastest.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gains below this are reported as this value.
pub const GAIN_FLOOR_DB: f64 = -300.0;

/// Half-power width assigned to a single isotropic element.
pub const ISOTROPIC_WIDTH_DEG: f64 = 180.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamError {
    #[error("invalid array configuration: {0}")]
    InvalidArray(String),
    #[error("invalid beam spec: {0}")]
    InvalidSpec(String),
    #[error(
        "unachievable {axis} beam-width {requested_deg}° (achievable range {narrowest_deg:.3}°..={widest_deg}°)"
    )]
    UnachievableBeamwidth {
        axis: Axis,
        requested_deg: f64,
        narrowest_deg: f64,
        widest_deg: f64,
    },
    #[error("explicit weights have length {got}, array has {expected} elements")]
    WeightLength { expected: usize, got: usize },
    #[error("explicit weights are all zero")]
    ZeroWeights,
    #[error("beam pool must contain at least one beam")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Elevation,
    Azimuth,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Elevation => f.write_str("elevation"),
            Axis::Azimuth => f.write_str("azimuth"),
        }
    }
}

/// Uniform rectangular array serving one sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    /// Elements along the elevation axis (rows).
    pub n_elev: usize,
    /// Elements along the azimuth axis (columns).
    pub n_az: usize,
    /// Row spacing in wavelengths.
    pub d_elev: f64,
    /// Column spacing in wavelengths.
    pub d_az: f64,
    /// Height of the array above ground, meters.
    pub height_m: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_elev: 4,
            n_az: 4,
            d_elev: 0.5,
            d_az: 1.48,
            height_m: 35.0,
        }
    }
}

impl ArrayConfig {
    pub fn n_elements(&self) -> usize {
        self.n_elev * self.n_az
    }

    #[inline]
    pub fn index(&self, n1: usize, n2: usize) -> usize {
        n1 + self.n_elev * n2
    }

    pub fn validate(&self) -> Result<(), BeamError> {
        if self.n_elev == 0 || self.n_az == 0 {
            return Err(BeamError::InvalidArray(format!(
                "array must have at least one element per axis, got {}x{}",
                self.n_elev, self.n_az
            )));
        }
        if !(self.d_elev > 0.0 && self.d_elev.is_finite() && self.d_az > 0.0 && self.d_az.is_finite()) {
            return Err(BeamError::InvalidArray(format!(
                "element spacings must be positive, got d_elev={} d_az={}",
                self.d_elev, self.d_az
            )));
        }
        if !self.height_m.is_finite() {
            return Err(BeamError::InvalidArray("height must be finite".into()));
        }
        Ok(())
    }
}

/// Beam-width and tilt request for one broadcast beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub elev_bw_deg: f64,
    pub az_bw_deg: f64,
    pub etilt_deg: f64,
}

impl BeamSpec {
    pub fn validate(&self) -> Result<(), BeamError> {
        for (name, bw) in [("elev_bw_deg", self.elev_bw_deg), ("az_bw_deg", self.az_bw_deg)] {
            if !(bw > 0.0 && bw <= ISOTROPIC_WIDTH_DEG) {
                return Err(BeamError::InvalidSpec(format!("{name}={bw} outside (0, 180]")));
            }
        }
        if !(-90.0..=90.0).contains(&self.etilt_deg) {
            return Err(BeamError::InvalidSpec(format!(
                "etilt_deg={} outside [-90, 90]",
                self.etilt_deg
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    pub w: Vec<Complex64>,
    pub spec: BeamSpec,
    pub index: usize,
}

impl BeamWeights {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Ordered set of candidate beams; position in the pool is the action label.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamPool {
    beams: Vec<BeamWeights>,
}

impl BeamPool {
    pub fn new(beams: Vec<BeamWeights>) -> Result<Self, BeamError> {
        if beams.is_empty() {
            return Err(BeamError::EmptyPool);
        }
        let beams = beams
            .into_iter()
            .enumerate()
            .map(|(i, mut b)| {
                b.index = i;
                b
            })
            .collect();
        Ok(Self { beams })
    }

    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn get(&self, j: usize) -> Option<&BeamWeights> {
        self.beams.get(j)
    }

    pub fn beams(&self) -> &[BeamWeights] {
        &self.beams
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BeamWeights> {
        self.beams.iter()
    }
}

impl std::ops::Index<usize> for BeamPool {
    type Output = BeamWeights;
    fn index(&self, j: usize) -> &BeamWeights {
        &self.beams[j]
    }
}

/// Narrowband response of the array toward `(az_deg, elev_deg)`.
pub fn steering_vector(config: &ArrayConfig, az_deg: f64, elev_deg: f64) -> Vec<Complex64> {
    let (az, el) = (az_deg.to_radians(), elev_deg.to_radians());
    let u_elev = config.d_elev * el.sin();
    let u_az = config.d_az * az.sin() * el.cos();
    let mut out = Vec::with_capacity(config.n_elements());
    for n2 in 0..config.n_az {
        for n1 in 0..config.n_elev {
            let phase = 2.0 * PI * (n1 as f64 * u_elev + n2 as f64 * u_az);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

/// Power pattern `|a(az, el)ᵀ w|²` in dB, floored at [`GAIN_FLOOR_DB`].
///
/// The plain transpose is used so that the pattern agrees with the
/// received-power model `|hᵀf|²`: a beam synthesized toward `ζ` peaks at `ζ`.
pub fn beam_gain_db(config: &ArrayConfig, w: &BeamWeights, az_deg: f64, elev_deg: f64) -> f64 {
    let a = steering_vector(config, az_deg, elev_deg);
    let response: Complex64 = a.iter().zip(&w.w).map(|(ai, wi)| ai * wi).sum();
    power_to_db(response.norm_sqr())
}

pub(crate) fn power_to_db(p: f64) -> f64 {
    if p > 0.0 {
        (10.0 * p.log10()).max(GAIN_FLOOR_DB)
    } else {
        GAIN_FLOOR_DB
    }
}

/// Normalized broadside power of an `n`-element uniform line with spacing `d`
/// wavelengths at direction cosine `u`.
fn line_power(n: usize, d: f64, u: f64) -> f64 {
    let x = PI * d * u;
    let den = x.sin();
    if den.abs() < 1e-15 {
        return 1.0;
    }
    let num = (n as f64 * x).sin();
    (num * num) / (den * den * (n * n) as f64)
}

/// Full 3 dB width, degrees, of the broadside main lobe of an `n`-element
/// uniform line with spacing `d` wavelengths.
pub fn half_power_width_deg(n: usize, d: f64) -> f64 {
    if n <= 1 {
        return ISOTROPIC_WIDTH_DEG;
    }
    // Main lobe spans |u| < 1/(n d); bisect for the half-power point inside it.
    let first_null = 1.0 / (n as f64 * d);
    let hi_limit = first_null.min(1.0);
    if line_power(n, d, hi_limit) > 0.5 {
        return ISOTROPIC_WIDTH_DEG;
    }
    let (mut lo, mut hi) = (0.0_f64, hi_limit);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if line_power(n, d, mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    2.0 * (0.5 * (lo + hi)).asin().to_degrees()
}

/// Number of active elements along one axis realizing `requested_deg`: the
/// smallest centered block whose full-aperture 3 dB width does not exceed the
/// request, i.e. the widest achievable beam that still honours it.
pub fn active_block(
    axis: Axis,
    n_total: usize,
    spacing: f64,
    requested_deg: f64,
) -> Result<usize, BeamError> {
    let narrowest = half_power_width_deg(n_total, spacing);
    let unachievable = || BeamError::UnachievableBeamwidth {
        axis,
        requested_deg,
        narrowest_deg: narrowest,
        widest_deg: ISOTROPIC_WIDTH_DEG,
    };
    if requested_deg > ISOTROPIC_WIDTH_DEG {
        return Err(unachievable());
    }
    (1..=n_total)
        .find(|&n| half_power_width_deg(n, spacing) <= requested_deg + 1e-9)
        .ok_or_else(unachievable)
}

fn centered_range(n_total: usize, n_active: usize) -> std::ops::Range<usize> {
    let start = (n_total - n_active) / 2;
    start..start + n_active
}

/// Conjugate steering toward `(az 0°, elev ζ)` over a centered active block
/// sized from the requested beam-widths; inactive elements carry zero weight.
pub fn synthesize_beam(config: &ArrayConfig, spec: &BeamSpec) -> Result<BeamWeights, BeamError> {
    config.validate()?;
    spec.validate()?;
    let rows = active_block(Axis::Elevation, config.n_elev, config.d_elev, spec.elev_bw_deg)?;
    let cols = active_block(Axis::Azimuth, config.n_az, config.d_az, spec.az_bw_deg)?;
    let a = steering_vector(config, 0.0, spec.etilt_deg);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    let mut w = vec![Complex64::new(0.0, 0.0); config.n_elements()];
    for n2 in centered_range(config.n_az, cols) {
        for n1 in centered_range(config.n_elev, rows) {
            let i = config.index(n1, n2);
            w[i] = a[i].conj() * scale;
        }
    }
    Ok(BeamWeights { w, spec: *spec, index: 0 })
}

/// Wrap caller-provided weights (elevation-major) as a unit-norm beam.
pub fn explicit_beam(
    config: &ArrayConfig,
    spec: &BeamSpec,
    weights: &[Complex64],
) -> Result<BeamWeights, BeamError> {
    if weights.len() != config.n_elements() {
        return Err(BeamError::WeightLength {
            expected: config.n_elements(),
            got: weights.len(),
        });
    }
    let norm = weights.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(BeamError::ZeroWeights);
    }
    Ok(BeamWeights {
        w: weights.iter().map(|c| c / norm).collect(),
        spec: *spec,
        index: 0,
    })
}

pub fn build_pool(config: &ArrayConfig, specs: &[BeamSpec]) -> Result<BeamPool, BeamError> {
    if specs.is_empty() {
        return Err(BeamError::EmptyPool);
    }
    let beams = specs
        .iter()
        .map(|s| synthesize_beam(config, s))
        .collect::<Result<Vec<_>, _>>()?;
    BeamPool::new(beams)
}

/// One beam as it appears in a pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamEntry {
    pub elev_bw_deg: f64,
    pub az_bw_deg: f64,
    pub etilt_deg: f64,
    /// `[re, im]` pairs in elevation-major order; overrides synthesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<[f64; 2]>>,
}

impl BeamEntry {
    pub fn spec(&self) -> BeamSpec {
        BeamSpec {
            elev_bw_deg: self.elev_bw_deg,
            az_bw_deg: self.az_bw_deg,
            etilt_deg: self.etilt_deg,
        }
    }

    pub fn realize(&self, config: &ArrayConfig) -> Result<BeamWeights, BeamError> {
        let spec = self.spec();
        match &self.weights {
            Some(pairs) => {
                spec.validate()?;
                let w: Vec<Complex64> = pairs.iter().map(|[re, im]| Complex64::new(*re, *im)).collect();
                explicit_beam(config, &spec, &w)
            }
            None => synthesize_beam(config, &spec),
        }
    }
}

impl From<BeamSpec> for BeamEntry {
    fn from(s: BeamSpec) -> Self {
        Self {
            elev_bw_deg: s.elev_bw_deg,
            az_bw_deg: s.az_bw_deg,
            etilt_deg: s.etilt_deg,
            weights: None,
        }
    }
}

/// Serialized form of a beam pool (`[[beam]]` tables in TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolFile {
    pub beam: Vec<BeamEntry>,
}

impl PoolFile {
    pub fn realize(&self, config: &ArrayConfig) -> Result<BeamPool, BeamError> {
        realize_entries(config, &self.beam)
    }

    /// Snapshot a realized pool, writing its weights out explicitly.
    pub fn from_pool(pool: &BeamPool) -> Self {
        Self {
            beam: pool
                .iter()
                .map(|b| BeamEntry {
                    weights: Some(b.w.iter().map(|c| [c.re, c.im]).collect()),
                    ..BeamEntry::from(b.spec)
                })
                .collect(),
        }
    }
}

pub fn realize_entries(config: &ArrayConfig, entries: &[BeamEntry]) -> Result<BeamPool, BeamError> {
    if entries.is_empty() {
        return Err(BeamError::EmptyPool);
    }
    let beams = entries
        .iter()
        .map(|e| e.realize(config))
        .collect::<Result<Vec<_>, _>>()?;
    BeamPool::new(beams)
}
