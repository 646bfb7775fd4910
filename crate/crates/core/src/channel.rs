//! Per-link multipath records, the synthetic ray-trace substitute, channel
//! vectors and the on-disk ray-trace / location-history formats.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array_beams::{steering_vector, ArrayConfig};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const RAYTRACE_HEADER: [&str; 11] = [
    "timestamp",
    "scenario_id",
    "sector_id",
    "ue_id",
    "ue_x",
    "ue_y",
    "ue_z",
    "aod_az_deg",
    "aod_elev_deg",
    "pathloss_db",
    "phase_deg",
];

pub const LOCATION_HEADER: [&str; 5] = ["timestamp", "ue_id", "x", "y", "z"];

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: {what} id {id} out of range (declared {limit})")]
    Index {
        line: u64,
        what: &'static str,
        id: usize,
        limit: usize,
    },
    #[error("dataset contains no snapshots")]
    EmptyDataset,
    #[error("timestamp {timestamp}: no link for sector {sector}, ue {ue}")]
    IncompleteSnapshot { timestamp: i64, sector: usize, ue: usize },
    #[error("ue {ue} is co-located with sector {sector}")]
    DegenerateGeometry { sector: usize, ue: usize },
    #[error("invalid channel parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One propagation path leaving a sector toward a UE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub aod_az_deg: f64,
    pub aod_elev_deg: f64,
    /// Attenuation in dB, non-negative.
    pub pathloss_db: f64,
    pub phase_deg: f64,
}

impl PathRecord {
    pub fn gain(&self) -> Complex64 {
        Complex64::from_polar(10f64.powf(-self.pathloss_db / 20.0), self.phase_deg.to_radians())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkPaths {
    pub sector_id: usize,
    pub ue_id: usize,
    /// Empty means the UE is fully blocked from this sector.
    pub paths: Vec<PathRecord>,
}

/// UE distribution plus every sector-UE link at one time stamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSnapshot {
    pub timestamp: i64,
    pub scenario_id: String,
    pub ue_positions: Vec<[f64; 3]>,
    n_sectors: usize,
    /// Sector-major: link for `(m, k)` at `m * K + k`.
    links: Vec<LinkPaths>,
}

impl ScenarioSnapshot {
    /// Assemble a snapshot; `links` may come in any order but must cover
    /// every `(sector, ue)` pair exactly once.
    pub fn new(
        timestamp: i64,
        scenario_id: impl Into<String>,
        ue_positions: Vec<[f64; 3]>,
        n_sectors: usize,
        links: Vec<LinkPaths>,
    ) -> Result<Self, ChannelError> {
        let k = ue_positions.len();
        let mut slots: Vec<Option<LinkPaths>> = vec![None; n_sectors * k];
        for link in links {
            if link.sector_id >= n_sectors {
                return Err(ChannelError::Index { line: 0, what: "sector", id: link.sector_id, limit: n_sectors });
            }
            if link.ue_id >= k {
                return Err(ChannelError::Index { line: 0, what: "ue", id: link.ue_id, limit: k });
            }
            let slot = &mut slots[link.sector_id * k + link.ue_id];
            if slot.is_some() {
                return Err(ChannelError::Parse {
                    line: 0,
                    msg: format!("duplicate link (sector {}, ue {})", link.sector_id, link.ue_id),
                });
            }
            *slot = Some(link);
        }
        let links = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or(ChannelError::IncompleteSnapshot {
                    timestamp,
                    sector: i / k.max(1),
                    ue: i % k.max(1),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            timestamp,
            scenario_id: scenario_id.into(),
            ue_positions,
            n_sectors,
            links,
        })
    }

    pub fn n_sectors(&self) -> usize {
        self.n_sectors
    }

    pub fn n_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn link(&self, sector: usize, ue: usize) -> Option<&LinkPaths> {
        if sector >= self.n_sectors || ue >= self.n_ues() {
            return None;
        }
        self.links.get(sector * self.n_ues() + ue)
    }

    pub fn links(&self) -> &[LinkPaths] {
        &self.links
    }

    pub fn links_mut(&mut self) -> &mut [LinkPaths] {
        &mut self.links
    }
}

/// Parameters of the geometry-driven synthetic channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthChannelParams {
    pub carrier_freq_hz: f64,
    pub n_nlos_paths: usize,
    /// Mean extra attenuation of a reflected path over the LoS loss.
    pub nlos_excess_loss_db: f64,
    pub shadowing_sigma_db: f64,
    pub los_blockage_prob: f64,
    /// Fixed clutter/penetration loss added to every path.
    #[serde(default)]
    pub additional_loss_db: f64,
    /// Half-width of the uniform AoD perturbation of reflected paths.
    #[serde(default = "default_nlos_spread")]
    pub nlos_angle_spread_deg: f64,
}

fn default_nlos_spread() -> f64 {
    10.0
}

impl Default for SynthChannelParams {
    fn default() -> Self {
        Self {
            carrier_freq_hz: 2.0e9,
            n_nlos_paths: 0,
            nlos_excess_loss_db: 10.0,
            shadowing_sigma_db: 0.0,
            los_blockage_prob: 0.0,
            additional_loss_db: 0.0,
            nlos_angle_spread_deg: default_nlos_spread(),
        }
    }
}

impl SynthChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let non_neg = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("nlos_excess_loss_db", self.nlos_excess_loss_db),
            ("shadowing_sigma_db", self.shadowing_sigma_db),
            ("additional_loss_db", self.additional_loss_db),
            ("nlos_angle_spread_deg", self.nlos_angle_spread_deg),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ChannelError::InvalidParams(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.carrier_freq_hz == 0.0 {
            return Err(ChannelError::InvalidParams("carrier_freq_hz must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.los_blockage_prob) {
            return Err(ChannelError::InvalidParams(format!(
                "los_blockage_prob must lie in [0, 1], got {}",
                self.los_blockage_prob
            )));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }
}

/// Location and orientation of one sector array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorSite {
    pub position: [f64; 3],
    /// Global azimuth of the array boresight, degrees.
    #[serde(default)]
    pub boresight_az_deg: f64,
}

pub fn free_space_path_loss_db(distance_m: f64, freq_hz: f64) -> f64 {
    20.0 * (4.0 * PI * distance_m * freq_hz / SPEED_OF_LIGHT).log10()
}

fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Departure geometry from `site` toward `ue`: (azimuth relative to
/// boresight, elevation below horizon, 3D distance).
pub fn departure_geometry(site: &SectorSite, ue: &[f64; 3]) -> (f64, f64, f64) {
    let dx = ue[0] - site.position[0];
    let dy = ue[1] - site.position[1];
    let drop = site.position[2] - ue[2];
    let ground = dx.hypot(dy);
    let az = wrap_deg(dy.atan2(dx).to_degrees() - site.boresight_az_deg);
    let elev = drop.atan2(ground).to_degrees();
    (az, elev, ground.hypot(drop))
}

/// Generate links for every `(sector, ue)` pair, sector-major. The random
/// stream is consumed in a fixed per-link order, so output depends only on
/// the inputs and the generator state.
pub fn synth_links<R: Rng + ?Sized>(
    sectors: &[SectorSite],
    ue_positions: &[[f64; 3]],
    params: &SynthChannelParams,
    rng: &mut R,
) -> Result<Vec<LinkPaths>, ChannelError> {
    params.validate()?;
    let shadow = Normal::new(0.0, params.shadowing_sigma_db)
        .map_err(|e| ChannelError::InvalidParams(e.to_string()))?;
    let lambda = params.wavelength_m();
    let mut links = Vec::with_capacity(sectors.len() * ue_positions.len());
    for (m, site) in sectors.iter().enumerate() {
        for (k, ue) in ue_positions.iter().enumerate() {
            let (az, elev, d) = departure_geometry(site, ue);
            if !(d > 0.0) {
                return Err(ChannelError::DegenerateGeometry { sector: m, ue: k });
            }
            let blocked = rng.random::<f64>() < params.los_blockage_prob;
            let shadow_db = shadow.sample(rng);
            let los_loss = free_space_path_loss_db(d, params.carrier_freq_hz) + params.additional_loss_db + shadow_db;
            let mut paths = Vec::with_capacity(1 + params.n_nlos_paths);
            if !blocked {
                paths.push(PathRecord {
                    aod_az_deg: az,
                    aod_elev_deg: elev,
                    pathloss_db: los_loss.max(0.0),
                    phase_deg: (-360.0 * d / lambda).rem_euclid(360.0),
                });
            }
            for _ in 0..params.n_nlos_paths {
                let excess = params.nlos_excess_loss_db * rng.random_range(0.5..=1.5);
                let spread = params.nlos_angle_spread_deg;
                let daz = if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                let del = if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                let phase = rng.random_range(0.0..360.0);
                paths.push(PathRecord {
                    aod_az_deg: wrap_deg(az + daz),
                    aod_elev_deg: (elev + del).clamp(-90.0, 90.0),
                    pathloss_db: (los_loss + excess).max(0.0),
                    phase_deg: phase,
                });
            }
            links.push(LinkPaths { sector_id: m, ue_id: k, paths });
        }
    }
    Ok(links)
}

/// `h = Σ_l g_l · a(aod_l)` for one link; zero for a blocked link.
pub fn channel_vector(config: &ArrayConfig, link: &LinkPaths) -> Vec<Complex64> {
    let mut h = vec![Complex64::new(0.0, 0.0); config.n_elements()];
    for p in &link.paths {
        let g = p.gain();
        for (hi, ai) in h.iter_mut().zip(steering_vector(config, p.aod_az_deg, p.aod_elev_deg)) {
            *hi += g * ai;
        }
    }
    h
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, name: &str, line: u64) -> Result<T, ChannelError> {
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse::<T>().map_err(|_| ChannelError::Parse {
        line,
        msg: format!("column {name}: cannot parse {raw:?}"),
    })
}

fn column_map(headers: &csv::StringRecord, required: &[&str]) -> Result<Vec<usize>, ChannelError> {
    required
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.trim() == *name).ok_or_else(|| ChannelError::Parse {
                line: 1,
                msg: format!("header is missing column {name}"),
            })
        })
        .collect()
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(source)
}

fn csv_error(e: csv::Error) -> ChannelError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::UnequalLengths { .. } => ChannelError::Parse { line, msg: "wrong column count".into() },
        _ => ChannelError::Csv(e),
    }
}

struct PendingSnapshot {
    timestamp: i64,
    scenario_id: String,
    positions: HashMap<usize, [f64; 3]>,
    links: HashMap<(usize, usize), Vec<PathRecord>>,
}

impl PendingSnapshot {
    fn finish(self, n_sectors: usize, n_ues: usize) -> Result<ScenarioSnapshot, ChannelError> {
        let mut positions = Vec::with_capacity(n_ues);
        for k in 0..n_ues {
            match self.positions.get(&k) {
                Some(p) => positions.push(*p),
                None => {
                    return Err(ChannelError::IncompleteSnapshot { timestamp: self.timestamp, sector: 0, ue: k });
                }
            }
        }
        let mut links = Vec::with_capacity(n_sectors * n_ues);
        let mut table = self.links;
        for m in 0..n_sectors {
            for k in 0..n_ues {
                let paths = table
                    .remove(&(m, k))
                    .ok_or(ChannelError::IncompleteSnapshot { timestamp: self.timestamp, sector: m, ue: k })?;
                links.push(LinkPaths { sector_id: m, ue_id: k, paths });
            }
        }
        ScenarioSnapshot::new(self.timestamp, self.scenario_id, positions, n_sectors, links)
    }
}

/// Parse a ray-trace file. A row whose path columns are all empty declares
/// a link with no paths. Extra columns (e.g. arrival angles) are ignored.
pub fn load_raytrace<R: Read>(source: R, n_sectors: usize, n_ues: usize) -> Result<Vec<ScenarioSnapshot>, ChannelError> {
    let mut reader = csv_reader(source);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let cols = column_map(&headers, &RAYTRACE_HEADER)?;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<PendingSnapshot> = None;
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let ts: i64 = parse_field(&rec, cols[0], "timestamp", line)?;
        let scenario = rec.get(cols[1]).unwrap_or("").trim().to_string();
        let m: usize = parse_field(&rec, cols[2], "sector_id", line)?;
        let k: usize = parse_field(&rec, cols[3], "ue_id", line)?;
        if m >= n_sectors {
            return Err(ChannelError::Index { line, what: "sector", id: m, limit: n_sectors });
        }
        if k >= n_ues {
            return Err(ChannelError::Index { line, what: "ue", id: k, limit: n_ues });
        }
        let pos = [
            parse_field::<f64>(&rec, cols[4], "ue_x", line)?,
            parse_field::<f64>(&rec, cols[5], "ue_y", line)?,
            parse_field::<f64>(&rec, cols[6], "ue_z", line)?,
        ];
        let path_raw: Vec<&str> = cols[7..].iter().map(|&c| rec.get(c).unwrap_or("").trim()).collect();
        let path = if path_raw.iter().all(|s| s.is_empty()) {
            None
        } else {
            let p = PathRecord {
                aod_az_deg: parse_field(&rec, cols[7], "aod_az_deg", line)?,
                aod_elev_deg: parse_field(&rec, cols[8], "aod_elev_deg", line)?,
                pathloss_db: parse_field(&rec, cols[9], "pathloss_db", line)?,
                phase_deg: parse_field(&rec, cols[10], "phase_deg", line)?,
            };
            if !(p.pathloss_db >= 0.0) || !p.aod_az_deg.is_finite() || !p.aod_elev_deg.is_finite() {
                return Err(ChannelError::Parse { line, msg: "path values out of range".into() });
            }
            Some(p)
        };

        if current.as_ref().map(|c| c.timestamp != ts).unwrap_or(true) {
            if let Some(done) = current.take() {
                out.push(done.finish(n_sectors, n_ues)?);
            }
            if !seen.insert(ts) {
                return Err(ChannelError::Parse { line, msg: format!("rows for timestamp {ts} are not contiguous") });
            }
            current = Some(PendingSnapshot {
                timestamp: ts,
                scenario_id: scenario.clone(),
                positions: HashMap::new(),
                links: HashMap::new(),
            });
        }
        let snap = current.as_mut().expect("set above");
        if snap.scenario_id != scenario {
            return Err(ChannelError::Parse {
                line,
                msg: format!("scenario id {scenario:?} conflicts with {:?} for timestamp {ts}", snap.scenario_id),
            });
        }
        snap.positions.entry(k).or_insert(pos);
        let entry = snap.links.entry((m, k)).or_default();
        if let Some(p) = path {
            entry.push(p);
        }
    }
    if let Some(done) = current.take() {
        out.push(done.finish(n_sectors, n_ues)?);
    }
    if out.is_empty() {
        return Err(ChannelError::EmptyDataset);
    }
    Ok(out)
}

/// Write snapshots in the ray-trace format; [`load_raytrace`] inverts it exactly.
pub fn write_raytrace<W: Write>(sink: W, snapshots: &[ScenarioSnapshot]) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(RAYTRACE_HEADER)?;
    for snap in snapshots {
        for link in snap.links() {
            let [x, y, z] = snap.ue_positions[link.ue_id];
            let mut row = vec![
                snap.timestamp.to_string(),
                snap.scenario_id.clone(),
                link.sector_id.to_string(),
                link.ue_id.to_string(),
                x.to_string(),
                y.to_string(),
                z.to_string(),
            ];
            if link.paths.is_empty() {
                row.extend(std::iter::repeat_n(String::new(), 4));
                w.write_record(&row)?;
                continue;
            }
            for p in &link.paths {
                let mut full = row.clone();
                full.extend([
                    p.aod_az_deg.to_string(),
                    p.aod_elev_deg.to_string(),
                    p.pathloss_db.to_string(),
                    p.phase_deg.to_string(),
                ]);
                w.write_record(&full)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Time-stamped UE locations, one frame per timestamp in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocationHistory {
    pub frames: Vec<(i64, Vec<[f64; 3]>)>,
}

pub fn load_location_history<R: Read>(source: R) -> Result<LocationHistory, ChannelError> {
    let mut reader = csv_reader(source);
    let headers = reader.headers().map_err(csv_error)?.clone();
    let cols = column_map(&headers, &LOCATION_HEADER)?;
    let mut frames: Vec<(i64, Vec<Option<[f64; 3]>>)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let ts: i64 = parse_field(&rec, cols[0], "timestamp", line)?;
        let k: usize = parse_field(&rec, cols[1], "ue_id", line)?;
        let pos = [
            parse_field::<f64>(&rec, cols[2], "x", line)?,
            parse_field::<f64>(&rec, cols[3], "y", line)?,
            parse_field::<f64>(&rec, cols[4], "z", line)?,
        ];
        if frames.last().map(|f| f.0 != ts).unwrap_or(true) {
            if frames.iter().any(|f| f.0 == ts) {
                return Err(ChannelError::Parse { line, msg: format!("rows for timestamp {ts} are not contiguous") });
            }
            frames.push((ts, Vec::new()));
        }
        let frame = &mut frames.last_mut().expect("pushed above").1;
        if frame.len() <= k {
            frame.resize(k + 1, None);
        }
        frame[k] = Some(pos);
    }
    if frames.is_empty() {
        return Err(ChannelError::EmptyDataset);
    }
    let frames = frames
        .into_iter()
        .map(|(ts, ues)| {
            let ues = ues
                .into_iter()
                .enumerate()
                .map(|(k, p)| p.ok_or(ChannelError::IncompleteSnapshot { timestamp: ts, sector: 0, ue: k }))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((ts, ues))
        })
        .collect::<Result<Vec<_>, ChannelError>>()?;
    Ok(LocationHistory { frames })
}

pub fn write_location_history<W: Write>(sink: W, history: &LocationHistory) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(LOCATION_HEADER)?;
    for (ts, ues) in &history.frames {
        for (k, [x, y, z]) in ues.iter().enumerate() {
            w.write_record([ts.to_string(), k.to_string(), x.to_string(), y.to_string(), z.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
