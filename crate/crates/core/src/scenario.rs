//! Scenario files, subcarrier allocation and Monte Carlo sweeps.
//!
//! A scenario is a TOML document. Every field is optional; omitted fields
//! fall back to the three-user reference deployment (users at 10, 5 and
//! 1 m, eight subarrays split 5/3 between two groups, 5 GHz subcarriers).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::beamforming::{
    array_scale, assemble_channel_matrix, ray_effective_channel, select_beam_angles_codebook,
    weighted_effective_channel, BeamSelection, Codebook, EffectiveChannelMatrix, GroupSearch,
    RayLink, SubarrayAllocation, UserSearch,
};
use crate::channel::{
    los_path_gain, steering_vector, wavelength, AbsorptionModel, ArrayGeometry, Direction,
    NlosSpec, PathProfile,
};
use crate::error::{Error, Result};
use crate::precoding::{PrecoderKind, PrecoderSet};
use crate::rate::{
    asymptotic_rate, rate_lower_bound, AsymptoticScenario, AsymptoticSubcarrier, PhaseErrorSpec,
    TrialStatistics,
};

/// How analog beams are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamMode {
    Codebook,
    Los,
}

impl BeamMode {
    pub fn name(self) -> &'static str {
        match self {
            BeamMode::Codebook => "codebook",
            BeamMode::Los => "los",
        }
    }
}

impl std::fmt::Display for BeamMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BeamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "codebook" => Ok(BeamMode::Codebook),
            "los" => Ok(BeamMode::Los),
            other => Err(Error::InvalidArgument(format!("unknown beam mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpacingPolicy {
    /// Half a wavelength at `reference_frequency_hz`, the same physical
    /// spacing on every subcarrier.
    HalfWavelength,
    /// Fixed spacing `spacing_m`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub tx_rows: usize,
    pub tx_cols: usize,
    pub rx_rows: usize,
    pub rx_cols: usize,
    pub spacing: SpacingPolicy,
    pub reference_frequency_hz: f64,
    pub spacing_m: Option<f64>,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        ArrayConfig {
            tx_rows: 16,
            tx_cols: 16,
            rx_rows: 16,
            rx_cols: 16,
            spacing: SpacingPolicy::HalfWavelength,
            reference_frequency_hz: 1.0e12,
            spacing_m: None,
        }
    }
}

impl ArrayConfig {
    pub fn element_spacing(&self) -> f64 {
        match self.spacing {
            SpacingPolicy::HalfWavelength => wavelength(self.reference_frequency_hz) / 2.0,
            SpacingPolicy::Fixed => self.spacing_m.unwrap_or(f64::NAN),
        }
    }

    pub fn set_square(&mut self, size: usize) {
        self.tx_rows = size;
        self.tx_cols = size;
        self.rx_rows = size;
        self.rx_cols = size;
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseErrorConfig {
    pub eps_t_rad: f64,
    pub eps_r_rad: f64,
}

impl Default for PhaseErrorConfig {
    fn default() -> Self {
        PhaseErrorConfig {
            eps_t_rad: PI / 18.0,
            eps_r_rad: PI / 18.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlosConfig {
    pub first_order: usize,
    pub second_order: usize,
    pub first_order_loss_db: f64,
    pub second_order_loss_db: f64,
    pub azimuth_deg: [f64; 2],
    pub elevation_deg: [f64; 2],
}

impl Default for NlosConfig {
    fn default() -> Self {
        NlosConfig {
            first_order: 2,
            second_order: 1,
            first_order_loss_db: 10.0,
            second_order_loss_db: 20.0,
            azimuth_deg: [-180.0, 180.0],
            elevation_deg: [0.0, 90.0],
        }
    }
}

impl NlosConfig {
    pub fn spec(&self) -> NlosSpec {
        NlosSpec {
            first_order: self.first_order,
            second_order: self.second_order,
            first_order_loss_db: self.first_order_loss_db,
            second_order_loss_db: self.second_order_loss_db,
            azimuth: (self.azimuth_deg[0].to_radians(), self.azimuth_deg[1].to_radians()),
            elevation: (self.elevation_deg[0].to_radians(), self.elevation_deg[1].to_radians()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookScope {
    /// Fine grid over the pre-scan section containing the LOS direction.
    Section,
    /// Uniform grid over the whole front hemisphere.
    Hemisphere,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub scope: CodebookScope,
    pub section_deg: f64,
    pub step_deg: f64,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            scope: CodebookScope::Section,
            section_deg: 10.0,
            step_deg: 1.0,
        }
    }
}

impl CodebookConfig {
    pub fn around(&self, dir: Direction) -> Result<Codebook> {
        match self.scope {
            CodebookScope::Section => Codebook::section(dir, self.section_deg.to_radians(), self.step_deg.to_radians()),
            CodebookScope::Hemisphere => Codebook::hemisphere(self.step_deg.to_radians()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub id: u32,
    pub subarrays: usize,
    /// User whose LOS departure angle steers the group in LOS mode;
    /// defaults to the lowest user id of the group.
    pub reference_user: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub id: u32,
    pub distance_m: f64,
    pub group: u32,
    pub windows_hz: Vec<[f64; 2]>,
    /// LOS departure direction `[azimuth, elevation]` in degrees.
    pub los_aod_deg: [f64; 2],
    /// LOS arrival direction `[azimuth, elevation]` in degrees.
    pub los_aoa_deg: [f64; 2],
}

impl UserConfig {
    pub fn los_aod(&self) -> Direction {
        Direction::from_degrees(self.los_aod_deg[0], self.los_aod_deg[1])
    }

    pub fn los_aoa(&self) -> Direction {
        Direction::from_degrees(self.los_aoa_deg[0], self.los_aoa_deg[1])
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub power_dbm: Vec<f64>,
    /// Transmit power used when the swept axis is not power.
    pub fixed_power_dbm: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            power_dbm: (0..13).map(|i| -20.0 + 5.0 * i as f64).collect(),
            fixed_power_dbm: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub trials: usize,
    pub bandwidth_hz: f64,
    pub noise_dbm: f64,
    /// Total number of AP subarrays `K`.
    pub subarrays: usize,
    pub antenna_gain_tx_dbi: f64,
    pub antenna_gain_rx_dbi: f64,
    pub precoder: PrecoderKind,
    pub beam_mode: BeamMode,
    /// Distance between neighbouring subarrays along the AP row axis.
    pub subarray_spacing_m: f64,
    /// Two-column absorption table; relative paths resolve against the
    /// scenario file.
    pub absorption_file: Option<PathBuf>,
    pub arrays: ArrayConfig,
    pub phase_error: PhaseErrorConfig,
    pub nlos: NlosConfig,
    pub codebook: CodebookConfig,
    pub sweep: SweepConfig,
    pub groups: Vec<GroupConfig>,
    pub users: Vec<UserConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let user = |id, distance_m, group, windows: &[[f64; 2]], aod, aoa| UserConfig {
            id,
            distance_m,
            group,
            windows_hz: windows.iter().map(|w| [w[0] * 1e12, w[1] * 1e12]).collect(),
            los_aod_deg: aod,
            los_aoa_deg: aoa,
        };
        ScenarioConfig {
            seed: 1,
            trials: 200,
            bandwidth_hz: 5e9,
            noise_dbm: -75.0,
            subarrays: 8,
            antenna_gain_tx_dbi: 20.0,
            antenna_gain_rx_dbi: 20.0,
            precoder: PrecoderKind::Mrt,
            beam_mode: BeamMode::Los,
            subarray_spacing_m: 0.01,
            absorption_file: None,
            arrays: ArrayConfig::default(),
            phase_error: PhaseErrorConfig::default(),
            nlos: NlosConfig::default(),
            codebook: CodebookConfig::default(),
            sweep: SweepConfig::default(),
            groups: vec![
                GroupConfig { id: 1, subarrays: 5, reference_user: None },
                GroupConfig { id: 2, subarrays: 3, reference_user: None },
            ],
            users: vec![
                user(1, 10.0, 1, &[[0.6, 0.7], [0.8, 0.95]], [32.3, 41.6], [-147.4, 38.7]),
                user(2, 5.0, 2, &[[0.6, 0.725], [0.8, 0.925]], [-52.6, 33.2], [126.3, 46.8]),
                user(3, 1.0, 1, &[[0.5, 0.6], [0.7, 0.8], [0.95, 1.0]], [32.3, 41.6], [-141.7, 52.4]),
            ],
        }
    }
}

fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

fn dbi_to_amplitude(dbi: f64) -> f64 {
    10f64.powf(dbi / 20.0)
}

impl ScenarioConfig {
    pub fn omega_t(&self) -> f64 {
        dbi_to_amplitude(self.antenna_gain_tx_dbi)
    }

    pub fn omega_r(&self) -> f64 {
        dbi_to_amplitude(self.antenna_gain_rx_dbi)
    }

    pub fn noise_watts(&self) -> f64 {
        dbm_to_watts(self.noise_dbm)
    }

    pub fn phase_errors(&self) -> PhaseErrorSpec {
        PhaseErrorSpec {
            eps_t: self.phase_error.eps_t_rad,
            eps_r: self.phase_error.eps_r_rad,
        }
    }

    pub fn user(&self, id: u32) -> Option<&UserConfig> {
        self.users.iter().find(|u| u.id == id)
    }

    pub fn group_counts(&self) -> BTreeMap<u32, usize> {
        self.groups.iter().map(|g| (g.id, g.subarrays)).collect()
    }

    /// Reference user per group.
    pub fn reference_users(&self) -> BTreeMap<u32, u32> {
        self.groups
            .iter()
            .filter_map(|g| {
                g.reference_user
                    .or_else(|| self.users.iter().filter(|u| u.group == g.id).map(|u| u.id).min())
                    .map(|u| (g.id, u))
            })
            .collect()
    }

    /// Checks every semantic constraint, reporting the offending field path.
    pub fn validate(&self) -> Result<()> {
        let positive = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(path, format!("must be positive, got {v}")))
            }
        };
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("subarray_spacing_m", self.subarray_spacing_m)?;
        if !self.noise_dbm.is_finite() {
            return Err(Error::config("noise_dbm", "must be finite"));
        }
        for (path, v) in [
            ("antenna_gain_tx_dbi", self.antenna_gain_tx_dbi),
            ("antenna_gain_rx_dbi", self.antenna_gain_rx_dbi),
        ] {
            if !v.is_finite() {
                return Err(Error::config(path, "must be finite"));
            }
        }
        if self.subarrays == 0 {
            return Err(Error::config("subarrays", "must be at least 1"));
        }
        let a = &self.arrays;
        for (path, v) in [
            ("arrays.tx_rows", a.tx_rows),
            ("arrays.tx_cols", a.tx_cols),
            ("arrays.rx_rows", a.rx_rows),
            ("arrays.rx_cols", a.rx_cols),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        match a.spacing {
            SpacingPolicy::HalfWavelength => positive("arrays.reference_frequency_hz", a.reference_frequency_hz)?,
            SpacingPolicy::Fixed => match a.spacing_m {
                Some(s) => positive("arrays.spacing_m", s)?,
                None => return Err(Error::config("arrays.spacing_m", "required when spacing = \"fixed\"")),
            },
        }
        for (path, v) in [
            ("phase_error.eps_t_rad", self.phase_error.eps_t_rad),
            ("phase_error.eps_r_rad", self.phase_error.eps_r_rad),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(path, format!("must be finite and non-negative, got {v}")));
            }
        }
        let n = &self.nlos;
        positive("nlos.first_order_loss_db", n.first_order_loss_db)?;
        positive("nlos.second_order_loss_db", n.second_order_loss_db)?;
        for (path, r, lo, hi) in [
            ("nlos.azimuth_deg", n.azimuth_deg, -180.0, 180.0),
            ("nlos.elevation_deg", n.elevation_deg, 0.0, 180.0),
        ] {
            if !(r[0] <= r[1]) || r[0] < lo || r[1] > hi {
                return Err(Error::config(path, format!("range {r:?} must be ordered and within [{lo}, {hi}]")));
            }
        }
        positive("codebook.section_deg", self.codebook.section_deg)?;
        positive("codebook.step_deg", self.codebook.step_deg)?;
        if self.sweep.power_dbm.is_empty() {
            return Err(Error::config("sweep.power_dbm", "must not be empty"));
        }
        for (i, p) in self.sweep.power_dbm.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::config(format!("sweep.power_dbm[{i}]"), "must be finite"));
            }
        }
        if !self.sweep.fixed_power_dbm.is_finite() {
            return Err(Error::config("sweep.fixed_power_dbm", "must be finite"));
        }

        let mut group_ids = BTreeSet::new();
        let mut total = 0;
        for (i, g) in self.groups.iter().enumerate() {
            if !group_ids.insert(g.id) {
                return Err(Error::config(format!("groups[{i}].id"), format!("duplicate group id {}", g.id)));
            }
            if g.subarrays == 0 {
                return Err(Error::config(format!("groups[{i}].subarrays"), "must be at least 1"));
            }
            total += g.subarrays;
        }
        if total > self.subarrays {
            return Err(Error::config(
                "groups",
                format!("allocations sum to {total} but only {} subarrays exist", self.subarrays),
            ));
        }
        if self.users.is_empty() {
            return Err(Error::config("users", "at least one user is required"));
        }
        let mut user_ids = BTreeSet::new();
        let mut f_max = 0.0f64;
        for (i, u) in self.users.iter().enumerate() {
            let at = |field: &str| format!("users[{i}].{field}");
            if !user_ids.insert(u.id) {
                return Err(Error::config(at("id"), format!("duplicate user id {}", u.id)));
            }
            positive(&at("distance_m"), u.distance_m)?;
            if !group_ids.contains(&u.group) {
                return Err(Error::config(at("group"), format!("group {} is not declared", u.group)));
            }
            if u.windows_hz.is_empty() {
                return Err(Error::config(at("windows_hz"), "at least one window is required"));
            }
            for (j, w) in u.windows_hz.iter().enumerate() {
                if !(w[0] > 0.0 && w[1] > w[0] && w[1].is_finite()) {
                    return Err(Error::config(
                        format!("users[{i}].windows_hz[{j}]"),
                        format!("window {w:?} must satisfy 0 < low < high"),
                    ));
                }
                f_max = f_max.max(w[1]);
            }
            let mut sorted: Vec<(usize, [f64; 2])> = u.windows_hz.iter().copied().enumerate().collect();
            sorted.sort_by(|a, b| a.1[0].total_cmp(&b.1[0]));
            for pair in sorted.windows(2) {
                if pair[1].1[0] < pair[0].1[1] {
                    return Err(Error::config(
                        format!("users[{i}].windows_hz[{}]", pair[1].0),
                        format!("window {:?} overlaps {:?}", pair[1].1, pair[0].1),
                    ));
                }
            }
            for (field, d) in [("los_aod_deg", u.los_aod_deg), ("los_aoa_deg", u.los_aoa_deg)] {
                if !(-180.0..=180.0).contains(&d[0]) || !(0.0..=180.0).contains(&d[1]) {
                    return Err(Error::config(
                        at(field),
                        format!("{d:?} needs azimuth in [-180, 180] and elevation in [0, 180]"),
                    ));
                }
            }
        }
        for (i, g) in self.groups.iter().enumerate() {
            if let Some(r) = g.reference_user {
                if self.user(r).is_none_or(|u| u.group != g.id) {
                    return Err(Error::config(
                        format!("groups[{i}].reference_user"),
                        format!("user {r} is not a member of group {}", g.id),
                    ));
                }
            }
        }
        let spacing = self.arrays.element_spacing();
        if spacing > wavelength(f_max) * (1.0 + 1e-12) {
            return Err(Error::config(
                "arrays",
                format!(
                    "element spacing {spacing:e} m exceeds the wavelength {:e} m at {f_max:e} Hz",
                    wavelength(f_max)
                ),
            ));
        }
        Ok(())
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<document>", e.to_string()))?;
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<document>".to_owned() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a scenario file and resolves its absorption table path.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut cfg = parse_scenario(&text)?;
    if let Some(file) = &cfg.absorption_file {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.absorption_file = Some(dir.join(file));
            }
        }
    }
    Ok(cfg)
}

/// One frequency bin shared by every user whose windows cover it.
#[derive(Debug, Clone, PartialEq)]
pub struct Subcarrier {
    pub index: usize,
    pub center_hz: f64,
    /// `U^w`, ascending user id.
    pub users: Vec<u32>,
    /// `K^w` subarray ids, ordered by group id.
    pub subarrays: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubcarrierAllocation {
    pub subcarriers: Vec<Subcarrier>,
    /// `(index, center)` of every subcarrier of each user.
    pub per_user: BTreeMap<u32, Vec<(usize, f64)>>,
    pub warnings: Vec<String>,
}

impl SubcarrierAllocation {
    pub fn len(&self) -> usize {
        self.subcarriers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subcarriers.is_empty()
    }
}

/// Tiles every window with contiguous subcarriers of width `B` starting at
/// its lower edge. Subcarriers of different users with the same center
/// frequency (to the hertz) are merged into one shared subcarrier.
pub fn allocate_subcarriers(cfg: &ScenarioConfig) -> Result<SubcarrierAllocation> {
    let b = cfg.bandwidth_hz;
    let blocks = SubarrayAllocation::new(cfg.subarrays, &cfg.group_counts())?;
    let mut warnings = Vec::new();
    let mut bins: BTreeMap<i64, (f64, Vec<u32>)> = BTreeMap::new();
    let mut users: Vec<&UserConfig> = cfg.users.iter().collect();
    users.sort_by_key(|u| u.id);
    for u in &users {
        for w in &u.windows_hz {
            let n = ((w[1] - w[0]) / b + 1e-9).floor() as usize;
            if n == 0 {
                warnings.push(format!(
                    "user {}: window [{:e}, {:e}] Hz is narrower than one subcarrier",
                    u.id, w[0], w[1]
                ));
                continue;
            }
            for edge in [w[0], w[1]] {
                let r = edge / b;
                if (r - r.round()).abs() > 1e-6 {
                    warnings.push(format!(
                        "user {}: window edge {edge:e} Hz is not a multiple of the bandwidth; \
                         its subcarriers will not be shared with other users",
                        u.id
                    ));
                }
            }
            for i in 0..n {
                let center = w[0] + b / 2.0 + i as f64 * b;
                let entry = bins.entry(center.round() as i64).or_insert((center, Vec::new()));
                entry.1.push(u.id);
            }
        }
    }
    let mut subcarriers = Vec::with_capacity(bins.len());
    let mut per_user: BTreeMap<u32, Vec<(usize, f64)>> = BTreeMap::new();
    for (index, (_, (center, ids))) in bins.into_iter().enumerate() {
        let mut groups = BTreeSet::new();
        for id in &ids {
            let g = cfg.user(*id).expect("validated user").group;
            if !groups.insert(g) {
                return Err(Error::OverlappingAllocation(format!(
                    "users {ids:?} of group {g} share the subcarrier at {center:e} Hz"
                )));
            }
            per_user.entry(*id).or_default().push((index, center));
        }
        subcarriers.push(Subcarrier {
            index,
            center_hz: center,
            users: ids,
            subarrays: blocks.active(&groups),
        });
    }
    Ok(SubcarrierAllocation {
        subcarriers,
        per_user,
        warnings,
    })
}

/// Random draws of one Monte Carlo trial.
#[derive(Debug, Clone)]
pub struct TrialDraw {
    pub profiles: BTreeMap<u32, PathProfile>,
    /// Per-element phase errors of each AP subarray, empty without errors.
    pub tx_errors: Vec<Vec<f64>>,
    pub rx_errors: BTreeMap<u32, Vec<f64>>,
}

/// `(user, rx codebook, one link per subcarrier)`.
type UserLinks = (u32, Codebook, Vec<RayLink>);

const STREAM_RAYS: u64 = 0;
const STREAM_PHASE_ERRORS: u64 = 1;

/// Per-trial rates for every requested beam mode, precoder and power.
#[derive(Debug, Clone)]
pub struct TrialResult {
    /// `rates[(beam, precoder, power index)][user]`, user-id order.
    pub rates: BTreeMap<(BeamMode, PrecoderKind, usize), Vec<f64>>,
    /// Large-array rate per user, user-id order.
    pub asymptotic: Vec<f64>,
}

/// Monte Carlo engine for one scenario.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: ScenarioConfig,
    alloc: SubcarrierAllocation,
    blocks: SubarrayAllocation,
    absorption: AbsorptionModel,
    user_ids: Vec<u32>,
    spacing: f64,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let alloc = allocate_subcarriers(&cfg)?;
        if alloc.is_empty() {
            return Err(Error::config("users", "no window holds a whole subcarrier"));
        }
        let absorption = match &cfg.absorption_file {
            Some(p) => AbsorptionModel::from_file(p)?,
            None => AbsorptionModel::transparent(),
        };
        let blocks = SubarrayAllocation::new(cfg.subarrays, &cfg.group_counts())?;
        let mut user_ids: Vec<u32> = cfg.users.iter().map(|u| u.id).collect();
        user_ids.sort_unstable();
        let spacing = cfg.arrays.element_spacing();
        Ok(Simulator {
            cfg,
            alloc,
            blocks,
            absorption,
            user_ids,
            spacing,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn allocation(&self) -> &SubcarrierAllocation {
        &self.alloc
    }

    pub fn user_ids(&self) -> &[u32] {
        &self.user_ids
    }

    fn rng(&self, trial: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(trial as u64 * 2 + purpose);
        rng
    }

    /// Draws rays and phase errors for a trial. Rays come from their own
    /// random stream, so they do not depend on array sizes or error bounds.
    pub fn draw(&self, trial: usize) -> TrialDraw {
        let mut rng = self.rng(trial, STREAM_RAYS);
        let nlos = self.cfg.nlos.spec();
        let profiles = self
            .user_ids
            .iter()
            .map(|&id| {
                let u = self.cfg.user(id).expect("known user");
                (id, PathProfile::sample(&mut rng, u.los_aod(), u.los_aoa(), &nlos))
            })
            .collect();
        let pe = self.cfg.phase_errors();
        let mut rng = self.rng(trial, STREAM_PHASE_ERRORS);
        let mut draw_errors = |n: usize, eps: f64| -> Vec<f64> {
            if eps == 0.0 {
                Vec::new()
            } else {
                (0..n).map(|_| rng.random_range(-eps..=eps)).collect()
            }
        };
        let a = &self.cfg.arrays;
        let tx_errors = (0..self.cfg.subarrays)
            .map(|_| draw_errors(a.tx_rows * a.tx_cols, pe.eps_t))
            .collect();
        let rx_errors = self
            .user_ids
            .iter()
            .map(|&id| (id, draw_errors(a.rx_rows * a.rx_cols, pe.eps_r)))
            .collect();
        TrialDraw {
            profiles,
            tx_errors,
            rx_errors,
        }
    }

    fn geometries(&self, frequency_hz: f64) -> Result<(ArrayGeometry, ArrayGeometry)> {
        let lambda = wavelength(frequency_hz);
        let a = &self.cfg.arrays;
        Ok((
            ArrayGeometry::new(a.tx_rows, a.tx_cols, self.spacing, lambda)?,
            ArrayGeometry::new(a.rx_rows, a.rx_cols, self.spacing, lambda)?,
        ))
    }

    fn offset(&self, subarray: usize) -> f64 {
        subarray as f64 * self.cfg.subarray_spacing_m
    }

    fn group_of_subarray(&self, k: usize) -> u32 {
        self.cfg
            .groups
            .iter()
            .find(|g| self.blocks.block(g.id).is_some_and(|r| r.contains(&k)))
            .map(|g| g.id)
            .expect("active subarray belongs to a group")
    }

    /// Beam angles for a trial.
    pub fn select_beams(&self, draw: &TrialDraw, mode: BeamMode) -> Result<BeamSelection> {
        let reference = self.cfg.reference_users();
        match mode {
            BeamMode::Los => {
                let mut sel = BeamSelection::default();
                for (&g, &r) in &reference {
                    sel.tx.insert(g, draw.profiles[&r].los().aod);
                }
                for (&u, p) in &draw.profiles {
                    sel.rx.insert(u, p.los().aoa);
                }
                Ok(sel)
            }
            BeamMode::Codebook => {
                let scale = |tx: &ArrayGeometry, rx: &ArrayGeometry| {
                    array_scale(tx, rx, self.cfg.omega_t(), self.cfg.omega_r())
                };
                let mut owned: Vec<(u32, Codebook, Vec<UserLinks>)> = Vec::new();
                for g in &self.cfg.groups {
                    let Some(&r) = reference.get(&g.id) else { continue };
                    let block = self.blocks.block(g.id).expect("declared group");
                    let tx_cb = self.cfg.codebook.around(draw.profiles[&r].los().aod)?;
                    let mut users = Vec::new();
                    for &u in self.user_ids.iter().filter(|&&u| self.cfg.user(u).unwrap().group == g.id) {
                        let cfg_u = self.cfg.user(u).unwrap();
                        let profile = &draw.profiles[&u];
                        let rx_cb = self.cfg.codebook.around(profile.los().aoa)?;
                        let mut links = Vec::new();
                        for &(_, f) in self.alloc.per_user.get(&u).map(Vec::as_slice).unwrap_or(&[]) {
                            let (tx, rx) = self.geometries(f)?;
                            let gains = block
                                .clone()
                                .map(|k| {
                                    Ok(profile
                                        .rays(f, cfg_u.distance_m, &self.absorption, self.offset(k))?
                                        .iter()
                                        .map(|r| r.gain)
                                        .collect())
                                })
                                .collect::<Result<Vec<Vec<Complex64>>>>()?;
                            links.push(RayLink {
                                frequency_hz: f,
                                tx,
                                rx,
                                scale: scale(&tx, &rx),
                                aod: profile.components.iter().map(|c| c.aod).collect(),
                                aoa: profile.components.iter().map(|c| c.aoa).collect(),
                                gains,
                                los_magnitude: los_path_gain(f, cfg_u.distance_m, &self.absorption)?.sqrt(),
                            });
                        }
                        if !links.is_empty() {
                            users.push((u, rx_cb, links));
                        }
                    }
                    if !users.is_empty() {
                        owned.push((g.id, tx_cb, users));
                    }
                }
                let searches: Vec<GroupSearch> = owned
                    .iter()
                    .map(|(g, tx_cb, users)| GroupSearch {
                        group: *g,
                        tx_codebook: tx_cb,
                        users: users
                            .iter()
                            .map(|(u, rx_cb, links)| UserSearch {
                                user: *u,
                                rx_codebook: rx_cb,
                                links,
                            })
                            .collect(),
                    })
                    .collect();
                select_beam_angles_codebook(&searches)
            }
        }
    }

    /// Baseband channel matrices of every subcarrier for given beams.
    pub fn channel_matrices(&self, draw: &TrialDraw, sel: &BeamSelection) -> Result<Vec<EffectiveChannelMatrix>> {
        let (omega_t, omega_r) = (self.cfg.omega_t(), self.cfg.omega_r());
        let group_of: BTreeMap<usize, u32> = (0..self.cfg.subarrays)
            .filter(|&k| self.cfg.groups.iter().any(|g| self.blocks.block(g.id).is_some_and(|r| r.contains(&k))))
            .map(|k| (k, self.group_of_subarray(k)))
            .collect();
        self.alloc
            .subcarriers
            .iter()
            .map(|sc| {
                let f = sc.center_hz;
                let (tx, rx) = self.geometries(f)?;
                let scale = array_scale(&tx, &rx, omega_t, omega_r);
                let tx_weights: Vec<Option<Vec<Complex64>>> = sc
                    .subarrays
                    .iter()
                    .map(|&k| perturbed(&tx, sel.tx[&group_of[&k]], &draw.tx_errors[k]))
                    .collect();
                let rows = sc
                    .users
                    .iter()
                    .map(|&u| {
                        let cfg_u = self.cfg.user(u).expect("known user");
                        let rx_beam = sel.rx[&u];
                        let rx_weights = perturbed(&rx, rx_beam, &draw.rx_errors[&u]);
                        let row = sc
                            .subarrays
                            .iter()
                            .zip(&tx_weights)
                            .map(|(&k, tw)| {
                                let rays = draw.profiles[&u].rays(f, cfg_u.distance_m, &self.absorption, self.offset(k))?;
                                Ok(match (tw, &rx_weights) {
                                    (None, None) => ray_effective_channel(&rays, &tx, &rx, scale, sel.tx[&group_of[&k]], rx_beam),
                                    _ => {
                                        let tw = tw.clone().unwrap_or_else(|| steering_vector(&tx, sel.tx[&group_of[&k]]).as_slice().to_vec());
                                        let rw = rx_weights.clone().unwrap_or_else(|| steering_vector(&rx, rx_beam).as_slice().to_vec());
                                        weighted_effective_channel(&rays, &tx, &rx, scale, &tw, &rw)
                                    }
                                })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok((u, row))
                    })
                    .collect::<Result<Vec<_>>>()?;
                assemble_channel_matrix(sc.index, f, rows, sc.subarrays.clone())
            })
            .collect()
    }

    /// LOS gains per subcarrier in the large-array limit.
    pub fn asymptotic_scenario(&self, draw: &TrialDraw) -> Result<AsymptoticScenario> {
        let subcarriers = self
            .alloc
            .subcarriers
            .iter()
            .map(|sc| {
                let users = sc
                    .users
                    .iter()
                    .map(|&u| {
                        let cfg_u = self.cfg.user(u).expect("known user");
                        let block = self.blocks.block(cfg_u.group).expect("declared group");
                        let eta = block
                            .map(|k| {
                                Ok(draw.profiles[&u].rays(sc.center_hz, cfg_u.distance_m, &self.absorption, self.offset(k))?[0].gain)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok((u, eta))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AsymptoticSubcarrier {
                    subcarrier: sc.index,
                    users,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AsymptoticScenario {
            bandwidth_hz: self.cfg.bandwidth_hz,
            subcarriers,
        })
    }

    /// Per-user rates of one trial. `powers_dbm` are total transmit powers,
    /// split evenly over all active subcarriers.
    pub fn run_trial(
        &self,
        trial: usize,
        beams: &[BeamMode],
        precoders: &[PrecoderKind],
        powers_dbm: &[f64],
    ) -> Result<TrialResult> {
        let draw = self.draw(trial);
        let n0 = self.cfg.noise_watts();
        let b = self.cfg.bandwidth_hz;
        let slots = self.alloc.len() as f64;
        let index: BTreeMap<u32, usize> = self.user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let mut rates = BTreeMap::new();
        for &mode in beams {
            let sel = self.select_beams(&draw, mode)?;
            let matrices = self.channel_matrices(&draw, &sel)?;
            for &kind in precoders {
                for (pi, &dbm) in powers_dbm.iter().enumerate() {
                    let pw = dbm_to_watts(dbm) / slots;
                    let mut per_user = vec![0.0; self.user_ids.len()];
                    for h in &matrices {
                        let set = PrecoderSet::new(kind, h, pw)?;
                        for e in rate_lower_bound(h, &set, n0, b)?.entries {
                            per_user[index[&e.user]] += e.rate_bps;
                        }
                    }
                    rates.insert((mode, kind, pi), per_user);
                }
            }
        }
        let asym = asymptotic_rate(&self.asymptotic_scenario(&draw)?)?;
        let asymptotic = self.user_ids.iter().map(|u| asym.per_user.get(u).copied().unwrap_or(0.0)).collect();
        Ok(TrialResult { rates, asymptotic })
    }

    /// Runs all trials in parallel; results come back in trial order.
    pub fn run_trials(&self, beams: &[BeamMode], precoders: &[PrecoderKind], powers_dbm: &[f64]) -> Result<Vec<TrialResult>> {
        (0..self.cfg.trials)
            .into_par_iter()
            .map(|t| self.run_trial(t, beams, precoders, powers_dbm))
            .collect()
    }
}

fn perturbed(geom: &ArrayGeometry, beam: Direction, errors: &[f64]) -> Option<Vec<Complex64>> {
    if errors.is_empty() {
        return None;
    }
    let a = steering_vector(geom, beam);
    Some(a.iter().zip(errors).map(|(z, &e)| z * Complex64::from_polar(1.0, e)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Power,
    Array,
    Subarrays,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Power => "power_dbm",
            SweepAxis::Array => "array_size",
            SweepAxis::Subarrays => "subarrays",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(SweepAxis::Power),
            "array" => Ok(SweepAxis::Array),
            "subarrays" => Ok(SweepAxis::Subarrays),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRequest {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub precoders: Vec<PrecoderKind>,
    pub beams: Vec<BeamMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub axis_name: &'static str,
    pub axis_value: f64,
    pub precoder: PrecoderKind,
    pub beam_mode: BeamMode,
    pub user_id: u32,
    pub mean_rate_bps: f64,
    pub std_rate_bps: f64,
    pub asymptotic_rate_bps: f64,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Rows sorted by axis value, then user id, then precoder and beam.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.axis_value
                .total_cmp(&b.axis_value)
                .then(a.user_id.cmp(&b.user_id))
                .then(a.precoder.cmp(&b.precoder))
                .then(a.beam_mode.cmp(&b.beam_mode))
        });
    }

    pub fn find(&self, axis_value: f64, precoder: PrecoderKind, beam: BeamMode, user: u32) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.axis_value == axis_value && r.precoder == precoder && r.beam_mode == beam && r.user_id == user
        })
    }

    /// Sum over users of the mean rates at one axis point.
    pub fn sum_rate(&self, axis_value: f64, precoder: PrecoderKind, beam: BeamMode) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.axis_value == axis_value && r.precoder == precoder && r.beam_mode == beam)
            .map(|r| r.mean_rate_bps)
            .sum()
    }
}

fn adjust(cfg: &ScenarioConfig, axis: SweepAxis, value: f64) -> Result<ScenarioConfig> {
    let mut c = cfg.clone();
    let count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidArgument(format!("{} value {v} must be a positive integer", axis.name())))
        }
    };
    match axis {
        SweepAxis::Power => {}
        SweepAxis::Array => c.arrays.set_square(count(value)?),
        SweepAxis::Subarrays => {
            if c.groups.len() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "the subarrays axis needs a single-group scenario, found {} groups",
                    c.groups.len()
                )));
            }
            let k = count(value)?;
            c.subarrays = k;
            c.groups[0].subarrays = k;
        }
    }
    Ok(c)
}

/// Runs a sweep. Every axis point reuses the same per-trial random streams,
/// so curves for different points, precoders and beam modes share their
/// channel realizations.
pub fn run_sweep(cfg: &ScenarioConfig, req: &SweepRequest) -> Result<ResultTable> {
    if req.values.is_empty() || req.precoders.is_empty() || req.beams.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one axis value, precoder and beam mode".into(),
        ));
    }
    let annotate = |value: f64| {
        move |e: Error| Error::Sweep {
            axis: req.axis.name(),
            value,
            source: Box::new(e),
        }
    };
    let mut table = ResultTable::default();
    let mut push_rows = |value: f64, sim: &Simulator, results: &[TrialResult], power_index: usize| {
        let users = sim.user_ids();
        for &kind in &req.precoders {
            for &mode in &req.beams {
                for (ui, &user) in users.iter().enumerate() {
                    let samples: Vec<f64> = results.iter().map(|r| r.rates[&(mode, kind, power_index)][ui]).collect();
                    let asym: Vec<f64> = results.iter().map(|r| r.asymptotic[ui]).collect();
                    let stats = TrialStatistics::from_samples(&samples);
                    table.rows.push(ResultRow {
                        axis_name: req.axis.name(),
                        axis_value: value,
                        precoder: kind,
                        beam_mode: mode,
                        user_id: user,
                        mean_rate_bps: stats.mean,
                        std_rate_bps: stats.std,
                        asymptotic_rate_bps: TrialStatistics::from_samples(&asym).mean,
                        trials: stats.count,
                        seed: sim.config().seed,
                    });
                }
            }
        }
    };
    match req.axis {
        SweepAxis::Power => {
            let sim = Simulator::new(cfg.clone()).map_err(annotate(req.values[0]))?;
            let results = sim
                .run_trials(&req.beams, &req.precoders, &req.values)
                .map_err(|e| Error::Sweep {
                    axis: req.axis.name(),
                    value: f64::NAN,
                    source: Box::new(e),
                })?;
            for (pi, &v) in req.values.iter().enumerate() {
                push_rows(v, &sim, &results, pi);
            }
        }
        _ => {
            for &v in &req.values {
                let sim = adjust(cfg, req.axis, v)
                    .and_then(Simulator::new)
                    .map_err(annotate(v))?;
                let results = sim
                    .run_trials(&req.beams, &req.precoders, &[cfg.sweep.fixed_power_dbm])
                    .map_err(annotate(v))?;
                push_rows(v, &sim, &results, 0);
            }
        }
    }
    table.sort();
    Ok(table)
}

/// Mean total rate with and without phase-shifter errors on identical
/// channel draws, plus the analytic large-array value for both.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseErrorComparison {
    pub powers_dbm: Vec<f64>,
    pub with_errors: Vec<TrialStatistics>,
    pub without_errors: Vec<TrialStatistics>,
    pub asymptotic: f64,
    pub asymptotic_with_errors: f64,
}

/// Monte Carlo rate with per-element phase errors drawn uniformly on
/// `[-eps, eps]` at both ends, next to the error-free rate on the same rays.
pub fn rate_with_phase_errors(
    cfg: &ScenarioConfig,
    spec: &PhaseErrorSpec,
    array_size: usize,
    powers_dbm: &[f64],
    trials: usize,
) -> Result<PhaseErrorComparison> {
    let mut base = cfg.clone();
    base.arrays.set_square(array_size);
    base.trials = trials;
    let mut noisy = base.clone();
    noisy.phase_error = PhaseErrorConfig {
        eps_t_rad: spec.eps_t,
        eps_r_rad: spec.eps_r,
    };
    base.phase_error = PhaseErrorConfig {
        eps_t_rad: 0.0,
        eps_r_rad: 0.0,
    };
    let beams = [cfg.beam_mode];
    let precoders = [cfg.precoder];
    let totals = |sim: &Simulator| -> Result<(Vec<TrialStatistics>, f64)> {
        let results = sim.run_trials(&beams, &precoders, powers_dbm)?;
        let stats = (0..powers_dbm.len())
            .map(|pi| {
                let s: Vec<f64> = results.iter().map(|r| r.rates[&(beams[0], precoders[0], pi)].iter().sum()).collect();
                TrialStatistics::from_samples(&s)
            })
            .collect();
        let asym: Vec<f64> = results.iter().map(|r| r.asymptotic.iter().sum()).collect();
        Ok((stats, TrialStatistics::from_samples(&asym).mean))
    };
    let clean = Simulator::new(base)?;
    let (without_errors, asymptotic) = totals(&clean)?;
    let sim = Simulator::new(noisy)?;
    let (with_errors, _) = totals(&sim)?;
    let mut analytic = Vec::with_capacity(trials);
    for t in 0..trials {
        let draw = sim.draw(t);
        let scn = sim.asymptotic_scenario(&draw)?;
        let n = array_size * array_size;
        analytic.push(crate::rate::asymptotic_rate_with_phase_errors(&scn, spec, n, n)?.total);
    }
    Ok(PhaseErrorComparison {
        powers_dbm: powers_dbm.to_vec(),
        with_errors,
        without_errors,
        asymptotic,
        asymptotic_with_errors: TrialStatistics::from_samples(&analytic).mean,
    })
}

pub const CSV_HEADER: [&str; 10] = [
    "axis_name",
    "axis_value",
    "precoder",
    "beam_mode",
    "user_id",
    "mean_rate_bps",
    "std_rate_bps",
    "asymptotic_rate_bps",
    "trials",
    "seed",
];

/// Writes the table as CSV with a header row.
pub fn write_csv<W: Write>(table: &ResultTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.axis_name.to_owned(),
            format!("{:e}", r.axis_value),
            r.precoder.to_string(),
            r.beam_mode.to_string(),
            r.user_id.to_string(),
            format!("{:e}", r.mean_rate_bps),
            format!("{:e}", r.std_rate_bps),
            format!("{:e}", r.asymptotic_rate_bps),
            r.trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn emit_csv(table: &ResultTable, path: &Path) -> Result<()> {
    if table.rows.is_empty() {
        return Err(Error::InvalidArgument("result table is empty".into()));
    }
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    write_csv(table, std::io::BufWriter::new(file))
}
